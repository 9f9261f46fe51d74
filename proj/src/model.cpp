#include "cirkit/model.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "cirkit/kernels.h"
#include "cirkit/util.h"

namespace cirkit {

using nlohmann::json;

namespace {
constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}
}  // namespace

std::string to_string(FusionArch arch) {
    return arch == FusionArch::self_attention ? "self_attention" : "cross_attention";
}

FusionArch fusion_arch_from_string(const std::string& s) {
    if (s == "self_attention") return FusionArch::self_attention;
    if (s == "cross_attention") return FusionArch::cross_attention;
    throw std::runtime_error("unknown fusion arch: " + s);
}

void ModelConfig::validate() const {
    if (dim < 1 || layers < 1 || heads < 1) throw std::runtime_error("dim, layers, heads must be >= 1");
    if (dim % heads != 0) throw std::runtime_error("dim must be divisible by heads");
    if (ff() < 1) throw std::runtime_error("ff_width must be >= 1");
    if (vocab_size < 2) throw std::runtime_error("vocab_size must be >= 2 (id 0 is reserved)");
    if (max_tokens < 1) throw std::runtime_error("max_tokens must be >= 1");
    if (mode == CorpusMode::synthetic && feature_dim < 1) throw std::runtime_error("feature_dim must be >= 1");
    if (mode == CorpusMode::pixel && image_size < 1) throw std::runtime_error("image_size must be >= 1");
}

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

size_t ParamStore::add(const std::string& name, std::vector<int> shape, bool backbone) {
    size_t n = 1;
    for (int s : shape) n *= static_cast<size_t>(s);
    TensorSpec spec{name, std::move(shape), values_.size(), n, backbone};
    specs_.push_back(std::move(spec));
    values_.resize(values_.size() + n, 0.0);
    return specs_.size() - 1;
}

size_t ParamStore::find(const std::string& name) const {
    for (size_t i = 0; i < specs_.size(); ++i) {
        if (specs_[i].name == name) return i;
    }
    throw std::runtime_error("no parameter tensor named " + name);
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<std::string> words = tokenize_words(text);
    std::vector<int> ids;
    for (const std::string& w : words) {
        if (static_cast<int>(ids.size()) >= max_tokens_) break;
        ids.push_back(1 + static_cast<int>(fnv1a(w) % static_cast<uint64_t>(vocab_size_ - 1)));
    }
    if (ids.empty()) ids.push_back(kEmptyToken);
    return ids;
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct FusionModel::Offsets {
    size_t vis_w = 0, vis_b = 0, vis_w2 = 0, vis_b2 = 0;
    size_t embed = 0, txt_w = 0, txt_b = 0;
    size_t slot = 0;
    struct Layer {
        size_t ln1_g, ln1_b;
        size_t wq, bq, wk, bk, wv, bv, wo, bo;
        size_t ln2_g, ln2_b;
        size_t ff_w1, ff_b1, ff_w2, ff_b2;
    };
    std::vector<Layer> layer;
    size_t lnf_g = 0, lnf_b = 0;
    size_t p_q = 0, p_wk = 0, p_bk = 0, p_wv = 0, p_bv = 0, p_wo = 0, p_bo = 0;
    size_t tau = 0;
};

void FusionModel::register_params() {
    const int D = config_.dim;
    const int F = config_.ff();
    if (config_.mode == CorpusMode::pixel) {
        params_.add("vision.w1", {D, config_.pixel_input_dim()}, true);
        params_.add("vision.b1", {D}, true);
        params_.add("vision.w2", {D, D}, true);
        params_.add("vision.b2", {D}, true);
    } else {
        params_.add("vision.w", {D, config_.feature_dim}, true);
        params_.add("vision.b", {D}, true);
    }
    params_.add("text.embed", {config_.vocab_size, D}, true);
    params_.add("text.w", {D, D}, true);
    params_.add("text.b", {D}, true);
    params_.add("fusion.slot", {2, D}, false);
    for (int l = 0; l < config_.layers; ++l) {
        std::string p = "fusion.l" + std::to_string(l) + ".";
        params_.add(p + "ln1.g", {D}, false);
        params_.add(p + "ln1.b", {D}, false);
        params_.add(p + "attn.wq", {D, D}, false);
        params_.add(p + "attn.bq", {D}, false);
        params_.add(p + "attn.wk", {D, D}, false);
        params_.add(p + "attn.bk", {D}, false);
        params_.add(p + "attn.wv", {D, D}, false);
        params_.add(p + "attn.bv", {D}, false);
        params_.add(p + "attn.wo", {D, D}, false);
        params_.add(p + "attn.bo", {D}, false);
        params_.add(p + "ln2.g", {D}, false);
        params_.add(p + "ln2.b", {D}, false);
        params_.add(p + "ff.w1", {F, D}, false);
        params_.add(p + "ff.b1", {F}, false);
        params_.add(p + "ff.w2", {D, F}, false);
        params_.add(p + "ff.b2", {D}, false);
    }
    params_.add("fusion.lnf.g", {D}, false);
    params_.add("fusion.lnf.b", {D}, false);
    params_.add("pooler.query", {D}, false);
    params_.add("pooler.wk", {D, D}, false);
    params_.add("pooler.bk", {D}, false);
    params_.add("pooler.wv", {D, D}, false);
    params_.add("pooler.bv", {D}, false);
    params_.add("pooler.wo", {D, D}, false);
    params_.add("pooler.bo", {D}, false);
    params_.add("temperature", {1}, false);
}

size_t FusionModel::expected_param_count(const ModelConfig& config) {
    size_t D = config.dim;
    size_t F = config.ff();
    size_t L = config.layers;
    size_t backbone;
    if (config.mode == CorpusMode::pixel) {
        backbone = D * config.pixel_input_dim() + D + D * D + D;
    } else {
        backbone = D * config.feature_dim + D;
    }
    backbone += static_cast<size_t>(config.vocab_size) * D + D * D + D;
    size_t per_layer = 4 * D * D + 2 * D * F + 9 * D + F;
    size_t fusion = 2 * D + L * per_layer + 2 * D;
    size_t pooler = D + 3 * (D * D + D);
    return backbone + fusion + pooler + 1;
}

void FusionModel::init_params(uint64_t seed, double tau_init) {
    Rng rng(hash_combine(seed, fnv1a("model-init")));
    auto ends_with = [](const std::string& s, std::string_view suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (const TensorSpec& spec : params_.specs()) {
        double* p = params_.values().data() + spec.offset;
        if (spec.name == "temperature") {
            p[0] = tau_init;
        } else if (ends_with(spec.name, ".g")) {
            std::fill_n(p, spec.size, 1.0);  // layer-norm gains
        } else if (spec.shape.size() == 1 && spec.name != "pooler.query") {
            std::fill_n(p, spec.size, 0.0);  // biases and layer-norm shifts
        } else {
            for (size_t i = 0; i < spec.size; ++i) p[i] = rng.normal(0.0, kInitStd);
        }
    }
}

void FusionModel::build_offsets() {
    delete off_;
    off_ = new Offsets();
    auto o = [&](const std::string& name) { return params_.spec(params_.find(name)).offset; };
    if (config_.mode == CorpusMode::pixel) {
        off_->vis_w = o("vision.w1");
        off_->vis_b = o("vision.b1");
        off_->vis_w2 = o("vision.w2");
        off_->vis_b2 = o("vision.b2");
    } else {
        off_->vis_w = o("vision.w");
        off_->vis_b = o("vision.b");
    }
    off_->embed = o("text.embed");
    off_->txt_w = o("text.w");
    off_->txt_b = o("text.b");
    off_->slot = o("fusion.slot");
    off_->layer.resize(config_.layers);
    for (int l = 0; l < config_.layers; ++l) {
        std::string p = "fusion.l" + std::to_string(l) + ".";
        Offsets::Layer& L = off_->layer[l];
        L.ln1_g = o(p + "ln1.g");
        L.ln1_b = o(p + "ln1.b");
        L.wq = o(p + "attn.wq");
        L.bq = o(p + "attn.bq");
        L.wk = o(p + "attn.wk");
        L.bk = o(p + "attn.bk");
        L.wv = o(p + "attn.wv");
        L.bv = o(p + "attn.bv");
        L.wo = o(p + "attn.wo");
        L.bo = o(p + "attn.bo");
        L.ln2_g = o(p + "ln2.g");
        L.ln2_b = o(p + "ln2.b");
        L.ff_w1 = o(p + "ff.w1");
        L.ff_b1 = o(p + "ff.b1");
        L.ff_w2 = o(p + "ff.w2");
        L.ff_b2 = o(p + "ff.b2");
    }
    off_->lnf_g = o("fusion.lnf.g");
    off_->lnf_b = o("fusion.lnf.b");
    off_->p_q = o("pooler.query");
    off_->p_wk = o("pooler.wk");
    off_->p_bk = o("pooler.bk");
    off_->p_wv = o("pooler.wv");
    off_->p_bv = o("pooler.bv");
    off_->p_wo = o("pooler.wo");
    off_->p_bo = o("pooler.bo");
    off_->tau = o("temperature");
}

FusionModel::FusionModel(ModelConfig config, uint64_t seed, double tau_init)
    : config_(config), seed_(seed), tokenizer_(config.vocab_size, config.max_tokens) {
    config_.validate();
    register_params();
    if (params_.size() != expected_param_count(config_)) {
        throw std::runtime_error("parameter shape audit failed: registered " + std::to_string(params_.size()) +
                                 ", expected " + std::to_string(expected_param_count(config_)));
    }
    init_params(seed, tau_init);
    build_offsets();
}

FusionModel::FusionModel(const FusionModel& other)
    : config_(other.config_), seed_(other.seed_), params_(other.params_), tokenizer_(other.tokenizer_) {
    build_offsets();
}

FusionModel::FusionModel(FusionModel&& other) noexcept
    : config_(other.config_),
      seed_(other.seed_),
      params_(std::move(other.params_)),
      tokenizer_(other.tokenizer_),
      off_(other.off_) {
    other.off_ = nullptr;
}

FusionModel::~FusionModel() { delete off_; }

double FusionModel::temperature() const { return params_.values()[off_->tau]; }
void FusionModel::set_temperature(double tau) { params_.values()[off_->tau] = tau; }
size_t FusionModel::temperature_param_index() const { return off_->tau; }

// ---------------------------------------------------------------------------
// Forward primitives
// ---------------------------------------------------------------------------

namespace {

struct LnCache {
    std::vector<double> xhat;  // n*D
    std::vector<double> rstd;  // n
};

struct MhaCache {
    int n_q = 0, n_kv = 0;
    std::vector<double> q, k, v;  // n_q*D, n_kv*D, n_kv*D
    std::vector<double> w;        // heads*n_q*n_kv
    std::vector<double> concat;   // n_q*D
};

struct LayerCacheT {
    std::vector<double> x_in;  // n_q*D
    LnCache ln1_q;
    LnCache ln1_kv;  // cross mode only
    MhaCache attn;
    std::vector<double> x_mid;  // n_q*D
    LnCache ln2;
    std::vector<double> ff_pre;  // n_q*F
    std::vector<double> ff_act;  // n_q*F
};

void layernorm_forward(const double* x, int n, int D, const double* g, const double* b, double* y, LnCache& cache) {
    cache.xhat.resize(static_cast<size_t>(n) * D);
    cache.rstd.resize(n);
    for (int t = 0; t < n; ++t) {
        const double* xt = x + static_cast<size_t>(t) * D;
        double* yt = y + static_cast<size_t>(t) * D;
        double* xh = cache.xhat.data() + static_cast<size_t>(t) * D;
        double mean = 0.0;
        for (int i = 0; i < D; ++i) mean += xt[i];
        mean /= D;
        double var = 0.0;
        for (int i = 0; i < D; ++i) {
            double d = xt[i] - mean;
            var += d * d;
        }
        var /= D;
        double rstd = 1.0 / std::sqrt(var + kLnEps);
        cache.rstd[t] = rstd;
        for (int i = 0; i < D; ++i) {
            xh[i] = (xt[i] - mean) * rstd;
            yt[i] = g[i] * xh[i] + b[i];
        }
    }
}

// accumulates into dx, dg, db
void layernorm_backward(const double* dy, int n, int D, const double* g, const LnCache& cache, double* dx, double* dg,
                        double* db) {
    for (int t = 0; t < n; ++t) {
        const double* dyt = dy + static_cast<size_t>(t) * D;
        const double* xh = cache.xhat.data() + static_cast<size_t>(t) * D;
        double* dxt = dx + static_cast<size_t>(t) * D;
        double rstd = cache.rstd[t];
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int i = 0; i < D; ++i) {
            double dxhat = dyt[i] * g[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[i];
        }
        mean_dxhat /= D;
        mean_dxhat_xhat /= D;
        for (int i = 0; i < D; ++i) {
            double dxhat = dyt[i] * g[i];
            dxt[i] += rstd * (dxhat - mean_dxhat - xh[i] * mean_dxhat_xhat);
            dg[i] += dyt[i] * xh[i];
            db[i] += dyt[i];
        }
    }
}

void linear_forward(const double* W, const double* b, const double* x, double* y, int rows, int cols) {
    kernels::matvec(W, x, y, rows, cols);
    for (int r = 0; r < rows; ++r) y[r] += b[r];
}

// accumulates dW, db, and (when dx != nullptr) dx
void linear_backward(const double* W, const double* x, const double* dy, double* dW, double* db, double* dx, int rows,
                     int cols) {
    for (int r = 0; r < rows; ++r) {
        double g = dy[r];
        double* dWr = dW + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) dWr[c] += g * x[c];
        db[r] += g;
    }
    if (dx) kernels::matvec_transposed_acc(W, dy, dx, rows, cols);
}

// Multi-head attention over short sequences. When wq == nullptr the query
// rows in cache.q are used as given (the pooler's learned query).
void mha_core_forward(int heads, int D, const double* yq, int n_q, const double* ykv, int n_kv, const double* wq,
                      const double* bq, const double* wk, const double* bk, const double* wv, const double* bv,
                      const double* wo, const double* bo, double* out, MhaCache& cache) {
    int Dh = D / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
    cache.n_q = n_q;
    cache.n_kv = n_kv;
    if (wq) {
        cache.q.resize(static_cast<size_t>(n_q) * D);
        for (int a = 0; a < n_q; ++a) {
            linear_forward(wq, bq, yq + static_cast<size_t>(a) * D, cache.q.data() + static_cast<size_t>(a) * D, D, D);
        }
    }
    cache.k.resize(static_cast<size_t>(n_kv) * D);
    cache.v.resize(static_cast<size_t>(n_kv) * D);
    for (int j = 0; j < n_kv; ++j) {
        linear_forward(wk, bk, ykv + static_cast<size_t>(j) * D, cache.k.data() + static_cast<size_t>(j) * D, D, D);
        linear_forward(wv, bv, ykv + static_cast<size_t>(j) * D, cache.v.data() + static_cast<size_t>(j) * D, D, D);
    }
    cache.w.assign(static_cast<size_t>(heads) * n_q * n_kv, 0.0);
    cache.concat.assign(static_cast<size_t>(n_q) * D, 0.0);
    std::vector<double> logits(n_kv);
    for (int a = 0; a < n_q; ++a) {
        for (int h = 0; h < heads; ++h) {
            const double* qa = cache.q.data() + static_cast<size_t>(a) * D + static_cast<size_t>(h) * Dh;
            double maxv = -1e300;
            for (int j = 0; j < n_kv; ++j) {
                const double* kj = cache.k.data() + static_cast<size_t>(j) * D + static_cast<size_t>(h) * Dh;
                logits[j] = scale * kernels::dot(qa, kj, Dh);
                maxv = std::max(maxv, logits[j]);
            }
            double* w = cache.w.data() + (static_cast<size_t>(h) * n_q + a) * n_kv;
            double z = 0.0;
            for (int j = 0; j < n_kv; ++j) {
                w[j] = std::exp(logits[j] - maxv);
                z += w[j];
            }
            double* ctx = cache.concat.data() + static_cast<size_t>(a) * D + static_cast<size_t>(h) * Dh;
            for (int j = 0; j < n_kv; ++j) {
                w[j] /= z;
                const double* vj = cache.v.data() + static_cast<size_t>(j) * D + static_cast<size_t>(h) * Dh;
                for (int i = 0; i < Dh; ++i) ctx[i] += w[j] * vj[i];
            }
        }
    }
    for (int a = 0; a < n_q; ++a) {
        linear_forward(wo, bo, cache.concat.data() + static_cast<size_t>(a) * D, out + static_cast<size_t>(a) * D, D,
                       D);
    }
}

// Accumulates parameter grads; dyq/dykv accumulate input grads. When
// wq == nullptr, dq_direct receives the gradient of the raw query rows.
void mha_core_backward(int heads, int D, const double* yq, const double* ykv, const double* wq, const double* wk,
                       const double* wv, const double* wo, const MhaCache& cache, const double* dout, double* dwq,
                       double* dbq, double* dwk, double* dbk, double* dwv, double* dbv, double* dwo, double* dbo,
                       double* dyq, double* dykv, double* dq_direct) {
    int n_q = cache.n_q, n_kv = cache.n_kv;
    int Dh = D / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(Dh));

    std::vector<double> dconcat(static_cast<size_t>(n_q) * D, 0.0);
    for (int a = 0; a < n_q; ++a) {
        linear_backward(wo, cache.concat.data() + static_cast<size_t>(a) * D, dout + static_cast<size_t>(a) * D, dwo,
                        dbo, dconcat.data() + static_cast<size_t>(a) * D, D, D);
    }

    std::vector<double> dq(static_cast<size_t>(n_q) * D, 0.0);
    std::vector<double> dk(static_cast<size_t>(n_kv) * D, 0.0);
    std::vector<double> dv(static_cast<size_t>(n_kv) * D, 0.0);
    std::vector<double> dw(n_kv), dlogit(n_kv);
    for (int a = 0; a < n_q; ++a) {
        for (int h = 0; h < heads; ++h) {
            const double* ctx_grad = dconcat.data() + static_cast<size_t>(a) * D + static_cast<size_t>(h) * Dh;
            const double* w = cache.w.data() + (static_cast<size_t>(h) * n_q + a) * n_kv;
            double wsum = 0.0;
            for (int j = 0; j < n_kv; ++j) {
                const double* vj = cache.v.data() + static_cast<size_t>(j) * D + static_cast<size_t>(h) * Dh;
                dw[j] = kernels::dot(ctx_grad, vj, Dh);
                double* dvj = dv.data() + static_cast<size_t>(j) * D + static_cast<size_t>(h) * Dh;
                for (int i = 0; i < Dh; ++i) dvj[i] += w[j] * ctx_grad[i];
                wsum += dw[j] * w[j];
            }
            const double* qa = cache.q.data() + static_cast<size_t>(a) * D + static_cast<size_t>(h) * Dh;
            double* dqa = dq.data() + static_cast<size_t>(a) * D + static_cast<size_t>(h) * Dh;
            for (int j = 0; j < n_kv; ++j) {
                dlogit[j] = (dw[j] - wsum) * w[j];
                const double* kj = cache.k.data() + static_cast<size_t>(j) * D + static_cast<size_t>(h) * Dh;
                double* dkj = dk.data() + static_cast<size_t>(j) * D + static_cast<size_t>(h) * Dh;
                for (int i = 0; i < Dh; ++i) {
                    dqa[i] += scale * dlogit[j] * kj[i];
                    dkj[i] += scale * dlogit[j] * qa[i];
                }
            }
        }
    }

    if (wq) {
        for (int a = 0; a < n_q; ++a) {
            linear_backward(wq, yq + static_cast<size_t>(a) * D, dq.data() + static_cast<size_t>(a) * D, dwq, dbq,
                            dyq ? dyq + static_cast<size_t>(a) * D : nullptr, D, D);
        }
    } else {
        for (size_t i = 0; i < dq.size(); ++i) dq_direct[i] += dq[i];
    }
    for (int j = 0; j < n_kv; ++j) {
        linear_backward(wk, ykv + static_cast<size_t>(j) * D, dk.data() + static_cast<size_t>(j) * D, dwk, dbk,
                        dykv ? dykv + static_cast<size_t>(j) * D : nullptr, D, D);
        linear_backward(wv, ykv + static_cast<size_t>(j) * D, dv.data() + static_cast<size_t>(j) * D, dwv, dbv,
                        dykv ? dykv + static_cast<size_t>(j) * D : nullptr, D, D);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// EncodeCache
// ---------------------------------------------------------------------------

struct EncodeCache {
    FusionArch arch = FusionArch::self_attention;
    std::vector<int> tokens;
    std::vector<double> vis_in;
    std::vector<double> vis_h1_pre, vis_h1;  // pixel mode
    std::vector<double> tok_mean;
    std::vector<double> v_raw, t_raw;
    std::vector<double> x0;  // 2*D initial fused sequence
    std::vector<LayerCacheT> layers;
    LnCache lnf;
    std::vector<double> fin;  // n_q*D post final LN
    MhaCache pool;
    std::vector<double> pooled;  // D, pre-normalization
    std::vector<double> r;       // D, normalized output
    double norm = 0.0;
};

EncodeCache* FusionModel::new_cache() const { return new EncodeCache(); }
void FusionModel::free_cache(EncodeCache* cache) const { delete cache; }

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {
// Box-average resample of an RGB float image to S x S.
std::vector<double> resample_pixels(const ImageRecord& rec, int S) {
    std::vector<double> out(static_cast<size_t>(3) * S * S, 0.0);
    std::vector<int> counts(static_cast<size_t>(S) * S, 0);
    for (int y = 0; y < rec.height; ++y) {
        int cy = std::min(S - 1, y * S / rec.height);
        for (int x = 0; x < rec.width; ++x) {
            int cx = std::min(S - 1, x * S / rec.width);
            size_t cell = static_cast<size_t>(cy) * S + cx;
            counts[cell]++;
            for (int c = 0; c < 3; ++c) {
                out[cell * 3 + c] += rec.pixels[(static_cast<size_t>(y) * rec.width + x) * 3 + c];
            }
        }
    }
    for (size_t cell = 0; cell < counts.size(); ++cell) {
        if (counts[cell] > 0) {
            for (int c = 0; c < 3; ++c) out[cell * 3 + c] /= counts[cell];
        }
    }
    return out;
}
}  // namespace

void FusionModel::forward_cached(const ImageRecord& image, const std::string& text, FusionArch arch,
                                 EncodeCache& cache, double* out) const {
    const int D = config_.dim;
    const int F = config_.ff();
    const int H = config_.heads;
    const double* P = params_.values().data();

    cache.arch = arch;

    // vision backbone
    if (config_.mode == CorpusMode::pixel) {
        if (!image.has_pixels()) throw std::invalid_argument("pixel-mode model fed a record without pixels");
        cache.vis_in = resample_pixels(image, config_.image_size);
        int Pin = config_.pixel_input_dim();
        cache.vis_h1_pre.resize(D);
        cache.vis_h1.resize(D);
        linear_forward(P + off_->vis_w, P + off_->vis_b, cache.vis_in.data(), cache.vis_h1_pre.data(), D, Pin);
        for (int i = 0; i < D; ++i) cache.vis_h1[i] = gelu(cache.vis_h1_pre[i]);
        cache.v_raw.resize(D);
        linear_forward(P + off_->vis_w2, P + off_->vis_b2, cache.vis_h1.data(), cache.v_raw.data(), D, D);
    } else {
        if (image.features.empty()) throw std::invalid_argument("synthetic-mode model fed a record without features");
        if (static_cast<int>(image.features.size()) != config_.feature_dim) {
            throw std::invalid_argument("feature vector has size " + std::to_string(image.features.size()) +
                                        ", model expects " + std::to_string(config_.feature_dim));
        }
        cache.vis_in = image.features;
        cache.v_raw.resize(D);
        linear_forward(P + off_->vis_w, P + off_->vis_b, cache.vis_in.data(), cache.v_raw.data(), D,
                       config_.feature_dim);
    }

    // text backbone
    cache.tokens = tokenizer_.encode(text);
    cache.tok_mean.assign(D, 0.0);
    for (int id : cache.tokens) {
        const double* row = P + off_->embed + static_cast<size_t>(id) * D;
        for (int i = 0; i < D; ++i) cache.tok_mean[i] += row[i];
    }
    double inv_m = 1.0 / static_cast<double>(cache.tokens.size());
    for (int i = 0; i < D; ++i) cache.tok_mean[i] *= inv_m;
    cache.t_raw.resize(D);
    linear_forward(P + off_->txt_w, P + off_->txt_b, cache.tok_mean.data(), cache.t_raw.data(), D, D);

    // fused input sequence with slot markers
    cache.x0.resize(2 * static_cast<size_t>(D));
    for (int i = 0; i < D; ++i) {
        cache.x0[i] = cache.v_raw[i] + P[off_->slot + i];
        cache.x0[D + i] = cache.t_raw[i] + P[off_->slot + D + i];
    }

    const bool cross = arch == FusionArch::cross_attention;
    const int n_q = cross ? 1 : 2;

    // cross mode: the query stream starts from the text slot; keys/values
    // stay the raw fused inputs at every layer
    std::vector<double> x(static_cast<size_t>(n_q) * D);
    if (cross) {
        std::copy_n(cache.x0.data() + D, D, x.data());
    } else {
        x = cache.x0;
    }

    cache.layers.resize(config_.layers);
    std::vector<double> yq(static_cast<size_t>(n_q) * D), ykv(2 * static_cast<size_t>(D));
    std::vector<double> attn_out(static_cast<size_t>(n_q) * D), ff_in(static_cast<size_t>(n_q) * D);
    for (int l = 0; l < config_.layers; ++l) {
        const Offsets::Layer& W = off_->layer[l];
        LayerCacheT& lc = cache.layers[l];
        lc.x_in = x;

        layernorm_forward(x.data(), n_q, D, P + W.ln1_g, P + W.ln1_b, yq.data(), lc.ln1_q);
        const double* kv_src = yq.data();
        int n_kv = n_q;
        if (cross) {
            layernorm_forward(cache.x0.data(), 2, D, P + W.ln1_g, P + W.ln1_b, ykv.data(), lc.ln1_kv);
            kv_src = ykv.data();
            n_kv = 2;
        }
        mha_core_forward(H, D, yq.data(), n_q, kv_src, n_kv, P + W.wq, P + W.bq, P + W.wk, P + W.bk, P + W.wv,
                         P + W.bv, P + W.wo, P + W.bo, attn_out.data(), lc.attn);
        for (size_t i = 0; i < x.size(); ++i) x[i] += attn_out[i];
        lc.x_mid = x;

        layernorm_forward(x.data(), n_q, D, P + W.ln2_g, P + W.ln2_b, ff_in.data(), lc.ln2);
        lc.ff_pre.resize(static_cast<size_t>(n_q) * F);
        lc.ff_act.resize(static_cast<size_t>(n_q) * F);
        for (int t = 0; t < n_q; ++t) {
            double* pre = lc.ff_pre.data() + static_cast<size_t>(t) * F;
            double* act = lc.ff_act.data() + static_cast<size_t>(t) * F;
            linear_forward(P + W.ff_w1, P + W.ff_b1, ff_in.data() + static_cast<size_t>(t) * D, pre, F, D);
            for (int i = 0; i < F; ++i) act[i] = gelu(pre[i]);
            std::vector<double> ff_out(D);
            linear_forward(P + W.ff_w2, P + W.ff_b2, act, ff_out.data(), D, F);
            for (int i = 0; i < D; ++i) x[static_cast<size_t>(t) * D + i] += ff_out[i];
        }
    }

    // final LN then single-query attention pooling
    cache.fin.resize(static_cast<size_t>(n_q) * D);
    layernorm_forward(x.data(), n_q, D, P + off_->lnf_g, P + off_->lnf_b, cache.fin.data(), cache.lnf);

    cache.pool.q.assign(P + off_->p_q, P + off_->p_q + D);
    cache.pooled.resize(D);
    mha_core_forward(H, D, nullptr, 1, cache.fin.data(), n_q, nullptr, nullptr, P + off_->p_wk, P + off_->p_bk,
                     P + off_->p_wv, P + off_->p_bv, P + off_->p_wo, P + off_->p_bo, cache.pooled.data(), cache.pool);

    cache.norm = kernels::norm2(cache.pooled.data(), D);
    if (cache.norm < 1e-30) throw std::runtime_error("fused embedding collapsed to zero norm");
    cache.r.resize(D);
    for (int i = 0; i < D; ++i) cache.r[i] = cache.pooled[i] / cache.norm;
    std::copy_n(cache.r.data(), D, out);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void FusionModel::backward(const EncodeCache& cache, const double* d_out, double* grad) const {
    const int D = config_.dim;
    const int F = config_.ff();
    const int H = config_.heads;
    const double* P = params_.values().data();
    const bool cross = cache.arch == FusionArch::cross_attention;
    const int n_q = cross ? 1 : 2;

    // through the L2 normalization: du = (dr - r (r . dr)) / ||u||
    std::vector<double> dpooled(D);
    double rdot = kernels::dot(cache.r.data(), d_out, D);
    for (int i = 0; i < D; ++i) dpooled[i] = (d_out[i] - cache.r[i] * rdot) / cache.norm;

    // pooler
    std::vector<double> dfin(static_cast<size_t>(n_q) * D, 0.0);
    mha_core_backward(H, D, nullptr, cache.fin.data(), nullptr, P + off_->p_wk, P + off_->p_wv, P + off_->p_wo,
                      cache.pool, dpooled.data(), nullptr, nullptr, grad + off_->p_wk, grad + off_->p_bk,
                      grad + off_->p_wv, grad + off_->p_bv, grad + off_->p_wo, grad + off_->p_bo, nullptr, dfin.data(),
                      grad + off_->p_q);

    // final LN
    std::vector<double> dx(static_cast<size_t>(n_q) * D, 0.0);
    layernorm_backward(dfin.data(), n_q, D, P + off_->lnf_g, cache.lnf, dx.data(), grad + off_->lnf_g,
                       grad + off_->lnf_b);

    // layers in reverse
    std::vector<double> dx0_extra(2 * static_cast<size_t>(D), 0.0);  // cross-mode kv path
    std::vector<double> dz(static_cast<size_t>(n_q) * D), dyq(static_cast<size_t>(n_q) * D);
    std::vector<double> dykv(2 * static_cast<size_t>(D));
    for (int l = config_.layers - 1; l >= 0; --l) {
        const Offsets::Layer& W = off_->layer[l];
        const LayerCacheT& lc = cache.layers[l];

        // feed-forward block: x_out = x_mid + W2 gelu(W1 LN2(x_mid) + b1) + b2
        std::fill(dz.begin(), dz.end(), 0.0);
        for (int t = 0; t < n_q; ++t) {
            const double* dxt = dx.data() + static_cast<size_t>(t) * D;
            const double* act = lc.ff_act.data() + static_cast<size_t>(t) * F;
            const double* pre = lc.ff_pre.data() + static_cast<size_t>(t) * F;
            std::vector<double> dact(F, 0.0);
            linear_backward(P + W.ff_w2, act, dxt, grad + W.ff_w2, grad + W.ff_b2, dact.data(), D, F);
            std::vector<double> dpre(F);
            for (int i = 0; i < F; ++i) dpre[i] = dact[i] * gelu_grad(pre[i]);
            // LN2 output for this token is recomputable from cache.ln2
            std::vector<double> z2(D);
            const double* xh = lc.ln2.xhat.data() + static_cast<size_t>(t) * D;
            for (int i = 0; i < D; ++i) z2[i] = P[W.ln2_g + i] * xh[i] + P[W.ln2_b + i];
            linear_backward(P + W.ff_w1, z2.data(), dpre.data(), grad + W.ff_w1, grad + W.ff_b1,
                            dz.data() + static_cast<size_t>(t) * D, F, D);
        }
        // dx currently holds d(x_out); residual passes it to x_mid, plus LN2 path
        layernorm_backward(dz.data(), n_q, D, P + W.ln2_g, lc.ln2, dx.data(), grad + W.ln2_g, grad + W.ln2_b);

        // attention block: x_mid = x_in + MHA(LN1(x_in) [, LN1(x0)])
        std::fill(dyq.begin(), dyq.end(), 0.0);
        std::fill(dykv.begin(), dykv.end(), 0.0);
        if (cross) {
            // recompute LN1 outputs used as inputs to the projections
            std::vector<double> yq_in(static_cast<size_t>(n_q) * D), ykv_in(2 * static_cast<size_t>(D));
            for (int t = 0; t < n_q; ++t) {
                const double* xh = lc.ln1_q.xhat.data() + static_cast<size_t>(t) * D;
                for (int i = 0; i < D; ++i) yq_in[static_cast<size_t>(t) * D + i] = P[W.ln1_g + i] * xh[i] + P[W.ln1_b + i];
            }
            for (int t = 0; t < 2; ++t) {
                const double* xh = lc.ln1_kv.xhat.data() + static_cast<size_t>(t) * D;
                for (int i = 0; i < D; ++i) ykv_in[static_cast<size_t>(t) * D + i] = P[W.ln1_g + i] * xh[i] + P[W.ln1_b + i];
            }
            mha_core_backward(H, D, yq_in.data(), ykv_in.data(), P + W.wq, P + W.wk, P + W.wv, P + W.wo, lc.attn,
                              dx.data(), grad + W.wq, grad + W.bq, grad + W.wk, grad + W.bk, grad + W.wv, grad + W.bv,
                              grad + W.wo, grad + W.bo, dyq.data(), dykv.data(), nullptr);
            layernorm_backward(dyq.data(), n_q, D, P + W.ln1_g, lc.ln1_q, dx.data(), grad + W.ln1_g, grad + W.ln1_b);
            layernorm_backward(dykv.data(), 2, D, P + W.ln1_g, lc.ln1_kv, dx0_extra.data(), grad + W.ln1_g,
                               grad + W.ln1_b);
        } else {
            std::vector<double> y_in(static_cast<size_t>(n_q) * D);
            for (int t = 0; t < n_q; ++t) {
                const double* xh = lc.ln1_q.xhat.data() + static_cast<size_t>(t) * D;
                for (int i = 0; i < D; ++i) y_in[static_cast<size_t>(t) * D + i] = P[W.ln1_g + i] * xh[i] + P[W.ln1_b + i];
            }
            // query and kv are the same LN1 output; both input grads land in dyq
            mha_core_backward(H, D, y_in.data(), y_in.data(), P + W.wq, P + W.wk, P + W.wv, P + W.wo, lc.attn,
                              dx.data(), grad + W.wq, grad + W.bq, grad + W.wk, grad + W.bk, grad + W.wv, grad + W.bv,
                              grad + W.wo, grad + W.bo, dyq.data(), dyq.data(), nullptr);
            layernorm_backward(dyq.data(), n_q, D, P + W.ln1_g, lc.ln1_q, dx.data(), grad + W.ln1_g, grad + W.ln1_b);
        }
        // dx now holds d(x_in) for this layer
    }

    // assemble gradient w.r.t. the initial fused sequence
    std::vector<double> dx0(2 * static_cast<size_t>(D), 0.0);
    if (cross) {
        for (int i = 0; i < D; ++i) dx0[D + i] = dx[i];  // query stream started at the text slot
        for (size_t i = 0; i < dx0.size(); ++i) dx0[i] += dx0_extra[i];
    } else {
        dx0 = dx;
    }

    // slot markers and backbones
    for (int i = 0; i < D; ++i) {
        grad[off_->slot + i] += dx0[i];
        grad[off_->slot + D + i] += dx0[D + i];
    }
    const double* dv_raw = dx0.data();
    const double* dt_raw = dx0.data() + D;

    if (config_.mode == CorpusMode::pixel) {
        std::vector<double> dh1(D, 0.0);
        linear_backward(P + off_->vis_w2, cache.vis_h1.data(), dv_raw, grad + off_->vis_w2, grad + off_->vis_b2,
                        dh1.data(), D, D);
        std::vector<double> dpre(D);
        for (int i = 0; i < D; ++i) dpre[i] = dh1[i] * gelu_grad(cache.vis_h1_pre[i]);
        linear_backward(P + off_->vis_w, cache.vis_in.data(), dpre.data(), grad + off_->vis_w, grad + off_->vis_b,
                        nullptr, D, config_.pixel_input_dim());
    } else {
        linear_backward(P + off_->vis_w, cache.vis_in.data(), dv_raw, grad + off_->vis_w, grad + off_->vis_b, nullptr,
                        D, config_.feature_dim);
    }

    std::vector<double> dmean(D, 0.0);
    linear_backward(P + off_->txt_w, cache.tok_mean.data(), dt_raw, grad + off_->txt_w, grad + off_->txt_b,
                    dmean.data(), D, D);
    double inv_m = 1.0 / static_cast<double>(cache.tokens.size());
    for (int id : cache.tokens) {
        double* drow = grad + off_->embed + static_cast<size_t>(id) * D;
        for (int i = 0; i < D; ++i) drow[i] += dmean[i] * inv_m;
    }
}

// ---------------------------------------------------------------------------
// Public encode API
// ---------------------------------------------------------------------------

std::vector<double> FusionModel::encode(const ImageRecord& image, const std::string& text) const {
    EncodeCache cache;
    std::vector<double> out(config_.dim);
    forward_cached(image, text, config_.arch, cache, out.data());
    return out;
}

std::vector<double> FusionModel::encode_target(const ImageRecord& image) const { return encode(image, ""); }

std::vector<double> FusionModel::encode_crossattn_variant(const ImageRecord& image, const std::string& text) const {
    EncodeCache cache;
    std::vector<double> out(config_.dim);
    forward_cached(image, text, FusionArch::cross_attention, cache, out.data());
    return out;
}

FusionModel::EncodeTrace FusionModel::encode_trace(const ImageRecord& image, const std::string& text) const {
    EncodeCache cache;
    std::vector<double> out(config_.dim);
    forward_cached(image, text, config_.arch, cache, out.data());
    EncodeTrace trace;
    trace.fused_input = cache.x0;
    trace.final_sequence = cache.fin;
    trace.pooled_raw = cache.pooled;
    trace.normalized = cache.r;
    return trace;
}

std::vector<double> FusionModel::backbone_image_embed(const ImageRecord& image) const {
    const int D = config_.dim;
    const double* P = params_.values().data();
    std::vector<double> v(D);
    if (config_.mode == CorpusMode::pixel) {
        std::vector<double> z = resample_pixels(image, config_.image_size);
        std::vector<double> h1(D);
        linear_forward(P + off_->vis_w, P + off_->vis_b, z.data(), h1.data(), D, config_.pixel_input_dim());
        for (int i = 0; i < D; ++i) h1[i] = gelu(h1[i]);
        linear_forward(P + off_->vis_w2, P + off_->vis_b2, h1.data(), v.data(), D, D);
    } else {
        if (static_cast<int>(image.features.size()) != config_.feature_dim) {
            throw std::invalid_argument("feature vector size mismatch");
        }
        linear_forward(P + off_->vis_w, P + off_->vis_b, image.features.data(), v.data(), D, config_.feature_dim);
    }
    double n = kernels::norm2(v.data(), D);
    if (n < 1e-30) throw std::runtime_error("backbone image embedding collapsed to zero norm");
    for (double& x : v) x /= n;
    return v;
}

std::vector<double> FusionModel::backbone_text_embed(const std::string& text) const {
    const int D = config_.dim;
    const double* P = params_.values().data();
    std::vector<int> tokens = tokenizer_.encode(text);
    std::vector<double> mean(D, 0.0);
    for (int id : tokens) {
        const double* row = P + off_->embed + static_cast<size_t>(id) * D;
        for (int i = 0; i < D; ++i) mean[i] += row[i];
    }
    for (int i = 0; i < D; ++i) mean[i] /= static_cast<double>(tokens.size());
    std::vector<double> t(D);
    linear_forward(P + off_->txt_w, P + off_->txt_b, mean.data(), t.data(), D, D);
    double n = kernels::norm2(t.data(), D);
    if (n < 1e-30) throw std::runtime_error("backbone text embedding collapsed to zero norm");
    for (double& x : t) x /= n;
    return t;
}

void encode_batch(const FusionModel& model, const std::vector<const ImageRecord*>& items, double* out) {
    int D = model.config().dim;
    kernels::parallel_for(items.size(), [&](size_t i) {
        std::vector<double> r = model.encode_target(*items[i]);
        std::copy_n(r.data(), D, out + i * static_cast<size_t>(D));
    });
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[4] = {'C', 'K', 'V', '1'};
}

void FusionModel::save_checkpoint(const std::string& path) const {
    json manifest;
    manifest["config"] = {{"mode", to_string(config_.mode)},
                          {"dim", config_.dim},
                          {"layers", config_.layers},
                          {"heads", config_.heads},
                          {"ff_width", config_.ff_width},
                          {"feature_dim", config_.feature_dim},
                          {"image_size", config_.image_size},
                          {"vocab_size", config_.vocab_size},
                          {"max_tokens", config_.max_tokens},
                          {"arch", to_string(config_.arch)}};
    manifest["seed"] = seed_;
    json tensors = json::array();
    for (const TensorSpec& spec : params_.specs()) {
        tensors.push_back({{"name", spec.name}, {"shape", spec.shape}});
    }
    manifest["tensors"] = tensors;

    std::string blob = manifest.dump();
    std::string out;
    out.append(kCheckpointMagic, 4);
    uint64_t len = blob.size();
    out.append(reinterpret_cast<const char*>(&len), 8);
    out += blob;

    std::vector<float> f32(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) f32[i] = static_cast<float>(params_.values()[i]);
    out.append(reinterpret_cast<const char*>(f32.data()), f32.size() * 4);
    atomic_write_file(path, out);
}

FusionModel FusionModel::load_checkpoint(const std::string& path) {
    std::string blob = read_file(path);
    if (blob.size() < 12 || std::memcmp(blob.data(), kCheckpointMagic, 4) != 0) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }
    uint64_t len;
    std::memcpy(&len, blob.data() + 4, 8);
    if (blob.size() < 12 + len) throw std::runtime_error("truncated checkpoint manifest: " + path);
    json manifest = json::parse(blob.substr(12, len));

    ModelConfig config;
    const json& c = manifest.at("config");
    config.mode = corpus_mode_from_string(c.at("mode").get<std::string>());
    config.dim = c.at("dim").get<int>();
    config.layers = c.at("layers").get<int>();
    config.heads = c.at("heads").get<int>();
    config.ff_width = c.at("ff_width").get<int>();
    config.feature_dim = c.at("feature_dim").get<int>();
    config.image_size = c.at("image_size").get<int>();
    config.vocab_size = c.at("vocab_size").get<int>();
    config.max_tokens = c.at("max_tokens").get<int>();
    config.arch = fusion_arch_from_string(c.at("arch").get<std::string>());

    FusionModel model(config, manifest.at("seed").get<uint64_t>());

    const json& tensors = manifest.at("tensors");
    if (tensors.size() != model.params_.specs().size()) {
        throw std::runtime_error("checkpoint tensor count mismatch");
    }
    for (size_t i = 0; i < tensors.size(); ++i) {
        const TensorSpec& spec = model.params_.spec(i);
        if (tensors[i].at("name").get<std::string>() != spec.name ||
            tensors[i].at("shape").get<std::vector<int>>() != spec.shape) {
            throw std::runtime_error("checkpoint tensor layout mismatch at " + spec.name);
        }
    }

    size_t data_off = 12 + len;
    if (blob.size() != data_off + model.params_.size() * 4) {
        throw std::runtime_error("checkpoint tensor payload size mismatch");
    }
    std::vector<float> f32(model.params_.size());
    std::memcpy(f32.data(), blob.data() + data_off, f32.size() * 4);
    for (size_t i = 0; i < f32.size(); ++i) model.params_.values()[i] = static_cast<double>(f32[i]);
    return model;
}

}  // namespace cirkit
