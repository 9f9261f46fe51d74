#include "cirkit/train.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cirkit/evalkit.h"
#include "cirkit/kernels.h"
#include "cirkit/util.h"

namespace cirkit {

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

void TrainBatch::validate(const LossConfig& config) const {
    int min_n = config.use_query_negatives ? 1 : 2;
    if (n < min_n) {
        throw std::runtime_error("batch size " + std::to_string(n) + " below minimum " + std::to_string(min_n));
    }
    size_t expect = static_cast<size_t>(n) * dim;
    if (r_q.size() != expect || r_t.size() != expect || r_query_neg.size() != expect) {
        throw std::runtime_error("batch embedding storage does not match n x dim");
    }
    for (int i = 0; i < n; ++i) {
        for (const double* v : {q(i), t(i), qn(i)}) {
            double norm = kernels::norm2(v, dim);
            if (std::abs(norm - 1.0) > 1e-6) {
                throw std::runtime_error("batch embedding " + std::to_string(i) + " is not unit norm");
            }
        }
    }
}

LossResult contrastive_loss(const TrainBatch& batch, double tau, const LossConfig& config) {
    batch.validate(config);
    if (tau < config.tau_min) {
        throw std::runtime_error("temperature " + format_double(tau) + " below tau_min " +
                                 format_double(config.tau_min));
    }
    const int n = batch.n;
    const int dim = batch.dim;
    const bool qneg = config.use_query_negatives;
    const double inv_n = 1.0 / static_cast<double>(n);

    LossResult res;
    res.per_example.resize(n);
    res.positive_sim.resize(n);
    res.denominator_terms.assign(n, qneg ? 2 * n : n);
    res.d_r_q.assign(static_cast<size_t>(n) * dim, 0.0);
    res.d_r_t.assign(static_cast<size_t>(n) * dim, 0.0);
    res.d_r_query_neg.assign(static_cast<size_t>(n) * dim, 0.0);

    // cosine of unit vectors is the plain dot product
    std::vector<double> s_t(static_cast<size_t>(n) * n);   // s_t[i*n+j] = q_i . t_j
    std::vector<double> s_qn(static_cast<size_t>(n) * n);  // s_qn[i*n+j] = q_i . t'_j
    kernels::similarity_matrix(batch.r_q.data(), n, batch.r_t.data(), n, dim, s_t.data());
    if (qneg) kernels::similarity_matrix(batch.r_q.data(), n, batch.r_query_neg.data(), n, dim, s_qn.data());

    double total = 0.0;
    std::vector<double> p_t(n), p_qn(n);
    for (int i = 0; i < n; ++i) {
        const double* st = s_t.data() + static_cast<size_t>(i) * n;
        const double* sq = s_qn.data() + static_cast<size_t>(i) * n;
        double m = -1e300;
        for (int j = 0; j < n; ++j) {
            m = std::max(m, st[j] / tau);
            if (qneg) m = std::max(m, sq[j] / tau);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            p_t[j] = std::exp(st[j] / tau - m);
            z += p_t[j];
            if (qneg) {
                p_qn[j] = std::exp(sq[j] / tau - m);
                z += p_qn[j];
            }
        }
        double loss_i = m + std::log(z) - st[i] / tau;
        if (!std::isfinite(loss_i)) {
            throw std::runtime_error("non-finite loss at example " + std::to_string(i));
        }
        res.per_example[i] = loss_i;
        res.positive_sim[i] = st[i];
        total += loss_i;

        // d(mean loss)/d(logit) = (p - delta) / n, then back through s/tau
        for (int j = 0; j < n; ++j) {
            double dl_t = (p_t[j] / z - (j == i ? 1.0 : 0.0)) * inv_n;
            res.d_tau += dl_t * (-st[j] / (tau * tau));
            double c = dl_t / tau;
            const double* tj = batch.t(j);
            const double* qi = batch.q(i);
            double* dq = res.d_r_q.data() + static_cast<size_t>(i) * dim;
            double* dt = res.d_r_t.data() + static_cast<size_t>(j) * dim;
            for (int k = 0; k < dim; ++k) {
                dq[k] += c * tj[k];
                dt[k] += c * qi[k];
            }
            if (qneg) {
                double dl_q = (p_qn[j] / z) * inv_n;
                res.d_tau += dl_q * (-sq[j] / (tau * tau));
                double cq = dl_q / tau;
                const double* nj = batch.qn(j);
                double* dqn = res.d_r_query_neg.data() + static_cast<size_t>(j) * dim;
                for (int k = 0; k < dim; ++k) {
                    dq[k] += cq * nj[k];
                    dqn[k] += cq * qi[k];
                }
            }
        }
    }
    res.loss = total * inv_n;
    return res;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

namespace {
// gradients below this scale are treated as zero-scale when forming the
// relative error, so finite-difference noise on untouched coordinates does
// not register as failure
constexpr double kGradCheckFloor = 1e-6;
}

GradCheckReport grad_check_coords(const std::function<double()>& eval_loss, std::vector<double>& params,
                                  const std::vector<double>& analytic_grad, const std::vector<size_t>& coords,
                                  double eps) {
    GradCheckReport report;
    for (size_t c : coords) {
        double saved = params[c];
        params[c] = saved + eps;
        double up = eval_loss();
        params[c] = saved - eps;
        double down = eval_loss();
        params[c] = saved;
        double numeric = (up - down) / (2.0 * eps);
        double analytic = analytic_grad[c];
        double scale = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
        double rel = std::abs(analytic - numeric) / scale;
        report.entries.push_back({c, analytic, numeric, rel});
        report.max_rel_error = std::max(report.max_rel_error, rel);
    }
    std::sort(report.entries.begin(), report.entries.end(),
              [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.rel_error > b.rel_error; });
    return report;
}

GradCheckReport grad_check(const std::function<double()>& eval_loss, std::vector<double>& params,
                           const std::vector<double>& analytic_grad, int num_coords, double eps, uint64_t seed) {
    if (params.size() != analytic_grad.size()) throw std::runtime_error("gradient size mismatch");
    Rng rng(hash_combine(seed, fnv1a("grad-check")));
    std::vector<size_t> coords(num_coords);
    for (int i = 0; i < num_coords; ++i) coords[i] = rng.uniform_int(params.size());
    return grad_check_coords(eval_loss, params, analytic_grad, coords, eps);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Optimizer::Optimizer(const ParamStore& store, OptimizerConfig config) : config_(std::move(config)) {
    if (config_.kind != "adam" && config_.kind != "sgd") {
        throw std::runtime_error("optimizer must be adam or sgd, got " + config_.kind);
    }
    is_backbone_.assign(store.size(), 0);
    for (const TensorSpec& spec : store.specs()) {
        if (spec.backbone) std::fill_n(is_backbone_.begin() + spec.offset, spec.size, uint8_t{1});
    }
    if (config_.kind == "adam") {
        m_.assign(store.size(), 0.0);
        v_.assign(store.size(), 0.0);
    }
}

void Optimizer::step(ParamStore& store, const std::vector<double>& grad, bool freeze_backbone) {
    if (grad.size() != store.size()) throw std::runtime_error("gradient size mismatch");
    ++t_;
    double* p = store.values().data();
    const bool adam = config_.kind == "adam";
    double bc1 = adam ? 1.0 - std::pow(config_.beta1, t_) : 1.0;
    double bc2 = adam ? 1.0 - std::pow(config_.beta2, t_) : 1.0;
    for (size_t i = 0; i < grad.size(); ++i) {
        if (freeze_backbone && is_backbone_[i]) continue;
        double lr = is_backbone_[i] ? config_.lr_backbone : config_.lr_new;
        if (lr == 0.0) continue;
        if (adam) {
            m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grad[i];
            v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
            double mhat = m_[i] / bc1;
            double vhat = v_[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
        } else {
            p[i] -= lr * grad[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::runtime_error("batch_size must be >= 1");
    if (no_query_negatives && batch_size < 2) {
        throw std::runtime_error("batch_size must be >= 2 without query negatives");
    }
    if (max_steps < 1) throw std::runtime_error("max_steps must be >= 1");
    if (val_fraction <= 0.0 || val_fraction >= 1.0) throw std::runtime_error("val_fraction must be in (0, 1)");
    if (eval_every < 1) throw std::runtime_error("eval_every must be >= 1");
    if (patience < 1) throw std::runtime_error("patience must be >= 1");
    if (tau_min <= 0.0) throw std::runtime_error("tau_min must be > 0");
    if (tau_init < tau_min) throw std::runtime_error("tau_init below tau_min");
    if (lr_backbone > lr_new) {
        std::fprintf(stderr, "warning: lr_backbone (%g) exceeds lr_new (%g)\n", lr_backbone, lr_new);
    }
}

namespace {

const ImageRecord& record_or_throw(const std::unordered_map<std::string, const ImageRecord*>& records,
                                   const std::string& id) {
    auto it = records.find(id);
    if (it == records.end()) throw std::runtime_error("triplet references unknown image_id: " + id);
    return *it->second;
}

struct ValBench {
    RetrievalIndex index;
    std::vector<QueryCase> cases;
};

ValBench build_val_bench(const std::vector<Triplet>& val,
                         const std::unordered_map<std::string, const ImageRecord*>& records,
                         const FusionModel& model) {
    ValBench bench;
    std::set<std::string> target_ids;
    for (const Triplet& t : val) target_ids.insert(t.target_id);
    std::vector<const ImageRecord*> items;
    for (const std::string& id : target_ids) items.push_back(&record_or_throw(records, id));
    bench.index = build_index(items, model);
    for (const Triplet& t : val) {
        bench.cases.push_back({t.query_id, t.instruction, {t.target_id}, {}, ""});
    }
    return bench;
}

double val_recall_at_1(const ValBench& bench, const std::unordered_map<std::string, const ImageRecord*>& records,
                       const FusionModel& model) {
    std::vector<std::vector<std::string>> rankings(bench.cases.size());
    kernels::parallel_for(bench.cases.size(), [&](size_t c) {
        const QueryCase& qc = bench.cases[c];
        std::vector<double> q = model.encode(*records.at(qc.query_image_id), qc.instruction);
        rankings[c] = rank(bench.index, q);
    });
    return recall_at_k(rankings, bench.cases, 1);
}

// epoch-shuffled batches without replacement; with one_per_page, a page
// contributes at most one triplet per batch (best effort once pages run out)
class BatchSampler {
public:
    BatchSampler(size_t n_triplets, const std::vector<std::string>& pages, int batch_size, bool one_per_page,
                 uint64_t seed)
        : pages_(pages), batch_size_(batch_size), one_per_page_(one_per_page), seed_(seed) {
        order_.resize(n_triplets);
        for (size_t i = 0; i < n_triplets; ++i) order_[i] = i;
    }

    std::vector<size_t> next_batch() {
        if (pending_.size() < static_cast<size_t>(batch_size_)) refill();
        std::vector<size_t> batch;
        if (!one_per_page_) {
            while (static_cast<int>(batch.size()) < batch_size_ && !pending_.empty()) {
                batch.push_back(pending_.front());
                pending_.pop_front();
            }
            return batch;
        }
        std::set<std::string> used;
        std::deque<size_t> skipped;
        while (static_cast<int>(batch.size()) < batch_size_ && !pending_.empty()) {
            size_t idx = pending_.front();
            pending_.pop_front();
            if (used.insert(pages_[idx]).second) {
                batch.push_back(idx);
            } else {
                skipped.push_back(idx);
            }
        }
        for (auto it = skipped.rbegin(); it != skipped.rend(); ++it) pending_.push_front(*it);
        // pages exhausted: top up so the batch keeps its size
        while (static_cast<int>(batch.size()) < batch_size_ && !pending_.empty()) {
            batch.push_back(pending_.front());
            pending_.pop_front();
        }
        return batch;
    }

private:
    void refill() {
        std::vector<size_t> epoch = order_;
        Rng rng(hash_combine(hash_combine(seed_, fnv1a("epoch")), epoch_++));
        rng.shuffle(epoch);
        for (size_t i : epoch) pending_.push_back(i);
    }

    std::vector<size_t> order_;
    std::vector<std::string> pages_;
    int batch_size_;
    bool one_per_page_;
    uint64_t seed_;
    uint64_t epoch_ = 0;
    std::deque<size_t> pending_;
};

}  // namespace

TrainResult train(FusionModel& model, const std::vector<Triplet>& triplets,
                  const std::unordered_map<std::string, const ImageRecord*>& records, const TrainConfig& config,
                  const std::string& metrics_csv_path, const std::string& best_checkpoint_path) {
    config.validate();
    if (config.crossattn && model.config().arch != FusionArch::cross_attention) {
        throw std::runtime_error("crossattn training needs a model constructed with arch=cross_attention");
    }

    // held-out validation split
    std::vector<size_t> idx(triplets.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng split_rng(hash_combine(config.seed, fnv1a("val-split")));
    split_rng.shuffle(idx);
    size_t n_val = std::max<size_t>(1, static_cast<size_t>(std::llround(config.val_fraction * triplets.size())));
    if (triplets.size() <= n_val ||
        triplets.size() - n_val < static_cast<size_t>(config.batch_size)) {
        throw std::runtime_error("need at least " +
                                 std::to_string(config.batch_size + static_cast<int>(n_val) + 1) +
                                 " triplets for batch_size " + std::to_string(config.batch_size) +
                                 " plus the validation split, got " + std::to_string(triplets.size()));
    }
    std::vector<Triplet> val_split, train_split;
    for (size_t i = 0; i < idx.size(); ++i) {
        (i < n_val ? val_split : train_split).push_back(triplets[idx[i]]);
    }

    // every triplet must resolve before training starts
    std::vector<std::string> pages(train_split.size());
    for (size_t i = 0; i < train_split.size(); ++i) {
        pages[i] = record_or_throw(records, train_split[i].query_id).page_url;
        record_or_throw(records, train_split[i].target_id);
    }
    for (const Triplet& t : val_split) {
        record_or_throw(records, t.query_id);
        record_or_throw(records, t.target_id);
    }

    model.set_temperature(config.tau_init);
    LossConfig loss_config{config.tau_init, !config.no_query_negatives, config.tau_min};
    Optimizer optimizer(model.params(),
                        {config.optimizer, config.lr_new, config.lr_backbone, 0.9, 0.999, 1e-8});
    BatchSampler sampler(train_split.size(), pages, config.batch_size, config.one_per_page, config.seed);

    const int dim = model.config().dim;
    const FusionArch arch = model.config().arch;
    const size_t tau_idx = model.temperature_param_index();

    TrainResult result;
    std::ostringstream csv;
    csv << "step,train_loss,tau,val_R@1,wall_ms\n";
    std::string last_val = "";
    double best_val = -1.0;
    int best_step = 0;
    int evals_since_best = 0;
    std::vector<double> best_params;
    std::vector<double> grad(model.params().size());

    // per-encode caches, reused across steps
    std::vector<EncodeCache*> caches;
    auto cleanup = [&] {
        for (EncodeCache* c : caches) model.free_cache(c);
        caches.clear();
    };

    try {
        for (int step = 1; step <= config.max_steps; ++step) {
            auto t0 = std::chrono::steady_clock::now();
            std::vector<size_t> batch_idx = sampler.next_batch();
            const int n = static_cast<int>(batch_idx.size());

            TrainBatch batch;
            batch.n = n;
            batch.dim = dim;
            batch.r_q.resize(static_cast<size_t>(n) * dim);
            batch.r_t.resize(static_cast<size_t>(n) * dim);
            batch.r_query_neg.resize(static_cast<size_t>(n) * dim);

            while (caches.size() < static_cast<size_t>(3 * n)) caches.push_back(model.new_cache());

            // embed the 3N inputs in parallel; results land in disjoint rows
            kernels::parallel_for(static_cast<size_t>(3) * n, [&](size_t task) {
                size_t i = task % n;
                const Triplet& tri = train_split[batch_idx[i]];
                const ImageRecord& qrec = *records.at(tri.query_id);
                const ImageRecord& trec = *records.at(tri.target_id);
                if (task < static_cast<size_t>(n)) {
                    model.forward_cached(qrec, tri.instruction, arch, *caches[task],
                                         batch.r_q.data() + i * static_cast<size_t>(dim));
                } else if (task < static_cast<size_t>(2 * n)) {
                    model.forward_cached(trec, "", arch, *caches[task],
                                         batch.r_t.data() + i * static_cast<size_t>(dim));
                } else {
                    model.forward_cached(qrec, "", arch, *caches[task],
                                         batch.r_query_neg.data() + i * static_cast<size_t>(dim));
                }
            });

            double tau = model.temperature();
            LossResult loss;
            try {
                loss = contrastive_loss(batch, tau, loss_config);
            } catch (const std::exception&) {
                // abort with the last good parameters (this step never applied)
                result.aborted_non_finite = true;
                if (!best_checkpoint_path.empty() && best_params.empty()) model.save_checkpoint(best_checkpoint_path);
                break;
            }

            if (step == 1) result.initial_loss = loss.loss;
            result.final_loss = loss.loss;
            result.steps_run = step;

            // backward, reduced serially in (example, role) order so thread
            // count never changes the result
            std::fill(grad.begin(), grad.end(), 0.0);
            grad[tau_idx] += loss.d_tau;
            for (int i = 0; i < n; ++i) {
                model.backward(*caches[i], loss.d_r_q.data() + static_cast<size_t>(i) * dim, grad.data());
                model.backward(*caches[n + i], loss.d_r_t.data() + static_cast<size_t>(i) * dim, grad.data());
                if (!config.no_query_negatives) {
                    model.backward(*caches[2 * n + i], loss.d_r_query_neg.data() + static_cast<size_t>(i) * dim,
                                   grad.data());
                }
            }

            optimizer.step(model.params(), grad, config.frozen_backbone);
            if (model.temperature() < config.tau_min) model.set_temperature(config.tau_min);

            auto t1 = std::chrono::steady_clock::now();
            long wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();

            if (step % config.eval_every == 0) {
                ValBench bench = build_val_bench(val_split, records, model);
                double r1 = val_recall_at_1(bench, records, model);
                last_val = format_double(r1);
                if (r1 > best_val) {
                    best_val = r1;
                    best_step = step;
                    evals_since_best = 0;
                    best_params = model.params().values();
                    if (!best_checkpoint_path.empty()) model.save_checkpoint(best_checkpoint_path);
                } else {
                    evals_since_best++;
                }
            }

            csv << step << ',' << format_double(loss.loss) << ',' << format_double(model.temperature()) << ','
                << last_val << ',' << wall_ms << "\n";

            if (evals_since_best >= config.patience) break;
        }
    } catch (...) {
        cleanup();
        throw;
    }
    cleanup();

    // no validation round ran: the final parameters are the best we have
    if (best_val < 0.0 && !best_checkpoint_path.empty() && !result.aborted_non_finite) {
        model.save_checkpoint(best_checkpoint_path);
    }

    result.best_val_r1 = std::max(best_val, 0.0);
    result.best_step = best_step;
    result.metrics_csv = csv.str();
    if (!metrics_csv_path.empty()) atomic_write_file(metrics_csv_path, result.metrics_csv);
    return result;
}

}  // namespace cirkit
