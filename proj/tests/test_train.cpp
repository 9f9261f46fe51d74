#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cirkit/kernels.h"
#include "cirkit/synth.h"
#include "cirkit/train.h"
#include "cirkit/util.h"

using namespace cirkit;

namespace {

TrainBatch unit_batch(std::vector<std::vector<double>> q, std::vector<std::vector<double>> t,
                      std::vector<std::vector<double>> qn) {
    TrainBatch b;
    b.n = static_cast<int>(q.size());
    b.dim = static_cast<int>(q[0].size());
    for (int i = 0; i < b.n; ++i) {
        b.r_q.insert(b.r_q.end(), q[i].begin(), q[i].end());
        b.r_t.insert(b.r_t.end(), t[i].begin(), t[i].end());
        b.r_query_neg.insert(b.r_query_neg.end(), qn[i].begin(), qn[i].end());
    }
    return b;
}

std::vector<double> unit_vec(int dim, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    double n = kernels::norm2(v.data(), dim);
    for (double& x : v) x /= n;
    return v;
}

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.layers = 2;
    cfg.heads = 4;
    cfg.feature_dim = 8;
    cfg.vocab_size = 64;
    return cfg;
}

ImageRecord feat_record(const std::string& id, std::vector<double> features, const std::string& page = "u") {
    ImageRecord rec;
    rec.image_id = id;
    rec.page_url = page;
    rec.width = 1;
    rec.height = 1;
    rec.features = std::move(features);
    return rec;
}

}  // namespace

// --- loss unit oracles: scalar evaluations of the loss formula by hand ----

TEST_CASE("single positive with one orthogonal query negative") {
    // sim(q,t) = 1, sim(q,t') = 0, tau = 1:
    // L = -ln(e / (e + 1)) = ln(1 + e^-1) = 0.31326168751822286
    TrainBatch b = unit_batch({{1, 0}}, {{1, 0}}, {{0, 1}});
    LossConfig cfg;
    LossResult res = contrastive_loss(b, 1.0, cfg);
    CHECK(res.loss == doctest::Approx(0.31326168751822286).epsilon(1e-9));
    CHECK(res.positive_sim[0] == doctest::Approx(1.0));
    CHECK(res.denominator_terms[0] == 2);
}

TEST_CASE("identical target and query negative give ln 2 at any temperature") {
    for (double tau : {1.0, 0.07, 0.25}) {
        TrainBatch b = unit_batch({{0.6, 0.8}}, {{1, 0}}, {{1, 0}});
        LossResult res = contrastive_loss(b, tau, LossConfig{});
        CHECK(res.loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
}

TEST_CASE("batch permutation leaves the mean loss unchanged") {
    const int n = 8, dim = 12;
    std::vector<std::vector<double>> q, t, qn;
    for (int i = 0; i < n; ++i) {
        q.push_back(unit_vec(dim, 100 + i));
        t.push_back(unit_vec(dim, 200 + i));
        qn.push_back(unit_vec(dim, 300 + i));
    }
    LossResult base = contrastive_loss(unit_batch(q, t, qn), 0.1, LossConfig{});

    std::vector<int> perm = {5, 2, 7, 0, 3, 6, 1, 4};
    std::vector<std::vector<double>> q2, t2, qn2;
    for (int i : perm) {
        q2.push_back(q[i]);
        t2.push_back(t[i]);
        qn2.push_back(qn[i]);
    }
    LossResult permuted = contrastive_loss(unit_batch(q2, t2, qn2), 0.1, LossConfig{});
    CHECK(std::abs(base.loss - permuted.loss) < 1e-12);
}

TEST_CASE("per-example losses are nonnegative") {
    // the numerator is one of the denominator terms, so exp(-L_i) <= 1
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_int(6));
        std::vector<std::vector<double>> q, t, qn;
        for (int i = 0; i < n; ++i) {
            q.push_back(unit_vec(8, rng.next_u64()));
            t.push_back(unit_vec(8, rng.next_u64()));
            qn.push_back(unit_vec(8, rng.next_u64()));
        }
        LossConfig cfg;
        cfg.use_query_negatives = trial % 2 == 0;
        LossResult res = contrastive_loss(unit_batch(q, t, qn), 0.07, cfg);
        for (double li : res.per_example) CHECK(li >= 0.0);
        CHECK(std::isfinite(res.loss));
    }
}

TEST_CASE("disabling query negatives halves the denominator term count") {
    const int n = 4;
    std::vector<std::vector<double>> q, t, qn;
    for (int i = 0; i < n; ++i) {
        q.push_back(unit_vec(8, 10 + i));
        t.push_back(unit_vec(8, 20 + i));
        qn.push_back(unit_vec(8, 30 + i));
    }
    LossConfig with;
    LossConfig without;
    without.use_query_negatives = false;
    LossResult rw = contrastive_loss(unit_batch(q, t, qn), 0.07, with);
    LossResult ro = contrastive_loss(unit_batch(q, t, qn), 0.07, without);
    for (int i = 0; i < n; ++i) {
        CHECK(rw.denominator_terms[i] == 2 * n);
        CHECK(ro.denominator_terms[i] == n);
    }
    CHECK(rw.loss != ro.loss);
}

TEST_CASE("batch preconditions are enforced") {
    LossConfig no_neg;
    no_neg.use_query_negatives = false;
    TrainBatch single = unit_batch({{1, 0}}, {{1, 0}}, {{0, 1}});
    CHECK_THROWS(contrastive_loss(single, 1.0, no_neg));  // N >= 2 without negatives
    CHECK_THROWS(contrastive_loss(single, 1e-9, LossConfig{}));  // tau below floor

    TrainBatch denorm = unit_batch({{2, 0}}, {{1, 0}}, {{0, 1}});
    CHECK_THROWS(contrastive_loss(denorm, 1.0, LossConfig{}));
}

TEST_CASE("temperature gradient matches finite differences at the loss level") {
    const int n = 4, dim = 8;
    std::vector<std::vector<double>> q, t, qn;
    for (int i = 0; i < n; ++i) {
        q.push_back(unit_vec(dim, 40 + i));
        t.push_back(unit_vec(dim, 50 + i));
        qn.push_back(unit_vec(dim, 60 + i));
    }
    TrainBatch batch = unit_batch(q, t, qn);
    LossConfig cfg;
    double tau = 0.13;
    LossResult res = contrastive_loss(batch, tau, cfg);
    double eps = 1e-7;
    double up = contrastive_loss(batch, tau + eps, cfg).loss;
    double down = contrastive_loss(batch, tau - eps, cfg).loss;
    double fd = (up - down) / (2 * eps);
    CHECK(res.d_tau == doctest::Approx(fd).epsilon(1e-6));
}

// --- gradient checker ------------------------------------------------------

TEST_CASE("grad_check is exact on a quadratic") {
    std::vector<double> params = {0.5, -1.25, 2.0, 0.75, -0.1};
    std::vector<double> coeff = {1.0, 2.0, -0.5, 3.0, 1.5};
    auto eval = [&] {
        double s = 0;
        for (size_t i = 0; i < params.size(); ++i) s += coeff[i] * params[i] * params[i];
        return s;
    };
    std::vector<double> analytic(params.size());
    for (size_t i = 0; i < params.size(); ++i) analytic[i] = 2.0 * coeff[i] * params[i];
    GradCheckReport report = grad_check(eval, params, analytic, 20, 1e-5, 1);
    CHECK(report.max_rel_error < 1e-10);
}

namespace {

// mean contrastive loss of a fixed tiny batch through the live model params
struct ModelLossHarness {
    FusionModel model;
    std::vector<ImageRecord> queries, targets;
    std::vector<std::string> instructions;
    LossConfig loss_config;

    explicit ModelLossHarness(ModelConfig cfg, uint64_t seed, int n, FusionArch arch = FusionArch::self_attention)
        : model([&] {
              cfg.arch = arch;
              return cfg;
          }(),
              seed) {
        Rng rng(seed ^ 0xabcd);
        for (int i = 0; i < n; ++i) {
            std::vector<double> fq(cfg.feature_dim), ft(cfg.feature_dim);
            for (double& x : fq) x = rng.normal();
            for (double& x : ft) x = rng.normal();
            queries.push_back(feat_record("q" + std::to_string(i), fq));
            targets.push_back(feat_record("t" + std::to_string(i), ft));
            instructions.push_back(i % 2 ? "make it crimson and round" : "find the matching sketch");
        }
    }

    double loss_only() {
        int n = static_cast<int>(queries.size());
        int dim = model.config().dim;
        TrainBatch batch;
        batch.n = n;
        batch.dim = dim;
        batch.r_q.resize(static_cast<size_t>(n) * dim);
        batch.r_t.resize(static_cast<size_t>(n) * dim);
        batch.r_query_neg.resize(static_cast<size_t>(n) * dim);
        EncodeCache* cache = model.new_cache();
        for (int i = 0; i < n; ++i) {
            model.forward_cached(queries[i], instructions[i], model.config().arch, *cache,
                                 batch.r_q.data() + static_cast<size_t>(i) * dim);
            model.forward_cached(targets[i], "", model.config().arch, *cache,
                                 batch.r_t.data() + static_cast<size_t>(i) * dim);
            model.forward_cached(queries[i], "", model.config().arch, *cache,
                                 batch.r_query_neg.data() + static_cast<size_t>(i) * dim);
        }
        model.free_cache(cache);
        return contrastive_loss(batch, model.temperature(), loss_config).loss;
    }

    std::vector<double> analytic_grad() {
        int n = static_cast<int>(queries.size());
        int dim = model.config().dim;
        TrainBatch batch;
        batch.n = n;
        batch.dim = dim;
        batch.r_q.resize(static_cast<size_t>(n) * dim);
        batch.r_t.resize(static_cast<size_t>(n) * dim);
        batch.r_query_neg.resize(static_cast<size_t>(n) * dim);
        std::vector<EncodeCache*> caches;
        for (int i = 0; i < 3 * n; ++i) caches.push_back(model.new_cache());
        for (int i = 0; i < n; ++i) {
            model.forward_cached(queries[i], instructions[i], model.config().arch, *caches[i],
                                 batch.r_q.data() + static_cast<size_t>(i) * dim);
            model.forward_cached(targets[i], "", model.config().arch, *caches[n + i],
                                 batch.r_t.data() + static_cast<size_t>(i) * dim);
            model.forward_cached(queries[i], "", model.config().arch, *caches[2 * n + i],
                                 batch.r_query_neg.data() + static_cast<size_t>(i) * dim);
        }
        LossResult res = contrastive_loss(batch, model.temperature(), loss_config);
        std::vector<double> grad(model.params().size(), 0.0);
        grad[model.temperature_param_index()] += res.d_tau;
        for (int i = 0; i < n; ++i) {
            model.backward(*caches[i], res.d_r_q.data() + static_cast<size_t>(i) * dim, grad.data());
            model.backward(*caches[n + i], res.d_r_t.data() + static_cast<size_t>(i) * dim, grad.data());
            model.backward(*caches[2 * n + i], res.d_r_query_neg.data() + static_cast<size_t>(i) * dim, grad.data());
        }
        for (EncodeCache* c : caches) model.free_cache(c);
        return grad;
    }
};

}  // namespace

TEST_CASE("analytic gradients match finite differences through the full model") {
    ModelLossHarness h(tiny_model_config(), 21, 4);
    std::vector<double> grad = h.analytic_grad();
    GradCheckReport report =
        grad_check([&] { return h.loss_only(); }, h.model.params().values(), grad, 30, 1e-5, 5);
    CAPTURE(report.entries.front().coord);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("cross-attention gradients match finite differences") {
    ModelLossHarness h(tiny_model_config(), 22, 3, FusionArch::cross_attention);
    std::vector<double> grad = h.analytic_grad();
    GradCheckReport report =
        grad_check([&] { return h.loss_only(); }, h.model.params().values(), grad, 20, 1e-5, 6);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("pixel backbone gradients match finite differences") {
    ModelConfig cfg = tiny_model_config();
    cfg.mode = CorpusMode::pixel;
    cfg.image_size = 4;
    ModelLossHarness h(cfg, 23, 2);
    // swap in pixel records
    Rng rng(9);
    for (auto* side : {&h.queries, &h.targets}) {
        for (ImageRecord& rec : *side) {
            rec.features.clear();
            rec.width = 6;
            rec.height = 6;
            rec.pixels.resize(6 * 6 * 3);
            for (float& p : rec.pixels) p = static_cast<float>(rng.uniform());
        }
    }
    std::vector<double> grad = h.analytic_grad();
    GradCheckReport report =
        grad_check([&] { return h.loss_only(); }, h.model.params().values(), grad, 20, 1e-5, 7);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("temperature gradient through the model matches finite differences tightly") {
    ModelLossHarness h(tiny_model_config(), 24, 4);
    std::vector<double> grad = h.analytic_grad();
    GradCheckReport report = grad_check_coords([&] { return h.loss_only(); }, h.model.params().values(), grad,
                                               {h.model.temperature_param_index()}, 1e-5);
    CHECK(report.max_rel_error < 1e-6);
}

// --- optimizer --------------------------------------------------------------

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    FusionModel model(tiny_model_config(), 31);
    std::vector<double> before = model.params().values();
    Optimizer opt(model.params(), {"adam", 0.0, 0.0, 0.9, 0.999, 1e-8});
    std::vector<double> grad(model.params().size(), 0.5);
    opt.step(model.params(), grad, false);
    CHECK(model.params().values() == before);
}

TEST_CASE("sgd step is the literal update rule") {
    FusionModel model(tiny_model_config(), 32);
    std::vector<double> before = model.params().values();
    Optimizer opt(model.params(), {"sgd", 0.1, 0.01, 0.9, 0.999, 1e-8});
    std::vector<double> grad(model.params().size(), 1.0);
    opt.step(model.params(), grad, false);
    bool saw_backbone = false, saw_new = false;
    for (const TensorSpec& spec : model.params().specs()) {
        double lr = spec.backbone ? 0.01 : 0.1;
        (spec.backbone ? saw_backbone : saw_new) = true;
        for (size_t i = spec.offset; i < spec.offset + spec.size; ++i) {
            CHECK(model.params().values()[i] == doctest::Approx(before[i] - lr).epsilon(1e-12));
        }
    }
    CHECK(saw_backbone);
    CHECK(saw_new);
}

// --- training loop ----------------------------------------------------------

namespace {
SynthConfig tiny_world_config() {
    SynthConfig cfg;
    cfg.seed = 5;
    cfg.feature_dim = 12;
    cfg.n_attrs = 4;
    cfg.n_train_pages = 24;
    cfg.attrs_per_page = 3;
    cfg.n_triplets = 120;
    cfg.n_index_objects = 10;
    cfg.n_eval_queries = 20;
    return cfg;
}

TrainConfig quick_train_config() {
    TrainConfig cfg;
    cfg.batch_size = 12;
    cfg.max_steps = 40;
    cfg.lr_new = 3e-3;
    cfg.lr_backbone = 3e-4;
    cfg.eval_every = 20;
    cfg.seed = 3;
    return cfg;
}
}  // namespace

TEST_CASE("training on planted relations reduces the loss") {
    SynthWorld world = generate_synth_world(tiny_world_config());
    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    FusionModel model(mc, 1);
    auto records = build_record_lookup(world.train_records);
    TrainResult res = train(model, world.triplets, records, quick_train_config());
    CHECK(res.steps_run == 40);
    CHECK(res.final_loss < res.initial_loss);
    CHECK(!res.metrics_csv.empty());
    CHECK(res.metrics_csv.find("step,train_loss,tau,val_R@1,wall_ms") == 0);
}

TEST_CASE("training is deterministic for a fixed seed") {
    SynthWorld world = generate_synth_world(tiny_world_config());
    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    auto records = build_record_lookup(world.train_records);
    TrainConfig cfg = quick_train_config();
    cfg.max_steps = 15;
    FusionModel m1(mc, 1), m2(mc, 1);
    train(m1, world.triplets, records, cfg);
    train(m2, world.triplets, records, cfg);
    CHECK(m1.params().values() == m2.params().values());
}

TEST_CASE("frozen backbone leaves backbone tensors bit-identical") {
    SynthWorld world = generate_synth_world(tiny_world_config());
    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    FusionModel model(mc, 2);
    std::vector<double> before = model.params().values();
    auto records = build_record_lookup(world.train_records);
    TrainConfig cfg = quick_train_config();
    cfg.max_steps = 10;
    cfg.frozen_backbone = true;
    train(model, world.triplets, records, cfg);
    bool fusion_moved = false;
    for (const TensorSpec& spec : model.params().specs()) {
        for (size_t i = spec.offset; i < spec.offset + spec.size; ++i) {
            if (spec.backbone) {
                CHECK(model.params().values()[i] == before[i]);
            } else if (model.params().values()[i] != before[i]) {
                fusion_moved = true;
            }
        }
    }
    CHECK(fusion_moved);
}

TEST_CASE("one-per-page batches never repeat a page") {
    SynthWorld world = generate_synth_world(tiny_world_config());
    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    FusionModel model(mc, 3);
    auto records = build_record_lookup(world.train_records);
    TrainConfig cfg = quick_train_config();
    cfg.max_steps = 5;
    cfg.one_per_page = true;
    cfg.batch_size = 8;
    TrainResult res = train(model, world.triplets, records, cfg);
    CHECK(res.steps_run == 5);
}

TEST_CASE("a poisoned model aborts with the abort flag and a checkpoint") {
    SynthWorld world = generate_synth_world(tiny_world_config());
    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    FusionModel model(mc, 4);
    model.params().values()[10] = std::nan("");
    auto records = build_record_lookup(world.train_records);
    auto ckpt = (std::filesystem::temp_directory_path() / "abort.ckpt").string();
    TrainConfig cfg = quick_train_config();
    cfg.max_steps = 5;
    TrainResult res = train(model, world.triplets, records, cfg, "", ckpt);
    CHECK(res.aborted_non_finite);
    CHECK(std::filesystem::exists(ckpt));
}

TEST_CASE("training rejects too few triplets with the required count") {
    SynthWorld world = generate_synth_world(tiny_world_config());
    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    FusionModel model(mc, 5);
    auto records = build_record_lookup(world.train_records);
    TrainConfig cfg = quick_train_config();
    cfg.batch_size = 256;
    try {
        train(model, world.triplets, records, cfg);
        FAIL("expected a triplet-count error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("need at least") != std::string::npos);
    }
}
