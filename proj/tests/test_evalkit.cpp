#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "cirkit/evalkit.h"
#include "cirkit/kernels.h"
#include "cirkit/synth.h"
#include "cirkit/util.h"
#include "oracles.h"

using namespace cirkit;

namespace {

RetrievalIndex hand_index(const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
    std::vector<std::string> ids;
    std::vector<double> vectors;
    int dim = static_cast<int>(rows[0].second.size());
    for (const auto& [id, v] : rows) {
        ids.push_back(id);
        std::vector<double> u = v;
        double n = kernels::norm2(u.data(), dim);
        for (double& x : u) x /= n;
        vectors.insert(vectors.end(), u.begin(), u.end());
    }
    return build_index_from_vectors(std::move(ids), std::move(vectors), dim);
}

ImageRecord feat_record(const std::string& id, std::vector<double> features) {
    ImageRecord rec;
    rec.image_id = id;
    rec.page_url = "u";
    rec.width = 1;
    rec.height = 1;
    rec.features = std::move(features);
    return rec;
}

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.layers = 1;
    cfg.heads = 4;
    cfg.feature_dim = 8;
    cfg.vocab_size = 64;
    return cfg;
}

}  // namespace

TEST_CASE("rank sorts by descending cosine") {
    RetrievalIndex index = hand_index({{"a", {1, 0}}, {"b", {0.6, 0.8}}, {"c", {0, 1}}});
    std::vector<double> q = {1, 0};
    std::vector<std::string> order = rank(index, q);
    CHECK(order == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("exact score ties break by ascending item id") {
    RetrievalIndex index = hand_index({{"zeta", {1, 0}}, {"alpha", {1, 0}}, {"mid", {0, 1}}});
    std::vector<double> q = {1, 0};
    std::vector<std::string> order = rank(index, q);
    CHECK(order == std::vector<std::string>{"alpha", "zeta", "mid"});
}

TEST_CASE("subset restricts candidates and unknown ids throw") {
    RetrievalIndex index = hand_index({{"a", {1, 0}}, {"b", {0.6, 0.8}}, {"c", {0, 1}}});
    std::vector<double> q = {1, 0};
    std::vector<std::string> subset = {"b", "c"};
    CHECK(rank(index, q, &subset) == std::vector<std::string>{"b", "c"});
    std::vector<std::string> bad = {"nope"};
    CHECK_THROWS(rank(index, q, &bad));
}

TEST_CASE("recall boundary: ground truth exactly at rank k counts, k+1 does not") {
    QueryCase qc;
    qc.gt_ids = {"hit"};
    std::vector<std::vector<std::string>> rankings = {{"x1", "x2", "hit", "x3"}};
    CHECK(recall_at_k(rankings, {qc}, 3) == 1.0);
    CHECK(recall_at_k(rankings, {qc}, 2) == 0.0);
}

TEST_CASE("hand-counted metric values") {
    // four queries with ground truth at ranks 1, 2, 5, 9: recall@5 = 3/4
    std::vector<QueryCase> cases(4);
    std::vector<std::vector<std::string>> rankings(4);
    int gt_rank[4] = {1, 2, 5, 9};
    for (int c = 0; c < 4; ++c) {
        cases[c].gt_ids = {"gt"};
        for (int i = 1; i <= 10; ++i) {
            rankings[c].push_back(i == gt_rank[c] ? "gt" : "f" + std::to_string(i));
        }
    }
    CHECK(recall_at_k(rankings, cases, 5) == doctest::Approx(0.75).epsilon(1e-12));

    // two ground truths at ranks 1 and 3, k=5: AP = (1/2)(1/1 + 2/3)
    QueryCase two;
    two.gt_ids = {"g1", "g2"};
    std::vector<std::vector<std::string>> r2 = {{"g1", "x", "g2", "y", "z"}};
    CHECK(map_at_k(r2, {two}, 5) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));

    // 2 relevant in the top 4, k=4: precision 0.5
    QueryCase four;
    four.gt_ids = {"g1", "g2", "g3"};
    std::vector<std::vector<std::string>> r3 = {{"g1", "x", "g2", "y"}};
    CHECK(precision_at_k(r3, {four}, 4) == doctest::Approx(0.5).epsilon(1e-12));

    // no ground truth in the top k
    QueryCase none;
    none.gt_ids = {"gt"};
    std::vector<std::vector<std::string>> r4 = {{"a", "b", "c"}};
    CHECK(map_at_k(r4, {none}, 3) == 0.0);
    CHECK(precision_at_k(r4, {none}, 3) == 0.0);

    // perfect ranking: all top-|gt| positions relevant
    QueryCase perfect;
    perfect.gt_ids = {"g1", "g2"};
    std::vector<std::vector<std::string>> r5 = {{"g2", "g1", "x"}};
    CHECK(map_at_k(r5, {perfect}, 5) == doctest::Approx(1.0).epsilon(1e-12));

    // k=1 with a relevant top item
    CHECK(precision_at_k(r5, {perfect}, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("metrics agree with the independent reference on 200 random instances") {
    Rng rng(2024);
    for (int instance = 0; instance < 200; ++instance) {
        int n_items = 2 + static_cast<int>(rng.uniform_int(19));
        int n_gt = 1 + static_cast<int>(rng.uniform_int(std::min(5, n_items)));
        std::vector<std::string> items;
        for (int i = 0; i < n_items; ++i) items.push_back("i" + std::to_string(i));
        rng.shuffle(items);

        QueryCase qc;
        for (int g = 0; g < n_gt; ++g) qc.gt_ids.push_back(items[rng.uniform_int(items.size())]);
        std::sort(qc.gt_ids.begin(), qc.gt_ids.end());
        qc.gt_ids.erase(std::unique(qc.gt_ids.begin(), qc.gt_ids.end()), qc.gt_ids.end());

        std::vector<std::vector<std::string>> rankings = {items};
        std::vector<QueryCase> cases = {qc};
        int k = 1 + static_cast<int>(rng.uniform_int(n_items + 3));

        double got_r = recall_at_k(rankings, cases, k);
        double got_p = precision_at_k(rankings, cases, k);
        double got_m = map_at_k(rankings, cases, k);
        CHECK(std::abs(got_r - oracle::recall_one(items, qc.gt_ids, k)) < 1e-12);
        CHECK(std::abs(got_p - oracle::precision_one(items, qc.gt_ids, k)) < 1e-12);
        CHECK(std::abs(got_m - oracle::ap_one(items, qc.gt_ids, k)) < 1e-12);
    }
}

TEST_CASE("moving a ground truth up one rank never decreases AP at k") {
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        int n = 4 + static_cast<int>(rng.uniform_int(12));
        std::vector<std::string> ranking;
        for (int i = 0; i < n; ++i) ranking.push_back("i" + std::to_string(i));
        QueryCase qc;
        for (int i = 0; i < n; ++i) {
            if (rng.uniform() < 0.3) qc.gt_ids.push_back(ranking[i]);
        }
        if (qc.gt_ids.empty()) continue;
        int k = 1 + static_cast<int>(rng.uniform_int(n));

        // find a gt position that can move up by one
        for (size_t pos = 1; pos < ranking.size(); ++pos) {
            bool pos_is_gt = std::count(qc.gt_ids.begin(), qc.gt_ids.end(), ranking[pos]) > 0;
            bool above_is_gt = std::count(qc.gt_ids.begin(), qc.gt_ids.end(), ranking[pos - 1]) > 0;
            if (pos_is_gt && !above_is_gt) {
                std::vector<std::string> improved = ranking;
                std::swap(improved[pos - 1], improved[pos]);
                double before = map_at_k({ranking}, {qc}, k);
                double after = map_at_k({improved}, {qc}, k);
                CHECK(after >= before - 1e-15);
                break;
            }
        }
    }
}

TEST_CASE("a subset containing all ground truths never lowers recall") {
    Rng rng(55);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 6 + static_cast<int>(rng.uniform_int(10));
        std::vector<std::pair<std::string, std::vector<double>>> rows;
        for (int i = 0; i < n; ++i) {
            std::vector<double> v(8);
            for (double& x : v) x = rng.normal();
            rows.push_back({"i" + std::to_string(i), v});
        }
        RetrievalIndex index = hand_index(rows);
        std::vector<double> q(8);
        for (double& x : q) x = rng.normal();
        double qn = kernels::norm2(q.data(), 8);
        for (double& x : q) x /= qn;

        QueryCase qc;
        qc.gt_ids = {"i0", "i3"};
        qc.subset_ids = {"i0", "i3", "i1", "i5"};

        std::vector<std::string> full = rank(index, q);
        std::vector<std::string> sub = rank(index, q, &qc.subset_ids);
        for (int k : {1, 2, 3}) {
            double r_full = recall_at_k({full}, {qc}, k);
            double r_sub = recall_at_k({sub}, {qc}, k);
            CHECK(r_sub >= r_full - 1e-15);
        }
    }
}

TEST_CASE("build_index embeds items with unit rows and rejects duplicates") {
    FusionModel model(tiny_model_config(), 1);
    std::vector<ImageRecord> recs;
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        std::vector<double> f(8);
        for (double& x : f) x = rng.normal();
        recs.push_back(feat_record("r" + std::to_string(i), f));
    }
    std::vector<const ImageRecord*> ptrs;
    for (const ImageRecord& r : recs) ptrs.push_back(&r);
    RetrievalIndex index = build_index(ptrs, model);
    CHECK(index.size() == 20);
    for (size_t i = 0; i < index.size(); ++i) {
        CHECK(std::abs(kernels::norm2(index.row(i), index.dim) - 1.0) < 1e-6);
    }

    RetrievalIndex again = build_index(ptrs, model);
    CHECK(index.vectors == again.vectors);

    // querying an indexed item with an untrained model must not crash; no
    // self-retrieval guarantee is asserted
    std::vector<double> q = model.encode_target(recs[0]);
    std::vector<std::string> order = rank(index, q);
    CHECK(order.size() == 20);

    ptrs.push_back(&recs[0]);
    CHECK_THROWS(build_index(ptrs, model));
}

TEST_CASE("index snapshots round trip") {
    RetrievalIndex index = hand_index({{"a", {1, 0, 0}}, {"b", {0, 1, 0}}, {"c", {0.5, 0.5, 0.70710678}}});
    auto path = (std::filesystem::temp_directory_path() / "index.snap").string();
    save_index(index, path);
    RetrievalIndex back = load_index(path);
    CHECK(back.item_ids == index.item_ids);
    CHECK(back.dim == index.dim);
    REQUIRE(back.vectors.size() == index.vectors.size());
    for (size_t i = 0; i < back.vectors.size(); ++i) {
        CHECK(back.vectors[i] == doctest::Approx(index.vectors[i]).epsilon(1e-6));
    }

    // snapshot bytes are stable across saves
    auto path2 = (std::filesystem::temp_directory_path() / "index2.snap").string();
    save_index(back, path2);
    std::string b1 = read_file(path);
    std::string b2 = read_file(path2);
    CHECK(b1 == b2);
}

TEST_CASE("task adapters enforce their instruction conventions") {
    SynthConfig scfg;
    scfg.seed = 11;
    scfg.feature_dim = 12;
    scfg.n_attrs = 6;
    scfg.n_train_pages = 4;
    scfg.n_triplets = 10;
    scfg.n_index_objects = 8;
    scfg.n_eval_queries = 12;
    SynthWorld world = generate_synth_world(scfg);

    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    FusionModel model(mc, 2);

    // sbir: every query uses the fixed instruction, whatever the case says
    TaskDataset sbir_ds = world.sbir;
    for (QueryCase& qc : sbir_ds.cases) qc.instruction = "THIS TEXT MUST BE IGNORED";
    MetricsReport forced = run_task(TaskKind::sbir, sbir_ds, model);
    MetricsReport clean = run_task(TaskKind::sbir, world.sbir, model);
    CHECK(forced.metrics.at("R@1") == clean.metrics.at("R@1"));
    CHECK(forced.metrics.at("mAP@5") == clean.metrics.at("mAP@5"));

    // manual reproduction of sbir ranking via the fixed instruction
    std::vector<const ImageRecord*> items;
    for (const ImageRecord& rec : sbir_ds.items) items.push_back(&rec);
    RetrievalIndex index = build_index(items, model);
    std::vector<std::vector<std::string>> rankings;
    for (const QueryCase& qc : sbir_ds.cases) {
        const ImageRecord* qrec = nullptr;
        for (const ImageRecord& rec : sbir_ds.queries) {
            if (rec.image_id == qc.query_image_id) qrec = &rec;
        }
        REQUIRE(qrec != nullptr);
        rankings.push_back(rank(index, model.encode(*qrec, "find a natural image of it")));
    }
    CHECK(recall_at_k(rankings, sbir_ds.cases, 1) == forced.metrics.at("R@1"));

    // domain transfer: the template expands the per-case domain keyword
    MetricsReport dt = run_task(TaskKind::domain_transfer, world.domain_transfer, model);
    std::vector<std::vector<std::string>> dt_rankings;
    for (const QueryCase& qc : world.domain_transfer.cases) {
        const ImageRecord* qrec = nullptr;
        for (const ImageRecord& rec : world.domain_transfer.queries) {
            if (rec.image_id == qc.query_image_id) qrec = &rec;
        }
        REQUIRE(qrec != nullptr);
        dt_rankings.push_back(rank(index, model.encode(*qrec, "find this object in " + qc.domain)));
    }
    CHECK(recall_at_k(dt_rankings, world.domain_transfer.cases, 1) == dt.metrics.at("R@1"));

    // a domain_transfer case without a domain fails before ranking
    TaskDataset broken = world.domain_transfer;
    broken.cases[0].domain.clear();
    CHECK_THROWS(run_task(TaskKind::domain_transfer, broken, model));
}

TEST_CASE("text_to_image bypasses the fusion head") {
    SynthConfig scfg;
    scfg.seed = 12;
    scfg.feature_dim = 12;
    scfg.n_attrs = 6;
    scfg.n_train_pages = 4;
    scfg.n_triplets = 10;
    scfg.n_index_objects = 6;
    scfg.n_eval_queries = 10;
    SynthWorld world = generate_synth_world(scfg);
    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    FusionModel model(mc, 3);

    MetricsReport t2i = run_task(TaskKind::text_to_image, world.text_to_image, model);

    // manual backbone-only ranking
    int dim = mc.dim;
    std::vector<std::string> ids;
    std::vector<double> vectors;
    for (const ImageRecord& rec : world.text_to_image.items) {
        ids.push_back(rec.image_id);
        std::vector<double> v = model.backbone_image_embed(rec);
        vectors.insert(vectors.end(), v.begin(), v.end());
    }
    RetrievalIndex index = build_index_from_vectors(std::move(ids), std::move(vectors), dim);
    std::vector<std::vector<std::string>> rankings;
    for (const QueryCase& qc : world.text_to_image.cases) {
        rankings.push_back(rank(index, model.backbone_text_embed(qc.instruction)));
    }
    CHECK(recall_at_k(rankings, world.text_to_image.cases, 1) == t2i.metrics.at("R@1"));

    MetricsReport i2t = run_task(TaskKind::image_to_text, world.image_to_text, model);
    CHECK(i2t.query_count == world.image_to_text.cases.size());

    // image_to_text without text items is a schema error
    TaskDataset broken = world.image_to_text;
    broken.text_items.clear();
    CHECK_THROWS(run_task(TaskKind::image_to_text, broken, model));
}

TEST_CASE("subset cir reports subset recall") {
    SynthConfig scfg;
    scfg.seed = 13;
    scfg.feature_dim = 12;
    scfg.n_attrs = 4;
    scfg.n_train_pages = 4;
    scfg.n_triplets = 10;
    scfg.n_index_objects = 6;
    scfg.n_eval_queries = 8;
    scfg.subset_size = 5;
    SynthWorld world = generate_synth_world(scfg);
    ModelConfig mc = tiny_model_config();
    mc.feature_dim = 12;
    FusionModel model(mc, 4);
    MetricsReport report = run_task(TaskKind::cir, world.subset_cir, model);
    CHECK(report.metrics.count("R_s@1") == 1);
    CHECK(report.metrics.at("R_s@1") >= report.metrics.at("R@1") - 1e-12);
}

TEST_CASE("query cases round trip through jsonl") {
    std::vector<QueryCase> cases;
    QueryCase qc;
    qc.query_image_id = "q";
    qc.instruction = "find it";
    qc.gt_ids = {"a", "b"};
    qc.subset_ids = {"a", "b", "c"};
    qc.domain = "cartoon";
    cases.push_back(qc);
    auto path = (std::filesystem::temp_directory_path() / "cases.jsonl").string();
    write_cases_jsonl(cases, path);
    std::vector<QueryCase> back = read_cases_jsonl(path);
    REQUIRE(back.size() == 1);
    CHECK(back[0].query_image_id == "q");
    CHECK(back[0].gt_ids == std::vector<std::string>{"a", "b"});
    CHECK(back[0].subset_ids.size() == 3);
    CHECK(back[0].domain == "cartoon");
}
