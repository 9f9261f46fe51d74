#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "cirkit/kernels.h"
#include "cirkit/mining.h"
#include "cirkit/util.h"

using namespace cirkit;

namespace {

ImageRecord rec(const std::string& id, const std::string& url, std::vector<double> features) {
    ImageRecord r;
    r.image_id = id;
    r.page_url = url;
    r.width = 400;
    r.height = 400;
    r.features = std::move(features);
    r.alt_text = "alt " + id;
    return r;
}

AnnotatedRecord ann(ImageRecord r, std::vector<std::string> labels, std::string caption,
                    AltTextVerdict verdict = AltTextVerdict::keep) {
    AnnotatedRecord a;
    a.record = std::move(r);
    a.record.ica_labels = std::move(labels);
    a.record.caption = std::move(caption);
    a.verdict = verdict;
    return a;
}

struct World {
    std::vector<AnnotatedRecord> annotated;
    AnnotatedLookup lookup() const { return build_annotated_lookup(annotated); }
    std::vector<PageGroup> groups() const {
        std::vector<ImageRecord> recs;
        for (const AnnotatedRecord& a : annotated) recs.push_back(a.record);
        return group_by_page(recs);
    }
};

CandidatePair scored(double img, double txt, double self, double query, const std::string& url = "u") {
    CandidatePair p;
    p.query_id = "q";
    p.target_id = "t";
    p.page_url = url;
    p.img_img_sim = img;
    p.txt_txt_sim = txt;
    p.ica_self_sim = self;
    p.ica_query_sim = query;
    return p;
}

}  // namespace

TEST_CASE("near-duplicate group members lose the later one") {
    // cos(a, b) = 1 > 0.98 because the feature vectors are identical
    World w;
    w.annotated.push_back(ann(rec("a", "u", {1, 0, 0, 0}), {"axis0"}, "cap a"));
    w.annotated.push_back(ann(rec("b", "u", {1, 0, 0, 0}), {"axis0"}, "cap b"));
    MockScoringBackend backend(4);
    FilterConfig cfg;
    MiningStats stats;
    auto lookup = w.lookup();
    std::vector<PageGroup> cleaned = clean_groups(w.groups(), lookup, cfg, backend, CorpusMode::synthetic, 1, &stats);
    REQUIRE(cleaned.size() == 1);
    CHECK(cleaned[0].members == std::vector<std::string>{"a"});
    CHECK(stats.removed_duplicate == 1);
}

TEST_CASE("pixel-mode members below min_resolution are removed") {
    World w;
    ImageRecord small = rec("small", "u", {});
    small.width = 100;
    small.height = 300;
    small.features.clear();
    small.pixels.assign(static_cast<size_t>(small.width) * small.height * 3, 0.5f);
    ImageRecord big = rec("big", "u", {});
    big.width = 300;
    big.height = 300;
    big.pixels.assign(static_cast<size_t>(big.width) * big.height * 3, 0.25f);
    w.annotated.push_back(ann(std::move(small), {"axis0"}, "cap"));
    w.annotated.push_back(ann(std::move(big), {"axis0"}, "cap"));
    MockScoringBackend backend(12);
    FilterConfig cfg;  // min_resolution 288
    MiningStats stats;
    auto lookup = w.lookup();
    std::vector<PageGroup> cleaned = clean_groups(w.groups(), lookup, cfg, backend, CorpusMode::pixel, 1, &stats);
    REQUIRE(cleaned.size() == 1);
    CHECK(cleaned[0].members == std::vector<std::string>{"big"});
    CHECK(stats.removed_resolution == 1);
}

TEST_CASE("discarded members are removed before pairing") {
    World w;
    w.annotated.push_back(ann(rec("a", "u", {1, 0}), {"axis0"}, "cap"));
    w.annotated.push_back(ann(rec("b", "u", {0, 1}), {"axis1"}, "cap", AltTextVerdict::discard));
    MockScoringBackend backend(2);
    FilterConfig cfg;
    MiningStats stats;
    auto lookup = w.lookup();
    std::vector<PageGroup> cleaned = clean_groups(w.groups(), lookup, cfg, backend, CorpusMode::synthetic, 1, &stats);
    REQUIRE(cleaned.size() == 1);
    CHECK(cleaned[0].members == std::vector<std::string>{"a"});
    CHECK(stats.removed_discard == 1);
}

TEST_CASE("groups with identical member sets collapse to one") {
    World w;
    w.annotated.push_back(ann(rec("a1", "u1", {1, 0, 0, 0}), {"axis0"}, "cap"));
    w.annotated.push_back(ann(rec("a2", "u1", {0, 1, 0, 0}), {"axis1"}, "cap"));
    w.annotated.push_back(ann(rec("b1", "u2", {1, 0, 0, 0}), {"axis0"}, "cap"));
    w.annotated.push_back(ann(rec("b2", "u2", {0, 1, 0, 0}), {"axis1"}, "cap"));
    MockScoringBackend backend(4);
    FilterConfig cfg;
    MiningStats stats;
    auto lookup = w.lookup();
    std::vector<PageGroup> cleaned = clean_groups(w.groups(), lookup, cfg, backend, CorpusMode::synthetic, 5, &stats);
    CHECK(cleaned.size() == 1);
    CHECK(stats.groups_removed_overlap == 1);

    // same seed, same survivor; the removal is a seeded coin flip
    MiningStats stats2;
    std::vector<PageGroup> cleaned2 = clean_groups(w.groups(), lookup, cfg, backend, CorpusMode::synthetic, 5, &stats2);
    REQUIRE(cleaned2.size() == 1);
    CHECK(cleaned2[0].page_url == cleaned[0].page_url);
}

TEST_CASE("a group of three yields six ordered scored pairs") {
    World w;
    w.annotated.push_back(ann(rec("a", "u", {1, 0, 0}), {"axis0"}, "cap a"));
    w.annotated.push_back(ann(rec("b", "u", {0, 1, 0}), {"axis1"}, "cap b"));
    w.annotated.push_back(ann(rec("c", "u", {0, 0, 1}), {"axis2"}, "cap c"));
    MockScoringBackend backend(3);
    auto lookup = w.lookup();
    std::vector<CandidatePair> pairs = score_pairs(w.groups()[0], lookup, backend);
    CHECK(pairs.size() == 6);
    std::set<std::pair<std::string, std::string>> seen;
    for (const CandidatePair& p : pairs) {
        CHECK(p.query_id != p.target_id);
        seen.insert({p.query_id, p.target_id});
    }
    CHECK(seen.size() == 6);
}

TEST_CASE("identical feature vectors score img_img_sim of one") {
    World w;
    w.annotated.push_back(ann(rec("a", "u", {0.6, 0.8}), {"axis0"}, "same cap"));
    w.annotated.push_back(ann(rec("b", "u", {0.6, 0.8}), {"axis0"}, "same cap"));
    MockScoringBackend backend(2);
    auto lookup = w.lookup();
    std::vector<CandidatePair> pairs = score_pairs(w.groups()[0], lookup, backend);
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].img_img_sim == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(pairs[0].txt_txt_sim == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("members without captions or labels are skipped with a count") {
    World w;
    w.annotated.push_back(ann(rec("a", "u", {1, 0}), {"axis0"}, "cap"));
    w.annotated.push_back(ann(rec("b", "u", {0, 1}), {"axis1"}, ""));  // no caption
    MockScoringBackend backend(2);
    auto lookup = w.lookup();
    size_t skipped = 0;
    std::vector<CandidatePair> pairs = score_pairs(w.groups()[0], lookup, backend, &skipped);
    CHECK(pairs.empty());
    CHECK(skipped == 2);
}

// Monte-Carlo oracle: cosines of independent random unit vectors in R^64
// concentrate near zero with E|cos| about sqrt(2/(pi*64)) ~= 0.0997. The mock
// backend's scores over random features must show the same concentration.
TEST_CASE("random-pair scores concentrate near zero in dimension 64") {
    const int d = 64;
    Rng rng(123);
    auto random_unit = [&] {
        std::vector<double> v(d);
        for (double& x : v) x = rng.normal();
        double n = kernels::norm2(v.data(), d);
        for (double& x : v) x /= n;
        return v;
    };

    double mc_sum = 0.0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        std::vector<double> a = random_unit(), b = random_unit();
        mc_sum += std::abs(kernels::dot(a.data(), b.data(), d));
    }
    double mc_mean = mc_sum / trials;
    CHECK(mc_mean == doctest::Approx(std::sqrt(2.0 / (3.14159265358979 * d))).epsilon(0.05));

    // the backend over random feature vectors reproduces the concentration
    MockScoringBackend backend(d);
    double backend_sum = 0.0;
    double backend_max = 0.0;
    const int pairs = 2000;
    for (int t = 0; t < pairs; ++t) {
        std::vector<double> fa(d), fb(d);
        for (double& x : fa) x = rng.normal();
        for (double& x : fb) x = rng.normal();
        ImageRecord ra = rec("a" + std::to_string(t), "u", fa);
        ImageRecord rb = rec("b" + std::to_string(t), "u", fb);
        std::vector<double> ea = backend.image_embed(ra), eb = backend.image_embed(rb);
        double c = std::abs(kernels::dot(ea.data(), eb.data(), d));
        backend_sum += c;
        backend_max = std::max(backend_max, c);
    }
    double backend_mean = backend_sum / pairs;
    CHECK(backend_mean == doctest::Approx(mc_mean).epsilon(0.15));
    CHECK(backend_max < 0.6);
}

TEST_CASE("filter rule matches the stated acceptance combination") {
    FilterConfig cfg;  // img 0.82, txt 0.90, self 0.32, query 0.18, rule "or"
    // passes: visual relevance or textual relevance, both ica constraints
    CHECK(filter_pairs({scored(0.85, 0.95, 0.40, 0.10)}, cfg).size() == 1);
    // low scores in both aspects
    CHECK(filter_pairs({scored(0.50, 0.50, 0.40, 0.10)}, cfg).empty());
    // target label too similar to the query image
    CHECK(filter_pairs({scored(0.85, 0.95, 0.40, 0.30)}, cfg).empty());
    // one-sided relevance is enough under "or"
    CHECK(filter_pairs({scored(0.85, 0.10, 0.40, 0.10)}, cfg).size() == 1);
    CHECK(filter_pairs({scored(0.10, 0.95, 0.40, 0.10)}, cfg).size() == 1);
    // ica self-similarity too low
    CHECK(filter_pairs({scored(0.85, 0.95, 0.20, 0.10)}, cfg).empty());

    FilterConfig strict = cfg;
    strict.combine_rule = "and";
    CHECK(filter_pairs({scored(0.85, 0.10, 0.40, 0.10)}, strict).empty());
    CHECK(filter_pairs({scored(0.85, 0.95, 0.40, 0.10)}, strict).size() == 1);
}

TEST_CASE("filtering is idempotent and monotone in img_img_min") {
    Rng rng(9);
    std::vector<CandidatePair> pairs;
    for (int i = 0; i < 200; ++i) {
        CandidatePair p = scored(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        p.query_id = "q" + std::to_string(i);
        pairs.push_back(p);
    }
    FilterConfig cfg;
    std::vector<CandidatePair> once = filter_pairs(pairs, cfg);
    std::vector<CandidatePair> twice = filter_pairs(once, cfg);
    REQUIRE(once.size() == twice.size());
    for (size_t i = 0; i < once.size(); ++i) CHECK(once[i].query_id == twice[i].query_id);

    FilterConfig tighter = cfg;
    tighter.img_img_min = 0.95;
    std::vector<CandidatePair> tight = filter_pairs(pairs, tighter);
    std::set<std::string> loose_ids;
    for (const CandidatePair& p : once) loose_ids.insert(p.query_id);
    for (const CandidatePair& p : tight) CHECK(loose_ids.count(p.query_id) == 1);
}

TEST_CASE("per-group cap keeps at most three with unique queries") {
    FilterConfig cfg;
    std::vector<CandidatePair> pairs;
    for (int i = 0; i < 5; ++i) {
        CandidatePair p = scored(0.9 - 0.01 * i, 0.95, 0.4, 0.1);
        p.query_id = "q" + std::to_string(i);
        p.target_id = "t" + std::to_string(i);
        pairs.push_back(p);
    }
    std::vector<CandidatePair> capped = cap_per_group(pairs, cfg, 3);
    CHECK(capped.size() == 3);
    // highest combined scores survive
    CHECK(capped[0].query_id == "q0");
    CHECK(capped[1].query_id == "q1");
    CHECK(capped[2].query_id == "q2");

    // below the cap nothing happens
    std::vector<CandidatePair> two(pairs.begin(), pairs.begin() + 2);
    CHECK(cap_per_group(two, cfg, 3).size() == 2);
}

TEST_CASE("cap enforces distinct query images within a group") {
    FilterConfig cfg;
    std::vector<CandidatePair> pairs;
    for (int i = 0; i < 4; ++i) {
        CandidatePair p = scored(0.9 - 0.01 * i, 0.95, 0.4, 0.1);
        p.query_id = "same";
        p.target_id = "t" + std::to_string(i);
        pairs.push_back(p);
    }
    std::vector<CandidatePair> capped = cap_per_group(pairs, cfg, 3);
    REQUIRE(capped.size() == 1);
    CHECK(capped[0].target_id == "t0");
}

TEST_CASE("equal-score ties resolve identically under identical seeds") {
    FilterConfig cfg;
    std::vector<CandidatePair> pairs;
    for (int i = 0; i < 6; ++i) {
        CandidatePair p = scored(0.9, 0.95, 0.4, 0.1);
        p.query_id = "q" + std::to_string(i);
        p.target_id = "t" + std::to_string(i);
        pairs.push_back(p);
    }
    auto a = cap_per_group(pairs, cfg, 7);
    auto b = cap_per_group(pairs, cfg, 7);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].query_id == b[i].query_id);
}

TEST_CASE("full pipeline is deterministic and pairs respect their groups") {
    World w;
    Rng rng(31);
    for (int g = 0; g < 8; ++g) {
        std::string url = "u" + std::to_string(g);
        for (int m = 0; m < 4; ++m) {
            std::vector<double> f(8, 0.0);
            f[g % 8] = 1.0;
            for (double& x : f) x += 0.2 * rng.normal();
            std::string axis = "axis" + std::to_string(g % 8);
            w.annotated.push_back(
                ann(rec("g" + std::to_string(g) + "m" + std::to_string(m), url, f), {axis}, "caption " + url));
        }
    }
    std::vector<ImageRecord> records;
    for (const AnnotatedRecord& a : w.annotated) records.push_back(a.record);

    MockScoringBackend backend(8);
    FilterConfig cfg;
    cfg.img_img_min = 0.5;  // loosened so this fuzz corpus yields pairs
    cfg.ica_self_min = 0.2;
    cfg.ica_query_max = 0.9;

    MiningResult r1 = mine_pairs(records, w.annotated, cfg, backend, CorpusMode::synthetic, 99);
    MiningResult r2 = mine_pairs(records, w.annotated, cfg, backend, CorpusMode::synthetic, 99);
    REQUIRE(r1.pairs.size() == r2.pairs.size());
    for (size_t i = 0; i < r1.pairs.size(); ++i) {
        CHECK(r1.pairs[i].query_id == r2.pairs[i].query_id);
        CHECK(r1.pairs[i].target_id == r2.pairs[i].target_id);
        CHECK(r1.pairs[i].img_img_sim == r2.pairs[i].img_img_sim);
    }
    CHECK(r1.stats.pairs_final == r1.pairs.size());

    // every retained pair joins two surviving members of one page
    for (const CandidatePair& p : r1.pairs) {
        CHECK(p.query_id.substr(0, 2) == p.target_id.substr(0, 2));
    }

    // per-group cap holds
    std::map<std::string, int> per_url;
    for (const CandidatePair& p : r1.pairs) per_url[p.page_url]++;
    for (const auto& [url, count] : per_url) CHECK(count <= cfg.max_pairs_per_group);
}

TEST_CASE("config validation rejects out-of-range thresholds") {
    FilterConfig cfg;
    cfg.img_img_min = 1.01;
    CHECK_THROWS(cfg.validate());
    FilterConfig cfg2;
    cfg2.max_pairs_per_group = 0;
    CHECK_THROWS(cfg2.validate());
    FilterConfig cfg3;
    cfg3.combine_rule = "xor";
    CHECK_THROWS(cfg3.validate());
}

TEST_CASE("pairs jsonl round trip") {
    std::vector<CandidatePair> pairs = {scored(0.9, 0.8, 0.5, 0.1, "pageA")};
    pairs[0].query_id = "qq";
    pairs[0].target_id = "tt";
    auto path = (std::filesystem::temp_directory_path() / "pairs.jsonl").string();
    write_pairs_jsonl(pairs, path);
    std::vector<CandidatePair> back = read_pairs_jsonl(path);
    REQUIRE(back.size() == 1);
    CHECK(back[0].query_id == "qq");
    CHECK(back[0].page_url == "pageA");
    CHECK(back[0].img_img_sim == doctest::Approx(0.9));
}
