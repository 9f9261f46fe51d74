#include "cirkit/synth.h"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "cirkit/kernels.h"
#include "cirkit/util.h"

namespace cirkit {

using nlohmann::json;

void SynthConfig::validate() const {
    if (feature_dim < 4) throw std::runtime_error("feature_dim must be >= 4");
    if (n_attrs < 2) throw std::runtime_error("n_attrs must be >= 2");
    if (n_attrs >= feature_dim) throw std::runtime_error("n_attrs must leave room for object latents");
    if (attrs_per_page < 2 || attrs_per_page > n_attrs) {
        throw std::runtime_error("attrs_per_page must lie in [2, n_attrs]");
    }
    if (n_train_pages < 1 || n_triplets < 1 || n_index_objects < 1 || n_eval_queries < 1) {
        throw std::runtime_error("counts must be >= 1");
    }
    if (subset_size < 2) throw std::runtime_error("subset_size must be >= 2");
}

namespace {

const char* kBaseAttrNames[] = {"natural", "sketch",  "cartoon", "origami", "toy",
                                "sculpture", "crimson", "azure",   "wooden",  "vintage"};
constexpr int kBaseAttrCount = 10;
const int kDomainAttrs[] = {2, 3, 4, 5};  // cartoon, origami, toy, sculpture

std::vector<std::string> make_attr_names(int n) {
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) {
        if (i < kBaseAttrCount) {
            names.push_back(kBaseAttrNames[i]);
        } else {
            names.push_back("attr" + std::to_string(i));
        }
    }
    return names;
}

// object latent in the coordinates above the attribute axes
std::vector<double> object_latent(int feature_dim, int n_attrs, Rng& rng) {
    std::vector<double> v(feature_dim, 0.0);
    for (int i = n_attrs; i < feature_dim; ++i) v[i] = rng.normal();
    double n = kernels::norm2(v.data(), feature_dim);
    for (double& x : v) x /= n;
    return v;
}

std::vector<double> render(const std::vector<double>& object, int attr, const SynthConfig& cfg, Rng& rng) {
    std::vector<double> f = object;
    f[attr] += cfg.attr_scale;
    for (double& x : f) x += cfg.noise * rng.normal();
    return f;
}

ImageRecord make_record(std::string id, std::string page, std::vector<double> features) {
    ImageRecord rec;
    rec.image_id = std::move(id);
    rec.page_url = std::move(page);
    rec.width = 1;
    rec.height = 1;
    rec.features = std::move(features);
    rec.alt_text = "synthetic rendering " + rec.image_id;
    return rec;
}

const char* kTrainFrames[] = {"find a %s version of it", "same object but %s", "find this object in %s",
                              "show it as %s"};

std::string frame_instruction(uint64_t pick, const std::string& attr) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), kTrainFrames[pick % 4], attr.c_str());
    return buf;
}

}  // namespace

SynthWorld generate_synth_world(const SynthConfig& cfg) {
    cfg.validate();
    SynthWorld world;
    world.attr_names = make_attr_names(cfg.n_attrs);
    for (int a = 0; a < cfg.n_attrs; ++a) world.token_axis_aliases[world.attr_names[a]] = a;

    // ---- training pages -------------------------------------------------
    Rng rng(hash_combine(cfg.seed, fnv1a("synth-train")));
    std::vector<std::vector<int>> page_attrs(cfg.n_train_pages);
    std::vector<std::unordered_map<int, std::string>> page_attr_ids(cfg.n_train_pages);
    for (int p = 0; p < cfg.n_train_pages; ++p) {
        std::vector<double> object = object_latent(cfg.feature_dim, cfg.n_attrs, rng);
        std::vector<int> attrs(cfg.n_attrs);
        for (int a = 0; a < cfg.n_attrs; ++a) attrs[a] = a;
        rng.shuffle(attrs);
        attrs.resize(cfg.attrs_per_page);
        page_attrs[p] = attrs;
        std::string page = "synth://page" + std::to_string(p);
        for (int a : attrs) {
            std::string id = "p" + std::to_string(p) + "-" + world.attr_names[a];
            world.train_records.push_back(make_record(id, page, render(object, a, cfg, rng)));
            page_attr_ids[p][a] = id;

            AnnotatedRecord ann;
            ann.record = world.train_records.back();
            ann.record.ica_labels = {world.attr_names[a]};
            ann.record.caption = "object" + std::to_string(p) + " photo";
            ann.verdict = AltTextVerdict::keep;
            world.annotations.push_back(std::move(ann));
        }
    }

    // planted triplets: same page, attribute change named in the instruction
    Rng trip_rng(hash_combine(cfg.seed, fnv1a("synth-triplets")));
    for (int t = 0; t < cfg.n_triplets; ++t) {
        int p = static_cast<int>(trip_rng.uniform_int(cfg.n_train_pages));
        const std::vector<int>& attrs = page_attrs[p];
        int ai = static_cast<int>(trip_rng.uniform_int(attrs.size()));
        int bi = static_cast<int>(trip_rng.uniform_int(attrs.size() - 1));
        if (bi >= ai) ++bi;
        int a = attrs[ai], b = attrs[bi];
        Triplet tri;
        tri.query_id = page_attr_ids[p][a];
        tri.target_id = page_attr_ids[p][b];
        tri.instruction = frame_instruction(trip_rng.next_u64(), world.attr_names[b]);
        tri.provenance = "template_based";
        world.triplets.push_back(std::move(tri));
    }

    // ---- evaluation world ------------------------------------------------
    Rng eval_rng(hash_combine(cfg.seed, fnv1a("synth-eval")));
    std::vector<std::vector<double>> objects(cfg.n_index_objects);
    std::vector<ImageRecord> items;
    auto item_id = [&](int j, int a) { return "obj" + std::to_string(j) + "-" + world.attr_names[a]; };
    for (int j = 0; j < cfg.n_index_objects; ++j) {
        objects[j] = object_latent(cfg.feature_dim, cfg.n_attrs, eval_rng);
        for (int a = 0; a < cfg.n_attrs; ++a) {
            items.push_back(make_record(item_id(j, a), "synth://index", render(objects[j], a, cfg, eval_rng)));
        }
    }

    auto fresh_query = [&](const char* prefix, int c, int j, int a) {
        return make_record(std::string(prefix) + std::to_string(c), "synth://query",
                           render(objects[j], a, cfg, eval_rng));
    };

    TaskDataset base;
    base.items = items;

    // composed retrieval: query rendering of (object, a), target (object, b)
    world.cir = base;
    for (int c = 0; c < cfg.n_eval_queries; ++c) {
        int j = static_cast<int>(eval_rng.uniform_int(cfg.n_index_objects));
        int a = static_cast<int>(eval_rng.uniform_int(cfg.n_attrs));
        int b = static_cast<int>(eval_rng.uniform_int(cfg.n_attrs - 1));
        if (b >= a) ++b;
        ImageRecord q = fresh_query("q", c, j, a);
        QueryCase qc;
        qc.query_image_id = q.image_id;
        qc.instruction = frame_instruction(eval_rng.next_u64(), world.attr_names[b]);
        qc.gt_ids = {item_id(j, b)};
        world.cir.queries.push_back(std::move(q));
        world.cir.cases.push_back(std::move(qc));
    }

    // domain transfer analog over the style attributes available
    std::vector<int> domain_attrs;
    for (int d : kDomainAttrs) {
        if (d < cfg.n_attrs) domain_attrs.push_back(d);
    }
    if (domain_attrs.empty()) domain_attrs.push_back(cfg.n_attrs - 1);
    world.domain_transfer = base;
    for (int c = 0; c < cfg.n_eval_queries; ++c) {
        int j = static_cast<int>(eval_rng.uniform_int(cfg.n_index_objects));
        int d = domain_attrs[eval_rng.uniform_int(domain_attrs.size())];
        ImageRecord q = fresh_query("dq", c, j, 0);  // natural rendering as the query
        QueryCase qc;
        qc.query_image_id = q.image_id;
        qc.domain = world.attr_names[d];
        qc.gt_ids = {item_id(j, d)};
        world.domain_transfer.queries.push_back(std::move(q));
        world.domain_transfer.cases.push_back(std::move(qc));
    }

    // sketch-to-natural analog with the fixed instruction convention
    world.sbir = base;
    for (int c = 0; c < cfg.n_eval_queries; ++c) {
        int j = static_cast<int>(eval_rng.uniform_int(cfg.n_index_objects));
        ImageRecord q = fresh_query("sq", c, j, 1);  // sketch rendering
        QueryCase qc;
        qc.query_image_id = q.image_id;
        qc.gt_ids = {item_id(j, 0)};
        world.sbir.queries.push_back(std::move(q));
        world.sbir.cases.push_back(std::move(qc));
    }

    // subset retrieval: same cir protocol over a small per-query candidate set
    world.subset_cir = base;
    for (int c = 0; c < cfg.n_eval_queries; ++c) {
        int j = static_cast<int>(eval_rng.uniform_int(cfg.n_index_objects));
        int a = static_cast<int>(eval_rng.uniform_int(cfg.n_attrs));
        int b = static_cast<int>(eval_rng.uniform_int(cfg.n_attrs - 1));
        if (b >= a) ++b;
        ImageRecord q = fresh_query("ssq", c, j, a);
        QueryCase qc;
        qc.query_image_id = q.image_id;
        qc.instruction = frame_instruction(eval_rng.next_u64(), world.attr_names[b]);
        qc.gt_ids = {item_id(j, b)};
        qc.subset_ids = {item_id(j, b)};
        while (static_cast<int>(qc.subset_ids.size()) < cfg.subset_size) {
            int oj = static_cast<int>(eval_rng.uniform_int(cfg.n_index_objects));
            int oa = static_cast<int>(eval_rng.uniform_int(cfg.n_attrs));
            std::string cand = item_id(oj, oa);
            bool dup = false;
            for (const std::string& s : qc.subset_ids) dup = dup || s == cand;
            if (!dup) qc.subset_ids.push_back(cand);
        }
        world.subset_cir.queries.push_back(std::move(q));
        world.subset_cir.cases.push_back(std::move(qc));
    }

    // backbone-only tasks over item captions
    auto caption_of = [&](int j, int a) { return "object" + std::to_string(j) + " " + world.attr_names[a] + " item"; };
    world.text_to_image = base;
    world.image_to_text = base;
    for (int j = 0; j < cfg.n_index_objects; ++j) {
        for (int a = 0; a < cfg.n_attrs; ++a) {
            world.image_to_text.text_items.emplace_back("cap-" + item_id(j, a), caption_of(j, a));
        }
    }
    int t2i_count = std::min(cfg.n_eval_queries, cfg.n_index_objects * cfg.n_attrs);
    for (int c = 0; c < t2i_count; ++c) {
        int j = static_cast<int>(eval_rng.uniform_int(cfg.n_index_objects));
        int a = static_cast<int>(eval_rng.uniform_int(cfg.n_attrs));
        QueryCase t2i;
        t2i.instruction = caption_of(j, a);
        t2i.gt_ids = {item_id(j, a)};
        world.text_to_image.cases.push_back(std::move(t2i));

        QueryCase i2t;
        i2t.query_image_id = item_id(j, a);
        i2t.gt_ids = {"cap-" + item_id(j, a)};
        world.image_to_text.cases.push_back(std::move(i2t));
    }

    return world;
}

void write_annotations_jsonl(const std::vector<AnnotatedRecord>& annotations, const std::string& path) {
    std::string out;
    for (const AnnotatedRecord& ann : annotations) {
        json j;
        j["image_id"] = ann.record.image_id;
        j["verdict"] = to_string(ann.verdict);
        j["ica_labels"] = ann.record.ica_labels;
        j["caption"] = ann.record.caption;
        out += j.dump();
        out += '\n';
    }
    atomic_write_file(path, out);
}

void write_aliases_json(const std::unordered_map<std::string, int>& aliases, const std::string& path) {
    json j = json::object();
    for (const auto& [token, axis] : aliases) j[token] = axis;
    atomic_write_file(path, j.dump(2) + "\n");
}

std::unordered_map<std::string, int> read_aliases_json(const std::string& path) {
    json j = json::parse(read_file(path));
    std::unordered_map<std::string, int> aliases;
    for (auto it = j.begin(); it != j.end(); ++it) aliases[it.key()] = it.value().get<int>();
    return aliases;
}

}  // namespace cirkit
