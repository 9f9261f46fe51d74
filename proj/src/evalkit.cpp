#include "cirkit/evalkit.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "cirkit/kernels.h"
#include "cirkit/util.h"

namespace cirkit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Index
// ---------------------------------------------------------------------------

RetrievalIndex build_index_from_vectors(std::vector<std::string> ids, std::vector<double> vectors, int dim) {
    RetrievalIndex index;
    index.item_ids = std::move(ids);
    index.vectors = std::move(vectors);
    index.dim = dim;
    if (index.vectors.size() != index.item_ids.size() * static_cast<size_t>(dim)) {
        throw std::runtime_error("index vector storage does not match item count");
    }
    for (size_t i = 0; i < index.item_ids.size(); ++i) {
        if (!index.row_of.emplace(index.item_ids[i], i).second) {
            throw std::runtime_error("duplicate item_id in index: " + index.item_ids[i]);
        }
        double n = kernels::norm2(index.row(i), dim);
        if (std::abs(n - 1.0) > 1e-6) {
            throw std::runtime_error("index row for " + index.item_ids[i] + " is not unit norm");
        }
    }
    return index;
}

RetrievalIndex build_index(const std::vector<const ImageRecord*>& items, const FusionModel& model) {
    if (items.empty()) throw std::runtime_error("cannot build an index from zero items");
    int dim = model.config().dim;
    std::vector<std::string> ids(items.size());
    for (size_t i = 0; i < items.size(); ++i) ids[i] = items[i]->image_id;
    std::vector<double> vectors(items.size() * static_cast<size_t>(dim));
    encode_batch(model, items, vectors.data());
    return build_index_from_vectors(std::move(ids), std::move(vectors), dim);
}

namespace {
constexpr char kIndexMagic[4] = {'I', 'X', 'V', '1'};
}

void save_index(const RetrievalIndex& index, const std::string& path) {
    json manifest;
    manifest["dim"] = index.dim;
    manifest["item_ids"] = index.item_ids;
    std::string blob = manifest.dump();
    std::string out;
    out.append(kIndexMagic, 4);
    uint64_t len = blob.size();
    out.append(reinterpret_cast<const char*>(&len), 8);
    out += blob;
    std::vector<float> f32(index.vectors.size());
    for (size_t i = 0; i < f32.size(); ++i) f32[i] = static_cast<float>(index.vectors[i]);
    out.append(reinterpret_cast<const char*>(f32.data()), f32.size() * 4);
    atomic_write_file(path, out);
}

RetrievalIndex load_index(const std::string& path) {
    std::string blob = read_file(path);
    if (blob.size() < 12 || std::memcmp(blob.data(), kIndexMagic, 4) != 0) {
        throw std::runtime_error("not an index snapshot: " + path);
    }
    uint64_t len;
    std::memcpy(&len, blob.data() + 4, 8);
    json manifest = json::parse(blob.substr(12, len));
    int dim = manifest.at("dim").get<int>();
    std::vector<std::string> ids = manifest.at("item_ids").get<std::vector<std::string>>();
    size_t count = ids.size() * static_cast<size_t>(dim);
    if (blob.size() != 12 + len + count * 4) throw std::runtime_error("index payload size mismatch");
    std::vector<float> f32(count);
    std::memcpy(f32.data(), blob.data() + 12 + len, count * 4);
    std::vector<double> vectors(count);
    for (size_t i = 0; i < count; ++i) vectors[i] = static_cast<double>(f32[i]);

    RetrievalIndex index;
    index.item_ids = std::move(ids);
    index.vectors = std::move(vectors);
    index.dim = dim;
    for (size_t i = 0; i < index.item_ids.size(); ++i) index.row_of.emplace(index.item_ids[i], i);
    return index;
}

// ---------------------------------------------------------------------------
// Ranking and metrics
// ---------------------------------------------------------------------------

std::vector<std::string> rank(const RetrievalIndex& index, const std::vector<double>& query_vec,
                              const std::vector<std::string>* subset) {
    if (static_cast<int>(query_vec.size()) != index.dim) throw std::runtime_error("query vector dim mismatch");

    std::vector<size_t> candidates;
    if (subset) {
        candidates.reserve(subset->size());
        for (const std::string& id : *subset) {
            auto it = index.row_of.find(id);
            if (it == index.row_of.end()) throw std::runtime_error("subset id not in index: " + id);
            candidates.push_back(it->second);
        }
    } else {
        candidates.resize(index.size());
        for (size_t i = 0; i < candidates.size(); ++i) candidates[i] = i;
    }

    std::vector<std::pair<double, size_t>> scored(candidates.size());
    for (size_t c = 0; c < candidates.size(); ++c) {
        scored[c] = {kernels::dot(query_vec.data(), index.row(candidates[c]), index.dim), candidates[c]};
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return index.item_ids[a.second] < index.item_ids[b.second];
    });
    std::vector<std::string> out(scored.size());
    for (size_t c = 0; c < scored.size(); ++c) out[c] = index.item_ids[scored[c].second];
    return out;
}

namespace {
std::unordered_set<std::string> gt_set(const QueryCase& qc) {
    return std::unordered_set<std::string>(qc.gt_ids.begin(), qc.gt_ids.end());
}
}  // namespace

double recall_at_k(const std::vector<std::vector<std::string>>& rankings, const std::vector<QueryCase>& cases, int k) {
    if (k < 1) throw std::runtime_error("k must be >= 1");
    if (cases.empty()) return 0.0;
    double hits = 0.0;
    for (size_t c = 0; c < cases.size(); ++c) {
        std::unordered_set<std::string> gt = gt_set(cases[c]);
        size_t limit = std::min(rankings[c].size(), static_cast<size_t>(k));
        for (size_t i = 0; i < limit; ++i) {
            if (gt.count(rankings[c][i])) {
                hits += 1.0;
                break;
            }
        }
    }
    return hits / static_cast<double>(cases.size());
}

double precision_at_k(const std::vector<std::vector<std::string>>& rankings, const std::vector<QueryCase>& cases,
                      int k) {
    if (k < 1) throw std::runtime_error("k must be >= 1");
    if (cases.empty()) return 0.0;
    double total = 0.0;
    for (size_t c = 0; c < cases.size(); ++c) {
        std::unordered_set<std::string> gt = gt_set(cases[c]);
        size_t limit = std::min(rankings[c].size(), static_cast<size_t>(k));
        int rel = 0;
        for (size_t i = 0; i < limit; ++i) {
            if (gt.count(rankings[c][i])) ++rel;
        }
        total += static_cast<double>(rel) / static_cast<double>(k);
    }
    return total / static_cast<double>(cases.size());
}

double map_at_k(const std::vector<std::vector<std::string>>& rankings, const std::vector<QueryCase>& cases, int k) {
    if (k < 1) throw std::runtime_error("k must be >= 1");
    if (cases.empty()) return 0.0;
    double total = 0.0;
    for (size_t c = 0; c < cases.size(); ++c) {
        std::unordered_set<std::string> gt = gt_set(cases[c]);
        size_t limit = std::min(rankings[c].size(), static_cast<size_t>(k));
        int rel = 0;
        double ap = 0.0;
        for (size_t i = 0; i < limit; ++i) {
            if (gt.count(rankings[c][i])) {
                ++rel;
                ap += static_cast<double>(rel) / static_cast<double>(i + 1);
            }
        }
        double denom = static_cast<double>(std::min<size_t>(gt.size(), static_cast<size_t>(k)));
        total += denom > 0 ? ap / denom : 0.0;
    }
    return total / static_cast<double>(cases.size());
}

// ---------------------------------------------------------------------------
// Task adapters
// ---------------------------------------------------------------------------

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "cir") return TaskKind::cir;
    if (s == "domain_transfer") return TaskKind::domain_transfer;
    if (s == "sbir") return TaskKind::sbir;
    if (s == "text_to_image") return TaskKind::text_to_image;
    if (s == "image_to_text") return TaskKind::image_to_text;
    throw std::runtime_error("unknown task: " + s + " (cir|domain_transfer|sbir|text_to_image|image_to_text)");
}

std::string to_string(TaskKind task) {
    switch (task) {
        case TaskKind::cir: return "cir";
        case TaskKind::domain_transfer: return "domain_transfer";
        case TaskKind::sbir: return "sbir";
        case TaskKind::text_to_image: return "text_to_image";
        case TaskKind::image_to_text: return "image_to_text";
    }
    return "?";
}

namespace {

constexpr const char* kSbirInstruction = "find a natural image of it";
constexpr const char* kDomainTemplate = "find this object in {domain}";

std::string domain_instruction(const std::string& domain) {
    std::string s = kDomainTemplate;
    size_t pos = s.find("{domain}");
    s.replace(pos, 8, domain);
    return s;
}

// schema checks run for every case before any ranking
void validate_dataset(TaskKind task, const TaskDataset& dataset,
                      const std::unordered_map<std::string, const ImageRecord*>& record_pool,
                      const std::unordered_set<std::string>& index_ids) {
    if (dataset.cases.empty()) throw std::runtime_error("dataset has no query cases");
    bool image_index = task != TaskKind::image_to_text;
    if (image_index && dataset.items.empty()) throw std::runtime_error("dataset has no index items");
    if (task == TaskKind::image_to_text && dataset.text_items.empty()) {
        throw std::runtime_error("image_to_text requires text_items");
    }
    for (const QueryCase& qc : dataset.cases) {
        if (qc.gt_ids.empty()) throw std::runtime_error("query case with empty gt_ids");
        if (task == TaskKind::text_to_image) {
            if (qc.instruction.empty()) throw std::runtime_error("text_to_image case needs an instruction");
        } else {
            if (qc.query_image_id.empty() || !record_pool.count(qc.query_image_id)) {
                throw std::runtime_error("query image not found: " + qc.query_image_id);
            }
        }
        if (task == TaskKind::domain_transfer && qc.domain.empty()) {
            throw std::runtime_error("domain_transfer case lacks a domain keyword");
        }
        for (const std::string& gt : qc.gt_ids) {
            if (!index_ids.count(gt)) throw std::runtime_error("gt id not in index: " + gt);
        }
        if (!qc.subset_ids.empty()) {
            std::unordered_set<std::string> subset(qc.subset_ids.begin(), qc.subset_ids.end());
            for (const std::string& gt : qc.gt_ids) {
                if (!subset.count(gt)) throw std::runtime_error("gt id outside the case subset: " + gt);
            }
        }
    }
}

}  // namespace

MetricsReport run_task(TaskKind task, const TaskDataset& dataset, const FusionModel& model, const EvalConfig& config) {
    // record pool for query lookups: queries first, then index items
    std::unordered_map<std::string, const ImageRecord*> record_pool;
    for (const ImageRecord& rec : dataset.queries) record_pool.emplace(rec.image_id, &rec);
    for (const ImageRecord& rec : dataset.items) record_pool.emplace(rec.image_id, &rec);

    // index
    RetrievalIndex index;
    if (task == TaskKind::image_to_text) {
        std::vector<std::string> ids;
        std::vector<double> vectors;
        int dim = model.config().dim;
        ids.reserve(dataset.text_items.size());
        vectors.resize(dataset.text_items.size() * static_cast<size_t>(dim));
        kernels::parallel_for(dataset.text_items.size(), [&](size_t i) {
            std::vector<double> v = model.backbone_text_embed(dataset.text_items[i].second);
            std::copy_n(v.data(), dim, vectors.data() + i * static_cast<size_t>(dim));
        });
        for (const auto& [id, text] : dataset.text_items) ids.push_back(id);
        index = build_index_from_vectors(std::move(ids), std::move(vectors), dim);
    } else if (task == TaskKind::text_to_image) {
        std::vector<std::string> ids;
        std::vector<double> vectors;
        int dim = model.config().dim;
        vectors.resize(dataset.items.size() * static_cast<size_t>(dim));
        kernels::parallel_for(dataset.items.size(), [&](size_t i) {
            std::vector<double> v = model.backbone_image_embed(dataset.items[i]);
            std::copy_n(v.data(), dim, vectors.data() + i * static_cast<size_t>(dim));
        });
        for (const ImageRecord& rec : dataset.items) ids.push_back(rec.image_id);
        index = build_index_from_vectors(std::move(ids), std::move(vectors), dim);
    } else {
        std::vector<const ImageRecord*> items;
        items.reserve(dataset.items.size());
        for (const ImageRecord& rec : dataset.items) items.push_back(&rec);
        index = build_index(items, model);
    }

    std::unordered_set<std::string> index_ids(index.item_ids.begin(), index.item_ids.end());
    validate_dataset(task, dataset, record_pool, index_ids);

    // rank every case under the task's instruction convention
    const std::vector<QueryCase>& cases = dataset.cases;
    std::vector<std::vector<std::string>> rankings(cases.size());
    std::vector<std::vector<std::string>> subset_rankings(cases.size());
    kernels::parallel_for(cases.size(), [&](size_t c) {
        const QueryCase& qc = cases[c];
        std::vector<double> q;
        switch (task) {
            case TaskKind::cir:
                q = model.encode(*record_pool.at(qc.query_image_id), qc.instruction);
                break;
            case TaskKind::domain_transfer:
                q = model.encode(*record_pool.at(qc.query_image_id), domain_instruction(qc.domain));
                break;
            case TaskKind::sbir:
                q = model.encode(*record_pool.at(qc.query_image_id), kSbirInstruction);
                break;
            case TaskKind::text_to_image:
                q = model.backbone_text_embed(qc.instruction);
                break;
            case TaskKind::image_to_text:
                q = model.backbone_image_embed(*record_pool.at(qc.query_image_id));
                break;
        }
        rankings[c] = rank(index, q);
        if (!qc.subset_ids.empty()) subset_rankings[c] = rank(index, q, &qc.subset_ids);
    });

    MetricsReport report;
    report.task = to_string(task);
    report.query_count = cases.size();
    for (int k : config.recall_ks) report.metrics["R@" + std::to_string(k)] = recall_at_k(rankings, cases, k);
    for (int k : config.precision_ks) report.metrics["P@" + std::to_string(k)] = precision_at_k(rankings, cases, k);
    for (int k : config.map_ks) report.metrics["mAP@" + std::to_string(k)] = map_at_k(rankings, cases, k);

    // subset retrieval over the cases that define subsets
    std::vector<QueryCase> sub_cases;
    std::vector<std::vector<std::string>> sub_ranks;
    for (size_t c = 0; c < cases.size(); ++c) {
        if (!cases[c].subset_ids.empty()) {
            sub_cases.push_back(cases[c]);
            sub_ranks.push_back(subset_rankings[c]);
        }
    }
    if (!sub_cases.empty()) {
        for (int k : config.recall_ks) {
            report.metrics["R_s@" + std::to_string(k)] = recall_at_k(sub_ranks, sub_cases, k);
        }
    }

    report.config_echo["index_size"] = std::to_string(index.size());
    report.config_echo["subset_cases"] = std::to_string(sub_cases.size());
    return report;
}

double self_retrieval_rate(const RetrievalIndex& index, const std::vector<QueryCase>& cases,
                           const std::unordered_map<std::string, const ImageRecord*>& records,
                           const FusionModel& model) {
    if (cases.empty()) return 0.0;
    for (const QueryCase& qc : cases) {
        if (!index.row_of.count(qc.query_image_id)) {
            throw std::runtime_error("self_retrieval_rate: query image not in index: " + qc.query_image_id);
        }
        if (!records.count(qc.query_image_id)) {
            throw std::runtime_error("self_retrieval_rate: query image without a record: " + qc.query_image_id);
        }
    }
    std::vector<int> hits(cases.size(), 0);
    kernels::parallel_for(cases.size(), [&](size_t c) {
        const QueryCase& qc = cases[c];
        std::vector<double> q = model.encode(*records.at(qc.query_image_id), qc.instruction);
        std::vector<std::string> ranking = rank(index, q);
        hits[c] = !ranking.empty() && ranking.front() == qc.query_image_id;
    });
    double total = 0.0;
    for (int h : hits) total += h;
    return total / static_cast<double>(cases.size());
}

// ---------------------------------------------------------------------------
// IO
// ---------------------------------------------------------------------------

std::vector<QueryCase> read_cases_jsonl(const std::string& path) {
    std::vector<QueryCase> cases;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        if (line.empty()) return;
        try {
            json j = json::parse(line);
            QueryCase qc;
            if (j.contains("query_image_id")) qc.query_image_id = j.at("query_image_id").get<std::string>();
            if (j.contains("instruction")) qc.instruction = j.at("instruction").get<std::string>();
            qc.gt_ids = j.at("gt_ids").get<std::vector<std::string>>();
            if (j.contains("subset_ids")) qc.subset_ids = j.at("subset_ids").get<std::vector<std::string>>();
            if (j.contains("domain")) qc.domain = j.at("domain").get<std::string>();
            if (qc.gt_ids.empty()) throw std::runtime_error("gt_ids empty");
            cases.push_back(std::move(qc));
        } catch (const std::exception& e) {
            throw std::runtime_error("bad query case line " + std::to_string(lineno) + ": " + e.what());
        }
    });
    return cases;
}

void write_cases_jsonl(const std::vector<QueryCase>& cases, const std::string& path) {
    std::string out;
    for (const QueryCase& qc : cases) {
        json j;
        j["query_image_id"] = qc.query_image_id;
        j["instruction"] = qc.instruction;
        j["gt_ids"] = qc.gt_ids;
        if (!qc.subset_ids.empty()) j["subset_ids"] = qc.subset_ids;
        if (!qc.domain.empty()) j["domain"] = qc.domain;
        out += j.dump();
        out += '\n';
    }
    atomic_write_file(path, out);
}

std::string metrics_report_to_json(const MetricsReport& report) {
    json j;
    j["task"] = report.task;
    j["query_count"] = report.query_count;
    j["metrics"] = report.metrics;
    j["config"] = report.config_echo;
    return j.dump(2) + "\n";
}

}  // namespace cirkit
