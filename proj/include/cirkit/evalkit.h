#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "cirkit/corpus.h"
#include "cirkit/model.h"

namespace cirkit {

// Exact brute-force index; built once, read-only afterwards.
struct RetrievalIndex {
    std::vector<std::string> item_ids;
    std::vector<double> vectors;  // n x dim, rows unit-norm
    int dim = 0;
    std::unordered_map<std::string, size_t> row_of;

    size_t size() const { return item_ids.size(); }
    const double* row(size_t i) const { return vectors.data() + i * static_cast<size_t>(dim); }
};

// Embeds every item with encode_target (empty-text placeholder). Duplicate
// item ids are an error.
RetrievalIndex build_index(const std::vector<const ImageRecord*>& items, const FusionModel& model);
RetrievalIndex build_index_from_vectors(std::vector<std::string> ids, std::vector<double> vectors, int dim);

void save_index(const RetrievalIndex& index, const std::string& path);
RetrievalIndex load_index(const std::string& path);

struct QueryCase {
    std::string query_image_id;
    std::string instruction;
    std::vector<std::string> gt_ids;      // nonempty
    std::vector<std::string> subset_ids;  // optional candidate restriction
    std::string domain;                   // domain_transfer only
};

// Items sorted by descending cosine, ties broken by ascending item_id.
// subset, when nonempty, restricts candidates; unknown subset ids throw.
std::vector<std::string> rank(const RetrievalIndex& index, const std::vector<double>& query_vec,
                              const std::vector<std::string>* subset = nullptr);

// Metrics over per-case rankings. rankings[i] belongs to cases[i].
double recall_at_k(const std::vector<std::vector<std::string>>& rankings, const std::vector<QueryCase>& cases, int k);
double precision_at_k(const std::vector<std::vector<std::string>>& rankings, const std::vector<QueryCase>& cases,
                      int k);
// AP@k normalized by min(|gt|, k), averaged over cases.
double map_at_k(const std::vector<std::vector<std::string>>& rankings, const std::vector<QueryCase>& cases, int k);

enum class TaskKind { cir, domain_transfer, sbir, text_to_image, image_to_text };

TaskKind task_kind_from_string(const std::string& s);
std::string to_string(TaskKind task);

struct TaskDataset {
    std::vector<ImageRecord> items;    // index pool (image tasks)
    std::vector<ImageRecord> queries;  // query images not in the pool
    std::vector<std::pair<std::string, std::string>> text_items;  // (id, text) pool for image_to_text
    std::vector<QueryCase> cases;
};

struct EvalConfig {
    std::vector<int> recall_ks = {1, 5, 10};
    std::vector<int> precision_ks = {5};
    std::vector<int> map_ks = {5};
};

struct MetricsReport {
    std::string task;
    size_t query_count = 0;
    std::map<std::string, double> metrics;
    std::map<std::string, std::string> config_echo;
};

// Task conventions:
//   cir             query = encode(query image, case instruction)
//   domain_transfer instruction template "find this object in {domain}"
//   sbir            fixed instruction "find a natural image of it"
//   text_to_image   backbone text embedding vs backbone image index
//   image_to_text   backbone image embedding vs backbone text index
// Schema mismatches fail before any ranking happens.
MetricsReport run_task(TaskKind task, const TaskDataset& dataset, const FusionModel& model,
                       const EvalConfig& config = {});

// Fraction of cases whose top-1 hit is the query image itself; the index
// must contain the query images.
double self_retrieval_rate(const RetrievalIndex& index, const std::vector<QueryCase>& cases,
                           const std::unordered_map<std::string, const ImageRecord*>& records,
                           const FusionModel& model);

std::vector<QueryCase> read_cases_jsonl(const std::string& path);
void write_cases_jsonl(const std::vector<QueryCase>& cases, const std::string& path);
std::string metrics_report_to_json(const MetricsReport& report);

}  // namespace cirkit
