#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cirkit/annotate.h"
#include "cirkit/corpus.h"

namespace cirkit {

// All pipeline thresholds. Config file keys mirror these field names.
struct FilterConfig {
    double dup_image_sim = 0.98;
    double group_overlap_ratio = 0.80;
    int min_resolution = 288;  // per side, pixel mode only
    double img_img_min = 0.82;
    double txt_txt_min = 0.90;
    double ica_self_min = 0.32;
    double ica_query_max = 0.18;
    int max_pairs_per_group = 3;
    std::string combine_rule = "or";  // "or": (img OR txt) AND ica; "and": (img AND txt) AND ica

    void validate() const;  // throws on out-of-range values
};

// Embedding provider used for relevance scoring. Returned vectors must be
// unit norm (1 +/- 1e-6).
class ScoringBackend {
public:
    virtual ~ScoringBackend() = default;
    virtual std::vector<double> image_embed(const ImageRecord& record) const = 0;
    virtual std::vector<double> text_embed(const std::string& text) const = 0;
    virtual int dim() const = 0;
};

// Hermetic stand-in for a pretrained image/text encoder.
//   images:  synthetic mode embeds the feature proxy directly (pad/truncate
//            to dim); pixel mode embeds per-cell mean color of a 2x2 grid,
//            centered at 0.5.
//   text:    mean of per-token vectors; a token "axis<k>" maps to basis
//            vector e_k, aliased tokens map to their configured axis, any
//            other token maps to a seeded pseudo-random unit vector.
class MockScoringBackend : public ScoringBackend {
public:
    explicit MockScoringBackend(int dim = 64, uint64_t seed = 0,
                                std::unordered_map<std::string, int> token_axis_aliases = {});

    std::vector<double> image_embed(const ImageRecord& record) const override;
    std::vector<double> text_embed(const std::string& text) const override;
    int dim() const override { return dim_; }

private:
    std::vector<double> token_vector(const std::string& token) const;
    int dim_;
    uint64_t seed_;
    std::unordered_map<std::string, int> aliases_;
};

struct CandidatePair {
    std::string query_id;
    std::string target_id;
    std::string page_url;
    double img_img_sim = 0.0;
    double txt_txt_sim = 0.0;
    double ica_self_sim = 0.0;
    double ica_query_sim = 0.0;
};

struct MiningStats {
    size_t records_in = 0;
    size_t removed_discard = 0;
    size_t removed_resolution = 0;
    size_t removed_duplicate = 0;
    size_t groups_removed_overlap = 0;
    size_t groups_dropped_empty = 0;
    size_t groups_cleaned = 0;
    size_t pairs_scored = 0;
    size_t pairs_skipped_missing_metadata = 0;
    size_t pairs_rejected_filter = 0;
    size_t pairs_removed_cap = 0;
    size_t pairs_final = 0;
};

using AnnotatedLookup = std::unordered_map<std::string, const AnnotatedRecord*>;

// Cleaning order: discard verdicts, low resolution (pixel mode), within-group
// near-duplicates (cosine > dup_image_sim removes the later member), then
// removal of one of any two groups whose member overlap (Jaccard over
// embedding-duplicate identity) exceeds group_overlap_ratio, chosen by the
// run seed. Empty groups are dropped; singletons are kept.
std::vector<PageGroup> clean_groups(const std::vector<PageGroup>& groups, const AnnotatedLookup& annotated,
                                    const FilterConfig& config, const ScoringBackend& backend, CorpusMode mode,
                                    uint64_t seed, MiningStats* stats = nullptr);

// Scores every ordered pair (q, t), q != t, within one group. Pairs whose
// target lacks a caption or ICA labels are skipped and counted.
std::vector<CandidatePair> score_pairs(const PageGroup& group, const AnnotatedLookup& annotated,
                                       const ScoringBackend& backend, size_t* skipped = nullptr);

// Scores all groups, parallel over groups, output concatenated in group order.
std::vector<CandidatePair> score_all_groups(const std::vector<PageGroup>& groups, const AnnotatedLookup& annotated,
                                            const ScoringBackend& backend, size_t* skipped = nullptr);

// Acceptance rule: (img_img_sim >= img_img_min OR txt_txt_sim >= txt_txt_min)
// AND ica_self_sim >= ica_self_min AND ica_query_sim <= ica_query_max.
// combine_rule = "and" switches the first clause to AND. Order preserved.
std::vector<CandidatePair> filter_pairs(const std::vector<CandidatePair>& pairs, const FilterConfig& config);

// Retains at most max_pairs_per_group pairs per page_url, by descending
// img_img_sim + txt_txt_sim with a seeded per-group tie-break, and never two
// retained pairs of one group sharing a query image. Input order preserved.
std::vector<CandidatePair> cap_per_group(const std::vector<CandidatePair>& pairs, const FilterConfig& config,
                                         uint64_t seed);

struct MiningResult {
    std::vector<CandidatePair> pairs;
    MiningStats stats;
};

// Full pipeline: group -> clean -> score -> filter -> cap.
MiningResult mine_pairs(const std::vector<ImageRecord>& records, const std::vector<AnnotatedRecord>& annotated,
                        const FilterConfig& config, const ScoringBackend& backend, CorpusMode mode, uint64_t seed);

std::string pair_to_json_line(const CandidatePair& pair);
void write_pairs_jsonl(const std::vector<CandidatePair>& pairs, const std::string& path);
std::vector<CandidatePair> read_pairs_jsonl(const std::string& path);
std::string mining_stats_to_json(const MiningStats& stats);

}  // namespace cirkit
