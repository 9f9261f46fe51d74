#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cirkit/annotate.h"
#include "cirkit/corpus.h"
#include "cirkit/evalkit.h"
#include "cirkit/instructgen.h"

namespace cirkit {

// Synthetic world with planted relations. Every item is an (object, attr)
// rendering: feature = object latent + attr_scale * e_attr + noise. The
// attribute axes double as the planted relation vocabulary, so instructions
// naming an attribute carry exactly the signal needed to retrieve the target
// rendering of the query's object.
struct SynthConfig {
    uint64_t seed = 7;
    int feature_dim = 32;
    int n_attrs = 10;  // occupy basis axes 0..n_attrs-1; object latents live above
    double attr_scale = 1.25;
    double noise = 0.05;
    int n_train_pages = 150;
    int attrs_per_page = 4;
    int n_triplets = 2000;
    int n_index_objects = 100;  // index size = n_index_objects * n_attrs
    int n_eval_queries = 200;
    int subset_size = 12;

    void validate() const;
};

struct SynthWorld {
    // training side
    std::vector<ImageRecord> train_records;
    std::vector<Triplet> triplets;
    std::vector<AnnotatedRecord> annotations;  // sidecar-style, for pipeline runs
    std::unordered_map<std::string, int> token_axis_aliases;

    // evaluation benchmarks (items shared, cases per protocol)
    TaskDataset cir;
    TaskDataset domain_transfer;
    TaskDataset sbir;
    TaskDataset subset_cir;  // cir cases carrying per-query candidate subsets
    TaskDataset text_to_image;
    TaskDataset image_to_text;

    std::vector<std::string> attr_names;
};

SynthWorld generate_synth_world(const SynthConfig& config);

// Sidecar annotations (image_id, verdict, ica_labels, caption) for the
// pipeline-mode corpus.
void write_annotations_jsonl(const std::vector<AnnotatedRecord>& annotations, const std::string& path);
void write_aliases_json(const std::unordered_map<std::string, int>& aliases, const std::string& path);
std::unordered_map<std::string, int> read_aliases_json(const std::string& path);

}  // namespace cirkit
