#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cirkit/corpus.h"

namespace cirkit {

enum class FusionArch { self_attention, cross_attention };

std::string to_string(FusionArch arch);
FusionArch fusion_arch_from_string(const std::string& s);

struct ModelConfig {
    CorpusMode mode = CorpusMode::synthetic;
    int dim = 64;          // shared embedding width D
    int layers = 4;        // fusion self-attention layers
    int heads = 4;         // attention heads
    int ff_width = 0;      // feed-forward width, 0 means 4 * dim
    int feature_dim = 32;  // synthetic-mode input width
    int image_size = 16;   // pixel inputs are box-resampled to image_size^2
    int vocab_size = 4096; // hash-bucket vocabulary, id 0 reserved for ""
    int max_tokens = 32;
    FusionArch arch = FusionArch::self_attention;

    int ff() const { return ff_width > 0 ? ff_width : 4 * dim; }
    int pixel_input_dim() const { return 3 * image_size * image_size; }
    void validate() const;  // throws on inconsistent configuration
};

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
    size_t offset = 0;
    size_t size = 0;
    bool backbone = false;  // backbone tensors get the smaller learning rate
};

// One flat parameter vector with a named-segment manifest. Both towers of
// the dual encoder read the same storage, so sharing is structural.
class ParamStore {
public:
    size_t add(const std::string& name, std::vector<int> shape, bool backbone);

    double* data(size_t spec_index) { return values_.data() + specs_[spec_index].offset; }
    const double* data(size_t spec_index) const { return values_.data() + specs_[spec_index].offset; }

    const TensorSpec& spec(size_t i) const { return specs_[i]; }
    const std::vector<TensorSpec>& specs() const { return specs_; }
    size_t find(const std::string& name) const;  // throws if absent

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    size_t size() const { return values_.size(); }

private:
    std::vector<TensorSpec> specs_;
    std::vector<double> values_;
};

// Deterministic hash-bucket tokenizer. encode("") yields the reserved
// empty-text placeholder sequence {0}.
class Tokenizer {
public:
    Tokenizer(int vocab_size, int max_tokens) : vocab_size_(vocab_size), max_tokens_(max_tokens) {}
    std::vector<int> encode(const std::string& text) const;
    static constexpr int kEmptyToken = 0;

private:
    int vocab_size_;
    int max_tokens_;
};

// Opaque activation record for one encode, reused across steps.
struct EncodeCache;

class FusionModel {
public:
    FusionModel(ModelConfig config, uint64_t seed, double tau_init = 0.07);
    FusionModel(const FusionModel&);
    FusionModel& operator=(const FusionModel&) = delete;
    FusionModel(FusionModel&&) noexcept;
    ~FusionModel();

    const ModelConfig& config() const { return config_; }
    uint64_t seed() const { return seed_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    static size_t expected_param_count(const ModelConfig& config);

    double temperature() const;
    void set_temperature(double tau);
    size_t temperature_param_index() const;  // flat index into the param vector

    // L2-normalized fused embedding of (image, text). Wiring follows
    // config().arch unless overridden by the explicit variants below.
    std::vector<double> encode(const ImageRecord& image, const std::string& text) const;
    // encode(image, "") with the empty-text placeholder
    std::vector<double> encode_target(const ImageRecord& image) const;
    // text embedding attends the [image, text] sequence
    std::vector<double> encode_crossattn_variant(const ImageRecord& image, const std::string& text) const;

    // backbone-only contrastive embeddings, bypassing the fusion head
    std::vector<double> backbone_image_embed(const ImageRecord& image) const;
    std::vector<double> backbone_text_embed(const std::string& text) const;

    // intermediate activations for diagnostics: the fused input sequence,
    // the post-LN sequence entering the pooler, and the raw (unnormalized)
    // pooled vector alongside the normalized output
    struct EncodeTrace {
        std::vector<double> fused_input;     // 2 x dim
        std::vector<double> final_sequence;  // n x dim pooler input
        std::vector<double> pooled_raw;      // dim
        std::vector<double> normalized;      // dim
    };
    EncodeTrace encode_trace(const ImageRecord& image, const std::string& text) const;

    // training-facing forward/backward; grad accumulates into a flat buffer
    // aligned with params()
    EncodeCache* new_cache() const;
    void free_cache(EncodeCache* cache) const;
    void forward_cached(const ImageRecord& image, const std::string& text, FusionArch arch, EncodeCache& cache,
                        double* out) const;
    void backward(const EncodeCache& cache, const double* d_out, double* grad) const;

    const Tokenizer& tokenizer() const { return tokenizer_; }

    // Single-file archive: magic, JSON manifest (config, seed, tensor
    // shapes), then raw little-endian float32 tensors in manifest order.
    void save_checkpoint(const std::string& path) const;
    static FusionModel load_checkpoint(const std::string& path);

private:
    struct Offsets;
    void register_params();
    void init_params(uint64_t seed, double tau_init);
    void build_offsets();

    ModelConfig config_;
    uint64_t seed_ = 0;
    ParamStore params_;
    Tokenizer tokenizer_;
    Offsets* off_ = nullptr;
};

// Parallel encode_target over items; rows of `out` are item embeddings.
void encode_batch(const FusionModel& model, const std::vector<const ImageRecord*>& items, double* out);

}  // namespace cirkit
