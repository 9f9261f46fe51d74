#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cirkit/annotate.h"
#include "cirkit/mining.h"

namespace cirkit {

struct Triplet {
    std::string query_id;
    std::string instruction;
    std::string target_id;
    std::string provenance;  // "template_free" | "template_based"
};

// Text generation capability; deterministic for fixed (prompt, seed).
class TextGenClient {
public:
    virtual ~TextGenClient() = default;
    virtual std::string generate(const std::string& prompt, uint64_t seed) const = 0;
};

// Prompt preambles and sentence frames are plain-text data files, editable
// without code changes.
struct PromptAssets {
    std::string instruction_preamble;  // template-free generation
    std::string attribute_preamble;    // attribute selection for template-based
    std::vector<std::string> frames;   // sentence frames containing {attr}

    static PromptAssets load(const std::string& assets_dir);
};

// Full generation prompt: the preamble with its demonstrations, then the
// pair's metadata in the same Source/Target layout, ending at "Think:".
// Missing metadata renders as empty brackets; missing_fields counts them.
std::string build_prompt(const CandidatePair& pair, const AnnotatedLookup& annotated, const std::string& preamble,
                         size_t* missing_fields = nullptr);

// Extracts the text inside the final "Query: [...]"; empty extraction or a
// missing marker is a parse failure.
std::optional<std::string> parse_response(const std::string& raw);

struct GenStats {
    size_t generated = 0;
    size_t client_failures = 0;
    size_t parse_failures = 0;
    size_t missing_metadata_fields = 0;
    size_t empty_attribute = 0;  // template-based only
};

// One triplet per pair whose response parses; per-pair seeds derive from
// (seed, query_id, target_id) so parallel order never matters.
std::vector<Triplet> generate_template_free(const std::vector<CandidatePair>& pairs, const AnnotatedLookup& annotated,
                                            const TextGenClient& client, const PromptAssets& assets, uint64_t seed,
                                            GenStats* stats = nullptr);

// The client picks a salient target attribute which is slotted into a
// seeded choice of sentence frame.
std::vector<Triplet> generate_template_based(const std::vector<CandidatePair>& pairs, const AnnotatedLookup& annotated,
                                             const TextGenClient& client, const PromptAssets& assets, uint64_t seed,
                                             GenStats* stats = nullptr);

// Deterministic offline client: reads the pair metadata out of the prompt,
// picks the label that distinguishes target from source, and answers in the
// demonstrations' format.
class MockTextGenClient : public TextGenClient {
public:
    std::string generate(const std::string& prompt, uint64_t seed) const override;
};

// Replays prearranged responses from a JSONL file keyed by the FNV-1a hash
// of the prompt (hex), with keys prompt_hash and response.
class FileReplayClient : public TextGenClient {
public:
    explicit FileReplayClient(const std::string& path);
    std::string generate(const std::string& prompt, uint64_t seed) const override;

private:
    std::unordered_map<std::string, std::string> responses_;
};

// Spawns a user-supplied command with the prompt on stdin and reads the raw
// response from stdout. The per-call seed is exported as CIRKIT_GEN_SEED.
class ExternalCommandClient : public TextGenClient {
public:
    explicit ExternalCommandClient(std::string command);
    std::string generate(const std::string& prompt, uint64_t seed) const override;

private:
    std::string command_;
};

std::string triplet_to_json_line(const Triplet& t);
void write_triplets_jsonl(const std::vector<Triplet>& triplets, const std::string& path);
std::vector<Triplet> read_triplets_jsonl(const std::string& path);

}  // namespace cirkit
