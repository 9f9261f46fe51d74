#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace cirkit {

// pixel: tiny RGB images, full-stack runs. synthetic: low-dimensional
// feature-proxy vectors, fast hermetic runs. A corpus is uniformly one or
// the other.
enum class CorpusMode { pixel, synthetic };

CorpusMode corpus_mode_from_string(const std::string& s);
std::string to_string(CorpusMode mode);

struct ImageRecord {
    std::string image_id;
    std::string page_url;
    int width = 0;
    int height = 0;
    std::vector<float> pixels;     // height*width*3 row-major, values in [0,1]
    std::vector<double> features;  // feature proxy, synthetic mode only
    std::optional<std::string> alt_text;
    std::vector<std::string> ica_labels;
    std::string caption;

    bool has_pixels() const { return !pixels.empty(); }
};

struct PageGroup {
    std::string page_url;
    std::vector<std::string> members;  // image_ids in first-seen order
};

struct IngestError {
    size_t line = 0;
    std::string message;
};

struct IngestResult {
    std::vector<ImageRecord> records;
    std::vector<IngestError> errors;
};

// One JSON object per line: image_id, page_url, width, height, and either
// pixels_b64 (row-major float32 little-endian, base64) or features (array
// of numbers), plus optional alt_text. Malformed lines become error entries
// and ingestion continues. Grayscale pixel payloads (width*height floats)
// are replicated across the three channels.
IngestResult ingest_corpus(const std::string& path, CorpusMode mode);

// Groups records by exact page_url equality; group order and member order
// follow first appearance.
std::vector<PageGroup> group_by_page(const std::vector<ImageRecord>& records);

std::unordered_map<std::string, const ImageRecord*> build_record_lookup(const std::vector<ImageRecord>& records);

std::string corpus_record_to_json_line(const ImageRecord& rec, CorpusMode mode);
void write_corpus_jsonl(const std::vector<ImageRecord>& records, CorpusMode mode, const std::string& path);

}  // namespace cirkit
