#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cirkit/corpus.h"

namespace cirkit {

enum class AltTextVerdict { keep, discard };

std::string to_string(AltTextVerdict v);
AltTextVerdict verdict_from_string(const std::string& s);

// Metadata expansion capability. Implementations must be deterministic for a
// fixed record and configuration. The shipped ones never touch the network.
class Annotator {
public:
    virtual ~Annotator() = default;
    virtual AltTextVerdict judge_alt_text(const ImageRecord& record) const = 0;
    virtual std::vector<std::string> label(const ImageRecord& record) const = 0;
    virtual std::string caption(const ImageRecord& record) const = 0;
};

struct AnnotatedRecord {
    ImageRecord record;  // ica_labels and caption populated
    AltTextVerdict verdict = AltTextVerdict::discard;
    std::string note;  // nonempty when annotation failed or was demoted
};

// Annotates every record, order preserved, nothing dropped. A throwing
// annotator flags the record discard with an error note and processing
// continues. Kept records always carry a nonempty caption.
std::vector<AnnotatedRecord> expand_metadata(const std::vector<ImageRecord>& records, const Annotator& annotator);

std::unordered_map<std::string, const AnnotatedRecord*> build_annotated_lookup(
    const std::vector<AnnotatedRecord>& annotated);

// Deterministic rules over the feature proxy / pixel statistics. Discards
// empty alt-text and a small blocklist of spam markers; labels are hash
// buckets of the content plus an "axis<k>" tag for the dominant embedding
// direction; captions are "object-<bucket> on page <url>".
class MockAnnotator : public Annotator {
public:
    AltTextVerdict judge_alt_text(const ImageRecord& record) const override;
    std::vector<std::string> label(const ImageRecord& record) const override;
    std::string caption(const ImageRecord& record) const override;

private:
    uint64_t content_bucket(const ImageRecord& record) const;
};

// Reads precomputed annotations from a sidecar JSONL keyed by image_id with
// keys image_id, verdict, ica_labels, caption. Records absent from the
// sidecar fail annotation (and so end up flagged discard).
class FileAnnotator : public Annotator {
public:
    explicit FileAnnotator(const std::string& sidecar_path);

    AltTextVerdict judge_alt_text(const ImageRecord& record) const override;
    std::vector<std::string> label(const ImageRecord& record) const override;
    std::string caption(const ImageRecord& record) const override;

private:
    struct Entry {
        AltTextVerdict verdict;
        std::vector<std::string> ica_labels;
        std::string caption;
    };
    const Entry& lookup(const std::string& image_id) const;
    std::unordered_map<std::string, Entry> entries_;
};

}  // namespace cirkit
