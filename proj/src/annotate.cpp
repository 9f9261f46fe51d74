#include "cirkit/annotate.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "cirkit/kernels.h"
#include "cirkit/util.h"

namespace cirkit {

using nlohmann::json;

std::string to_string(AltTextVerdict v) { return v == AltTextVerdict::keep ? "keep" : "discard"; }

AltTextVerdict verdict_from_string(const std::string& s) {
    if (s == "keep") return AltTextVerdict::keep;
    if (s == "discard") return AltTextVerdict::discard;
    throw std::runtime_error("unknown verdict: " + s);
}

std::vector<AnnotatedRecord> expand_metadata(const std::vector<ImageRecord>& records, const Annotator& annotator) {
    std::vector<AnnotatedRecord> out(records.size());
    kernels::parallel_for(records.size(), [&](size_t i) {
        AnnotatedRecord& ann = out[i];
        ann.record = records[i];
        try {
            ann.verdict = annotator.judge_alt_text(records[i]);
            ann.record.ica_labels = annotator.label(records[i]);
            ann.record.caption = annotator.caption(records[i]);
            if (ann.verdict == AltTextVerdict::keep && ann.record.caption.empty()) {
                ann.verdict = AltTextVerdict::discard;
                ann.note = "annotator produced an empty caption for a kept record";
            }
        } catch (const std::exception& e) {
            ann.verdict = AltTextVerdict::discard;
            ann.note = std::string("annotator failure: ") + e.what();
        }
    });
    return out;
}

std::unordered_map<std::string, const AnnotatedRecord*> build_annotated_lookup(
    const std::vector<AnnotatedRecord>& annotated) {
    std::unordered_map<std::string, const AnnotatedRecord*> lookup;
    lookup.reserve(annotated.size());
    for (const AnnotatedRecord& ann : annotated) lookup.emplace(ann.record.image_id, &ann);
    return lookup;
}

// ---------------------------------------------------------------------------
// MockAnnotator
// ---------------------------------------------------------------------------

namespace {
const char* kBlockedAltTokens[] = {"ad", "ads", "advert", "advertisement", "sponsored", "nsfw"};

// Dominant direction of the record content under the mock embedding
// convention: argmax |feature| in synthetic mode, argmax |cell mean - 0.5|
// over the 2x2 RGB grid in pixel mode.
int dominant_axis(const ImageRecord& rec) {
    std::vector<double> v;
    if (!rec.features.empty()) {
        v = rec.features;
    } else {
        v.assign(12, 0.0);
        int gh = 2, gw = 2;
        std::vector<int> counts(12, 0);
        for (int y = 0; y < rec.height; ++y) {
            int cy = std::min(gh - 1, y * gh / rec.height);
            for (int x = 0; x < rec.width; ++x) {
                int cx = std::min(gw - 1, x * gw / rec.width);
                for (int c = 0; c < 3; ++c) {
                    int k = (cy * gw + cx) * 3 + c;
                    v[k] += rec.pixels[(static_cast<size_t>(y) * rec.width + x) * 3 + c];
                    counts[k]++;
                }
            }
        }
        for (int k = 0; k < 12; ++k) v[k] = counts[k] ? v[k] / counts[k] - 0.5 : 0.0;
    }
    int best = 0;
    double best_mag = -1.0;
    for (size_t i = 0; i < v.size(); ++i) {
        if (std::abs(v[i]) > best_mag) {
            best_mag = std::abs(v[i]);
            best = static_cast<int>(i);
        }
    }
    return best;
}
}  // namespace

uint64_t MockAnnotator::content_bucket(const ImageRecord& record) const {
    uint64_t h = 0xcbf29ce484222325ull;
    if (!record.features.empty()) {
        for (double f : record.features) {
            // quantize so buckets are insensitive to last-bit noise
            long long q = llround(f * 1e6);
            h = hash_combine(h, static_cast<uint64_t>(q));
        }
    } else {
        for (float p : record.pixels) {
            long long q = llround(static_cast<double>(p) * 1e6);
            h = hash_combine(h, static_cast<uint64_t>(q));
        }
    }
    return h % 1000;
}

AltTextVerdict MockAnnotator::judge_alt_text(const ImageRecord& record) const {
    if (!record.alt_text) return AltTextVerdict::discard;
    std::vector<std::string> tokens = tokenize_words(*record.alt_text);
    if (tokens.empty()) return AltTextVerdict::discard;
    for (const std::string& tok : tokens) {
        for (const char* blocked : kBlockedAltTokens) {
            if (tok == blocked) return AltTextVerdict::discard;
        }
    }
    return AltTextVerdict::keep;
}

std::vector<std::string> MockAnnotator::label(const ImageRecord& record) const {
    std::vector<std::string> labels;
    labels.push_back("object-" + std::to_string(content_bucket(record)));
    labels.push_back("axis" + std::to_string(dominant_axis(record)));
    return labels;
}

std::string MockAnnotator::caption(const ImageRecord& record) const {
    return "object-" + std::to_string(content_bucket(record)) + " on page " + record.page_url;
}

// ---------------------------------------------------------------------------
// FileAnnotator
// ---------------------------------------------------------------------------

FileAnnotator::FileAnnotator(const std::string& sidecar_path) {
    for_each_line(sidecar_path, [&](size_t lineno, const std::string& line) {
        if (line.empty()) return;
        json j;
        try {
            j = json::parse(line);
            Entry e;
            e.verdict = verdict_from_string(j.at("verdict").get<std::string>());
            e.ica_labels = j.at("ica_labels").get<std::vector<std::string>>();
            e.caption = j.at("caption").get<std::string>();
            entries_[j.at("image_id").get<std::string>()] = std::move(e);
        } catch (const std::exception& e) {
            throw std::runtime_error("bad annotation sidecar line " + std::to_string(lineno) + ": " + e.what());
        }
    });
}

const FileAnnotator::Entry& FileAnnotator::lookup(const std::string& image_id) const {
    auto it = entries_.find(image_id);
    if (it == entries_.end()) throw std::runtime_error("no sidecar annotation for image_id: " + image_id);
    return it->second;
}

AltTextVerdict FileAnnotator::judge_alt_text(const ImageRecord& record) const {
    return lookup(record.image_id).verdict;
}

std::vector<std::string> FileAnnotator::label(const ImageRecord& record) const {
    return lookup(record.image_id).ica_labels;
}

std::string FileAnnotator::caption(const ImageRecord& record) const { return lookup(record.image_id).caption; }

}  // namespace cirkit
