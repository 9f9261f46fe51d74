#include "cirkit/corpus.h"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "cirkit/util.h"

namespace cirkit {

using nlohmann::json;

CorpusMode corpus_mode_from_string(const std::string& s) {
    if (s == "pixel") return CorpusMode::pixel;
    if (s == "synthetic") return CorpusMode::synthetic;
    throw std::runtime_error("unknown corpus mode: " + s + " (expected pixel|synthetic)");
}

std::string to_string(CorpusMode mode) { return mode == CorpusMode::pixel ? "pixel" : "synthetic"; }

namespace {

std::vector<float> decode_pixels(const std::string& b64, int width, int height) {
    std::vector<unsigned char> bytes = base64_decode(b64);
    if (bytes.size() % 4 != 0) throw std::runtime_error("pixels_b64 length is not a multiple of 4 bytes");
    size_t count = bytes.size() / 4;
    std::vector<float> vals(count);
    std::memcpy(vals.data(), bytes.data(), bytes.size());

    size_t plane = static_cast<size_t>(width) * static_cast<size_t>(height);
    if (count == plane) {
        // grayscale, replicate across 3 channels
        std::vector<float> rgb(plane * 3);
        for (size_t i = 0; i < plane; ++i) {
            rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = vals[i];
        }
        vals = std::move(rgb);
    } else if (count != plane * 3) {
        std::ostringstream msg;
        msg << "pixels_b64 holds " << count << " floats, expected " << plane << " or " << plane * 3;
        throw std::runtime_error(msg.str());
    }
    for (float v : vals) {
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw std::runtime_error("pixel value outside [0,1]");
    }
    return vals;
}

ImageRecord parse_record(const json& j, CorpusMode mode) {
    ImageRecord rec;
    rec.image_id = j.at("image_id").get<std::string>();
    rec.page_url = j.at("page_url").get<std::string>();
    rec.width = j.at("width").get<int>();
    rec.height = j.at("height").get<int>();
    if (rec.image_id.empty()) throw std::runtime_error("empty image_id");
    if (rec.width < 1 || rec.height < 1) throw std::runtime_error("width and height must be >= 1");

    if (mode == CorpusMode::pixel) {
        if (!j.contains("pixels_b64")) throw std::runtime_error("pixel-mode record missing pixels_b64");
        if (j.contains("features")) throw std::runtime_error("pixel-mode record carries features");
        rec.pixels = decode_pixels(j.at("pixels_b64").get<std::string>(), rec.width, rec.height);
    } else {
        if (!j.contains("features")) throw std::runtime_error("synthetic-mode record missing features");
        if (j.contains("pixels_b64")) throw std::runtime_error("synthetic-mode record carries pixels_b64");
        rec.features = j.at("features").get<std::vector<double>>();
        if (rec.features.empty()) throw std::runtime_error("features array is empty");
    }

    if (j.contains("alt_text")) rec.alt_text = j.at("alt_text").get<std::string>();
    return rec;
}

}  // namespace

IngestResult ingest_corpus(const std::string& path, CorpusMode mode) {
    IngestResult result;
    std::unordered_set<std::string> seen_ids;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        if (line.empty()) return;
        try {
            json j = json::parse(line);
            ImageRecord rec = parse_record(j, mode);
            if (!seen_ids.insert(rec.image_id).second) {
                throw std::runtime_error("duplicate image_id: " + rec.image_id);
            }
            result.records.push_back(std::move(rec));
        } catch (const std::exception& e) {
            result.errors.push_back({lineno, e.what()});
        }
    });
    return result;
}

std::vector<PageGroup> group_by_page(const std::vector<ImageRecord>& records) {
    std::vector<PageGroup> groups;
    std::unordered_map<std::string, size_t> index_by_url;
    for (const ImageRecord& rec : records) {
        auto it = index_by_url.find(rec.page_url);
        if (it == index_by_url.end()) {
            index_by_url.emplace(rec.page_url, groups.size());
            groups.push_back({rec.page_url, {rec.image_id}});
        } else {
            groups[it->second].members.push_back(rec.image_id);
        }
    }
    return groups;
}

std::unordered_map<std::string, const ImageRecord*> build_record_lookup(const std::vector<ImageRecord>& records) {
    std::unordered_map<std::string, const ImageRecord*> lookup;
    lookup.reserve(records.size());
    for (const ImageRecord& rec : records) lookup.emplace(rec.image_id, &rec);
    return lookup;
}

std::string corpus_record_to_json_line(const ImageRecord& rec, CorpusMode mode) {
    json j;
    j["image_id"] = rec.image_id;
    j["page_url"] = rec.page_url;
    j["width"] = rec.width;
    j["height"] = rec.height;
    if (mode == CorpusMode::pixel) {
        std::vector<unsigned char> bytes(rec.pixels.size() * 4);
        std::memcpy(bytes.data(), rec.pixels.data(), bytes.size());
        j["pixels_b64"] = base64_encode(bytes.data(), bytes.size());
    } else {
        j["features"] = rec.features;
    }
    if (rec.alt_text) j["alt_text"] = *rec.alt_text;
    return j.dump();
}

void write_corpus_jsonl(const std::vector<ImageRecord>& records, CorpusMode mode, const std::string& path) {
    std::string out;
    for (const ImageRecord& rec : records) {
        out += corpus_record_to_json_line(rec, mode);
        out += '\n';
    }
    atomic_write_file(path, out);
}

}  // namespace cirkit
