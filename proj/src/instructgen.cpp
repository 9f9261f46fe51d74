#include "cirkit/instructgen.h"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "cirkit/kernels.h"
#include "cirkit/util.h"

namespace cirkit {

using nlohmann::json;

PromptAssets PromptAssets::load(const std::string& assets_dir) {
    PromptAssets assets;
    assets.instruction_preamble = read_file(assets_dir + "/instruction_prompt.txt");
    assets.attribute_preamble = read_file(assets_dir + "/attribute_prompt.txt");
    for_each_line(assets_dir + "/instruction_frames.txt", [&](size_t, const std::string& line) {
        if (line.empty() || line[0] == '#') return;
        assets.frames.push_back(line);
    });
    if (assets.frames.empty()) throw std::runtime_error("no sentence frames found in " + assets_dir);
    for (const std::string& frame : assets.frames) {
        if (frame.find("{attr}") == std::string::npos) {
            throw std::runtime_error("sentence frame lacks {attr} slot: " + frame);
        }
    }
    return assets;
}

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string metadata_line(const char* role, const AnnotatedRecord& ann, size_t* missing) {
    auto field = [&](const std::string& value) {
        if (value.empty() && missing) ++*missing;
        return value;
    };
    std::string alt = ann.record.alt_text ? *ann.record.alt_text : "";
    if (alt.empty() && missing) ++*missing;
    std::ostringstream os;
    os << role << " Image: ALT_TEXT [" << alt << "]. TEXT_LABEL [" << field(join(ann.record.ica_labels, ", "))
       << "]. CAPTION [" << field(ann.record.caption) << "].";
    return os.str();
}

const AnnotatedRecord& annotated_or_throw(const AnnotatedLookup& annotated, const std::string& id) {
    auto it = annotated.find(id);
    if (it == annotated.end()) throw std::runtime_error("record not annotated: " + id);
    return *it->second;
}

}  // namespace

std::string build_prompt(const CandidatePair& pair, const AnnotatedLookup& annotated, const std::string& preamble,
                         size_t* missing_fields) {
    const AnnotatedRecord& src = annotated_or_throw(annotated, pair.query_id);
    const AnnotatedRecord& tgt = annotated_or_throw(annotated, pair.target_id);
    std::ostringstream os;
    os << preamble;
    if (!preamble.empty() && preamble.back() != '\n') os << '\n';
    os << '\n';
    os << "Both images are from the website [ " << pair.page_url << " ]\n";
    os << metadata_line("Source", src, missing_fields) << '\n';
    os << metadata_line("Target", tgt, missing_fields) << '\n';
    os << "Think:";
    return os.str();
}

std::optional<std::string> parse_response(const std::string& raw) {
    static const std::string marker = "Query: [";
    size_t pos = raw.rfind(marker);
    if (pos == std::string::npos) return std::nullopt;
    size_t start = pos + marker.size();
    size_t end = raw.find(']', start);
    if (end == std::string::npos) return std::nullopt;
    std::string text = trim(raw.substr(start, end - start));
    if (text.empty()) return std::nullopt;
    return text;
}

// ---------------------------------------------------------------------------
// Generation drivers
// ---------------------------------------------------------------------------

namespace {

uint64_t pair_seed(uint64_t seed, const CandidatePair& pair) {
    return hash_combine(hash_combine(seed, fnv1a(pair.query_id)), fnv1a(pair.target_id));
}

}  // namespace

std::vector<Triplet> generate_template_free(const std::vector<CandidatePair>& pairs, const AnnotatedLookup& annotated,
                                            const TextGenClient& client, const PromptAssets& assets, uint64_t seed,
                                            GenStats* stats) {
    GenStats local;
    GenStats& st = stats ? *stats : local;
    std::vector<std::optional<Triplet>> slots(pairs.size());
    std::vector<int> failure(pairs.size(), 0);  // 1 client, 2 parse
    std::vector<size_t> missing(pairs.size(), 0);

    kernels::parallel_for(pairs.size(), [&](size_t i) {
        const CandidatePair& pair = pairs[i];
        std::string prompt = build_prompt(pair, annotated, assets.instruction_preamble, &missing[i]);
        std::string raw;
        try {
            raw = client.generate(prompt, pair_seed(seed, pair));
        } catch (const std::exception&) {
            failure[i] = 1;
            return;
        }
        std::optional<std::string> instruction = parse_response(raw);
        if (!instruction) {
            failure[i] = 2;
            return;
        }
        slots[i] = Triplet{pair.query_id, *instruction, pair.target_id, "template_free"};
    });

    std::vector<Triplet> out;
    for (size_t i = 0; i < pairs.size(); ++i) {
        st.missing_metadata_fields += missing[i];
        if (failure[i] == 1) {
            st.client_failures++;
        } else if (failure[i] == 2) {
            st.parse_failures++;
        } else if (slots[i]) {
            out.push_back(std::move(*slots[i]));
            st.generated++;
        }
    }
    return out;
}

std::vector<Triplet> generate_template_based(const std::vector<CandidatePair>& pairs, const AnnotatedLookup& annotated,
                                             const TextGenClient& client, const PromptAssets& assets, uint64_t seed,
                                             GenStats* stats) {
    GenStats local;
    GenStats& st = stats ? *stats : local;
    std::vector<std::optional<Triplet>> slots(pairs.size());
    std::vector<int> failure(pairs.size(), 0);  // 1 client, 2 parse, 3 empty attribute
    std::vector<size_t> missing(pairs.size(), 0);

    kernels::parallel_for(pairs.size(), [&](size_t i) {
        const CandidatePair& pair = pairs[i];
        std::string prompt = build_prompt(pair, annotated, assets.attribute_preamble, &missing[i]);
        uint64_t ps = pair_seed(seed, pair);
        std::string raw;
        try {
            raw = client.generate(prompt, ps);
        } catch (const std::exception&) {
            failure[i] = 1;
            return;
        }
        std::optional<std::string> attr = parse_response(raw);
        if (!attr) {
            failure[i] = 2;
            return;
        }
        if (trim(*attr).empty()) {
            failure[i] = 3;
            return;
        }
        const std::string& frame = assets.frames[ps % assets.frames.size()];
        std::string instruction = frame;
        size_t pos = instruction.find("{attr}");
        instruction.replace(pos, 6, *attr);
        slots[i] = Triplet{pair.query_id, instruction, pair.target_id, "template_based"};
    });

    std::vector<Triplet> out;
    for (size_t i = 0; i < pairs.size(); ++i) {
        st.missing_metadata_fields += missing[i];
        switch (failure[i]) {
            case 1: st.client_failures++; break;
            case 2: st.parse_failures++; break;
            case 3: st.empty_attribute++; break;
            default:
                if (slots[i]) {
                    out.push_back(std::move(*slots[i]));
                    st.generated++;
                }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

namespace {

// pulls "<prefix> [...]" content out of a prompt section
std::string extract_bracketed(const std::string& text, const std::string& prefix, size_t from) {
    size_t pos = text.find(prefix, from);
    if (pos == std::string::npos) return "";
    size_t start = pos + prefix.size();
    size_t end = text.find(']', start);
    if (end == std::string::npos) return "";
    return text.substr(start, end - start);
}

std::vector<std::string> split_labels(const std::string& csv) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(csv);
    while (std::getline(is, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

}  // namespace

std::string MockTextGenClient::generate(const std::string& prompt, uint64_t seed) const {
    // operate on the final metadata block only, after the demonstrations
    size_t block = prompt.rfind("Both images are from the website");
    if (block == std::string::npos) block = 0;
    size_t src_pos = prompt.find("Source Image:", block);
    size_t tgt_pos = prompt.find("Target Image:", block);
    if (src_pos == std::string::npos || tgt_pos == std::string::npos) {
        throw std::runtime_error("mock client: prompt lacks the Source/Target metadata block");
    }
    std::vector<std::string> src_labels = split_labels(extract_bracketed(prompt, "TEXT_LABEL [", src_pos));
    std::vector<std::string> tgt_labels = split_labels(extract_bracketed(prompt, "TEXT_LABEL [", tgt_pos));

    std::string salient;
    for (const std::string& lbl : tgt_labels) {
        bool shared = false;
        for (const std::string& s : src_labels) {
            if (s == lbl) {
                shared = true;
                break;
            }
        }
        if (!shared) {
            salient = lbl;
            break;
        }
    }
    if (salient.empty() && !tgt_labels.empty()) salient = tgt_labels.front();
    if (salient.empty()) return "Query: []";

    bool attribute_only = prompt.find("single most salient attribute") != std::string::npos;
    if (attribute_only) {
        return "Query: [" + salient + "]";
    }
    static const char* frames[] = {"find a %s version of it", "same thing but %s", "show this as %s"};
    char buf[256];
    std::snprintf(buf, sizeof(buf), frames[seed % 3], salient.c_str());
    return "Think: the target differs from the source by " + salient + ".\nQuery: [" + buf + "]";
}

FileReplayClient::FileReplayClient(const std::string& path) {
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        if (line.empty()) return;
        try {
            json j = json::parse(line);
            responses_[j.at("prompt_hash").get<std::string>()] = j.at("response").get<std::string>();
        } catch (const std::exception& e) {
            throw std::runtime_error("bad replay line " + std::to_string(lineno) + ": " + e.what());
        }
    });
}

std::string FileReplayClient::generate(const std::string& prompt, uint64_t) const {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a(prompt)));
    auto it = responses_.find(hex);
    if (it == responses_.end()) throw std::runtime_error(std::string("no replay response for prompt hash ") + hex);
    return it->second;
}

ExternalCommandClient::ExternalCommandClient(std::string command) : command_(std::move(command)) {}

std::string ExternalCommandClient::generate(const std::string& prompt, uint64_t seed) const {
    static std::atomic<uint64_t> counter{0};
    uint64_t id = counter.fetch_add(1);
    std::filesystem::path dir = std::filesystem::temp_directory_path();
    std::filesystem::path in = dir / ("cirkit_prompt_" + std::to_string(id) + ".txt");
    std::filesystem::path out = dir / ("cirkit_response_" + std::to_string(id) + ".txt");
    {
        std::ofstream f(in, std::ios::binary);
        f << prompt;
    }
    std::string cmd = "CIRKIT_GEN_SEED=" + std::to_string(seed) + " " + command_ + " < \"" + in.string() + "\" > \"" +
                      out.string() + "\"";
    int rc = std::system(cmd.c_str());
    std::string response;
    if (rc == 0) response = read_file(out.string());
    std::error_code ec;
    std::filesystem::remove(in, ec);
    std::filesystem::remove(out, ec);
    if (rc != 0) throw std::runtime_error("generation command failed with exit code " + std::to_string(rc));
    return response;
}

// ---------------------------------------------------------------------------
// IO
// ---------------------------------------------------------------------------

std::string triplet_to_json_line(const Triplet& t) {
    json j;
    j["query_id"] = t.query_id;
    j["instruction"] = t.instruction;
    j["target_id"] = t.target_id;
    j["provenance"] = t.provenance;
    return j.dump();
}

void write_triplets_jsonl(const std::vector<Triplet>& triplets, const std::string& path) {
    std::string out;
    for (const Triplet& t : triplets) {
        out += triplet_to_json_line(t);
        out += '\n';
    }
    atomic_write_file(path, out);
}

std::vector<Triplet> read_triplets_jsonl(const std::string& path) {
    std::vector<Triplet> out;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        if (line.empty()) return;
        try {
            json j = json::parse(line);
            Triplet t;
            t.query_id = j.at("query_id").get<std::string>();
            t.instruction = j.at("instruction").get<std::string>();
            t.target_id = j.at("target_id").get<std::string>();
            t.provenance = j.at("provenance").get<std::string>();
            if (t.instruction.empty()) throw std::runtime_error("empty instruction");
            if (t.query_id == t.target_id) throw std::runtime_error("query_id equals target_id");
            out.push_back(std::move(t));
        } catch (const std::exception& e) {
            throw std::runtime_error("bad triplet line " + std::to_string(lineno) + ": " + e.what());
        }
    });
    return out;
}

}  // namespace cirkit
