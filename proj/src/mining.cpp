#include "cirkit/mining.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "cirkit/kernels.h"
#include "cirkit/util.h"

namespace cirkit {

using nlohmann::json;

void FilterConfig::validate() const {
    auto check_sim = [](double v, const char* name) {
        if (v < -1.0 || v > 1.0) {
            throw std::runtime_error(std::string(name) + " must lie in [-1, 1], got " + format_double(v));
        }
    };
    check_sim(dup_image_sim, "dup_image_sim");
    check_sim(img_img_min, "img_img_min");
    check_sim(txt_txt_min, "txt_txt_min");
    check_sim(ica_self_min, "ica_self_min");
    check_sim(ica_query_max, "ica_query_max");
    if (group_overlap_ratio < 0.0 || group_overlap_ratio > 1.0) {
        throw std::runtime_error("group_overlap_ratio must lie in [0, 1]");
    }
    if (max_pairs_per_group < 1) throw std::runtime_error("max_pairs_per_group must be >= 1");
    if (min_resolution < 1) throw std::runtime_error("min_resolution must be >= 1");
    if (combine_rule != "or" && combine_rule != "and") {
        throw std::runtime_error("combine_rule must be \"or\" or \"and\"");
    }
}

// ---------------------------------------------------------------------------
// MockScoringBackend
// ---------------------------------------------------------------------------

namespace {

void normalize_or_hash_fallback(std::vector<double>& v, uint64_t fallback_seed) {
    double n = kernels::norm2(v.data(), static_cast<int>(v.size()));
    if (n < 1e-12) {
        Rng rng(fallback_seed);
        for (double& x : v) x = rng.normal();
        n = kernels::norm2(v.data(), static_cast<int>(v.size()));
    }
    for (double& x : v) x /= n;
}

// token "axis<k>" -> k, else -1
int parse_axis_token(const std::string& token) {
    if (token.size() < 5 || token.compare(0, 4, "axis") != 0) return -1;
    int k = 0;
    for (size_t i = 4; i < token.size(); ++i) {
        if (token[i] < '0' || token[i] > '9') return -1;
        k = k * 10 + (token[i] - '0');
        if (k > 1000000) return -1;
    }
    return k;
}

}  // namespace

MockScoringBackend::MockScoringBackend(int dim, uint64_t seed, std::unordered_map<std::string, int> token_axis_aliases)
    : dim_(dim), seed_(seed), aliases_(std::move(token_axis_aliases)) {
    if (dim_ < 1) throw std::runtime_error("MockScoringBackend dim must be >= 1");
}

std::vector<double> MockScoringBackend::image_embed(const ImageRecord& record) const {
    std::vector<double> v(dim_, 0.0);
    if (!record.features.empty()) {
        size_t n = std::min(record.features.size(), static_cast<size_t>(dim_));
        std::copy_n(record.features.begin(), n, v.begin());
    } else {
        // per-cell mean color over a 2x2 grid, centered at 0.5
        double sums[12] = {0};
        int counts[12] = {0};
        for (int y = 0; y < record.height; ++y) {
            int cy = std::min(1, y * 2 / record.height);
            for (int x = 0; x < record.width; ++x) {
                int cx = std::min(1, x * 2 / record.width);
                for (int c = 0; c < 3; ++c) {
                    int k = (cy * 2 + cx) * 3 + c;
                    sums[k] += record.pixels[(static_cast<size_t>(y) * record.width + x) * 3 + c];
                    counts[k]++;
                }
            }
        }
        for (int k = 0; k < 12 && k < dim_; ++k) {
            v[k] = counts[k] ? sums[k] / counts[k] - 0.5 : 0.0;
        }
    }
    normalize_or_hash_fallback(v, hash_combine(seed_, fnv1a(record.image_id)));
    return v;
}

std::vector<double> MockScoringBackend::token_vector(const std::string& token) const {
    std::vector<double> v(dim_, 0.0);
    int axis = parse_axis_token(token);
    if (axis < 0) {
        auto it = aliases_.find(token);
        if (it != aliases_.end()) axis = it->second;
    }
    if (axis >= 0) {
        v[axis % dim_] = 1.0;
        return v;
    }
    Rng rng(hash_combine(seed_, fnv1a(token)));
    for (double& x : v) x = rng.normal();
    normalize_or_hash_fallback(v, hash_combine(seed_, fnv1a(token) ^ 1));
    return v;
}

std::vector<double> MockScoringBackend::text_embed(const std::string& text) const {
    std::vector<std::string> tokens = tokenize_words(text);
    std::vector<double> v(dim_, 0.0);
    for (const std::string& tok : tokens) {
        std::vector<double> tv = token_vector(tok);
        for (int i = 0; i < dim_; ++i) v[i] += tv[i];
    }
    normalize_or_hash_fallback(v, hash_combine(seed_, fnv1a("<empty-text>")));
    return v;
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

namespace {

const AnnotatedRecord& annotated_or_throw(const AnnotatedLookup& annotated, const std::string& image_id) {
    auto it = annotated.find(image_id);
    if (it == annotated.end()) throw std::runtime_error("record not annotated: " + image_id);
    return *it->second;
}

using EmbeddingMap = std::unordered_map<std::string, std::vector<double>>;

// Greedy one-to-one matching by embedding-duplicate identity, then Jaccard.
double group_overlap_jaccard(const PageGroup& a, const PageGroup& b, const EmbeddingMap& embeds, double dup_sim) {
    std::vector<bool> used(b.members.size(), false);
    size_t matched = 0;
    for (const std::string& ma : a.members) {
        const std::vector<double>& ea = embeds.at(ma);
        for (size_t j = 0; j < b.members.size(); ++j) {
            if (used[j]) continue;
            const std::vector<double>& eb = embeds.at(b.members[j]);
            if (kernels::dot(ea.data(), eb.data(), static_cast<int>(ea.size())) > dup_sim) {
                used[j] = true;
                ++matched;
                break;
            }
        }
    }
    size_t uni = a.members.size() + b.members.size() - matched;
    return uni == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(uni);
}

}  // namespace

std::vector<PageGroup> clean_groups(const std::vector<PageGroup>& groups, const AnnotatedLookup& annotated,
                                    const FilterConfig& config, const ScoringBackend& backend, CorpusMode mode,
                                    uint64_t seed, MiningStats* stats) {
    MiningStats local;
    MiningStats& st = stats ? *stats : local;

    enum Fate { kKept, kDiscard, kResolution, kDuplicate };

    // per-group member fates, embeddings computed in parallel
    std::vector<std::vector<Fate>> fates(groups.size());
    std::vector<EmbeddingMap> group_embeds(groups.size());
    kernels::parallel_for(groups.size(), [&](size_t gi) {
        const PageGroup& group = groups[gi];
        std::vector<Fate>& fate = fates[gi];
        fate.assign(group.members.size(), kKept);
        EmbeddingMap embeds;
        for (size_t mi = 0; mi < group.members.size(); ++mi) {
            const std::string& id = group.members[mi];
            const AnnotatedRecord& ann = annotated_or_throw(annotated, id);
            if (ann.verdict == AltTextVerdict::discard) {
                fate[mi] = kDiscard;
                continue;
            }
            if (mode == CorpusMode::pixel &&
                (ann.record.width < config.min_resolution || ann.record.height < config.min_resolution)) {
                fate[mi] = kResolution;
                continue;
            }
            embeds.emplace(id, backend.image_embed(ann.record));
        }
        // within-group dedup: keep the first of any near-duplicate pair
        std::vector<const std::vector<double>*> kept;
        for (size_t mi = 0; mi < group.members.size(); ++mi) {
            if (fate[mi] != kKept) continue;
            const std::vector<double>& e = embeds.at(group.members[mi]);
            bool dup = false;
            for (const std::vector<double>* prev : kept) {
                if (kernels::dot(e.data(), prev->data(), static_cast<int>(e.size())) > config.dup_image_sim) {
                    dup = true;
                    break;
                }
            }
            if (dup) {
                fate[mi] = kDuplicate;
            } else {
                kept.push_back(&e);
            }
        }
        group_embeds[gi] = std::move(embeds);
    });

    // tally removals, serial so counts are deterministic
    std::vector<PageGroup> result;
    EmbeddingMap all_embeds;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        PageGroup out{groups[gi].page_url, {}};
        for (size_t mi = 0; mi < groups[gi].members.size(); ++mi) {
            st.records_in++;
            switch (fates[gi][mi]) {
                case kDiscard: st.removed_discard++; break;
                case kResolution: st.removed_resolution++; break;
                case kDuplicate: st.removed_duplicate++; break;
                case kKept: {
                    const std::string& id = groups[gi].members[mi];
                    out.members.push_back(id);
                    all_embeds.emplace(id, std::move(group_embeds[gi].at(id)));
                    break;
                }
            }
        }
        if (out.members.empty()) {
            st.groups_dropped_empty++;
        } else {
            result.push_back(std::move(out));
        }
    }

    // highly overlapped groups: remove one of the two at random under the seed
    std::vector<bool> removed(result.size(), false);
    for (size_t i = 0; i < result.size(); ++i) {
        if (removed[i]) continue;
        for (size_t j = i + 1; j < result.size(); ++j) {
            if (removed[i] || removed[j]) continue;
            double jac = group_overlap_jaccard(result[i], result[j], all_embeds, config.dup_image_sim);
            if (jac > config.group_overlap_ratio) {
                Rng rng = derive_rng(seed, "overlap:" + result[i].page_url + "|" + result[j].page_url);
                removed[rng.uniform() < 0.5 ? i : j] = true;
                st.groups_removed_overlap++;
            }
        }
    }
    std::vector<PageGroup> final_groups;
    for (size_t i = 0; i < result.size(); ++i) {
        if (!removed[i]) final_groups.push_back(std::move(result[i]));
    }
    st.groups_cleaned = final_groups.size();
    return final_groups;
}

// ---------------------------------------------------------------------------
// Scoring, filtering, capping
// ---------------------------------------------------------------------------

std::vector<CandidatePair> score_pairs(const PageGroup& group, const AnnotatedLookup& annotated,
                                       const ScoringBackend& backend, size_t* skipped) {
    std::vector<CandidatePair> pairs;
    size_t n = group.members.size();
    if (n < 2) return pairs;

    struct MemberData {
        const AnnotatedRecord* ann;
        std::vector<double> image_vec;
        std::vector<double> caption_vec;
        bool usable;
    };
    std::vector<MemberData> data(n);
    for (size_t i = 0; i < n; ++i) {
        const AnnotatedRecord& ann = annotated_or_throw(annotated, group.members[i]);
        data[i].ann = &ann;
        data[i].usable = !ann.record.caption.empty() && !ann.record.ica_labels.empty();
        if (data[i].usable) {
            data[i].image_vec = backend.image_embed(ann.record);
            data[i].caption_vec = backend.text_embed(ann.record.caption);
        }
    }

    int d = backend.dim();
    for (size_t qi = 0; qi < n; ++qi) {
        for (size_t ti = 0; ti < n; ++ti) {
            if (qi == ti) continue;
            if (!data[qi].usable || !data[ti].usable) {
                if (skipped) ++*skipped;
                continue;
            }
            const MemberData& q = data[qi];
            const MemberData& t = data[ti];
            CandidatePair pair;
            pair.query_id = group.members[qi];
            pair.target_id = group.members[ti];
            pair.page_url = group.page_url;
            pair.img_img_sim = kernels::dot(q.image_vec.data(), t.image_vec.data(), d);
            pair.txt_txt_sim = kernels::dot(q.caption_vec.data(), t.caption_vec.data(), d);

            // best label of the target against the target itself, then that
            // same label against the query image
            double best_self = -2.0;
            std::vector<double> best_label_vec;
            for (const std::string& lbl : t.ann->record.ica_labels) {
                std::vector<double> lv = backend.text_embed(lbl);
                double s = kernels::dot(lv.data(), t.image_vec.data(), d);
                if (s > best_self) {
                    best_self = s;
                    best_label_vec = std::move(lv);
                }
            }
            pair.ica_self_sim = best_self;
            pair.ica_query_sim = kernels::dot(best_label_vec.data(), q.image_vec.data(), d);
            pairs.push_back(std::move(pair));
        }
    }
    return pairs;
}

std::vector<CandidatePair> score_all_groups(const std::vector<PageGroup>& groups, const AnnotatedLookup& annotated,
                                            const ScoringBackend& backend, size_t* skipped) {
    std::vector<std::vector<CandidatePair>> per_group(groups.size());
    std::vector<size_t> per_group_skipped(groups.size(), 0);
    kernels::parallel_for(groups.size(), [&](size_t gi) {
        per_group[gi] = score_pairs(groups[gi], annotated, backend, &per_group_skipped[gi]);
    });
    std::vector<CandidatePair> all;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        if (skipped) *skipped += per_group_skipped[gi];
        all.insert(all.end(), std::make_move_iterator(per_group[gi].begin()),
                   std::make_move_iterator(per_group[gi].end()));
    }
    return all;
}

std::vector<CandidatePair> filter_pairs(const std::vector<CandidatePair>& pairs, const FilterConfig& config) {
    config.validate();
    std::vector<CandidatePair> out;
    out.reserve(pairs.size());
    for (const CandidatePair& p : pairs) {
        bool img_ok = p.img_img_sim >= config.img_img_min;
        bool txt_ok = p.txt_txt_sim >= config.txt_txt_min;
        bool relevance = config.combine_rule == "and" ? (img_ok && txt_ok) : (img_ok || txt_ok);
        bool ica_ok = p.ica_self_sim >= config.ica_self_min && p.ica_query_sim <= config.ica_query_max;
        if (relevance && ica_ok) out.push_back(p);
    }
    return out;
}

std::vector<CandidatePair> cap_per_group(const std::vector<CandidatePair>& pairs, const FilterConfig& config,
                                         uint64_t seed) {
    // bucket by page_url in first-seen order
    std::vector<std::string> urls;
    std::unordered_map<std::string, std::vector<size_t>> by_url;
    for (size_t i = 0; i < pairs.size(); ++i) {
        auto [it, inserted] = by_url.try_emplace(pairs[i].page_url);
        if (inserted) urls.push_back(pairs[i].page_url);
        it->second.push_back(i);
    }

    std::vector<bool> retained(pairs.size(), false);
    for (const std::string& url : urls) {
        const std::vector<size_t>& idx = by_url[url];
        Rng rng = derive_rng(seed, "cap:" + url);
        std::vector<std::pair<double, size_t>> order;  // (tie-break priority, pair index)
        order.reserve(idx.size());
        for (size_t i : idx) order.emplace_back(rng.uniform(), i);
        std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
            double sa = pairs[a.second].img_img_sim + pairs[a.second].txt_txt_sim;
            double sb = pairs[b.second].img_img_sim + pairs[b.second].txt_txt_sim;
            if (sa != sb) return sa > sb;
            return a.first < b.first;
        });
        int taken = 0;
        std::unordered_map<std::string, bool> query_used;
        for (const auto& [prio, i] : order) {
            if (taken >= config.max_pairs_per_group) break;
            if (query_used[pairs[i].query_id]) continue;
            query_used[pairs[i].query_id] = true;
            retained[i] = true;
            ++taken;
        }
    }

    std::vector<CandidatePair> out;
    for (size_t i = 0; i < pairs.size(); ++i) {
        if (retained[i]) out.push_back(pairs[i]);
    }
    return out;
}

MiningResult mine_pairs(const std::vector<ImageRecord>& records, const std::vector<AnnotatedRecord>& annotated,
                        const FilterConfig& config, const ScoringBackend& backend, CorpusMode mode, uint64_t seed) {
    config.validate();
    MiningResult result;
    AnnotatedLookup lookup = build_annotated_lookup(annotated);
    std::vector<PageGroup> groups = group_by_page(records);
    std::vector<PageGroup> cleaned = clean_groups(groups, lookup, config, backend, mode, seed, &result.stats);
    std::vector<CandidatePair> scored =
        score_all_groups(cleaned, lookup, backend, &result.stats.pairs_skipped_missing_metadata);
    result.stats.pairs_scored = scored.size();
    std::vector<CandidatePair> filtered = filter_pairs(scored, config);
    result.stats.pairs_rejected_filter = scored.size() - filtered.size();
    result.pairs = cap_per_group(filtered, config, seed);
    result.stats.pairs_removed_cap = filtered.size() - result.pairs.size();
    result.stats.pairs_final = result.pairs.size();
    return result;
}

// ---------------------------------------------------------------------------
// IO
// ---------------------------------------------------------------------------

std::string pair_to_json_line(const CandidatePair& pair) {
    json j;
    j["query_id"] = pair.query_id;
    j["target_id"] = pair.target_id;
    j["page_url"] = pair.page_url;
    j["img_img_sim"] = pair.img_img_sim;
    j["txt_txt_sim"] = pair.txt_txt_sim;
    j["ica_self_sim"] = pair.ica_self_sim;
    j["ica_query_sim"] = pair.ica_query_sim;
    return j.dump();
}

void write_pairs_jsonl(const std::vector<CandidatePair>& pairs, const std::string& path) {
    std::string out;
    for (const CandidatePair& p : pairs) {
        out += pair_to_json_line(p);
        out += '\n';
    }
    atomic_write_file(path, out);
}

std::vector<CandidatePair> read_pairs_jsonl(const std::string& path) {
    std::vector<CandidatePair> pairs;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        if (line.empty()) return;
        try {
            json j = json::parse(line);
            CandidatePair p;
            p.query_id = j.at("query_id").get<std::string>();
            p.target_id = j.at("target_id").get<std::string>();
            p.page_url = j.at("page_url").get<std::string>();
            p.img_img_sim = j.at("img_img_sim").get<double>();
            p.txt_txt_sim = j.at("txt_txt_sim").get<double>();
            p.ica_self_sim = j.at("ica_self_sim").get<double>();
            p.ica_query_sim = j.at("ica_query_sim").get<double>();
            pairs.push_back(std::move(p));
        } catch (const std::exception& e) {
            throw std::runtime_error("bad pair line " + std::to_string(lineno) + ": " + e.what());
        }
    });
    return pairs;
}

std::string mining_stats_to_json(const MiningStats& stats) {
    json j;
    j["records_in"] = stats.records_in;
    j["removed_discard"] = stats.removed_discard;
    j["removed_resolution"] = stats.removed_resolution;
    j["removed_duplicate"] = stats.removed_duplicate;
    j["groups_removed_overlap"] = stats.groups_removed_overlap;
    j["groups_dropped_empty"] = stats.groups_dropped_empty;
    j["groups_cleaned"] = stats.groups_cleaned;
    j["pairs_scored"] = stats.pairs_scored;
    j["pairs_skipped_missing_metadata"] = stats.pairs_skipped_missing_metadata;
    j["pairs_rejected_filter"] = stats.pairs_rejected_filter;
    j["pairs_removed_cap"] = stats.pairs_removed_cap;
    j["pairs_final"] = stats.pairs_final;
    return j.dump(2) + "\n";
}

}  // namespace cirkit
