#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "detection.hpp"

namespace spurank {

struct RankedImage {
    std::string image_id;
    double score = 0;
    bool operator==(const RankedImage&) const = default;
};

/// Score descending, image_id ascending on ties.
inline bool ranked_before(const RankedImage& a, const RankedImage& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image_id < b.image_id;
}

/// Orders one class's images by detector confidence. Rank 1 is the image
/// where the object is most evident (lowest spuriosity).
inline std::vector<std::string> rank_class(std::vector<std::pair<std::string, double>> scores) {
    if (scores.empty()) throw Error(ErrorKind::invalid_argument, "rank_class: empty score list");
    std::vector<RankedImage> items;
    items.reserve(scores.size());
    for (auto& [id, s] : scores) items.push_back({std::move(id), s});
    std::sort(items.begin(), items.end(), ranked_before);
    std::vector<std::string> out;
    out.reserve(items.size());
    for (auto& it : items) out.push_back(std::move(it.image_id));
    return out;
}

/// Per-class rank lists; position 0 holds rank 1.
struct SpuriosityRanking {
    std::map<int, std::vector<RankedImage>> classes;

    /// 1-based rank of an image within its class, 0 if absent.
    std::size_t rank(int class_id, std::string_view image_id) const {
        auto it = classes.find(class_id);
        if (it == classes.end()) return 0;
        for (std::size_t i = 0; i < it->second.size(); ++i)
            if (it->second[i].image_id == image_id) return i + 1;
        return 0;
    }
};

inline SpuriosityRanking build_rankings(const ScoreTable& table, const DatasetManifest& manifest, Split split) {
    SpuriosityRanking ranking;
    for (const auto& rec : manifest.records()) {
        if (rec.split != split) continue;
        const ScoreRecord* s = table.find(rec.image_id);
        if (!s) throw Error(ErrorKind::invalid_argument, "no score for in-split image '" + rec.image_id + "'");
        ranking.classes[rec.class_id].push_back({rec.image_id, s->score});
    }
    for (auto& [cls, list] : ranking.classes) std::sort(list.begin(), list.end(), ranked_before);
    return ranking;
}

// ---------------------------------------------------------------------------

enum class SubsetStrategy { top, mid, bot, rnd };

inline std::string_view to_string(SubsetStrategy s) {
    switch (s) {
        case SubsetStrategy::top: return "top";
        case SubsetStrategy::mid: return "mid";
        case SubsetStrategy::bot: return "bot";
        case SubsetStrategy::rnd: return "rnd";
    }
    return "top";
}

inline SubsetStrategy parse_strategy(std::string_view s) {
    if (s == "top") return SubsetStrategy::top;
    if (s == "mid") return SubsetStrategy::mid;
    if (s == "bot") return SubsetStrategy::bot;
    if (s == "rnd") return SubsetStrategy::rnd;
    throw Error(ErrorKind::parse, "unknown strategy '" + std::string(s) + "'");
}

/// Report label. "top" means highest detector score; with `invert` the
/// top/bot labels are swapped to name subsets by spuriosity rank instead.
inline std::string strategy_label(SubsetStrategy s, bool invert) {
    if (invert && s == SubsetStrategy::top) return "bot";
    if (invert && s == SubsetStrategy::bot) return "top";
    return std::string(to_string(s));
}

struct SubsetSpec {
    SubsetStrategy strategy = SubsetStrategy::top;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::map<int, std::vector<std::string>> resolved;  // class_id -> k image ids, rank order

    std::vector<std::string> all_ids() const {
        std::vector<std::string> ids;
        for (const auto& [c, list] : resolved) ids.insert(ids.end(), list.begin(), list.end());
        std::sort(ids.begin(), ids.end());
        return ids;
    }
};

/// Picks k images per class: top = ranks 1..k, bot = ranks N-k+1..N,
/// mid = ranks m+1..m+k with m = floor((N-k)/2), rnd = k drawn without
/// replacement from a generator keyed by (seed, class_id).
inline SubsetSpec select_subset(const SpuriosityRanking& ranking, SubsetStrategy strategy, std::size_t k, std::uint64_t seed = 0) {
    if (k < 1) throw Error(ErrorKind::invalid_argument, "select_subset: k must be >= 1");
    SubsetSpec spec{strategy, k, seed, {}};
    for (const auto& [cls, list] : ranking.classes) {
        const std::size_t n = list.size();
        if (k > n)
            throw Error(ErrorKind::invalid_argument, "select_subset: class " + std::to_string(cls) + " has " + std::to_string(n) +
                                                         " images, fewer than k=" + std::to_string(k));
        std::vector<std::size_t> positions;
        switch (strategy) {
            case SubsetStrategy::top:
                for (std::size_t i = 0; i < k; ++i) positions.push_back(i);
                break;
            case SubsetStrategy::bot:
                for (std::size_t i = n - k; i < n; ++i) positions.push_back(i);
                break;
            case SubsetStrategy::mid: {
                const std::size_t m = (n - k) / 2;
                for (std::size_t i = m; i < m + k; ++i) positions.push_back(i);
                break;
            }
            case SubsetStrategy::rnd: {
                // drawn in image_id order, independent of scores
                std::vector<std::size_t> by_id(n);
                for (std::size_t i = 0; i < n; ++i) by_id[i] = i;
                std::sort(by_id.begin(), by_id.end(), [&](std::size_t a, std::size_t b) { return list[a].image_id < list[b].image_id; });
                auto rng = keyed_rng(seed, "rnd-subset", std::to_string(cls));
                for (std::size_t i = 0; i < k; ++i) {
                    const std::size_t j = i + static_cast<std::size_t>(uniform_index(rng, n - i));
                    std::swap(by_id[i], by_id[j]);
                }
                positions.assign(by_id.begin(), by_id.begin() + static_cast<std::ptrdiff_t>(k));
                std::sort(positions.begin(), positions.end());
                break;
            }
        }
        auto& out = spec.resolved[cls];
        for (std::size_t p : positions) out.push_back(list[p].image_id);
    }
    return spec;
}

// ---------------------------------------------------------------------------

struct EvalSlice {
    std::size_t index = 0;                                // 1-based rank i
    std::vector<std::pair<int, std::string>> members;     // (class_id, image_id) by class_id
    std::vector<int> skipped_classes;                     // classes with fewer than i images
};

/// Slice i holds each class's rank-i image. Slices are produced for
/// i = 1..min(i_max, largest class size).
inline std::vector<EvalSlice> stratified_eval_sets(const SpuriosityRanking& ranking, std::size_t i_max) {
    if (i_max < 1) throw Error(ErrorKind::invalid_argument, "stratified_eval_sets: i_max must be >= 1");
    std::size_t largest = 0;
    for (const auto& [c, list] : ranking.classes) largest = std::max(largest, list.size());
    std::vector<EvalSlice> slices;
    for (std::size_t i = 1; i <= std::min(i_max, largest); ++i) {
        EvalSlice s;
        s.index = i;
        for (const auto& [c, list] : ranking.classes) {
            if (list.size() >= i)
                s.members.emplace_back(c, list[i - 1].image_id);
            else
                s.skipped_classes.push_back(c);
        }
        slices.push_back(std::move(s));
    }
    return slices;
}

// ---------------------------------------------------------------------------
// Files

inline std::string serialize_ranking(const SpuriosityRanking& ranking) {
    std::string out;
    for (const auto& [c, list] : ranking.classes) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            nlohmann::ordered_json j{{"class_id", c}, {"image_id", list[i].image_id}, {"rank", i + 1}, {"score", list[i].score}};
            out += j.dump();
            out.push_back('\n');
        }
    }
    return out;
}

inline SpuriosityRanking parse_ranking(std::string_view text) {
    struct Row {
        std::size_t rank;
        RankedImage img;
    };
    std::map<int, std::vector<Row>> rows;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            rows[j.at("class_id").get<int>()].push_back(
                {j.at("rank").get<std::size_t>(), {j.at("image_id").get<std::string>(), j.at("score").get<double>()}});
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, "ranking line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    SpuriosityRanking r;
    for (auto& [c, list] : rows) {
        std::sort(list.begin(), list.end(), [](const Row& a, const Row& b) { return a.rank < b.rank; });
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (list[i].rank != i + 1) throw Error(ErrorKind::parse, "ranking for class " + std::to_string(c) + " has gaps");
            r.classes[c].push_back(std::move(list[i].img));
        }
    }
    return r;
}

inline std::string serialize_subset(const SubsetSpec& spec) {
    std::string out;
    for (const auto& [c, ids] : spec.resolved) {
        for (const auto& id : ids) {
            nlohmann::ordered_json j{{"class_id", c}, {"image_id", id}};
            out += j.dump();
            out.push_back('\n');
        }
    }
    return out;
}

/// Parses {class_id, image_id} lines. Strategy and k are not stored in the file.
inline std::map<int, std::vector<std::string>> parse_subset(std::string_view text) {
    std::map<int, std::vector<std::string>> out;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out[j.at("class_id").get<int>()].push_back(j.at("image_id").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, "subset line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace spurank
