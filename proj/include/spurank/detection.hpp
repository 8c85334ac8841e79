#pragma once

#include <atomic>
#include <cmath>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "image.hpp"
#include "subprocess.hpp"
#include "synthetic.hpp"

namespace spurank {

struct DetectionBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    double score = 0;
    int query_index = 0;

    bool operator==(const DetectionBox&) const = default;
};

/// Empty string when the box is valid for a width x height image.
inline std::string box_problem(const DetectionBox& b, int width, int height) {
    for (double v : {b.x_min, b.y_min, b.x_max, b.y_max, b.score})
        if (!std::isfinite(v)) return "non-finite box field";
    if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) return "degenerate box";
    if (b.x_min < 0 || b.y_min < 0 || b.x_max > width || b.y_max > height) return "box outside image bounds";
    if (b.score < 0 || b.score > 1) return "box score outside [0,1]";
    if (b.query_index < 0) return "negative query_index";
    return {};
}

/// Score descending, then (x_min, y_min) ascending.
inline bool box_order(const DetectionBox& a, const DetectionBox& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.x_min != b.x_min) return a.x_min < b.x_min;
    return a.y_min < b.y_min;
}

inline void sort_boxes(std::vector<DetectionBox>& boxes) { std::stable_sort(boxes.begin(), boxes.end(), box_order); }

enum class Aggregation { max, sum, top3_mean };

inline Aggregation parse_aggregation(std::string_view s) {
    if (s == "max") return Aggregation::max;
    if (s == "sum") return Aggregation::sum;
    if (s == "top3_mean") return Aggregation::top3_mean;
    throw Error(ErrorKind::parse, "unknown aggregation '" + std::string(s) + "'");
}

/// Reduces the boxes answering `target_query` to one confidence in [0,1].
/// No matching box yields 0.
inline double aggregate_boxes(std::span<const DetectionBox> boxes, int target_query, Aggregation mode = Aggregation::max) {
    std::vector<double> scores;
    for (const auto& b : boxes)
        if (b.query_index == target_query) scores.push_back(b.score);
    if (scores.empty()) return 0.0;
    switch (mode) {
        case Aggregation::max:
            return *std::max_element(scores.begin(), scores.end());
        case Aggregation::sum: {
            std::sort(scores.begin(), scores.end());
            double s = 0;
            for (double v : scores) s += v;
            return std::min(1.0, s);
        }
        case Aggregation::top3_mean: {
            std::sort(scores.begin(), scores.end(), std::greater<>());
            const std::size_t n = std::min<std::size_t>(3, scores.size());
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += scores[i];
            return s / static_cast<double>(n);
        }
    }
    return 0.0;
}

struct ScoreRecord {
    std::string image_id;
    int class_id = 0;
    double score = 0;
    std::vector<DetectionBox> boxes;  // sorted by box_order
    std::string backend_id;

    bool operator==(const ScoreRecord&) const = default;
};

struct SkipEntry {
    std::string image_id;
    std::string reason;
};

struct ScoreTable {
    std::string backend_id;
    std::vector<ScoreRecord> records;  // sorted by image_id
    std::vector<SkipEntry> skipped;    // sorted by image_id

    const ScoreRecord* find(std::string_view image_id) const {
        auto it = std::lower_bound(records.begin(), records.end(), image_id,
                                   [](const ScoreRecord& r, std::string_view id) { return r.image_id < id; });
        return it != records.end() && it->image_id == image_id ? &*it : nullptr;
    }
};

// ---------------------------------------------------------------------------
// Backends

class DetectorBackend {
public:
    virtual ~DetectorBackend() = default;
    virtual std::string backend_id() const = 0;
    virtual std::vector<DetectionBox> detect(const fs::path& image_path, std::span<const std::string> queries) = 0;
};

/// Deterministic stand-in detector for the synthetic fixture: one box on the
/// glyph with confidence clamp(1 - occlusion, 0, 1), answering query 0.
/// Images are identified by file stem, which is the image_id.
class MockDetector final : public DetectorBackend {
public:
    explicit MockDetector(const std::vector<SyntheticGroundTruth>& truth, std::string truth_digest = "inline") {
        for (const auto& t : truth) truth_.emplace(t.image_id, t);
        id_ = "mock-detector-v1+" + truth_digest.substr(0, 16);
    }
    MockDetector(MockDetector&& o) noexcept : truth_(std::move(o.truth_)), id_(std::move(o.id_)), calls_(o.calls_.load()) {}

    static MockDetector from_file(const fs::path& truth_path) {
        return MockDetector(load_ground_truth(truth_path), sha256_hex(read_file(truth_path)));
    }

    std::string backend_id() const override { return id_; }

    std::vector<DetectionBox> detect(const fs::path& image_path, std::span<const std::string> queries) override {
        calls_.fetch_add(1);
        auto it = truth_.find(image_path.stem().string());
        if (it == truth_.end()) throw Error(ErrorKind::backend, "mock detector: no ground truth for " + image_path.string());
        if (queries.empty()) return {};
        const auto& t = it->second;
        DetectionBox b;
        b.x_min = t.fg_box.x_min;
        b.y_min = t.fg_box.y_min;
        b.x_max = t.fg_box.x_max;
        b.y_max = t.fg_box.y_max;
        b.score = std::clamp(1.0 - t.occlusion, 0.0, 1.0);
        b.query_index = 0;
        return {b};
    }

    std::size_t calls() const { return calls_.load(); }

private:
    std::unordered_map<std::string, SyntheticGroundTruth> truth_;
    std::string id_;
    std::atomic<std::size_t> calls_{0};
};

inline nlohmann::ordered_json box_to_json(const DetectionBox& b) {
    return {{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}, {"score", b.score}, {"query_index", b.query_index}};
}

inline DetectionBox box_from_json(const nlohmann::json& j) {
    DetectionBox b;
    b.x_min = j.at("x_min").get<double>();
    b.y_min = j.at("y_min").get<double>();
    b.x_max = j.at("x_max").get<double>();
    b.y_max = j.at("y_max").get<double>();
    b.score = j.at("score").get<double>();
    b.query_index = j.at("query_index").get<int>();
    return b;
}

/// Detector running out of process. Requests are
/// {"request_id", "image_path", "queries"}; replies are {"request_id", "boxes"}.
/// The backend_id is obtained with a {"request_id": 0, "info": true} handshake.
class SubprocessDetector final : public DetectorBackend {
public:
    explicit SubprocessDetector(std::string command) : process_(std::move(command)) {
        auto reply = nlohmann::json::parse(process_.transact(R"({"request_id":0,"info":true})"), nullptr, false);
        if (reply.is_discarded() || !reply.contains("backend_id"))
            throw Error(ErrorKind::backend, "detector backend did not answer the info handshake: " + process_.command());
        id_ = reply.at("backend_id").get<std::string>();
    }

    std::string backend_id() const override { return id_; }

    std::vector<DetectionBox> detect(const fs::path& image_path, std::span<const std::string> queries) override {
        std::lock_guard lock(mutex_);
        const std::uint64_t rid = ++next_id_;
        nlohmann::ordered_json req{{"request_id", rid},
                                   {"image_path", fs::absolute(image_path).string()},
                                   {"queries", std::vector<std::string>(queries.begin(), queries.end())}};
        auto reply = nlohmann::json::parse(process_.transact(req.dump()), nullptr, false);
        if (reply.is_discarded()) throw Error(ErrorKind::backend, "malformed detector reply");
        if (reply.contains("error")) throw Error(ErrorKind::backend, "detector error: " + reply["error"].dump());
        if (reply.value("request_id", std::uint64_t{0}) != rid) throw Error(ErrorKind::backend, "detector reply out of sequence");
        std::vector<DetectionBox> boxes;
        try {
            for (const auto& b : reply.at("boxes")) boxes.push_back(box_from_json(b));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::backend, std::string("malformed detector reply: ") + e.what());
        }
        return boxes;
    }

    void restart() {
        std::lock_guard lock(mutex_);
        process_.restart();
    }

private:
    LineProcess process_;
    std::string id_;
    std::mutex mutex_;
    std::uint64_t next_id_ = 0;
};

/// Answers the detector wire protocol on (in, out) until EOF.
inline void serve_detector(DetectorBackend& backend, std::istream& in, std::ostream& out) {
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::ordered_json reply;
        try {
            auto req = nlohmann::json::parse(line);
            reply["request_id"] = req.at("request_id");
            if (req.value("info", false)) {
                reply["backend_id"] = backend.backend_id();
            } else {
                auto queries = req.at("queries").get<std::vector<std::string>>();
                auto boxes = backend.detect(req.at("image_path").get<std::string>(), queries);
                nlohmann::ordered_json arr = nlohmann::ordered_json::array();
                for (const auto& b : boxes) arr.push_back(box_to_json(b));
                reply["boxes"] = std::move(arr);
            }
        } catch (const std::exception& e) {
            reply["error"] = e.what();
        }
        out << reply.dump() << '\n' << std::flush;
    }
}

// ---------------------------------------------------------------------------

inline const std::string kDefaultPromptTemplate = "a photo of a {class_name}";

inline std::string render_prompt(std::string_view tmpl, std::string_view class_name) {
    static constexpr std::string_view placeholder = "{class_name}";
    std::string out(tmpl);
    for (std::size_t pos = out.find(placeholder); pos != std::string::npos; pos = out.find(placeholder, pos + class_name.size()))
        out.replace(pos, placeholder.size(), class_name);
    return out;
}

/// Scores one image. Throws Error(io) for an unreadable image and
/// Error(backend) for a failed or invalid backend answer.
inline ScoreRecord score_image(const ImageRecord& record, const fs::path& image_path, DetectorBackend& backend,
                               std::string_view prompt_template = kDefaultPromptTemplate,
                               Aggregation mode = Aggregation::max) {
    const RgbImage img = read_png(image_path);
    const std::vector<std::string> queries{render_prompt(prompt_template, record.class_name)};
    ScoreRecord out;
    out.image_id = record.image_id;
    out.class_id = record.class_id;
    out.backend_id = backend.backend_id();
    out.boxes = backend.detect(image_path, queries);
    for (const auto& b : out.boxes) {
        auto problem = box_problem(b, img.width, img.height);
        if (!problem.empty()) throw Error(ErrorKind::backend, "backend returned invalid box for " + record.image_id + ": " + problem);
        if (b.query_index >= static_cast<int>(queries.size()))
            throw Error(ErrorKind::backend, "backend returned unknown query_index for " + record.image_id);
    }
    sort_boxes(out.boxes);
    out.score = aggregate_boxes(out.boxes, 0, mode);
    return out;
}

// ---------------------------------------------------------------------------
// Score cache / table serialization. Header {"backend_id", "prompt_template"},
// then one ScoreRecord per line.

inline std::string score_record_line(const ScoreRecord& r) {
    nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
    for (const auto& b : r.boxes) boxes.push_back(box_to_json(b));
    nlohmann::ordered_json j{{"image_id", r.image_id}, {"class_id", r.class_id}, {"score", r.score}, {"backend_id", r.backend_id}, {"boxes", std::move(boxes)}};
    return j.dump() + "\n";
}

inline ScoreRecord parse_score_record(const nlohmann::json& j) {
    ScoreRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.class_id = j.at("class_id").get<int>();
    r.score = j.at("score").get<double>();
    r.backend_id = j.at("backend_id").get<std::string>();
    for (const auto& b : j.at("boxes")) r.boxes.push_back(box_from_json(b));
    return r;
}

inline std::string score_header_line(std::string_view backend_id, std::string_view prompt_template) {
    nlohmann::ordered_json h{{"backend_id", backend_id}, {"prompt_template", prompt_template}};
    return h.dump() + "\n";
}

inline std::string serialize_score_table(const ScoreTable& t, std::string_view prompt_template) {
    std::string out = score_header_line(t.backend_id, prompt_template);
    for (const auto& r : t.records) out += score_record_line(r);
    return out;
}

struct ScoreFile {
    std::string backend_id;
    std::string prompt_template;
    std::vector<ScoreRecord> records;  // file order
};

/// Reads a score cache or table. A torn final line (no newline) is ignored.
inline ScoreFile read_score_file(const fs::path& path) {
    const std::string text = read_file(path);
    ScoreFile f;
    auto lines = split_lines(text);
    if (!text.empty() && text.back() != '\n' && !lines.empty()) lines.pop_back();
    if (lines.empty()) throw Error(ErrorKind::parse, path.string() + ": missing header");
    try {
        auto h = nlohmann::json::parse(lines[0]);
        f.backend_id = h.at("backend_id").get<std::string>();
        f.prompt_template = h.value("prompt_template", kDefaultPromptTemplate);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, path.string() + " line 1: " + e.what());
    }
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        try {
            f.records.push_back(parse_score_record(nlohmann::json::parse(lines[i])));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, path.string() + " line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return f;
}

inline ScoreTable load_score_table(const fs::path& path) {
    auto f = read_score_file(path);
    ScoreTable t;
    t.backend_id = f.backend_id;
    std::map<std::string, ScoreRecord> by_id;
    for (auto& r : f.records) by_id.insert_or_assign(r.image_id, std::move(r));
    for (auto& [id, r] : by_id) t.records.push_back(std::move(r));
    return t;
}

/// Append-only cache; each record is written with a single write so a reader
/// never sees half a record.
class ScoreCacheWriter {
public:
    ScoreCacheWriter(const fs::path& path, std::string_view backend_id, std::string_view prompt_template) {
        if (fs::exists(path) && fs::file_size(path) > 0) {
            // drop a torn final record before appending
            const std::string text = read_file(path);
            const auto nl = text.rfind('\n');
            if (text.back() != '\n') fs::resize_file(path, nl == std::string::npos ? 0 : nl + 1);
        }
        const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
        if (path.has_parent_path()) {
            std::error_code ec;
            fs::create_directories(path.parent_path(), ec);
        }
        file_ = std::fopen(path.c_str(), "ab");
        if (!file_) throw Error(ErrorKind::io, "cannot open score cache " + path.string());
        if (fresh) write_raw(score_header_line(backend_id, prompt_template));
    }
    ~ScoreCacheWriter() {
        if (file_) std::fclose(file_);
    }
    ScoreCacheWriter(const ScoreCacheWriter&) = delete;
    ScoreCacheWriter& operator=(const ScoreCacheWriter&) = delete;

    void append(const ScoreRecord& r) { write_raw(score_record_line(r)); }

private:
    void write_raw(const std::string& s) {
        std::lock_guard lock(mutex_);
        if (std::fwrite(s.data(), 1, s.size(), file_) != s.size() || std::fflush(file_) != 0)
            throw Error(ErrorKind::io, "score cache write failed");
    }
    std::FILE* file_ = nullptr;
    std::mutex mutex_;
};

struct BatchScoreOptions {
    std::string prompt_template = kDefaultPromptTemplate;
    Aggregation aggregation = Aggregation::max;
    int retries = 2;
    std::optional<Split> split;  // restrict to one split; all records otherwise
};

/// Scores every manifest record, reusing cached records for the same backend.
/// Failed images become skip entries and are retried on the next run.
inline ScoreTable batch_score(const DatasetManifest& manifest, DetectorBackend& backend, const fs::path& cache_path,
                              const BatchScoreOptions& opts = {}) {
    const std::string backend_id = backend.backend_id();
    std::map<std::string, ScoreRecord> cached;
    if (!cache_path.empty() && fs::exists(cache_path) && fs::file_size(cache_path) > 0) {
        auto f = read_score_file(cache_path);
        if (f.backend_id != backend_id)
            throw Error(ErrorKind::cache_mismatch, "score cache " + cache_path.string() + " was built by backend '" + f.backend_id +
                                                       "', refusing to mix with '" + backend_id + "'");
        if (f.prompt_template != opts.prompt_template)
            throw Error(ErrorKind::cache_mismatch, "score cache " + cache_path.string() + " was built with prompt template '" +
                                                       f.prompt_template + "'");
        for (auto& r : f.records) cached.insert_or_assign(r.image_id, std::move(r));
    }

    std::vector<const ImageRecord*> todo;
    std::vector<const ImageRecord*> wanted;
    for (const auto& r : manifest.records()) {
        if (opts.split && r.split != *opts.split) continue;
        wanted.push_back(&r);
        auto it = cached.find(r.image_id);
        if (it == cached.end() || it->second.class_id != r.class_id) todo.push_back(&r);
    }

    std::unique_ptr<ScoreCacheWriter> writer;
    if (!cache_path.empty() && !todo.empty()) writer = std::make_unique<ScoreCacheWriter>(cache_path, backend_id, opts.prompt_template);

    std::vector<std::optional<ScoreRecord>> fresh(todo.size());
    std::vector<std::string> failures(todo.size());
    parallel_for(todo.size(), [&](std::size_t i) {
        const ImageRecord& rec = *todo[i];
        const fs::path path = manifest.image_path(rec);
        for (int attempt = 0; attempt <= opts.retries; ++attempt) {
            try {
                fresh[i] = score_image(rec, path, backend, opts.prompt_template, opts.aggregation);
                if (writer) writer->append(*fresh[i]);
                return;
            } catch (const Error& e) {
                failures[i] = e.what();
                if (e.kind() == ErrorKind::io) return;
                if (auto* sub = dynamic_cast<SubprocessDetector*>(&backend); sub && attempt < opts.retries) {
                    try {
                        sub->restart();
                    } catch (const Error&) {
                    }
                }
            }
        }
    });

    std::map<std::string, std::string> failed;
    for (std::size_t i = 0; i < todo.size(); ++i) {
        if (fresh[i])
            cached.insert_or_assign(todo[i]->image_id, std::move(*fresh[i]));
        else
            failed.emplace(todo[i]->image_id, failures[i]);
    }

    ScoreTable table;
    table.backend_id = backend_id;
    for (const ImageRecord* r : wanted) {
        if (auto f = failed.find(r->image_id); f != failed.end()) {
            table.skipped.push_back({r->image_id, f->second});
            continue;
        }
        table.records.push_back(cached.at(r->image_id));
    }
    return table;
}

}  // namespace spurank
