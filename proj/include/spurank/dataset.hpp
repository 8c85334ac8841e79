#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace spurank {

struct ImageRecord {
    std::string image_id;
    int class_id = 0;
    std::string class_name;
    Split split = Split::train;
    std::string path;  // relative to the manifest root

    bool operator==(const ImageRecord&) const = default;
};

/// Image identities for one dataset. Records are kept sorted by image_id.
class DatasetManifest {
public:
    DatasetManifest() = default;
    DatasetManifest(fs::path root, std::map<int, std::string> classes, std::vector<ImageRecord> records,
                    fs::path base_dir = {})
        : root_(std::move(root)), base_dir_(std::move(base_dir)), classes_(std::move(classes)), records_(std::move(records)) {
        std::sort(records_.begin(), records_.end(),
                  [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });
        reindex();
    }

    const fs::path& root() const { return root_; }
    /// Directory used to resolve a relative root (the manifest file's directory).
    const fs::path& base_dir() const { return base_dir_; }
    const std::map<int, std::string>& classes() const { return classes_; }
    const std::vector<ImageRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }

    fs::path resolved_root() const {
        if (root_.is_absolute() || base_dir_.empty()) return root_;
        return base_dir_ / root_;
    }
    fs::path image_path(const ImageRecord& r) const { return resolved_root() / r.path; }

    const ImageRecord* find(std::string_view image_id) const {
        auto it = index_.find(std::string(image_id));
        return it == index_.end() ? nullptr : &records_[it->second];
    }
    const ImageRecord& at(std::string_view image_id) const {
        if (const ImageRecord* r = find(image_id)) return *r;
        throw Error(ErrorKind::invalid_argument, "image '" + std::string(image_id) + "' not in manifest");
    }

    std::vector<ImageRecord> split_records(Split s) const {
        std::vector<ImageRecord> out;
        for (const auto& r : records_)
            if (r.split == s) out.push_back(r);
        return out;
    }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < records_.size(); ++i) index_.emplace(records_[i].image_id, i);
    }

    fs::path root_;
    fs::path base_dir_;
    std::map<int, std::string> classes_;
    std::vector<ImageRecord> records_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Line format: first line {"root": ..., "classes": [{"class_id", "class_name"}...]},
// then one {"image_id", "class_id", "class_name", "split", "path"} per line.

inline std::string serialize_manifest(const DatasetManifest& m) {
    using nlohmann::ordered_json;
    ordered_json header;
    header["root"] = m.root().generic_string();
    ordered_json classes = ordered_json::array();
    for (const auto& [id, name] : m.classes()) classes.push_back(ordered_json{{"class_id", id}, {"class_name", name}});
    header["classes"] = std::move(classes);
    std::string out = header.dump();
    out.push_back('\n');
    for (const auto& r : m.records()) {
        ordered_json line{{"image_id", r.image_id},
                          {"class_id", r.class_id},
                          {"class_name", r.class_name},
                          {"split", std::string(to_string(r.split))},
                          {"path", r.path}};
        out += line.dump();
        out.push_back('\n');
    }
    return out;
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
    write_file_atomic(path, serialize_manifest(m));
}

/// Parses the manifest text. Errors name the 1-based line number.
inline DatasetManifest parse_manifest(std::string_view text, const fs::path& base_dir = {}) {
    auto lines = split_lines(text);
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty()) throw Error(ErrorKind::parse, "manifest line 1: missing header");

    auto fail = [](std::size_t line_no, const std::string& what) -> Error {
        return Error(ErrorKind::parse, "manifest line " + std::to_string(line_no) + ": " + what);
    };

    fs::path root;
    std::map<int, std::string> classes;
    try {
        auto header = nlohmann::json::parse(lines[0]);
        root = header.at("root").get<std::string>();
        for (const auto& c : header.at("classes")) {
            int id = c.at("class_id").get<int>();
            if (id < 0) throw fail(1, "negative class_id");
            if (!classes.emplace(id, c.at("class_name").get<std::string>()).second)
                throw fail(1, "duplicate class_id " + std::to_string(id));
        }
    } catch (const nlohmann::json::exception& e) {
        throw fail(1, e.what());
    }

    std::vector<ImageRecord> records;
    std::unordered_set<std::string> seen;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        ImageRecord r;
        try {
            auto j = nlohmann::json::parse(lines[i]);
            r.image_id = j.at("image_id").get<std::string>();
            r.class_id = j.at("class_id").get<int>();
            r.class_name = j.at("class_name").get<std::string>();
            r.split = parse_split(j.at("split").get<std::string>());
            r.path = j.at("path").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw fail(i + 1, e.what());
        } catch (const Error& e) {
            throw fail(i + 1, e.what());
        }
        if (r.image_id.empty()) throw fail(i + 1, "empty image_id");
        if (!seen.insert(r.image_id).second)
            throw Error(ErrorKind::duplicate_id, "manifest line " + std::to_string(i + 1) + ": duplicate image_id '" + r.image_id + "'");
        if (!classes.count(r.class_id))
            throw Error(ErrorKind::unknown_class, "manifest line " + std::to_string(i + 1) + ": class_id " +
                                                      std::to_string(r.class_id) + " absent from class map");
        records.push_back(std::move(r));
    }
    return DatasetManifest(std::move(root), std::move(classes), std::move(records), base_dir);
}

inline DatasetManifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw Error(ErrorKind::io, "manifest not found: " + path.string());
    return parse_manifest(read_file(path), path.parent_path());
}

// ---------------------------------------------------------------------------

enum class IssueKind { duplicate_id, unknown_class, empty_class_name, path_outside_root, missing_file, unsorted };

struct ValidationIssue {
    IssueKind kind;
    std::string image_id;
    std::string message;
};

using ValidationReport = std::vector<ValidationIssue>;

inline bool path_escapes_root(const std::string& p) {
    fs::path rel(p);
    if (p.empty() || rel.is_absolute() || rel.has_root_name()) return true;
    int depth = 0;
    for (const auto& part : rel.lexically_normal()) {
        if (part == "..") {
            if (--depth < 0) return true;
        } else if (part != "." && !part.empty()) {
            ++depth;
        }
    }
    return false;
}

/// Lists every invariant violation; an empty report means the manifest is valid.
inline ValidationReport validate_manifest(const DatasetManifest& m, bool check_files) {
    ValidationReport report;
    std::unordered_set<std::string> seen;
    const std::string* prev = nullptr;
    for (const auto& r : m.records()) {
        if (!seen.insert(r.image_id).second)
            report.push_back({IssueKind::duplicate_id, r.image_id, "duplicate image_id"});
        if (prev && *prev > r.image_id) report.push_back({IssueKind::unsorted, r.image_id, "records not sorted by image_id"});
        prev = &r.image_id;
        if (!m.classes().count(r.class_id))
            report.push_back({IssueKind::unknown_class, r.image_id, "class_id " + std::to_string(r.class_id) + " not in class map"});
        if (r.class_name.empty()) report.push_back({IssueKind::empty_class_name, r.image_id, "empty class_name"});
        if (path_escapes_root(r.path)) {
            report.push_back({IssueKind::path_outside_root, r.image_id, "path '" + r.path + "' does not resolve under root"});
        } else if (check_files) {
            std::error_code ec;
            auto p = m.image_path(r);
            std::ifstream probe(p, std::ios::binary);
            if (!fs::is_regular_file(p, ec) || !probe)
                report.push_back({IssueKind::missing_file, r.image_id, "unreadable file " + p.string()});
        }
    }
    return report;
}

}  // namespace spurank
