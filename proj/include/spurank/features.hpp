#pragma once

#include <atomic>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "image.hpp"
#include "subprocess.hpp"

namespace spurank {

/// Frozen-backbone features, one row per image, rows sorted by image_id.
struct FeatureMatrix {
    std::size_t d = 0;
    std::vector<float> values;  // row-major n x d
    std::vector<int> labels;
    std::vector<std::string> image_ids;

    std::size_t rows() const { return image_ids.size(); }
    std::span<const float> row(std::size_t i) const { return {values.data() + i * d, d}; }
    std::span<float> row(std::size_t i) { return {values.data() + i * d, d}; }

    bool operator==(const FeatureMatrix&) const = default;

    void check() const {
        if (values.size() != image_ids.size() * d || labels.size() != image_ids.size())
            throw Error(ErrorKind::invalid_argument, "FeatureMatrix: misaligned rows");
        for (float v : values)
            if (!std::isfinite(v)) throw Error(ErrorKind::numeric, "FeatureMatrix: non-finite value");
    }

    /// Rows for the given ids, in sorted id order.
    FeatureMatrix select(std::vector<std::string> ids) const {
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        std::vector<std::size_t> order(image_ids.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (!std::is_sorted(image_ids.begin(), image_ids.end()))
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return image_ids[a] < image_ids[b]; });
        FeatureMatrix out;
        out.d = d;
        for (const auto& id : ids) {
            auto it = std::lower_bound(order.begin(), order.end(), id, [&](std::size_t a, const std::string& v) { return image_ids[a] < v; });
            if (it == order.end() || image_ids[*it] != id) throw Error(ErrorKind::invalid_argument, "FeatureMatrix: no row for '" + id + "'");
            const std::size_t i = *it;
            out.image_ids.push_back(id);
            out.labels.push_back(labels[i]);
            auto r = row(i);
            out.values.insert(out.values.end(), r.begin(), r.end());
        }
        return out;
    }
};

// ---------------------------------------------------------------------------

class BackboneAdapter {
public:
    virtual ~BackboneAdapter() = default;
    virtual std::string backbone_id() const = 0;
    virtual std::size_t dim() const = 0;
    /// Embeds an image tensor in [0,1] model-input scale (unclamped).
    virtual std::vector<float> embed(const ImageTensor& image) = 0;
    /// Embeds an image file; adapters with their own decoding may override.
    virtual std::vector<float> embed_file(const fs::path& path) { return embed(to_tensor(read_png(path))); }
};

/// Deterministic stand-in backbone: 16x16 box-average downsample, a fixed
/// random projection to 64 dimensions, then per-vector standardization.
class MockBackbone final : public BackboneAdapter {
public:
    static constexpr int kGrid = 16;
    static constexpr std::size_t kInputDim = kGrid * kGrid * 3;
    static constexpr std::size_t kDim = 64;

    MockBackbone() : projection_(kDim * kInputDim) {
        auto rng = keyed_rng(0x5eed, "mock-backbone", "projection-v1");
        const double scale = std::sqrt(3.0 / static_cast<double>(kInputDim));
        for (auto& w : projection_) w = (2.0 * unit_uniform(rng) - 1.0) * scale;
    }

    std::string backbone_id() const override { return "mock-backbone-v1"; }
    std::size_t dim() const override { return kDim; }

    std::vector<float> embed(const ImageTensor& image) override {
        calls_.fetch_add(1);
        if (image.height < kGrid || image.width < kGrid || image.values.size() != static_cast<std::size_t>(image.height) * image.width * 3)
            throw Error(ErrorKind::invalid_argument, "mock backbone: image must be at least 16x16x3");

        std::vector<double> pooled(kInputDim, 0.0);
        for (int gr = 0; gr < kGrid; ++gr) {
            const int r0 = gr * image.height / kGrid, r1 = (gr + 1) * image.height / kGrid;
            for (int gc = 0; gc < kGrid; ++gc) {
                const int c0 = gc * image.width / kGrid, c1 = (gc + 1) * image.width / kGrid;
                double acc[3] = {0, 0, 0};
                for (int r = r0; r < r1; ++r)
                    for (int c = c0; c < c1; ++c)
                        for (int ch = 0; ch < 3; ++ch) acc[ch] += image.at(r, c, ch);
                const double count = static_cast<double>((r1 - r0) * (c1 - c0));
                for (int ch = 0; ch < 3; ++ch) pooled[static_cast<std::size_t>((gr * kGrid + gc) * 3 + ch)] = acc[ch] / count;
            }
        }

        std::vector<double> z = project(pooled);
        double mean = 0;
        for (double v : z) mean += v;
        mean /= static_cast<double>(kDim);
        double var = 0;
        for (double v : z) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / static_cast<double>(kDim));
        std::vector<float> out(kDim, 0.0f);
        if (sd > 1e-12)
            for (std::size_t i = 0; i < kDim; ++i) out[i] = static_cast<float>((z[i] - mean) / sd);
        return out;
    }

    /// The linear stage alone (before standardization).
    std::vector<double> project(std::span<const double> pooled) const {
        std::vector<double> z(kDim, 0.0);
        for (std::size_t o = 0; o < kDim; ++o) {
            const double* w = &projection_[o * kInputDim];
            double s = 0;
            for (std::size_t i = 0; i < kInputDim; ++i) s += w[i] * pooled[i];
            z[o] = s;
        }
        return z;
    }

    std::size_t calls() const { return calls_.load(); }

private:
    std::vector<double> projection_;
    std::atomic<std::size_t> calls_{0};
};

/// Backbone running out of process. Info handshake {"request_id":0,"info":true}
/// answers {"backbone_id","d"}. Embedding requests carry either "image_path"
/// or "tensor_path" (raw little-endian float32 HWC, with "height"/"width");
/// replies are {"request_id","embedding":[...]}.
class SubprocessBackbone final : public BackboneAdapter {
public:
    explicit SubprocessBackbone(std::string command, fs::path scratch_dir = fs::temp_directory_path())
        : process_(std::move(command)), scratch_(std::move(scratch_dir)) {
        auto reply = nlohmann::json::parse(process_.transact(R"({"request_id":0,"info":true})"), nullptr, false);
        if (reply.is_discarded() || !reply.contains("backbone_id") || !reply.contains("d"))
            throw Error(ErrorKind::backend, "backbone did not answer the info handshake: " + process_.command());
        id_ = reply.at("backbone_id").get<std::string>();
        d_ = reply.at("d").get<std::size_t>();
    }

    std::string backbone_id() const override { return id_; }
    std::size_t dim() const override { return d_; }

    std::vector<float> embed(const ImageTensor& image) override {
        std::lock_guard lock(mutex_);
        const fs::path tensor = scratch_ / ("spurank-tensor-" + std::to_string(::getpid()) + ".f32");
        {
            std::ofstream out(tensor, std::ios::binary | std::ios::trunc);
            out.write(reinterpret_cast<const char*>(image.values.data()), static_cast<std::streamsize>(image.values.size() * sizeof(float)));
            if (!out) throw Error(ErrorKind::io, "cannot write scratch tensor " + tensor.string());
        }
        nlohmann::ordered_json req{{"request_id", ++next_id_}, {"tensor_path", tensor.string()}, {"height", image.height}, {"width", image.width}};
        return roundtrip(req);
    }

    std::vector<float> embed_file(const fs::path& path) override {
        std::lock_guard lock(mutex_);
        nlohmann::ordered_json req{{"request_id", ++next_id_}, {"image_path", fs::absolute(path).string()}};
        return roundtrip(req);
    }

private:
    std::vector<float> roundtrip(const nlohmann::ordered_json& req) {
        auto reply = nlohmann::json::parse(process_.transact(req.dump()), nullptr, false);
        if (reply.is_discarded()) throw Error(ErrorKind::backend, "malformed backbone reply");
        if (reply.contains("error")) throw Error(ErrorKind::backend, "backbone error: " + reply["error"].dump());
        auto v = reply.at("embedding").get<std::vector<float>>();
        if (v.size() != d_) throw Error(ErrorKind::backend, "backbone returned dimension " + std::to_string(v.size()));
        return v;
    }

    LineProcess process_;
    fs::path scratch_;
    std::string id_;
    std::size_t d_ = 0;
    std::mutex mutex_;
    std::uint64_t next_id_ = 0;
};

/// Answers the backbone wire protocol on (in, out) until EOF.
inline void serve_backbone(BackboneAdapter& backbone, std::istream& in, std::ostream& out) {
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::ordered_json reply;
        try {
            auto req = nlohmann::json::parse(line);
            reply["request_id"] = req.at("request_id");
            if (req.value("info", false)) {
                reply["backbone_id"] = backbone.backbone_id();
                reply["d"] = backbone.dim();
            } else if (req.contains("image_path")) {
                reply["embedding"] = backbone.embed_file(req.at("image_path").get<std::string>());
            } else {
                ImageTensor t(req.at("height").get<int>(), req.at("width").get<int>());
                std::ifstream f(req.at("tensor_path").get<std::string>(), std::ios::binary);
                f.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)));
                if (!f) throw Error(ErrorKind::io, "short tensor file");
                reply["embedding"] = backbone.embed(t);
            }
        } catch (const std::exception& e) {
            reply["error"] = e.what();
        }
        out << reply.dump() << '\n' << std::flush;
    }
}

// ---------------------------------------------------------------------------
// Feature cache: binary header + float32 rows in arrival order, and a
// sidecar "<cache>.idx" with one {"image_id","row_offset"} per line. A row is
// visible only once its index line exists.

inline constexpr char kFeatureMagic[8] = {'S', 'P', 'R', 'K', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureCacheVersion = 1;

inline fs::path feature_index_path(const fs::path& cache) {
    fs::path p = cache;
    p += ".idx";
    return p;
}

namespace detail {
inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(std::string_view s, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}
inline void put_f32(std::string& s, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(s, bits);
}
inline float get_f32(std::string_view s, std::size_t at) {
    std::uint32_t bits = get_u32(s, at);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}
}  // namespace detail

inline std::string feature_cache_header(std::string_view backbone_id, std::size_t d) {
    std::string h(kFeatureMagic, 8);
    detail::put_u32(h, kFeatureCacheVersion);
    detail::put_u32(h, static_cast<std::uint32_t>(backbone_id.size()));
    h.append(backbone_id);
    detail::put_u32(h, static_cast<std::uint32_t>(d));
    h.push_back(0);  // dtype: float32
    h.push_back(1);  // row-major
    return h;
}

struct FeatureCacheContents {
    std::string backbone_id;
    std::size_t d = 0;
    std::map<std::string, std::vector<float>> rows;
    std::size_t row_count = 0;  // rows physically present in the payload
};

inline FeatureCacheContents read_feature_cache(const fs::path& cache) {
    const std::string bytes = read_file(cache);
    FeatureCacheContents c;
    if (bytes.size() < 18 || std::memcmp(bytes.data(), kFeatureMagic, 8) != 0)
        throw Error(ErrorKind::parse, "not a feature cache: " + cache.string());
    if (detail::get_u32(bytes, 8) != kFeatureCacheVersion) throw Error(ErrorKind::parse, "unsupported feature cache version");
    const std::size_t id_len = detail::get_u32(bytes, 12);
    if (bytes.size() < 16 + id_len + 6) throw Error(ErrorKind::parse, "truncated feature cache header");
    c.backbone_id = bytes.substr(16, id_len);
    c.d = detail::get_u32(bytes, 16 + id_len);
    if (bytes[20 + id_len] != 0 || bytes[21 + id_len] != 1) throw Error(ErrorKind::parse, "unsupported feature cache layout");
    const std::size_t payload = 22 + id_len;
    const std::size_t row_bytes = c.d * 4;
    c.row_count = row_bytes ? (bytes.size() - payload) / row_bytes : 0;

    const fs::path idx = feature_index_path(cache);
    if (!fs::exists(idx)) return c;
    const std::string idx_text = read_file(idx);
    auto lines = split_lines(idx_text);
    if (!idx_text.empty() && idx_text.back() != '\n' && !lines.empty()) lines.pop_back();
    for (const auto& line : lines) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw Error(ErrorKind::parse, "corrupt feature index line in " + idx.string());
        const std::size_t off = j.at("row_offset").get<std::size_t>();
        if (off >= c.row_count) continue;  // row never completed
        std::vector<float> row(c.d);
        for (std::size_t k = 0; k < c.d; ++k) row[k] = detail::get_f32(bytes, payload + off * row_bytes + k * 4);
        c.rows.insert_or_assign(j.at("image_id").get<std::string>(), std::move(row));
    }
    return c;
}

/// Cuts the payload back to whole rows and rewrites the index without torn
/// lines or entries pointing past the last whole row.
inline void repair_feature_cache(const fs::path& cache) {
    const auto c = read_feature_cache(cache);
    const auto whole = feature_cache_header(c.backbone_id, c.d).size() + c.row_count * c.d * 4;
    if (fs::file_size(cache) != whole) fs::resize_file(cache, whole);
    const fs::path idx = feature_index_path(cache);
    if (!fs::exists(idx)) return;
    const std::string text = read_file(idx);
    auto lines = split_lines(text);
    if (!text.empty() && text.back() != '\n' && !lines.empty()) lines.pop_back();
    std::string kept;
    for (const auto& line : lines) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (j.at("row_offset").get<std::size_t>() < c.row_count) kept += line + "\n";
    }
    if (kept != text) write_file_atomic(idx, kept);
}

/// Appends rows to a cache file, creating it with a header if needed.
inline void append_feature_rows(const fs::path& cache, std::string_view backbone_id, std::size_t d, std::size_t first_offset,
                                const std::vector<std::pair<std::string, std::vector<float>>>& rows) {
    const bool fresh = !fs::exists(cache) || fs::file_size(cache) == 0;
    if (cache.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(cache.parent_path(), ec);
    }
    std::ofstream data(cache, std::ios::binary | std::ios::app);
    std::ofstream index(feature_index_path(cache), std::ios::binary | std::ios::app);
    if (!data || !index) throw Error(ErrorKind::io, "cannot open feature cache " + cache.string());
    if (fresh) {
        const auto h = feature_cache_header(backbone_id, d);
        data.write(h.data(), static_cast<std::streamsize>(h.size()));
    }
    std::size_t offset = first_offset;
    for (const auto& [id, row] : rows) {
        std::string payload;
        payload.reserve(d * 4);
        for (float f : row) detail::put_f32(payload, f);
        data.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        data.flush();
        nlohmann::ordered_json j{{"image_id", id}, {"row_offset", offset++}};
        const std::string line = j.dump() + "\n";
        index.write(line.data(), static_cast<std::streamsize>(line.size()));
        index.flush();
    }
    if (!data || !index) throw Error(ErrorKind::io, "feature cache write failed for " + cache.string());
}

/// One row per requested id (sorted), reusing cached rows bit-exactly.
inline FeatureMatrix extract_features(std::vector<std::string> image_ids, const DatasetManifest& manifest,
                                      BackboneAdapter& backbone, const fs::path& cache_path = {}) {
    std::sort(image_ids.begin(), image_ids.end());
    image_ids.erase(std::unique(image_ids.begin(), image_ids.end()), image_ids.end());
    for (const auto& id : image_ids) manifest.at(id);

    const std::size_t d = backbone.dim();
    FeatureCacheContents cached;
    const bool have_cache = !cache_path.empty() && fs::exists(cache_path) && fs::file_size(cache_path) > 0;
    if (have_cache) {
        cached = read_feature_cache(cache_path);
        if (cached.backbone_id != backbone.backbone_id())
            throw Error(ErrorKind::cache_mismatch, "feature cache " + cache_path.string() + " belongs to backbone '" + cached.backbone_id + "'");
        if (cached.d != d)
            throw Error(ErrorKind::cache_mismatch, "feature cache dimension " + std::to_string(cached.d) + " differs from backbone dimension " +
                                                       std::to_string(d));
    }

    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < image_ids.size(); ++i)
        if (!cached.rows.count(image_ids[i])) missing.push_back(i);

    std::vector<std::vector<float>> computed(missing.size());
    parallel_for(missing.size(), [&](std::size_t m) {
        const ImageRecord& rec = manifest.at(image_ids[missing[m]]);
        auto v = backbone.embed_file(manifest.image_path(rec));
        if (v.size() != d) throw Error(ErrorKind::backend, "backbone dimension drift on " + rec.image_id);
        for (float f : v)
            if (!std::isfinite(f)) throw Error(ErrorKind::numeric, "non-finite feature for " + rec.image_id);
        computed[m] = std::move(v);
    });

    if (!cache_path.empty() && !missing.empty()) {
        if (have_cache) repair_feature_cache(cache_path);
        std::vector<std::pair<std::string, std::vector<float>>> rows;
        for (std::size_t m = 0; m < missing.size(); ++m) rows.emplace_back(image_ids[missing[m]], computed[m]);
        append_feature_rows(cache_path, backbone.backbone_id(), d, have_cache ? cached.row_count : 0, rows);
    }

    FeatureMatrix fm;
    fm.d = d;
    fm.values.reserve(image_ids.size() * d);
    std::size_t next_missing = 0;
    for (std::size_t i = 0; i < image_ids.size(); ++i) {
        const std::vector<float>* row;
        if (next_missing < missing.size() && missing[next_missing] == i)
            row = &computed[next_missing++];
        else
            row = &cached.rows.at(image_ids[i]);
        fm.values.insert(fm.values.end(), row->begin(), row->end());
        fm.labels.push_back(manifest.at(image_ids[i]).class_id);
        fm.image_ids.push_back(image_ids[i]);
    }
    return fm;
}

}  // namespace spurank
