#pragma once

#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "dataset.hpp"
#include "detection.hpp"
#include "features.hpp"
#include "image.hpp"
#include "linear_head.hpp"
#include "ranking.hpp"

namespace spurank {

/// Binary H x W map, 1 inside the best detection rectangle.
struct ForegroundMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> m;  // row-major H x W, values in {0,1}
    std::optional<DetectionBox> source_box;
    bool no_detection = false;
    std::string image_id;

    std::uint8_t at(int r, int c) const { return m[static_cast<std::size_t>(r) * width + c]; }
    std::size_t count() const {
        std::size_t s = 0;
        for (auto v : m) s += v;
        return s;
    }
};

/// Rasterizes the highest-scoring box (ties by x_min, y_min). Box corners are
/// rounded to the nearest integer; pixel (r, c) is foreground iff
/// x_min <= c < x_max and y_min <= r < y_max.
inline ForegroundMask build_mask(int height, int width, std::span<const DetectionBox> boxes, std::string image_id = {}) {
    if (height <= 0 || width <= 0) throw Error(ErrorKind::invalid_argument, "build_mask: empty image dimensions");
    ForegroundMask mask;
    mask.height = height;
    mask.width = width;
    mask.image_id = std::move(image_id);
    mask.m.assign(static_cast<std::size_t>(height) * width, 0);
    for (const auto& b : boxes) {
        auto problem = box_problem(b, width, height);
        if (!problem.empty()) throw Error(ErrorKind::invalid_argument, "build_mask: " + problem);
    }
    if (boxes.empty()) {
        mask.no_detection = true;
        return mask;
    }
    const DetectionBox best = *std::min_element(boxes.begin(), boxes.end(), box_order);
    mask.source_box = best;
    const int x0 = static_cast<int>(std::lround(best.x_min)), x1 = static_cast<int>(std::lround(best.x_max));
    const int y0 = static_cast<int>(std::lround(best.y_min)), y1 = static_cast<int>(std::lround(best.y_max));
    for (int r = std::max(0, y0); r < std::min(height, y1); ++r)
        for (int c = std::max(0, x0); c < std::min(width, x1); ++c) mask.m[static_cast<std::size_t>(r) * width + c] = 1;
    return mask;
}

enum class NoiseRegion { fg, bg };

inline std::string_view to_string(NoiseRegion r) { return r == NoiseRegion::fg ? "fg" : "bg"; }

inline NoiseRegion parse_region(std::string_view s) {
    if (s == "fg") return NoiseRegion::fg;
    if (s == "bg") return NoiseRegion::bg;
    throw Error(ErrorKind::parse, "unknown noise region '" + std::string(s) + "'");
}

struct NoiseConfig {
    double alpha = 0;
    NoiseRegion region = NoiseRegion::fg;
    std::uint64_t seed = 0;
};

struct NoisyImage {
    ImageTensor image;
    bool degenerate = false;  // selected region was empty; image returned unchanged
};

/// Standard normal draw per pixel-channel, keyed by (seed, image_id) only, so
/// fg and bg injections of the same image share one noise field.
inline std::vector<double> noise_field(std::size_t count, std::uint64_t seed, std::string_view image_id) {
    auto rng = keyed_rng(seed, "noise", image_id);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> n(count);
    for (auto& v : n) v = normal(rng);
    return n;
}

/// x + alpha * v / ||v||_2 with v the noise restricted to the chosen region.
/// Pixels outside the region are left untouched and nothing is clamped.
inline NoisyImage inject_noise(const ImageTensor& x, const ForegroundMask& mask, const NoiseConfig& cfg, std::string_view image_id) {
    if (!(cfg.alpha >= 0) || !std::isfinite(cfg.alpha)) throw Error(ErrorKind::invalid_argument, "inject_noise: alpha must be >= 0");
    if (mask.height != x.height || mask.width != x.width || x.values.size() != static_cast<std::size_t>(x.height) * x.width * 3)
        throw Error(ErrorKind::invalid_argument, "inject_noise: mask/image shape mismatch");

    NoisyImage out{x, false};
    const std::uint8_t want = cfg.region == NoiseRegion::fg ? 1 : 0;
    const std::size_t pixels = static_cast<std::size_t>(x.height) * x.width;
    std::size_t region_pixels = 0;
    for (std::size_t p = 0; p < pixels; ++p) region_pixels += mask.m[p] == want;
    if (region_pixels == 0) {
        out.degenerate = true;
        return out;
    }
    if (cfg.alpha == 0) return out;

    const auto n = noise_field(x.values.size(), cfg.seed, image_id);
    double sq = 0;
    for (std::size_t p = 0; p < pixels; ++p)
        if (mask.m[p] == want)
            for (int ch = 0; ch < 3; ++ch) sq += n[p * 3 + ch] * n[p * 3 + ch];
    const double scale = cfg.alpha / std::sqrt(sq);
    for (std::size_t p = 0; p < pixels; ++p) {
        if (mask.m[p] != want) continue;
        for (int ch = 0; ch < 3; ++ch) {
            const std::size_t j = p * 3 + ch;
            out.image.values[j] = static_cast<float>(static_cast<double>(x.values[j]) + scale * n[j]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

struct ImageFailure {
    std::string image_id;
    std::string reason;
};

struct NoiseRow {
    double alpha = 0;
    NoiseRegion region = NoiseRegion::fg;
    double accuracy = 0;
    std::size_t evaluated = 0;
    std::size_t excluded = 0;  // empty selected region (e.g. no detection for fg)
};

struct NoiseReport {
    double clean_accuracy = 0;
    std::size_t clean_evaluated = 0;
    std::vector<NoiseRow> rows;  // alphas outer, regions inner, input order
    std::vector<ImageFailure> failures;
    bool clamped = false;  // noisy pixels are never clamped
};

struct NoiseSweepSpec {
    std::vector<double> alphas{10, 100, 250};
    std::vector<NoiseRegion> regions{NoiseRegion::fg, NoiseRegion::bg};
    std::uint64_t seed = 0;
};

/// Noise sensitivity of several heads over one split. Noisy embeddings are
/// computed once per (image, alpha, region) and shared by every head.
/// An alpha of 0 evaluates every image unperturbed.
inline std::vector<NoiseReport> eval_noise_sweep(BackboneAdapter& backbone, std::span<const LinearHead* const> heads,
                                                 const DatasetManifest& manifest, Split split, const ScoreTable& scores,
                                                 const NoiseSweepSpec& spec) {
    for (double a : spec.alphas)
        if (!(a >= 0)) throw Error(ErrorKind::invalid_argument, "eval_noise_sweep: alpha must be >= 0");
    const auto records = manifest.split_records(split);
    const std::size_t cells = spec.alphas.size() * spec.regions.size();
    const std::size_t d = backbone.dim();

    struct PerImage {
        std::string failure;
        std::vector<float> clean;
        std::vector<std::vector<float>> cell;  // empty when excluded
    };
    std::vector<PerImage> work(records.size());
    parallel_for(records.size(), [&](std::size_t i) {
        const ImageRecord& rec = records[i];
        PerImage& w = work[i];
        try {
            const ScoreRecord* s = scores.find(rec.image_id);
            if (!s) throw Error(ErrorKind::invalid_argument, "no score record");
            const ImageTensor x = to_tensor(read_png(manifest.image_path(rec)));
            const ForegroundMask mask = build_mask(x.height, x.width, s->boxes, rec.image_id);
            w.clean = backbone.embed(x);
            w.cell.resize(cells);
            for (std::size_t a = 0; a < spec.alphas.size(); ++a) {
                for (std::size_t r = 0; r < spec.regions.size(); ++r) {
                    auto& slot = w.cell[a * spec.regions.size() + r];
                    if (spec.alphas[a] == 0) {
                        slot = w.clean;
                        continue;
                    }
                    auto noisy = inject_noise(x, mask, {spec.alphas[a], spec.regions[r], spec.seed}, rec.image_id);
                    if (noisy.degenerate) continue;
                    slot = backbone.embed(noisy.image);
                }
            }
            for (const auto& v : w.cell)
                if (!v.empty() && v.size() != d) throw Error(ErrorKind::backend, "backbone dimension drift");
        } catch (const std::exception& e) {
            w.failure = e.what();
        }
    });

    std::vector<ImageFailure> failures;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (!work[i].failure.empty()) failures.push_back({records[i].image_id, work[i].failure});

    std::vector<NoiseReport> reports(heads.size());
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const LinearHead& head = *heads[h];
        NoiseReport& rep = reports[h];
        rep.failures = failures;
        std::size_t clean_ok = 0;
        std::vector<std::size_t> ok(cells, 0), seen(cells, 0), excluded(cells, 0);
        for (std::size_t i = 0; i < records.size(); ++i) {
            const PerImage& w = work[i];
            if (!w.failure.empty()) continue;
            const int label = records[i].class_id;
            ++rep.clean_evaluated;
            clean_ok += predict_row(head, w.clean).class_id == label;
            for (std::size_t c = 0; c < cells; ++c) {
                if (w.cell[c].empty()) {
                    ++excluded[c];
                    continue;
                }
                ++seen[c];
                ok[c] += predict_row(head, w.cell[c]).class_id == label;
            }
        }
        rep.clean_accuracy = rep.clean_evaluated ? static_cast<double>(clean_ok) / static_cast<double>(rep.clean_evaluated) : 0.0;
        for (std::size_t a = 0; a < spec.alphas.size(); ++a) {
            for (std::size_t r = 0; r < spec.regions.size(); ++r) {
                const std::size_t c = a * spec.regions.size() + r;
                rep.rows.push_back({spec.alphas[a], spec.regions[r],
                                    seen[c] ? static_cast<double>(ok[c]) / static_cast<double>(seen[c]) : 0.0, seen[c], excluded[c]});
            }
        }
    }
    return reports;
}

inline NoiseReport eval_noise_sweep(BackboneAdapter& backbone, const LinearHead& head, const DatasetManifest& manifest, Split split,
                                    const ScoreTable& scores, const NoiseSweepSpec& spec) {
    const LinearHead* heads[] = {&head};
    return eval_noise_sweep(backbone, heads, manifest, split, scores, spec).front();
}

// ---------------------------------------------------------------------------
// OOD evaluation

struct OODMapping {
    std::map<std::string, int> to_base;  // ood class_name -> base class_id

    std::set<int> restricted() const {
        std::set<int> s;
        for (const auto& [name, id] : to_base) s.insert(id);
        return s;
    }
};

/// Lines of "<ood class name> <base class id>"; '#' starts a comment. The
/// class name is everything before the last whitespace-separated token.
inline OODMapping parse_ood_mapping(std::string_view text) {
    OODMapping m;
    std::size_t line_no = 0;
    for (auto line : split_lines(text)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t");
        line = line.substr(first, last - first + 1);
        const auto sep = line.find_last_of(" \t");
        if (sep == std::string::npos) throw Error(ErrorKind::parse, "mapping line " + std::to_string(line_no) + ": expected '<name> <class_id>'");
        std::string name = line.substr(0, line.find_last_not_of(" \t", sep) + 1);
        const std::string id_text = line.substr(sep + 1);
        int id = 0;
        try {
            std::size_t used = 0;
            id = std::stoi(id_text, &used);
            if (used != id_text.size() || id < 0) throw std::invalid_argument("bad id");
        } catch (const std::exception&) {
            throw Error(ErrorKind::parse, "mapping line " + std::to_string(line_no) + ": bad class id '" + id_text + "'");
        }
        if (!m.to_base.emplace(name, id).second)
            throw Error(ErrorKind::parse, "mapping line " + std::to_string(line_no) + ": class '" + name + "' mapped twice");
    }
    return m;
}

struct OODReport {
    double restricted_accuracy = 0;
    double unrestricted_accuracy = 0;
    std::size_t n = 0;
    std::vector<int> restricted_classes;
};

/// OOD accuracy from precomputed features whose labels are base class ids.
/// Restricted accuracy takes the argmax over the mapped classes only.
inline OODReport eval_ood_features(const LinearHead& head, const FeatureMatrix& features, const OODMapping& mapping) {
    if (features.rows() == 0) throw Error(ErrorKind::invalid_argument, "eval_ood: empty OOD set");
    const auto restricted = mapping.restricted();
    std::vector<bool> allowed_storage(head.num_classes(), false);
    for (int c : restricted) {
        auto it = std::find(head.class_ids.begin(), head.class_ids.end(), c);
        if (it == head.class_ids.end()) throw Error(ErrorKind::invalid_argument, "eval_ood: mapped class " + std::to_string(c) + " not in head");
        allowed_storage[static_cast<std::size_t>(it - head.class_ids.begin())] = true;
    }
    std::unique_ptr<bool[]> allowed(new bool[allowed_storage.size()]);
    for (std::size_t c = 0; c < allowed_storage.size(); ++c) allowed[c] = allowed_storage[c];
    const std::span<const bool> allowed_span(allowed.get(), allowed_storage.size());

    OODReport rep;
    rep.n = features.rows();
    rep.restricted_classes.assign(restricted.begin(), restricted.end());
    std::size_t ok_r = 0, ok_u = 0;
    for (std::size_t i = 0; i < features.rows(); ++i) {
        const auto z = head_logits(head, features.row(i));
        ok_u += head.class_ids[argmax_index(z)] == features.labels[i];
        ok_r += head.class_ids[argmax_index(z, allowed_span)] == features.labels[i];
    }
    rep.restricted_accuracy = static_cast<double>(ok_r) / static_cast<double>(rep.n);
    rep.unrestricted_accuracy = static_cast<double>(ok_u) / static_cast<double>(rep.n);
    return rep;
}

/// Records used as the OOD set: the manifest's ood split, or every record
/// when the manifest has no ood split.
inline std::vector<ImageRecord> ood_records(const DatasetManifest& manifest) {
    auto recs = manifest.split_records(Split::ood);
    return recs.empty() ? manifest.records() : recs;
}

/// Features for the OOD set, relabelled to base class ids through `mapping`.
inline FeatureMatrix ood_features(BackboneAdapter& backbone, const DatasetManifest& manifest, const OODMapping& mapping,
                                  const fs::path& cache = {}) {
    std::vector<std::string> ids;
    std::map<std::string, int> base_label;
    for (const auto& r : ood_records(manifest)) {
        auto it = mapping.to_base.find(r.class_name);
        if (it == mapping.to_base.end()) throw Error(ErrorKind::invalid_argument, "eval_ood: unmapped OOD class '" + r.class_name + "'");
        ids.push_back(r.image_id);
        base_label[r.image_id] = it->second;
    }
    FeatureMatrix fm = extract_features(ids, manifest, backbone, cache);
    for (std::size_t i = 0; i < fm.rows(); ++i) fm.labels[i] = base_label.at(fm.image_ids[i]);
    return fm;
}

inline OODReport eval_ood(BackboneAdapter& backbone, const LinearHead& head, const DatasetManifest& ood_manifest, const OODMapping& mapping,
                          const fs::path& cache = {}) {
    return eval_ood_features(head, ood_features(backbone, ood_manifest, mapping, cache), mapping);
}

// ---------------------------------------------------------------------------
// Stratified evaluation

struct SliceAccuracy {
    std::size_t index = 0;
    double accuracy = 0;
    std::size_t n = 0;
    std::vector<int> skipped_classes;
};

struct StratifiedReport {
    std::vector<SliceAccuracy> slices;
    double mean_accuracy = 0;  // unweighted mean over slices
};

/// Accuracy per rank slice; `features` must hold a row for every slice member.
inline StratifiedReport eval_stratified(const LinearHead& head, const FeatureMatrix& features, std::span<const EvalSlice> slices) {
    if (slices.empty()) throw Error(ErrorKind::invalid_argument, "eval_stratified: no slices");
    StratifiedReport rep;
    double sum = 0;
    for (const auto& s : slices) {
        std::vector<std::string> ids;
        for (const auto& [c, id] : s.members) ids.push_back(id);
        const FeatureMatrix sub = features.select(ids);
        SliceAccuracy a;
        a.index = s.index;
        a.n = sub.rows();
        a.skipped_classes = s.skipped_classes;
        a.accuracy = sub.rows() ? evaluate_accuracy(head, sub).accuracy : 0.0;
        sum += a.accuracy;
        rep.slices.push_back(std::move(a));
    }
    rep.mean_accuracy = sum / static_cast<double>(rep.slices.size());
    return rep;
}

inline StratifiedReport eval_stratified(BackboneAdapter& backbone, const LinearHead& head, const DatasetManifest& manifest,
                                        std::span<const EvalSlice> slices, const fs::path& cache = {}) {
    std::vector<std::string> ids;
    for (const auto& s : slices)
        for (const auto& [c, id] : s.members) ids.push_back(id);
    return eval_stratified(head, extract_features(ids, manifest, backbone, cache), slices);
}

}  // namespace spurank
