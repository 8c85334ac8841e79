#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "image.hpp"

namespace spurank {

// Synthetic spurious-correlation fixture: each class owns a glyph (the core
// object) and a background palette color (the spurious cue). The glyph is
// blended toward the background by an occlusion weight o, which serves as the
// ground-truth spuriosity of the image.

struct SyntheticConfig {
    int num_classes = 10;
    int per_class = 300;      // train images per class
    int val_per_class = 50;
    int ood_per_class = 50;
    int ood_classes = 5;      // OOD split covers classes [0, ood_classes)
    int image_size = 64;      // square, RGB
    int jitter_cells = 1;     // glyph offset range, in glyph cells, around the default position
    double p_spur_train = 0.9;
    double p_spur_val = 0.5;
    double p_spur_ood = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        auto bad = [](const std::string& m) { return Error(ErrorKind::invalid_argument, "SyntheticConfig: " + m); };
        if (num_classes < 2) throw bad("num_classes must be >= 2");
        if (num_classes > 64) throw bad("num_classes must be <= 64 (palette size)");
        if (per_class < 1) throw bad("per_class must be >= 1");
        if (val_per_class < 0 || ood_per_class < 0) throw bad("split sizes must be >= 0");
        if (ood_classes < 0 || ood_classes > num_classes) throw bad("ood_classes out of range");
        if (image_size < 16 || image_size % 16 != 0) throw bad("image_size must be a positive multiple of 16");
        if (jitter_cells < 0 || jitter_cells > 4) throw bad("jitter_cells must lie in [0,4]");
        for (double p : {p_spur_train, p_spur_val, p_spur_ood})
            if (!(p >= 0.0 && p <= 1.0)) throw bad("p_spur must lie in [0,1]");
    }
};

/// Pixel rectangle, half-open: columns [x_min, x_max), rows [y_min, y_max).
struct PixelBox {
    int x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    bool operator==(const PixelBox&) const = default;
};

struct SyntheticGroundTruth {
    std::string image_id;
    std::string path;
    double occlusion = 0.0;
    bool bg_correlated = false;
    int background_class = 0;
    PixelBox fg_box;
};

struct SyntheticDataset {
    DatasetManifest manifest;
    std::vector<SyntheticGroundTruth> truth;  // sorted by image_id
};

using Rgb = std::array<std::uint8_t, 3>;

/// Class background colors: farthest-point order over a 4-level RGB lattice,
/// so any two palette colors differ by at least 64 in some channel.
inline std::vector<Rgb> class_palette(int num_classes) {
    static constexpr std::array<std::uint8_t, 4> levels{32, 96, 160, 224};
    std::vector<Rgb> lattice;
    for (auto r : levels)
        for (auto g : levels)
            for (auto b : levels) lattice.push_back({r, g, b});
    std::vector<Rgb> chosen;
    std::vector<bool> used(lattice.size(), false);
    std::vector<long> best(lattice.size(), std::numeric_limits<long>::max());
    std::size_t pick = 0;
    for (int c = 0; c < num_classes && c < static_cast<int>(lattice.size()); ++c) {
        used[pick] = true;
        chosen.push_back(lattice[pick]);
        std::size_t next = 0;
        long far = -1;
        for (std::size_t i = 0; i < lattice.size(); ++i) {
            long d = 0;
            for (int ch = 0; ch < 3; ++ch) {
                long diff = long(lattice[i][ch]) - long(lattice[pick][ch]);
                d += diff * diff;
            }
            best[i] = std::min(best[i], d);
            if (!used[i] && best[i] > far) {
                far = best[i];
                next = i;
            }
        }
        pick = next;
    }
    return chosen;
}

inline constexpr int kGlyphCells = 8;

/// 8x8 on/off bitmap for a class. Depends only on class_id, never on the seed.
inline std::array<bool, kGlyphCells * kGlyphCells> class_glyph(int class_id) {
    auto rng = keyed_rng(0x9179, "glyph", std::to_string(class_id));
    std::array<bool, kGlyphCells * kGlyphCells> bits{};
    for (auto& b : bits) b = (rng() >> 63) != 0;
    return bits;
}

inline std::string synthetic_class_name(int class_id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "class_%02d", class_id);
    return buf;
}

inline std::string synthetic_image_id(Split split, int class_id, int index) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_c%02d_%04d", std::string(to_string(split)).c_str(), class_id, index);
    return buf;
}

struct RenderedImage {
    RgbImage image;
    SyntheticGroundTruth truth;
};

/// Background fill plus the class glyph at (x0, y0), blended toward the
/// background with weight `occlusion`. At occlusion 1 the glyph vanishes.
inline RgbImage paint_scene(int size, int class_id, const Rgb& bg, double occlusion, int x0, int y0) {
    const int cell = size / 16;
    const int extent = cell * kGlyphCells;
    RgbImage img(size, size);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) std::copy(bg.begin(), bg.end(), img.at(r, c));
    const auto glyph = class_glyph(class_id);
    for (int r = 0; r < extent; ++r) {
        for (int c = 0; c < extent; ++c) {
            const bool on = glyph[static_cast<std::size_t>((r / cell) * kGlyphCells + c / cell)];
            const double g = on ? 255.0 : 0.0;
            std::uint8_t* px = img.at(y0 + r, x0 + c);
            for (int ch = 0; ch < 3; ++ch) {
                const double v = (1.0 - occlusion) * g + occlusion * static_cast<double>(bg[ch]);
                px[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return img;
}

/// Renders one image. All randomness is keyed by (seed, image_id).
inline RenderedImage render_synthetic(const SyntheticConfig& cfg, Split split, int class_id, int index,
                                      const std::vector<Rgb>& palette) {
    const std::string id = synthetic_image_id(split, class_id, index);
    auto rng = keyed_rng(cfg.seed, "synthetic", id);
    const double p_spur = split == Split::train ? cfg.p_spur_train : split == Split::val ? cfg.p_spur_val : cfg.p_spur_ood;

    const double occlusion = unit_uniform(rng);
    const bool correlated = unit_uniform(rng) < p_spur;
    int bg_class = class_id;
    if (!correlated) {
        bg_class = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cfg.num_classes - 1)));
        if (bg_class >= class_id) ++bg_class;
    }

    const int size = cfg.image_size;
    const int cell = size / 16;
    const int extent = cell * kGlyphCells;
    const int jitter = cell * cfg.jitter_cells;
    const int base = size / 4 - jitter;
    const int x0 = base + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(2 * jitter + 1)));
    const int y0 = base + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(2 * jitter + 1)));

    RenderedImage out;
    out.image = paint_scene(size, class_id, palette[static_cast<std::size_t>(bg_class)], occlusion, x0, y0);
    out.truth.image_id = id;
    out.truth.path = "images/" + std::string(to_string(split)) + "/" + id + ".png";
    out.truth.occlusion = occlusion;
    out.truth.bg_correlated = correlated;
    out.truth.background_class = bg_class;
    out.truth.fg_box = {x0, y0, x0 + extent, y0 + extent};
    return out;
}

inline std::string serialize_ground_truth(const std::vector<SyntheticGroundTruth>& truth) {
    std::string out;
    for (const auto& t : truth) {
        nlohmann::ordered_json j{{"image_id", t.image_id},
                                 {"path", t.path},
                                 {"occlusion", t.occlusion},
                                 {"bg_correlated", t.bg_correlated},
                                 {"background_class", t.background_class},
                                 {"fg_box", {t.fg_box.x_min, t.fg_box.y_min, t.fg_box.x_max, t.fg_box.y_max}}};
        out += j.dump();
        out.push_back('\n');
    }
    return out;
}

inline std::vector<SyntheticGroundTruth> load_ground_truth(const fs::path& path) {
    std::vector<SyntheticGroundTruth> out;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(read_file(path))) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            SyntheticGroundTruth t;
            t.image_id = j.at("image_id").get<std::string>();
            t.path = j.at("path").get<std::string>();
            t.occlusion = j.at("occlusion").get<double>();
            t.bg_correlated = j.at("bg_correlated").get<bool>();
            t.background_class = j.value("background_class", 0);
            const auto& b = j.at("fg_box");
            t.fg_box = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
            out.push_back(std::move(t));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::parse, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

/// Generates images, manifest.jsonl, ground_truth.jsonl and ood_mapping.txt under `root`.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg, const fs::path& root) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec || !fs::is_directory(root)) throw Error(ErrorKind::io, "cannot create dataset root " + root.string());

    struct Job {
        Split split;
        int class_id;
        int index;
    };
    std::vector<Job> jobs;
    for (int c = 0; c < cfg.num_classes; ++c) {
        for (int i = 0; i < cfg.per_class; ++i) jobs.push_back({Split::train, c, i});
        for (int i = 0; i < cfg.val_per_class; ++i) jobs.push_back({Split::val, c, i});
        if (c < cfg.ood_classes)
            for (int i = 0; i < cfg.ood_per_class; ++i) jobs.push_back({Split::ood, c, i});
    }

    const auto palette = class_palette(cfg.num_classes);
    std::vector<SyntheticGroundTruth> truth(jobs.size());
    std::vector<ImageRecord> records(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t j) {
        const Job& job = jobs[j];
        auto rendered = render_synthetic(cfg, job.split, job.class_id, job.index, palette);
        write_png(root / rendered.truth.path, rendered.image);
        records[j] = {rendered.truth.image_id, job.class_id, synthetic_class_name(job.class_id), job.split, rendered.truth.path};
        truth[j] = std::move(rendered.truth);
    });

    std::map<int, std::string> classes;
    for (int c = 0; c < cfg.num_classes; ++c) classes.emplace(c, synthetic_class_name(c));
    std::sort(truth.begin(), truth.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });

    SyntheticDataset ds{DatasetManifest(".", std::move(classes), std::move(records), root), std::move(truth)};
    write_manifest(root / "manifest.jsonl", ds.manifest);
    write_file_atomic(root / "ground_truth.jsonl", serialize_ground_truth(ds.truth));
    std::string mapping;
    for (int c = 0; c < cfg.ood_classes; ++c) mapping += synthetic_class_name(c) + " " + std::to_string(c) + "\n";
    write_file_atomic(root / "ood_mapping.txt", mapping);
    return ds;
}

}  // namespace spurank
