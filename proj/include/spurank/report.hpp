#pragma once

#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "image.hpp"
#include "linear_head.hpp"
#include "perturbation.hpp"
#include "ranking.hpp"

namespace spurank {

/// Results for one trained head.
struct HeadResult {
    SubsetStrategy strategy = SubsetStrategy::top;
    std::string label;  // strategy name as reported (honours --invert-naming)
    std::size_t k = 0;
    std::string backbone_id;
    int train_iterations = 0;
    double train_objective = 0;
    std::string train_status;
    double val_accuracy = 0;
    StratifiedReport stratified;
    NoiseReport noise;
    std::optional<OODReport> ood;
};

struct Provenance {
    std::string config_hash;
    std::string manifest_hash;
    std::string backend_id;
    std::string backbone_id;
    std::uint64_t seed = 0;
    std::uint64_t subset_seed = 0;
    std::uint64_t noise_seed = 0;
    std::uint64_t train_seed = 0;
    int train_threads = 1;
    std::string provenance_hash;  // over everything above
};

struct EvalReport {
    std::vector<HeadResult> heads;
    Provenance provenance;
    std::vector<SkipEntry> skipped_scores;
    bool invert_naming = false;
};

inline std::string series_name(const HeadResult& h) { return h.label + "_k" + std::to_string(h.k); }

// ---------------------------------------------------------------------------
// Summary JSON

inline std::string summary_json(const EvalReport& r) {
    using nlohmann::ordered_json;
    ordered_json heads = ordered_json::array();
    for (const auto& h : r.heads) {
        ordered_json slices = ordered_json::array();
        for (const auto& s : h.stratified.slices)
            slices.push_back({{"slice", s.index}, {"accuracy", s.accuracy}, {"n", s.n}, {"skipped_classes", s.skipped_classes}});
        ordered_json noise = ordered_json::array();
        for (const auto& row : h.noise.rows)
            noise.push_back({{"alpha", row.alpha},
                             {"region", std::string(to_string(row.region))},
                             {"accuracy", row.accuracy},
                             {"evaluated", row.evaluated},
                             {"excluded", row.excluded}});
        ordered_json failures = ordered_json::array();
        for (const auto& f : h.noise.failures) failures.push_back({{"image_id", f.image_id}, {"reason", f.reason}});
        ordered_json entry{{"strategy", h.label},
                           {"k", h.k},
                           {"backbone_id", h.backbone_id},
                           {"train", {{"iterations", h.train_iterations}, {"objective", h.train_objective}, {"status", h.train_status}}},
                           {"val_accuracy", h.val_accuracy},
                           {"average_slice_accuracy", h.stratified.mean_accuracy},
                           {"slices", std::move(slices)},
                           {"noise",
                            {{"clean_accuracy", h.noise.clean_accuracy},
                             {"clean_evaluated", h.noise.clean_evaluated},
                             {"clamped", h.noise.clamped},
                             {"rows", std::move(noise)},
                             {"failures", std::move(failures)}}}};
        if (h.ood)
            entry["ood"] = {{"restricted_accuracy", h.ood->restricted_accuracy},
                            {"unrestricted_accuracy", h.ood->unrestricted_accuracy},
                            {"n", h.ood->n},
                            {"restricted_classes", h.ood->restricted_classes}};
        heads.push_back(std::move(entry));
    }
    ordered_json skipped = ordered_json::array();
    for (const auto& s : r.skipped_scores) skipped.push_back({{"image_id", s.image_id}, {"reason", s.reason}});
    const auto& p = r.provenance;
    ordered_json doc{{"provenance",
                      {{"provenance_hash", p.provenance_hash},
                       {"config_hash", p.config_hash},
                       {"manifest_hash", p.manifest_hash},
                       {"backend_id", p.backend_id},
                       {"backbone_id", p.backbone_id},
                       {"seed", p.seed},
                       {"subset_seed", p.subset_seed},
                       {"noise_seed", p.noise_seed},
                       {"train_seed", p.train_seed},
                       {"train_threads", p.train_threads}}},
                     {"naming", r.invert_naming ? "inverted: top = lowest detector score" : "top = highest detector score"},
                     {"noise_space", "[0,1] pixels before backbone normalization, unclamped"},
                     {"heads", std::move(heads)},
                     {"skipped_scores", std::move(skipped)}};
    return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Combined CSV: one row per slice, per (alpha, region) and per OOD result.

inline const char* kResultsCsvHeader = "kind,strategy,k,backbone_id,slice,alpha,region,accuracy,n,excluded,unrestricted_accuracy";

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string results_csv(const EvalReport& r) {
    std::string out = std::string(kResultsCsvHeader) + "\n";
    for (const auto& h : r.heads) {
        const std::string prefix = h.label + "," + std::to_string(h.k) + "," + h.backbone_id + ",";
        for (const auto& s : h.stratified.slices)
            out += "slice," + prefix + std::to_string(s.index) + ",,," + fmt_double(s.accuracy) + "," + std::to_string(s.n) + ",,\n";
        for (const auto& row : h.noise.rows)
            out += "noise," + prefix + "," + fmt_double(row.alpha) + "," + std::string(to_string(row.region)) + "," + fmt_double(row.accuracy) +
                   "," + std::to_string(row.evaluated) + "," + std::to_string(row.excluded) + ",\n";
        if (h.ood)
            out += "ood," + prefix + ",,," + fmt_double(h.ood->restricted_accuracy) + "," + std::to_string(h.ood->n) + ",," +
                   fmt_double(h.ood->unrestricted_accuracy) + "\n";
    }
    return out;
}

struct CsvSeries {
    std::map<std::size_t, double> slices;                        // slice -> accuracy
    std::map<std::pair<double, std::string>, double> noise;      // (alpha, region) -> accuracy
    std::optional<std::pair<double, double>> ood;                // (restricted, unrestricted)
};

/// Parses results_csv output, keyed by "<strategy>_k<k>".
inline std::map<std::string, CsvSeries> parse_results_csv(std::string_view text) {
    std::map<std::string, CsvSeries> out;
    auto lines = split_lines(text);
    if (lines.empty() || lines[0] != kResultsCsvHeader) throw Error(ErrorKind::parse, "results csv: bad header");
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            auto comma = lines[i].find(',', start);
            f.push_back(lines[i].substr(start, comma == std::string::npos ? std::string::npos : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (f.size() != 11) throw Error(ErrorKind::parse, "results csv line " + std::to_string(i + 1) + ": expected 11 fields");
        auto& s = out[f[1] + "_k" + f[2]];
        if (f[0] == "slice")
            s.slices[std::stoul(f[4])] = std::stod(f[7]);
        else if (f[0] == "noise")
            s.noise[{std::stod(f[5]), f[6]}] = std::stod(f[7]);
        else if (f[0] == "ood")
            s.ood = std::make_pair(std::stod(f[7]), std::stod(f[10]));
        else
            throw Error(ErrorKind::parse, "results csv line " + std::to_string(i + 1) + ": unknown kind '" + f[0] + "'");
    }
    return out;
}

// ---------------------------------------------------------------------------
// SVG line charts

namespace detail {

inline const std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
    std::optional<double> mean;
    bool dashed = false;
};

inline std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

inline std::string line_chart(const std::string& title, const std::string& x_label, const std::vector<Series>& series) {
    constexpr double W = 640, H = 400, L = 60, R = 160, T = 40, B = 50;
    double x_lo = 0, x_hi = 1;
    bool first = true;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            if (first) x_lo = x_hi = x, first = false;
            x_lo = std::min(x_lo, x);
            x_hi = std::max(x_hi, x);
        }
    if (x_hi == x_lo) x_hi = x_lo + 1;
    auto px = [&](double x) { return L + (x - x_lo) / (x_hi - x_lo) * (W - L - R); };
    auto py = [&](double y) { return H - B - y * (H - T - B); };

    std::string svg = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
    svg += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
    svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" + xml_escape(title) + "</text>\n";
    svg += "<line x1=\"" + fmt_double(L) + "\" y1=\"" + fmt_double(H - B) + "\" x2=\"" + fmt_double(W - R) + "\" y2=\"" + fmt_double(H - B) +
           "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + fmt_double(L) + "\" y1=\"" + fmt_double(T) + "\" x2=\"" + fmt_double(L) + "\" y2=\"" + fmt_double(H - B) +
           "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double y = t / 4.0;
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.2f", y);
        svg += "<text x=\"" + fmt_double(L - 6) + "\" y=\"" + fmt_double(py(y) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + buf + "</text>\n";
    }
    svg += "<text x=\"" + fmt_double((L + W - R) / 2) + "\" y=\"" + fmt_double(H - 12) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + xml_escape(x_label) + "</text>\n";
    svg += "<text x=\"16\" y=\"" + fmt_double((T + H - B) / 2) + "\" transform=\"rotate(-90 16 " + fmt_double((T + H - B) / 2) +
           ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">accuracy</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        const char* color = kPalette[i % kPalette.size()];
        std::string pts;
        for (const auto& [x, y] : s.points) {
            if (!pts.empty()) pts.push_back(' ');
            pts += fmt_double(px(x)) + "," + fmt_double(py(y));
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\"" +
               (s.dashed ? " stroke-dasharray=\"2,2\"" : "") + " points=\"" + pts + "\"><title>" + xml_escape(s.name) + "</title></polyline>\n";
        if (s.mean)
            svg += "<line class=\"mean\" x1=\"" + fmt_double(L) + "\" y1=\"" + fmt_double(py(*s.mean)) + "\" x2=\"" + fmt_double(W - R) +
                   "\" y2=\"" + fmt_double(py(*s.mean)) + "\" stroke=\"" + color + "\" stroke-dasharray=\"6,4\"/>\n";
        const double ly = T + 16.0 * static_cast<double>(i);
        svg += "<line x1=\"" + fmt_double(W - R + 10) + "\" y1=\"" + fmt_double(ly) + "\" x2=\"" + fmt_double(W - R + 30) + "\" y2=\"" +
               fmt_double(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        svg += "<text x=\"" + fmt_double(W - R + 36) + "\" y=\"" + fmt_double(ly + 4) + "\" font-family=\"sans-serif\" font-size=\"11\">" +
               xml_escape(s.name) + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

}  // namespace detail

/// Accuracy against slice index, one polyline per head plus its dashed mean.
inline std::string slices_svg(const EvalReport& r) {
    std::vector<detail::Series> series;
    for (const auto& h : r.heads) {
        detail::Series s{series_name(h), {}, h.stratified.mean_accuracy, false};
        for (const auto& sl : h.stratified.slices) s.points.emplace_back(static_cast<double>(sl.index), sl.accuracy);
        series.push_back(std::move(s));
    }
    return detail::line_chart("Accuracy by spuriosity rank slice", "slice i (rank within class)", series);
}

/// Accuracy against alpha, one polyline per (head, region); bg is dotted.
inline std::string noise_svg(const EvalReport& r) {
    std::vector<detail::Series> series;
    for (const auto& h : r.heads) {
        for (NoiseRegion region : {NoiseRegion::fg, NoiseRegion::bg}) {
            detail::Series s{series_name(h) + " " + std::string(to_string(region)), {}, std::nullopt, region == NoiseRegion::bg};
            for (const auto& row : h.noise.rows)
                if (row.region == region) s.points.emplace_back(row.alpha, row.accuracy);
            if (!s.points.empty()) series.push_back(std::move(s));
        }
    }
    return detail::line_chart("Accuracy under foreground / background noise", "noise magnitude alpha", series);
}

enum class ReportFormat { json, csv, svg };

/// Writes summary.json, results.csv and (if requested) slices.svg / noise.svg.
inline std::vector<fs::path> emit_report(const EvalReport& r, const fs::path& dir, std::vector<ReportFormat> formats = {
                                                                                         ReportFormat::json, ReportFormat::csv, ReportFormat::svg}) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error(ErrorKind::io, "cannot create report directory " + dir.string());
    std::vector<fs::path> written;
    auto put = [&](const fs::path& p, const std::string& text) {
        write_file_atomic(p, text);
        written.push_back(p);
    };
    for (auto f : formats) {
        switch (f) {
            case ReportFormat::json: put(dir / "summary.json", summary_json(r)); break;
            case ReportFormat::csv: put(dir / "results.csv", results_csv(r)); break;
            case ReportFormat::svg:
                put(dir / "slices.svg", slices_svg(r));
                put(dir / "noise.svg", noise_svg(r));
                break;
        }
    }
    return written;
}

// ---------------------------------------------------------------------------
// Contact sheets

namespace detail {

// 3x5 bitmap glyphs for score labels.
inline const std::map<char, std::array<const char*, 5>>& tiny_font() {
    static const std::map<char, std::array<const char*, 5>> font{
        {'0', {"###", "#.#", "#.#", "#.#", "###"}}, {'1', {".#.", "##.", ".#.", ".#.", "###"}},
        {'2', {"###", "..#", "###", "#..", "###"}}, {'3', {"###", "..#", "###", "..#", "###"}},
        {'4', {"#.#", "#.#", "###", "..#", "..#"}}, {'5', {"###", "#..", "###", "..#", "###"}},
        {'6', {"###", "#..", "###", "#.#", "###"}}, {'7', {"###", "..#", "..#", "..#", "..#"}},
        {'8', {"###", "#.#", "###", "#.#", "###"}}, {'9', {"###", "#.#", "###", "..#", "###"}},
        {'.', {"...", "...", "...", "...", ".#."}}, {'-', {"...", "...", "###", "...", "..."}},
    };
    return font;
}

inline void draw_text(RgbImage& img, int x, int y, std::string_view text, int scale) {
    const auto& font = tiny_font();
    for (char ch : text) {
        auto it = font.find(ch);
        if (it != font.end()) {
            for (int r = 0; r < 5; ++r)
                for (int c = 0; c < 3; ++c)
                    if (it->second[r][c] == '#')
                        for (int dy = 0; dy < scale; ++dy)
                            for (int dx = 0; dx < scale; ++dx) {
                                const int yy = y + r * scale + dy, xx = x + c * scale + dx;
                                if (yy >= 0 && yy < img.height && xx >= 0 && xx < img.width) {
                                    auto* p = img.at(yy, xx);
                                    p[0] = p[1] = p[2] = 0;
                                }
                            }
        }
        x += 4 * scale;
    }
}

}  // namespace detail

struct ContactTile {
    std::string image_id;
    std::size_t rank = 0;
    double score = 0;
};

struct ContactSheet {
    RgbImage image;
    std::vector<ContactTile> tiles;  // left to right
};

/// Left block: the n_high lowest-score images (most spurious), right block:
/// the n_low highest-score images. Scores never decrease left to right.
inline ContactSheet emit_contact_sheet(const SpuriosityRanking& ranking, const DatasetManifest& manifest, int class_id,
                                       std::size_t n_low_spur, std::size_t n_high_spur, int tile = 64) {
    auto it = ranking.classes.find(class_id);
    if (it == ranking.classes.end()) throw Error(ErrorKind::invalid_argument, "contact sheet: unknown class " + std::to_string(class_id));
    const auto& list = it->second;
    const std::size_t n = list.size();
    if (n_low_spur + n_high_spur > n)
        throw Error(ErrorKind::invalid_argument, "contact sheet: class " + std::to_string(class_id) + " has only " + std::to_string(n) + " images");
    if (n_low_spur + n_high_spur == 0) throw Error(ErrorKind::invalid_argument, "contact sheet: no tiles requested");

    ContactSheet sheet;
    for (std::size_t j = 0; j < n_high_spur; ++j) {
        const std::size_t pos = n - 1 - j;
        sheet.tiles.push_back({list[pos].image_id, pos + 1, list[pos].score});
    }
    for (std::size_t j = n_low_spur; j-- > 0;) sheet.tiles.push_back({list[j].image_id, j + 1, list[j].score});

    constexpr int label_h = 14, pad = 4, gap = 12;
    const int count = static_cast<int>(sheet.tiles.size());
    const int width = pad + count * (tile + pad) + (n_high_spur > 0 && n_low_spur > 0 ? gap : 0);
    const int height = pad + tile + label_h + pad;
    sheet.image = RgbImage(height, width);
    std::fill(sheet.image.pixels.begin(), sheet.image.pixels.end(), std::uint8_t{255});

    int x = pad;
    for (int t = 0; t < count; ++t) {
        if (t == static_cast<int>(n_high_spur) && n_high_spur > 0) x += gap;
        const RgbImage src = read_png(manifest.image_path(manifest.at(sheet.tiles[static_cast<std::size_t>(t)].image_id)));
        for (int r = 0; r < tile; ++r)
            for (int c = 0; c < tile; ++c) {
                const auto* s = src.at(r * src.height / tile, c * src.width / tile);
                std::copy(s, s + 3, sheet.image.at(pad + r, x + c));
            }
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.3f", sheet.tiles[static_cast<std::size_t>(t)].score);
        detail::draw_text(sheet.image, x + 2, pad + tile + 2, buf, 2);
        x += tile + pad;
    }
    return sheet;
}

inline std::string contact_sheet_index(const ContactSheet& sheet) {
    std::string out = "position,image_id,rank,score\n";
    for (std::size_t i = 0; i < sheet.tiles.size(); ++i)
        out += std::to_string(i) + "," + sheet.tiles[i].image_id + "," + std::to_string(sheet.tiles[i].rank) + "," +
               fmt_double(sheet.tiles[i].score) + "\n";
    return out;
}

}  // namespace spurank
