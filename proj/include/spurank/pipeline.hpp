#pragma once

#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "detection.hpp"
#include "features.hpp"
#include "linear_head.hpp"
#include "perturbation.hpp"
#include "ranking.hpp"
#include "report.hpp"
#include "synthetic.hpp"

namespace spurank {

/// Backend spec string "builtin:mock" selects the in-process stand-in;
/// anything else is a shell command speaking the line protocol.
inline constexpr std::string_view kBuiltinMock = "builtin:mock";

struct PipelineConfig {
    fs::path manifest;
    std::string detector = std::string(kBuiltinMock);
    fs::path ground_truth;  // for the builtin mock detector; defaults to <manifest dir>/ground_truth.jsonl
    std::string backbone = std::string(kBuiltinMock);
    std::string prompt_template = kDefaultPromptTemplate;
    Aggregation aggregation = Aggregation::max;
    std::vector<SubsetStrategy> strategies{SubsetStrategy::top, SubsetStrategy::mid, SubsetStrategy::bot, SubsetStrategy::rnd};
    std::vector<std::size_t> k_values{50, 100, 200};
    TrainConfig train;
    Split eval_split = Split::val;
    std::size_t i_max = 50;
    std::vector<double> alphas{10, 100, 250};
    std::vector<NoiseRegion> regions{NoiseRegion::fg, NoiseRegion::bg};
    fs::path ood_mapping;  // empty: no OOD evaluation
    std::uint64_t seed = 0;
    fs::path output_dir = "spurank_out";
    bool invert_naming = false;
    std::size_t contact_sheet_tiles = 4;  // per side; 0 disables sheets

    void validate() const {
        auto bad = [](const std::string& m) { return Error(ErrorKind::config, "config: " + m); };
        if (manifest.empty()) throw bad("manifest is required");
        if (strategies.empty()) throw bad("strategies must be nonempty");
        if (k_values.empty()) throw bad("k must be nonempty");
        for (auto k : k_values)
            if (k < 1) throw bad("k values must be positive");
        if (i_max < 1) throw bad("i_max must be >= 1");
        for (double a : alphas)
            if (!(a >= 0)) throw bad("alphas must be >= 0");
        try {
            train.validate();
        } catch (const Error& e) {
            throw bad(e.what());
        }
    }

    // Seeds for each stochastic stage, derived from the global seed.
    std::uint64_t subset_seed() const { return splitmix64(seed ^ 0x5b5e7ULL); }
    std::uint64_t noise_seed() const { return splitmix64(seed ^ 0x9015eULL); }
};

namespace detail {

template <typename T, typename F>
std::string join(const std::vector<T>& v, F&& fmt) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out.push_back(',');
        out += fmt(v[i]);
    }
    return out;
}

inline std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        auto comma = s.find(',', start);
        std::string item(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
        if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::string trim(std::string_view s) {
    auto a = s.find_first_not_of(" \t"), b = s.find_last_not_of(" \t");
    return a == std::string_view::npos ? std::string() : std::string(s.substr(a, b - a + 1));
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw Error(ErrorKind::config, "config: '" + key + "' expects a number, got '" + v + "'");
    }
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        auto x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw Error(ErrorKind::config, "config: '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw Error(ErrorKind::config, "config: '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace detail

/// Applies one key/value setting. Unknown keys are config errors.
inline void apply_config_key(PipelineConfig& c, const std::string& key, const std::string& value) {
    using namespace detail;
    try {
        if (key == "manifest") c.manifest = value;
        else if (key == "detector") c.detector = value;
        else if (key == "ground_truth") c.ground_truth = value;
        else if (key == "backbone") c.backbone = value;
        else if (key == "prompt_template") c.prompt_template = value;
        else if (key == "aggregation") c.aggregation = parse_aggregation(value);
        else if (key == "strategies") {
            c.strategies.clear();
            for (const auto& s : split_list(value)) c.strategies.push_back(parse_strategy(s));
        } else if (key == "k") {
            c.k_values.clear();
            for (const auto& s : split_list(value)) c.k_values.push_back(static_cast<std::size_t>(to_u64(key, s)));
        } else if (key == "l2") c.train.l2_lambda = to_double(key, value);
        else if (key == "max_iters") c.train.max_iters = static_cast<int>(to_u64(key, value));
        else if (key == "tolerance") c.train.tolerance = to_double(key, value);
        else if (key == "train_seed") c.train.seed = to_u64(key, value);
        else if (key == "init_scale") c.train.init_scale = to_double(key, value);
        else if (key == "eval_split") c.eval_split = parse_split(value);
        else if (key == "i_max") c.i_max = static_cast<std::size_t>(to_u64(key, value));
        else if (key == "alphas") {
            c.alphas.clear();
            for (const auto& s : split_list(value)) c.alphas.push_back(to_double(key, s));
        } else if (key == "regions") {
            c.regions.clear();
            for (const auto& s : split_list(value)) c.regions.push_back(parse_region(s));
        } else if (key == "ood_mapping") c.ood_mapping = value;
        else if (key == "seed") c.seed = to_u64(key, value);
        else if (key == "output_dir") c.output_dir = value;
        else if (key == "invert_naming") c.invert_naming = to_bool(key, value);
        else if (key == "contact_sheet_tiles") c.contact_sheet_tiles = static_cast<std::size_t>(to_u64(key, value));
        else throw Error(ErrorKind::config, "config: unknown key '" + key + "'");
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::config) throw;
        throw Error(ErrorKind::config, "config: '" + key + "': " + e.what());
    }
}

/// "key = value" lines; '#' starts a comment line. Relative paths are
/// resolved against `base_dir`.
inline PipelineConfig parse_config(std::string_view text, const fs::path& base_dir = {}) {
    PipelineConfig c;
    std::size_t line_no = 0;
    std::set<std::string> seen;
    for (const auto& raw : split_lines(text)) {
        ++line_no;
        const std::string line = detail::trim(raw);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error(ErrorKind::config, "config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        if (!seen.insert(key).second) throw Error(ErrorKind::config, "config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
        apply_config_key(c, key, detail::trim(line.substr(eq + 1)));
    }
    if (!base_dir.empty()) {
        for (fs::path* p : {&c.manifest, &c.ground_truth, &c.ood_mapping, &c.output_dir})
            if (!p->empty() && p->is_relative()) *p = base_dir / *p;
    }
    c.validate();
    return c;
}

inline PipelineConfig load_config(const fs::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const Error& e) {
        throw Error(ErrorKind::config, e.what());
    }
    return parse_config(text, path.parent_path());
}

/// Canonical text of every setting that influences results. Locations
/// (manifest path, backend commands, output dir) enter the provenance hash
/// through content identities instead: manifest hash, backend_id, backbone_id.
inline std::string canonical_config(const PipelineConfig& c) {
    using detail::join;
    std::string out;
    auto kv = [&](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
    kv("aggregation", c.aggregation == Aggregation::max ? "max" : c.aggregation == Aggregation::sum ? "sum" : "top3_mean");
    kv("alphas", join(c.alphas, fmt_double));
    kv("contact_sheet_tiles", std::to_string(c.contact_sheet_tiles));
    kv("eval_split", std::string(to_string(c.eval_split)));
    kv("i_max", std::to_string(c.i_max));
    kv("init_scale", fmt_double(c.train.init_scale));
    kv("invert_naming", c.invert_naming ? "true" : "false");
    kv("k", join(c.k_values, [](std::size_t k) { return std::to_string(k); }));
    kv("l2", fmt_double(c.train.l2_lambda));
    kv("max_iters", std::to_string(c.train.max_iters));
    kv("ood", c.ood_mapping.empty() ? "none" : sha256_hex(read_file(c.ood_mapping)));
    kv("prompt_template", c.prompt_template);
    kv("regions", join(c.regions, [](NoiseRegion r) { return std::string(to_string(r)); }));
    kv("seed", std::to_string(c.seed));
    kv("strategies", join(c.strategies, [](SubsetStrategy s) { return std::string(to_string(s)); }));
    kv("tolerance", fmt_double(c.train.tolerance));
    kv("train_seed", std::to_string(c.train.seed));
    return out;
}

inline std::string config_hash(const PipelineConfig& c) { return sha256_hex(canonical_config(c)); }

inline Provenance make_provenance(const PipelineConfig& c, const std::string& manifest_hash, const std::string& backend_id,
                                  const std::string& backbone_id) {
    Provenance p;
    p.config_hash = config_hash(c);
    p.manifest_hash = manifest_hash;
    p.backend_id = backend_id;
    p.backbone_id = backbone_id;
    p.seed = c.seed;
    p.subset_seed = c.subset_seed();
    p.noise_seed = c.noise_seed();
    p.train_seed = c.train.seed;
    p.train_threads = 1;
    p.provenance_hash = sha256_hex(p.config_hash + "|" + p.manifest_hash + "|" + p.backend_id + "|" + p.backbone_id + "|" +
                                   std::to_string(p.seed) + "|" + std::to_string(p.subset_seed) + "|" + std::to_string(p.noise_seed) +
                                   "|" + std::to_string(p.train_seed));
    return p;
}

// ---------------------------------------------------------------------------

/// A stage failure: carries the stage name so callers can report it.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error(ErrorKind::backend, "stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

/// Exclusive advisory lock on <dir>/.lock for the lifetime of the object.
class OutputDirLock {
public:
    explicit OutputDirLock(const fs::path& dir) {
        std::error_code ec;
        fs::create_directories(dir, ec);
        const fs::path p = dir / ".lock";
        fd_ = ::open(p.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
        if (fd_ < 0) throw Error(ErrorKind::io, "cannot create lock file " + p.string());
        if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(fd_);
            fd_ = -1;
            throw Error(ErrorKind::io, "output directory " + dir.string() + " is in use by another pipeline");
        }
    }
    ~OutputDirLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    OutputDirLock(const OutputDirLock&) = delete;
    OutputDirLock& operator=(const OutputDirLock&) = delete;

private:
    int fd_ = -1;
};

struct PipelineHooks {
    /// Stage progress messages ("score", "rank", ...); silent when unset.
    std::function<void(const std::string&)> log;
    /// Overrides for tests and embedding; take precedence over the config strings.
    DetectorBackend* detector = nullptr;
    BackboneAdapter* backbone = nullptr;
};

struct PipelineResult {
    EvalReport report;
    std::size_t heads_trained = 0;
    std::size_t heads_reused = 0;
};

inline std::unique_ptr<DetectorBackend> make_detector(const PipelineConfig& c) {
    if (c.detector == kBuiltinMock) {
        fs::path truth = c.ground_truth.empty() ? c.manifest.parent_path() / "ground_truth.jsonl" : c.ground_truth;
        return std::make_unique<MockDetector>(MockDetector::from_file(truth));
    }
    return std::make_unique<SubprocessDetector>(c.detector);
}

inline std::unique_ptr<BackboneAdapter> make_backbone(const PipelineConfig& c) {
    if (c.backbone == kBuiltinMock) return std::make_unique<MockBackbone>();
    return std::make_unique<SubprocessBackbone>(c.backbone);
}

namespace detail {
template <typename F>
auto stage(const std::string& name, const PipelineHooks& hooks, F&& body) -> decltype(body()) {
    if (hooks.log) hooks.log(name);
    try {
        return body();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}
}  // namespace detail

/// score -> rank -> select -> extract -> train -> eval for every (strategy, k).
/// Caches (scores, features, heads) under output_dir make reruns cheap;
/// intermediate artifacts are kept when a stage fails.
inline PipelineResult run_pipeline(const PipelineConfig& config, const PipelineHooks& hooks = {}) {
    config.validate();
    const fs::path out = config.output_dir;
    OutputDirLock lock(out);
    using detail::stage;

    auto manifest = stage("load", hooks, [&] {
        auto m = load_manifest(config.manifest);
        auto issues = validate_manifest(m, false);
        if (!issues.empty()) throw Error(ErrorKind::invalid_argument, "invalid manifest: " + issues.front().message + " (" + issues.front().image_id + ")");
        return m;
    });
    const std::string manifest_hash = sha256_hex(serialize_manifest(manifest));

    std::unique_ptr<DetectorBackend> owned_detector;
    std::unique_ptr<BackboneAdapter> owned_backbone;
    DetectorBackend* detector = hooks.detector;
    BackboneAdapter* backbone = hooks.backbone;
    stage("backends", hooks, [&] {
        if (!detector) detector = (owned_detector = make_detector(config)).get();
        if (!backbone) backbone = (owned_backbone = make_backbone(config)).get();
        return 0;
    });

    PipelineResult result;
    EvalReport& report = result.report;
    report.invert_naming = config.invert_naming;
    report.provenance = make_provenance(config, manifest_hash, detector->backend_id(), backbone->backbone_id());

    ScoreTable scores = stage("score", hooks, [&] {
        BatchScoreOptions opts;
        opts.prompt_template = config.prompt_template;
        opts.aggregation = config.aggregation;
        auto t = batch_score(manifest, *detector, out / "scores.cache.jsonl", opts);
        write_file_atomic(out / "scores.jsonl", serialize_score_table(t, config.prompt_template));
        return t;
    });
    report.skipped_scores = scores.skipped;

    auto [train_ranking, eval_ranking] = stage("rank", hooks, [&] {
        // Skipped images are reported, not ranked.
        std::vector<ImageRecord> scored;
        for (const auto& r : manifest.records())
            if (scores.find(r.image_id)) scored.push_back(r);
        const DatasetManifest ranked(manifest.root(), manifest.classes(), std::move(scored), manifest.base_dir());
        auto tr = build_rankings(scores, ranked, Split::train);
        auto ev = build_rankings(scores, ranked, config.eval_split);
        write_file_atomic(out / "ranking_train.jsonl", serialize_ranking(tr));
        write_file_atomic(out / ("ranking_" + std::string(to_string(config.eval_split)) + ".jsonl"), serialize_ranking(ev));
        return std::make_pair(std::move(tr), std::move(ev));
    });

    struct Job {
        SubsetStrategy strategy;
        std::size_t k;
        SubsetSpec subset;
    };
    std::vector<Job> jobs = stage("select", hooks, [&] {
        std::vector<Job> js;
        for (auto k : config.k_values)
            for (auto s : config.strategies) {
                auto spec = select_subset(train_ranking, s, k, config.subset_seed());
                write_file_atomic(out / "subsets" / (std::string(to_string(s)) + "_k" + std::to_string(k) + ".jsonl"), serialize_subset(spec));
                js.push_back({s, k, std::move(spec)});
            }
        return js;
    });

    const fs::path feature_cache = out / "features.f32";
    auto [train_features, eval_features] = stage("extract", hooks, [&] {
        std::vector<std::string> train_ids;
        for (const auto& j : jobs) {
            auto ids = j.subset.all_ids();
            train_ids.insert(train_ids.end(), ids.begin(), ids.end());
        }
        std::vector<std::string> eval_ids;
        for (const auto& r : manifest.split_records(config.eval_split))
            if (scores.find(r.image_id)) eval_ids.push_back(r.image_id);
        auto tf = extract_features(train_ids, manifest, *backbone, feature_cache);
        auto ef = extract_features(eval_ids, manifest, *backbone, feature_cache);
        return std::make_pair(std::move(tf), std::move(ef));
    });

    std::vector<LinearHead> heads = stage("train", hooks, [&] {
        std::vector<LinearHead> hs;
        std::vector<int> classes;
        for (const auto& [c, list] : train_ranking.classes) classes.push_back(c);
        for (const auto& j : jobs) {
            const std::string name = std::string(to_string(j.strategy)) + "_k" + std::to_string(j.k);
            const fs::path head_path = out / "heads" / (name + ".head");
            const fs::path prov_path = out / "heads" / (name + ".provenance");
            const std::string key = sha256_hex(report.provenance.provenance_hash + "|" + name + "|" + serialize_subset(j.subset));
            if (fs::exists(head_path) && fs::exists(prov_path) && read_file(prov_path) == key) {
                hs.push_back(read_head(head_path));
                ++result.heads_reused;
                continue;
            }
            auto head = train_head(train_features.select(j.subset.all_ids()), config.train, classes);
            head.backbone_id = backbone->backbone_id();
            write_head(head_path, head);
            write_file_atomic(prov_path, key);
            hs.push_back(std::move(head));
            ++result.heads_trained;
        }
        return hs;
    });

    stage("eval", hooks, [&] {
        auto slices = stratified_eval_sets(eval_ranking, config.i_max);
        std::vector<const LinearHead*> head_ptrs;
        for (const auto& h : heads) head_ptrs.push_back(&h);
        NoiseSweepSpec spec{config.alphas, config.regions, config.noise_seed()};
        auto noise = eval_noise_sweep(*backbone, head_ptrs, manifest, config.eval_split, scores, spec);

        std::optional<OODMapping> mapping;
        FeatureMatrix ood_fm;
        if (!config.ood_mapping.empty()) {
            mapping = parse_ood_mapping(read_file(config.ood_mapping));
            ood_fm = ood_features(*backbone, manifest, *mapping, feature_cache);
        }

        for (std::size_t i = 0; i < jobs.size(); ++i) {
            HeadResult hr;
            hr.strategy = jobs[i].strategy;
            hr.label = strategy_label(jobs[i].strategy, config.invert_naming);
            hr.k = jobs[i].k;
            hr.backbone_id = backbone->backbone_id();
            hr.train_iterations = heads[i].stats.iterations;
            hr.train_objective = heads[i].stats.objective;
            hr.train_status = std::string(to_string(heads[i].stats.status));
            hr.val_accuracy = evaluate_accuracy(heads[i], eval_features).accuracy;
            hr.stratified = eval_stratified(heads[i], eval_features, slices);
            hr.noise = std::move(noise[i]);
            if (mapping) hr.ood = eval_ood_features(heads[i], ood_fm, *mapping);
            report.heads.push_back(std::move(hr));
        }
        return 0;
    });

    stage("report", hooks, [&] {
        emit_report(report, out / "report");
        if (config.contact_sheet_tiles > 0) {
            for (const auto& [cls, list] : train_ranking.classes) {
                const std::size_t per_side = std::min(config.contact_sheet_tiles, list.size() / 2);
                if (per_side == 0) continue;
                auto sheet = emit_contact_sheet(train_ranking, manifest, cls, per_side, per_side);
                char name[32];
                std::snprintf(name, sizeof name, "class_%03d", cls);
                write_png(out / "contact_sheets" / (std::string(name) + ".png"), sheet.image);
                write_file_atomic(out / "contact_sheets" / (std::string(name) + ".csv"), contact_sheet_index(sheet));
            }
        }
        return 0;
    });
    return result;
}

}  // namespace spurank
