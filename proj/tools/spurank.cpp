// spurank: rank images by detector confidence, retrain linear heads on
// rank-selected subsets, and evaluate them.
//
// Exit codes: 0 success, 2 configuration / usage error, 3 stage failure.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include <spurank/spurank.hpp>

using namespace spurank;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

std::unique_ptr<DetectorBackend> open_detector(const std::string& spec, const fs::path& truth, const fs::path& manifest) {
    if (spec == kBuiltinMock) {
        const fs::path gt = truth.empty() ? manifest.parent_path() / "ground_truth.jsonl" : truth;
        return std::make_unique<MockDetector>(MockDetector::from_file(gt));
    }
    return std::make_unique<SubprocessDetector>(spec);
}

std::unique_ptr<BackboneAdapter> open_backbone(const std::string& spec) {
    if (spec == kBuiltinMock) return std::make_unique<MockBackbone>();
    return std::make_unique<SubprocessBackbone>(spec);
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-")
        std::cout << text;
    else
        write_file_atomic(path, text);
}

std::vector<double> parse_alphas(const std::string& s) {
    std::vector<double> out;
    for (const auto& item : detail::split_list(s)) out.push_back(detail::to_double("alphas", item));
    return out;
}

std::vector<NoiseRegion> parse_regions(const std::string& s) {
    std::vector<NoiseRegion> out;
    for (const auto& item : detail::split_list(s)) out.push_back(parse_region(item));
    return out;
}

/// Feature rows for the subset members, labelled from the subset file.
FeatureMatrix features_for_subset(const fs::path& cache, const std::map<int, std::vector<std::string>>& subset, std::string& backbone_id) {
    auto contents = read_feature_cache(cache);
    backbone_id = contents.backbone_id;
    std::map<std::string, int> label;
    for (const auto& [c, ids] : subset)
        for (const auto& id : ids) label[id] = c;
    FeatureMatrix fm;
    fm.d = contents.d;
    for (const auto& [id, c] : label) {
        auto it = contents.rows.find(id);
        if (it == contents.rows.end()) throw Error(ErrorKind::invalid_argument, "feature cache has no row for '" + id + "'");
        fm.image_ids.push_back(id);
        fm.labels.push_back(c);
        fm.values.insert(fm.values.end(), it->second.begin(), it->second.end());
    }
    return fm;
}

nlohmann::ordered_json noise_json(const NoiseReport& r) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"alpha", row.alpha}, {"region", std::string(to_string(row.region))}, {"accuracy", row.accuracy},
                        {"evaluated", row.evaluated}, {"excluded", row.excluded}});
    nlohmann::ordered_json failures = nlohmann::ordered_json::array();
    for (const auto& f : r.failures) failures.push_back({{"image_id", f.image_id}, {"reason", f.reason}});
    return {{"clean_accuracy", r.clean_accuracy}, {"clean_evaluated", r.clean_evaluated}, {"clamped", false}, {"rows", rows}, {"failures", failures}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spurank: spuriosity ranking and last-layer retraining"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate the synthetic spurious-correlation fixture");
    SyntheticConfig syn;
    std::string synth_out;
    synth->add_option("--out", synth_out, "Dataset root directory")->required();
    synth->add_option("--seed", syn.seed, "Generation seed");
    synth->add_option("--classes", syn.num_classes, "Number of classes");
    synth->add_option("--per-class", syn.per_class, "Train images per class");
    synth->add_option("--val-per-class", syn.val_per_class, "Validation images per class");
    synth->add_option("--ood-per-class", syn.ood_per_class, "OOD images per class");
    synth->add_option("--ood-classes", syn.ood_classes, "Classes covered by the OOD split");
    synth->add_option("--image-size", syn.image_size, "Square image size in pixels (multiple of 16)");
    synth->add_option("--jitter-cells", syn.jitter_cells, "Glyph position jitter in glyph cells");
    synth->add_option("--p-spur-train", syn.p_spur_train, "Background/label agreement rate in train");
    synth->add_option("--p-spur-val", syn.p_spur_val, "Background/label agreement rate in val");

    // validate
    auto* validate = app.add_subcommand("validate", "Check a manifest");
    std::string val_manifest;
    bool check_files = false;
    validate->add_option("--manifest", val_manifest)->required();
    validate->add_flag("--check-files", check_files, "Also check that every image is readable");

    // score
    auto* score = app.add_subcommand("score", "Score images with an open-vocabulary detector");
    std::string sc_manifest, sc_backend = std::string(kBuiltinMock), sc_template = kDefaultPromptTemplate, sc_cache, sc_out, sc_truth,
                             sc_agg = "max";
    score->add_option("--manifest", sc_manifest)->required();
    score->add_option("--backend", sc_backend, "Detector command, or builtin:mock");
    score->add_option("--template", sc_template, "Prompt template with {class_name}");
    score->add_option("--cache", sc_cache, "Score cache file")->required();
    score->add_option("--out", sc_out, "Sorted score table (default: stdout)");
    score->add_option("--truth", sc_truth, "Ground truth for builtin:mock");
    score->add_option("--aggregation", sc_agg, "max | sum | top3_mean");

    // rank
    auto* rank = app.add_subcommand("rank", "Build per-class spuriosity rankings");
    std::string rk_scores, rk_manifest, rk_split = "train", rk_out;
    rank->add_option("--scores", rk_scores)->required();
    rank->add_option("--manifest", rk_manifest)->required();
    rank->add_option("--split", rk_split);
    rank->add_option("--out", rk_out);

    // select
    auto* select = app.add_subcommand("select", "Select a top/mid/bot/rnd subset of k images per class");
    std::string sel_ranking, sel_strategy = "top", sel_out;
    std::size_t sel_k = 100;
    std::uint64_t sel_seed = 0;
    select->add_option("--ranking", sel_ranking)->required();
    select->add_option("--strategy", sel_strategy);
    select->add_option("--k", sel_k);
    select->add_option("--seed", sel_seed);
    select->add_option("--out", sel_out);

    // extract
    auto* extract = app.add_subcommand("extract", "Extract frozen-backbone features into a cache");
    std::string ex_manifest, ex_backbone = std::string(kBuiltinMock), ex_cache, ex_subset, ex_split;
    extract->add_option("--manifest", ex_manifest)->required();
    extract->add_option("--backbone", ex_backbone, "Backbone command, or builtin:mock");
    extract->add_option("--cache", ex_cache)->required();
    extract->add_option("--subset", ex_subset, "Only the images of this subset file");
    extract->add_option("--split", ex_split, "Only the images of this split");

    // train
    auto* train = app.add_subcommand("train", "Retrain a linear head on a subset");
    std::string tr_features, tr_subset, tr_out;
    TrainConfig tr_cfg;
    train->add_option("--features", tr_features)->required();
    train->add_option("--subset", tr_subset)->required();
    train->add_option("--l2", tr_cfg.l2_lambda);
    train->add_option("--max-iters", tr_cfg.max_iters);
    train->add_option("--tolerance", tr_cfg.tolerance);
    train->add_option("--seed", tr_cfg.seed);
    train->add_option("--out", tr_out)->required();

    // eval-noise
    auto* noise = app.add_subcommand("eval-noise", "Accuracy under foreground/background noise");
    std::string en_manifest, en_backbone = std::string(kBuiltinMock), en_head, en_scores, en_alphas = "10,100,250", en_regions = "fg,bg",
                             en_split = "val", en_out;
    std::uint64_t en_seed = 0;
    noise->add_option("--manifest", en_manifest)->required();
    noise->add_option("--backbone", en_backbone);
    noise->add_option("--head", en_head)->required();
    noise->add_option("--scores", en_scores)->required();
    noise->add_option("--alphas", en_alphas);
    noise->add_option("--regions", en_regions);
    noise->add_option("--split", en_split);
    noise->add_option("--seed", en_seed);
    noise->add_option("--out", en_out);

    // eval-strata
    auto* strata = app.add_subcommand("eval-strata", "Accuracy per spuriosity rank slice");
    std::string es_manifest, es_backbone = std::string(kBuiltinMock), es_head, es_ranking, es_cache, es_out;
    std::size_t es_imax = 50;
    strata->add_option("--manifest", es_manifest)->required();
    strata->add_option("--backbone", es_backbone);
    strata->add_option("--head", es_head)->required();
    strata->add_option("--ranking", es_ranking, "Ranking of the evaluation split")->required();
    strata->add_option("--imax", es_imax);
    strata->add_option("--cache", es_cache);
    strata->add_option("--out", es_out);

    // eval-ood
    auto* ood = app.add_subcommand("eval-ood", "Accuracy on an OOD set restricted to mapped classes");
    std::string eo_manifest, eo_backbone = std::string(kBuiltinMock), eo_head, eo_mapping, eo_cache, eo_out;
    ood->add_option("--manifest", eo_manifest)->required();
    ood->add_option("--backbone", eo_backbone);
    ood->add_option("--head", eo_head)->required();
    ood->add_option("--mapping", eo_mapping)->required();
    ood->add_option("--cache", eo_cache);
    ood->add_option("--out", eo_out);

    // contact-sheet
    auto* sheet = app.add_subcommand("contact-sheet", "Grid of the most and least spurious images of a class");
    std::string cs_ranking, cs_manifest, cs_out;
    int cs_class = 0;
    std::size_t cs_low = 4, cs_high = 4;
    sheet->add_option("--ranking", cs_ranking)->required();
    sheet->add_option("--manifest", cs_manifest)->required();
    sheet->add_option("--class", cs_class)->required();
    sheet->add_option("--n-low", cs_low, "Low-spuriosity (highest score) tiles, right side");
    sheet->add_option("--n-high", cs_high, "High-spuriosity (lowest score) tiles, left side");
    sheet->add_option("--out", cs_out)->required();

    // run
    auto* run = app.add_subcommand("run", "Run the full pipeline from a config file");
    std::string run_config;
    bool run_quiet = false;
    run->add_option("--config", run_config)->required();
    run->add_flag("--quiet", run_quiet);

    // backends
    auto* mock_det = app.add_subcommand("mock-detector", "Serve the mock detector over stdin/stdout");
    std::string md_truth;
    mock_det->add_option("--truth", md_truth, "ground_truth.jsonl of a synthetic dataset")->required();
    auto* mock_bb = app.add_subcommand("mock-backbone", "Serve the mock backbone over stdin/stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*synth) {
            auto ds = generate_synthetic(syn, synth_out);
            std::cout << "wrote " << ds.manifest.size() << " images to " << synth_out << "\n";
        } else if (*validate) {
            auto m = load_manifest(val_manifest);
            auto report = validate_manifest(m, check_files);
            for (const auto& issue : report) std::cout << issue.image_id << ": " << issue.message << "\n";
            if (!report.empty()) return kExitStage;
            std::cout << "ok: " << m.size() << " records\n";
        } else if (*score) {
            auto m = load_manifest(sc_manifest);
            auto det = open_detector(sc_backend, sc_truth, sc_manifest);
            BatchScoreOptions opts;
            opts.prompt_template = sc_template;
            opts.aggregation = parse_aggregation(sc_agg);
            auto table = batch_score(m, *det, sc_cache, opts);
            write_text(sc_out, serialize_score_table(table, sc_template));
            for (const auto& s : table.skipped) std::cerr << "skipped " << s.image_id << ": " << s.reason << "\n";
        } else if (*rank) {
            auto m = load_manifest(rk_manifest);
            auto ranking = build_rankings(load_score_table(rk_scores), m, parse_split(rk_split));
            write_text(rk_out, serialize_ranking(ranking));
        } else if (*select) {
            auto ranking = parse_ranking(read_file(sel_ranking));
            write_text(sel_out, serialize_subset(select_subset(ranking, parse_strategy(sel_strategy), sel_k, sel_seed)));
        } else if (*extract) {
            auto m = load_manifest(ex_manifest);
            auto bb = open_backbone(ex_backbone);
            std::vector<std::string> ids;
            if (!ex_subset.empty()) {
                for (const auto& [c, list] : parse_subset(read_file(ex_subset))) ids.insert(ids.end(), list.begin(), list.end());
            } else {
                for (const auto& r : m.records())
                    if (ex_split.empty() || r.split == parse_split(ex_split)) ids.push_back(r.image_id);
            }
            auto fm = extract_features(ids, m, *bb, ex_cache);
            std::cout << "features: " << fm.rows() << " x " << fm.d << "\n";
        } else if (*train) {
            std::string backbone_id;
            auto fm = features_for_subset(tr_features, parse_subset(read_file(tr_subset)), backbone_id);
            auto head = train_head(fm, tr_cfg);
            head.backbone_id = backbone_id;
            write_head(tr_out, head);
            std::cout << "trained " << head.num_classes() << "-class head: " << head.stats.iterations << " iterations, objective "
                      << head.stats.objective << "\n";
        } else if (*noise) {
            auto m = load_manifest(en_manifest);
            auto bb = open_backbone(en_backbone);
            auto head = read_head(en_head);
            NoiseSweepSpec spec{parse_alphas(en_alphas), parse_regions(en_regions), en_seed};
            auto rep = eval_noise_sweep(*bb, head, m, parse_split(en_split), load_score_table(en_scores), spec);
            write_text(en_out, noise_json(rep).dump(2) + "\n");
        } else if (*strata) {
            auto m = load_manifest(es_manifest);
            auto bb = open_backbone(es_backbone);
            auto head = read_head(es_head);
            auto slices = stratified_eval_sets(parse_ranking(read_file(es_ranking)), es_imax);
            auto rep = eval_stratified(*bb, head, m, slices, es_cache);
            nlohmann::ordered_json j;
            j["average_accuracy"] = rep.mean_accuracy;
            j["slices"] = nlohmann::ordered_json::array();
            for (const auto& s : rep.slices)
                j["slices"].push_back({{"slice", s.index}, {"accuracy", s.accuracy}, {"n", s.n}, {"skipped_classes", s.skipped_classes}});
            write_text(es_out, j.dump(2) + "\n");
        } else if (*ood) {
            auto m = load_manifest(eo_manifest);
            auto bb = open_backbone(eo_backbone);
            auto head = read_head(eo_head);
            auto rep = eval_ood(*bb, head, m, parse_ood_mapping(read_file(eo_mapping)), eo_cache);
            nlohmann::ordered_json j{{"restricted_accuracy", rep.restricted_accuracy},
                                     {"unrestricted_accuracy", rep.unrestricted_accuracy},
                                     {"n", rep.n},
                                     {"restricted_classes", rep.restricted_classes}};
            write_text(eo_out, j.dump(2) + "\n");
        } else if (*sheet) {
            auto m = load_manifest(cs_manifest);
            auto cs = emit_contact_sheet(parse_ranking(read_file(cs_ranking)), m, cs_class, cs_low, cs_high);
            write_png(cs_out, cs.image);
            write_file_atomic(fs::path(cs_out).replace_extension(".csv"), contact_sheet_index(cs));
        } else if (*run) {
            PipelineConfig cfg;
            try {
                cfg = load_config(run_config);
            } catch (const Error& e) {
                std::cerr << "spurank: " << e.what() << "\n";
                return kExitConfig;
            }
            PipelineHooks hooks;
            if (!run_quiet) hooks.log = [](const std::string& s) { std::cerr << "[spurank] " << s << "\n"; };
            auto result = run_pipeline(cfg, hooks);
            if (!run_quiet)
                std::cerr << "[spurank] done: " << result.report.heads.size() << " heads (" << result.heads_trained << " trained, "
                          << result.heads_reused << " reused), report in " << (cfg.output_dir / "report").string() << "\n";
        } else if (*mock_det) {
            auto det = MockDetector::from_file(md_truth);
            serve_detector(det, std::cin, std::cout);
        } else if (*mock_bb) {
            MockBackbone bb;
            serve_backbone(bb, std::cin, std::cout);
        }
    } catch (const StageError& e) {
        std::cerr << "spurank: " << e.what() << "\n";
        return kExitStage;
    } catch (const Error& e) {
        std::cerr << "spurank: " << e.what() << "\n";
        return e.kind() == ErrorKind::config ? kExitConfig : kExitStage;
    } catch (const std::exception& e) {
        std::cerr << "spurank: " << e.what() << "\n";
        return kExitStage;
    }
    return 0;
}
