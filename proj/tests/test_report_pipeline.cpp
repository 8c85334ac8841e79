#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include "support.hpp"

using namespace spurank;
using testsupport::TempDir;

namespace {

struct Fixture {
    TempDir dir;
    SyntheticDataset ds;
    Fixture() : ds(generate_synthetic(testsupport::small_synthetic(), dir / "data")) {}

    std::string config_text(const std::string& out, const std::string& extra = {}) const {
        return "manifest = " + (dir / "data" / "manifest.jsonl").string() + "\n" +
               "strategies = top, bot\n"
               "k = 3\n"
               "alphas = 0, 20\n"
               "i_max = 50\n"
               "ood_mapping = " + (dir / "data" / "ood_mapping.txt").string() + "\n" +
               "contact_sheet_tiles = 2\n"
               "output_dir = " + (dir / out).string() + "\n" + extra;
    }
    PipelineConfig config(const std::string& out, const std::string& extra = {}) const { return parse_config(config_text(out, extra)); }
};

// Minimal well-formedness check: every start tag closed in order.
bool xml_balanced(const std::string& s) {
    std::vector<std::string> stack;
    std::size_t i = 0;
    while ((i = s.find('<', i)) != std::string::npos) {
        const auto j = s.find('>', i);
        if (j == std::string::npos) return false;
        std::string tag = s.substr(i + 1, j - i - 1);
        i = j + 1;
        if (tag.empty()) return false;
        if (tag[0] == '?' || tag[0] == '!') continue;
        if (tag.back() == '/') continue;
        if (tag[0] == '/') {
            if (stack.empty() || stack.back() != tag.substr(1)) return false;
            stack.pop_back();
            continue;
        }
        stack.push_back(tag.substr(0, tag.find_first_of(" \t\n")));
    }
    return stack.empty();
}

std::size_t count_of(const std::string& s, const std::string& needle) {
    std::size_t n = 0;
    for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
    return n;
}

int run_cli(const std::string& args) {
    const int st = std::system((std::string(SPURANK_BIN) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST_CASE("pipeline: small run produces a complete, consistent report") {
    Fixture f;
    auto res = run_pipeline(f.config("out"));
    const auto& rep = res.report;
    REQUIRE(rep.heads.size() == 2);
    CHECK(res.heads_trained == 2);
    CHECK(rep.heads[0].label == "top");
    CHECK(rep.heads[1].label == "bot");
    for (const auto& h : rep.heads) {
        CHECK(h.k == 3);
        CHECK(h.backbone_id == "mock-backbone-v1");
        CHECK(h.stratified.slices.size() == 6);
        CHECK(h.noise.rows.size() == 4);
        REQUIRE(h.ood);
        CHECK(h.ood->n == 8);
        CHECK(h.noise.rows[0].accuracy == h.noise.clean_accuracy);
        CHECK(h.noise.clean_accuracy == h.val_accuracy);
    }

    const fs::path out = f.dir / "out";
    for (const char* p : {"scores.jsonl", "ranking_train.jsonl", "ranking_val.jsonl", "features.f32", "report/summary.json",
                          "report/results.csv", "report/slices.svg", "report/noise.svg", "heads/top_k3.head", "heads/bot_k3.head",
                          "contact_sheets/class_000.png", "contact_sheets/class_002.csv"})
        CHECK(fs::exists(out / p));

    // header + per head: 6 slices, 2 alphas x 2 regions, 1 ood row
    const auto csv = read_file(out / "report/results.csv");
    CHECK(split_lines(csv).size() == 1 + 2 * (6 + 4 + 1));
    auto parsed = parse_results_csv(csv);
    REQUIRE(parsed.size() == 2);
    for (const auto& h : rep.heads) {
        const auto& s = parsed.at(series_name(h));
        for (const auto& sl : h.stratified.slices) CHECK(s.slices.at(sl.index) == sl.accuracy);
        for (const auto& row : h.noise.rows) CHECK(s.noise.at({row.alpha, std::string(to_string(row.region))}) == row.accuracy);
        REQUIRE(s.ood);
        CHECK(s.ood->first == h.ood->restricted_accuracy);
        CHECK(s.ood->second == h.ood->unrestricted_accuracy);
    }

    // one series per head for slices, per (head, region) for noise
    for (auto [svg, series] : {std::pair{"report/slices.svg", 2}, std::pair{"report/noise.svg", 4}}) {
        const auto text = read_file(out / svg);
        CHECK(xml_balanced(text));
        CHECK(count_of(text, "<polyline") == static_cast<std::size_t>(series));
    }

    auto summary = nlohmann::json::parse(read_file(out / "report/summary.json"));
    CHECK(summary["heads"].size() == 2);
    CHECK(summary["provenance"]["provenance_hash"] == rep.provenance.provenance_hash);
    CHECK(summary["heads"][0]["average_slice_accuracy"] == rep.heads[0].stratified.mean_accuracy);
}

TEST_CASE("pipeline: rerun reuses heads and reproduces the summary; changed settings retrain") {
    Fixture f;
    run_pipeline(f.config("out"));
    const auto first = read_file(f.dir / "out/report/summary.json");
    auto again = run_pipeline(f.config("out"));
    CHECK(again.heads_reused == 2);
    CHECK(again.heads_trained == 0);
    CHECK(read_file(f.dir / "out/report/summary.json") == first);
    CHECK(summary_json(again.report) == first);

    auto changed = run_pipeline(f.config("out", "l2 = 0.01\n"));
    CHECK(changed.heads_trained == 2);
    CHECK(changed.report.provenance.provenance_hash != again.report.provenance.provenance_hash);

    run_pipeline(f.config("other"));
    CHECK(read_file(f.dir / "other/report/summary.json") == first);
}

TEST_CASE("pipeline: inverted naming swaps top and bot labels only") {
    Fixture f;
    auto plain = run_pipeline(f.config("a"));
    auto inv = run_pipeline(f.config("b", "invert_naming = true\n"));
    REQUIRE(inv.report.heads.size() == 2);
    CHECK(inv.report.heads[0].label == "bot");
    CHECK(inv.report.heads[1].label == "top");
    CHECK(inv.report.heads[0].val_accuracy == plain.report.heads[0].val_accuracy);
    CHECK(read_file(f.dir / "b/report/summary.json").find("inverted") != std::string::npos);
}

TEST_CASE("pipeline: stage failures carry the stage name, partial artifacts stay") {
    Fixture f;
    struct Broken : BackboneAdapter {
        std::string backbone_id() const override { return "broken"; }
        std::size_t dim() const override { return 4; }
        std::vector<float> embed(const ImageTensor&) override { throw Error(ErrorKind::backend, "no GPU"); }
    } broken;
    PipelineHooks hooks;
    hooks.backbone = &broken;
    std::vector<std::string> stages;
    hooks.log = [&](const std::string& s) { stages.push_back(s); };
    try {
        run_pipeline(f.config("out"), hooks);
        FAIL("expected stage failure");
    } catch (const StageError& e) {
        CHECK(e.stage() == "extract");
    }
    CHECK(stages.back() == "extract");
    CHECK(fs::exists(f.dir / "out/scores.jsonl"));
    CHECK(fs::exists(f.dir / "out/ranking_train.jsonl"));
}

TEST_CASE("pipeline: output directory lock") {
    TempDir dir;
    OutputDirLock held(dir.path());
    CHECK_THROWS_AS(OutputDirLock(dir.path()), Error);
    Fixture f;
    auto cfg = f.config("locked");
    OutputDirLock other(cfg.output_dir);
    CHECK_THROWS_AS(run_pipeline(cfg), Error);
}

TEST_CASE("config: parsing, errors, hash sensitivity") {
    auto c = parse_config("manifest = m.jsonl\n# note\nk = 5, 10\nstrategies = rnd\nalphas = 1.5\nregions = bg\n", "/base");
    CHECK(c.manifest == fs::path("/base/m.jsonl"));
    CHECK(c.k_values == std::vector<std::size_t>{5, 10});
    CHECK(c.strategies == std::vector<SubsetStrategy>{SubsetStrategy::rnd});
    CHECK(c.alphas == std::vector<double>{1.5});
    CHECK(c.regions == std::vector<NoiseRegion>{NoiseRegion::bg});

    auto kind_of = [](const std::string& text) {
        try {
            parse_config(text);
        } catch (const Error& e) {
            return e.kind();
        }
        return ErrorKind::io;
    };
    CHECK(kind_of("manifest = m\ncolour = red\n") == ErrorKind::config);
    CHECK(kind_of("manifest = m\nk = 3\nk = 4\n") == ErrorKind::config);
    CHECK(kind_of("manifest = m\nk = -3\n") == ErrorKind::config);
    CHECK(kind_of("manifest = m\nstrategies = best\n") == ErrorKind::config);
    CHECK(kind_of("k = 3\n") == ErrorKind::config);
    CHECK(kind_of("manifest = m\nno equals sign\n") == ErrorKind::config);
    CHECK(kind_of("manifest = m\nl2 = -1\n") == ErrorKind::config);

    const auto base = parse_config("manifest = m\n");
    const auto h0 = config_hash(base);
    CHECK(config_hash(parse_config("manifest = elsewhere\noutput_dir = x\n")) == h0);
    for (const char* extra : {"l2 = 0.5\n", "k = 7\n", "seed = 3\n", "alphas = 10\n", "strategies = top\n", "max_iters = 10\n", "i_max = 9\n"})
        CHECK(config_hash(parse_config(std::string("manifest = m\n") + extra)) != h0);
    CHECK(make_provenance(base, "m1", "d", "b").provenance_hash != make_provenance(base, "m2", "d", "b").provenance_hash);
    CHECK(make_provenance(base, "m1", "d", "b").provenance_hash != make_provenance(base, "m1", "d2", "b").provenance_hash);
    CHECK(make_provenance(base, "m1", "d", "b").provenance_hash == make_provenance(base, "m1", "d", "b").provenance_hash);
}

TEST_CASE("contact sheet: ordering, layout and index") {
    Fixture f;
    auto det = MockDetector::from_file(f.dir / "data/ground_truth.jsonl");
    auto table = batch_score(f.ds.manifest, det, {});
    auto ranking = build_rankings(table, f.ds.manifest, Split::train);

    auto sheet = emit_contact_sheet(ranking, f.ds.manifest, 1, 3, 2, 32);
    REQUIRE(sheet.tiles.size() == 5);
    for (std::size_t i = 1; i < sheet.tiles.size(); ++i) CHECK(sheet.tiles[i - 1].score <= sheet.tiles[i].score);
    const auto& list = ranking.classes.at(1);
    CHECK(sheet.tiles[0].image_id == list.back().image_id);
    CHECK(sheet.tiles[4].image_id == list.front().image_id);
    for (const auto& t : sheet.tiles) {
        CHECK(ranking.rank(1, t.image_id) == t.rank);
        CHECK(list[t.rank - 1].score == t.score);
    }
    CHECK(sheet.image.width == 4 + 5 * (32 + 4) + 12);
    CHECK(sheet.image.height == 4 + 32 + 14 + 4);

    auto idx = split_lines(contact_sheet_index(sheet));
    REQUIRE(idx.size() == 6);
    CHECK(idx[0] == "position,image_id,rank,score");
    CHECK(idx[1].rfind("0," + sheet.tiles[0].image_id + "," + std::to_string(sheet.tiles[0].rank) + ",", 0) == 0);

    auto only_low = emit_contact_sheet(ranking, f.ds.manifest, 1, 4, 0, 32);
    REQUIRE(only_low.tiles.size() == 4);
    CHECK(only_low.tiles.back().rank == 1);
    CHECK(only_low.image.width == 4 + 4 * (32 + 4));

    CHECK_THROWS_AS(emit_contact_sheet(ranking, f.ds.manifest, 1, 10, 10), Error);
    CHECK_THROWS_AS(emit_contact_sheet(ranking, f.ds.manifest, 1, 0, 0), Error);
    CHECK_THROWS_AS(emit_contact_sheet(ranking, f.ds.manifest, 42, 1, 1), Error);
}

TEST_CASE("summary json is deterministic and independent of head order of construction") {
    EvalReport r;
    HeadResult h;
    h.label = "top";
    h.k = 5;
    h.stratified.slices = {{1, 0.5, 4, {}}, {2, 0.25, 4, {7}}};
    h.stratified.mean_accuracy = 0.375;
    h.noise.rows = {{10, NoiseRegion::fg, 0.1, 4, 0}};
    r.heads.push_back(h);
    const auto a = summary_json(r);
    CHECK(a == summary_json(r));
    auto j = nlohmann::json::parse(a);
    CHECK(j["heads"][0]["slices"][1]["skipped_classes"][0] == 7);
    CHECK(j["heads"][0]["noise"]["clamped"] == false);
    CHECK(split_lines(results_csv(r)).size() == 1 + 2 + 1);
}

TEST_CASE("cli: exit codes") {
    Fixture f;
    write_file_atomic(f.dir / "good.cfg", f.config_text("cli_out"));
    CHECK(run_cli("run --quiet --config " + (f.dir / "good.cfg").string()) == 0);
    CHECK(fs::exists(f.dir / "cli_out/report/summary.json"));

    write_file_atomic(f.dir / "bad.cfg", "manifest = x\nbogus = 1\n");
    CHECK(run_cli("run --quiet --config " + (f.dir / "bad.cfg").string()) == 2);
    CHECK(run_cli("run --quiet --config " + (f.dir / "missing.cfg").string()) == 2);
    CHECK(run_cli("rank --no-such-flag") == 2);

    write_file_atomic(f.dir / "broken.cfg", f.config_text("cli_broken", "backbone = false\n"));
    CHECK(run_cli("run --quiet --config " + (f.dir / "broken.cfg").string()) == 3);
}

TEST_CASE("cli: stage commands chain into the same heads as the pipeline") {
    Fixture f;
    const auto d = f.dir.path();
    const auto data = d / "data";
    const std::string m = (data / "manifest.jsonl").string();
    REQUIRE(run_cli("score --manifest " + m + " --truth " + (data / "ground_truth.jsonl").string() + " --cache " + (d / "sc.jsonl").string() + " --out " + (d / "s.jsonl").string()) == 0);
    REQUIRE(run_cli("rank --scores " + (d / "s.jsonl").string() + " --manifest " + m + " --split train --out " + (d / "r.jsonl").string()) == 0);
    REQUIRE(run_cli("select --ranking " + (d / "r.jsonl").string() + " --strategy bot --k 3 --out " + (d / "sub.jsonl").string()) == 0);
    REQUIRE(run_cli("extract --manifest " + m + " --cache " + (d / "f.f32").string() + " --subset " + (d / "sub.jsonl").string()) == 0);
    REQUIRE(run_cli("train --features " + (d / "f.f32").string() + " --subset " + (d / "sub.jsonl").string() + " --out " +
                    (d / "h.head").string()) == 0);

    auto res = run_pipeline(f.config("pipe"));
    CHECK(read_file(d / "s.jsonl") == read_file(d / "pipe/scores.jsonl"));
    CHECK(read_file(d / "r.jsonl") == read_file(d / "pipe/ranking_train.jsonl"));
    CHECK(read_head(d / "h.head").W == read_head(d / "pipe/heads/bot_k3.head").W);
}
