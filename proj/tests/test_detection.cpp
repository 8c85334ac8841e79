#include <catch_amalgamated.hpp>

#include <atomic>

#include "support.hpp"

using namespace spurank;
using testsupport::TempDir;

namespace {

DetectionBox box(double x0, double y0, double x1, double y1, double score, int q = 0) { return {x0, y0, x1, y1, score, q}; }

// Returns canned boxes; fails for ids listed in `fail`.
class ScriptedDetector : public DetectorBackend {
public:
    std::string id = "scripted-v1";
    std::map<std::string, std::vector<DetectionBox>> boxes;
    std::set<std::string> fail;
    std::atomic<int> calls{0};

    std::string backend_id() const override { return id; }
    std::vector<DetectionBox> detect(const fs::path& image_path, std::span<const std::string>) override {
        ++calls;
        const auto stem = image_path.stem().string();
        if (fail.count(stem)) throw Error(ErrorKind::backend, "scripted failure");
        auto it = boxes.find(stem);
        return it == boxes.end() ? std::vector<DetectionBox>{} : it->second;
    }
};

struct Fixture {
    TempDir dir;
    SyntheticDataset ds;
    Fixture() : ds(generate_synthetic(testsupport::small_synthetic(), dir.path())) {}
    MockDetector mock() const { return MockDetector::from_file(dir / "ground_truth.jsonl"); }
};

}  // namespace

TEST_CASE("aggregate_boxes: max over target query") {
    std::vector<DetectionBox> b{box(0, 0, 1, 1, 0.3), box(0, 0, 2, 2, 0.7), box(0, 0, 3, 3, 0.95, 1)};
    CHECK(aggregate_boxes(b, 0) == 0.7);
    CHECK(aggregate_boxes(b, 1) == 0.95);
    CHECK(aggregate_boxes(b, 2) == 0.0);
    CHECK(aggregate_boxes({}, 0) == 0.0);
    CHECK(aggregate_boxes(b, 0, Aggregation::sum) == Catch::Approx(1.0));
    CHECK(aggregate_boxes(b, 0, Aggregation::top3_mean) == Catch::Approx(0.5));
}

TEST_CASE("aggregate_boxes: 50 random boxes equal a brute-force scan, any permutation") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<DetectionBox> b;
        for (int i = 0; i < 50; ++i) b.push_back(box(0, 0, 1, 1, unit_uniform(rng), static_cast<int>(rng() % 3)));
        for (int q = 0; q < 3; ++q) {
            double expect = 0;
            for (const auto& x : b)
                if (x.query_index == q && x.score > expect) expect = x.score;
            CHECK(aggregate_boxes(b, q) == expect);
            std::shuffle(b.begin(), b.end(), rng);
            CHECK(aggregate_boxes(b, q) == expect);
        }
    }
}

TEST_CASE("box validation and ordering") {
    CHECK(box_problem(box(0, 0, 10, 10, 0.5), 10, 10).empty());
    CHECK_FALSE(box_problem(box(5, 0, 5, 10, 0.5), 10, 10).empty());
    CHECK_FALSE(box_problem(box(0, 0, 11, 10, 0.5), 10, 10).empty());
    CHECK_FALSE(box_problem(box(-1, 0, 5, 10, 0.5), 10, 10).empty());
    CHECK_FALSE(box_problem(box(0, 0, 5, 5, 1.5), 10, 10).empty());
    std::vector<DetectionBox> b{box(3, 1, 4, 4, 0.5), box(1, 2, 4, 4, 0.5), box(1, 1, 4, 4, 0.5), box(0, 0, 1, 1, 0.9)};
    sort_boxes(b);
    CHECK(b[0].score == 0.9);
    CHECK((b[1].x_min == 1 && b[1].y_min == 1));
    CHECK((b[2].x_min == 1 && b[2].y_min == 2));
    CHECK(b[3].x_min == 3);
}

TEST_CASE("render_prompt substitutes the class name") {
    CHECK(render_prompt(kDefaultPromptTemplate, "sloth") == "a photo of a sloth");
    CHECK(render_prompt("{class_name} or {class_name}", "x") == "x or x");
}

TEST_CASE("mock detector: score = 1 - o, box = fg box") {
    Fixture f;
    auto det = f.mock();
    SyntheticGroundTruth t{"train_c00_0000", "images/train/train_c00_0000.png", 0.25, true, 0, {16, 16, 48, 48}};
    MockDetector fixed({t});
    const auto& rec = f.ds.manifest.at("train_c00_0000");
    auto s = score_image(rec, f.ds.manifest.image_path(rec), fixed);
    CHECK(s.score == 0.75);
    REQUIRE(s.boxes.size() == 1);
    CHECK(s.boxes[0].x_min == 16);
    CHECK(s.boxes[0].y_max == 48);

    for (const auto& g : f.ds.truth) {
        const auto& r = f.ds.manifest.at(g.image_id);
        auto sr = score_image(r, f.ds.manifest.image_path(r), det);
        CHECK(sr.score == std::clamp(1.0 - g.occlusion, 0.0, 1.0));
        CHECK(sr.boxes[0].x_min == g.fg_box.x_min);
        CHECK(sr.backend_id == det.backend_id());
    }
}

TEST_CASE("mock detector: clearer object scores strictly higher") {
    Fixture f;
    auto det = f.mock();
    auto truth = f.ds.truth;
    std::sort(truth.begin(), truth.end(), [](const auto& a, const auto& b) { return a.occlusion < b.occlusion; });
    const auto& clear = f.ds.manifest.at(truth.front().image_id);
    const auto& occluded = f.ds.manifest.at(truth.back().image_id);
    CHECK(score_image(clear, f.ds.manifest.image_path(clear), det).score >
          score_image(occluded, f.ds.manifest.image_path(occluded), det).score);
}

TEST_CASE("score_image: no boxes gives 0, invalid boxes are backend errors, unreadable images are io errors") {
    Fixture f;
    ScriptedDetector det;
    const auto& rec = f.ds.manifest.at("val_c01_0002");
    auto s = score_image(rec, f.ds.manifest.image_path(rec), det);
    CHECK(s.score == 0.0);
    CHECK(s.boxes.empty());

    det.boxes["val_c01_0002"] = {box(0, 0, 100, 10, 0.5)};
    try {
        score_image(rec, f.ds.manifest.image_path(rec), det);
        FAIL("expected backend error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::backend);
    }
    try {
        score_image(rec, f.dir / "missing.png", det);
        FAIL("expected io error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::io);
    }
}

TEST_CASE("batch_score: warm cache makes zero backend calls and identical tables") {
    Fixture f;
    auto det = f.mock();
    const auto cache = f.dir / "scores.cache.jsonl";
    auto cold = batch_score(f.ds.manifest, det, cache);
    CHECK(cold.records.size() == f.ds.manifest.size());
    CHECK(cold.skipped.empty());
    CHECK(det.calls() == f.ds.manifest.size());
    CHECK(std::is_sorted(cold.records.begin(), cold.records.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; }));

    auto det2 = f.mock();
    auto warm = batch_score(f.ds.manifest, det2, cache);
    CHECK(det2.calls() == 0);
    CHECK(warm.records == cold.records);
    CHECK(serialize_score_table(warm, kDefaultPromptTemplate) == serialize_score_table(cold, kDefaultPromptTemplate));

    TempDir other;
    auto det3 = f.mock();
    auto fresh = batch_score(f.ds.manifest, det3, other / "c.jsonl");
    CHECK(serialize_score_table(fresh, kDefaultPromptTemplate) == serialize_score_table(cold, kDefaultPromptTemplate));
}

TEST_CASE("batch_score: partial cache is resumed, torn last line ignored") {
    Fixture f;
    auto det = f.mock();
    const auto cache = f.dir / "c.jsonl";
    auto full = batch_score(f.ds.manifest, det, cache);
    auto lines = split_lines(read_file(cache));
    std::string truncated;
    for (std::size_t i = 0; i < 11; ++i) truncated += lines[i] + "\n";
    truncated += lines[11].substr(0, lines[11].size() / 2);
    write_file_atomic(cache, truncated);

    auto det2 = f.mock();
    auto resumed = batch_score(f.ds.manifest, det2, cache);
    CHECK(det2.calls() == f.ds.manifest.size() - 10);
    CHECK(resumed.records == full.records);
    auto reread = read_score_file(cache);
    std::set<std::string> ids;
    for (const auto& r : reread.records) ids.insert(r.image_id);
    CHECK(ids.size() == f.ds.manifest.size());
}

TEST_CASE("batch_score: mismatched backend or template is refused") {
    Fixture f;
    auto det = f.mock();
    const auto cache = f.dir / "c.jsonl";
    batch_score(f.ds.manifest, det, cache);
    ScriptedDetector other;
    try {
        batch_score(f.ds.manifest, other, cache);
        FAIL("expected cache mismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::cache_mismatch);
    }
    BatchScoreOptions opts;
    opts.prompt_template = "an image of {class_name}";
    try {
        batch_score(f.ds.manifest, det, cache, opts);
        FAIL("expected cache mismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::cache_mismatch);
    }
}

TEST_CASE("batch_score: failures become skip entries after retries, never silent zeros") {
    Fixture f;
    ScriptedDetector det;
    det.fail = {"train_c00_0003"};
    fs::remove(f.dir / "images/val/val_c02_0001.png");
    BatchScoreOptions opts;
    opts.retries = 2;
    auto t = batch_score(f.ds.manifest, det, f.dir / "c.jsonl", opts);
    REQUIRE(t.skipped.size() == 2);
    CHECK(t.skipped[0].image_id == "train_c00_0003");
    CHECK(t.skipped[1].image_id == "val_c02_0001");
    CHECK(t.find("train_c00_0003") == nullptr);
    CHECK(t.records.size() == f.ds.manifest.size() - 2);
    // 3 attempts for the backend failure, none for the unreadable file
    CHECK(det.calls == static_cast<int>(f.ds.manifest.size()) - 2 + 3);

    det.fail.clear();
    det.calls = 0;
    auto again = batch_score(f.ds.manifest, det, f.dir / "c.jsonl", opts);
    CHECK(det.calls == 1);
    CHECK(again.skipped.size() == 1);
}

TEST_CASE("batch_score: split filter and parallelism independence") {
    Fixture f;
    auto det = f.mock();
    BatchScoreOptions opts;
    opts.split = Split::val;
    auto t = batch_score(f.ds.manifest, det, {}, opts);
    CHECK(t.records.size() == 18);
    for (const auto& r : t.records) CHECK(f.ds.manifest.at(r.image_id).split == Split::val);

    ::setenv("SPURANK_THREADS", "1", 1);
    auto serial = batch_score(f.ds.manifest, det, {});
    ::setenv("SPURANK_THREADS", "4", 1);
    auto parallel = batch_score(f.ds.manifest, det, {});
    ::unsetenv("SPURANK_THREADS");
    CHECK(serial.records == parallel.records);
}

TEST_CASE("batch_score: Spearman(score, 1 - o) on the synthetic fixture") {
    TempDir dir;
    SyntheticConfig cfg;
    cfg.per_class = 60;
    cfg.val_per_class = 0;
    cfg.ood_per_class = 0;
    auto ds = generate_synthetic(cfg, dir.path());
    auto det = MockDetector::from_file(dir / "ground_truth.jsonl");
    auto t = batch_score(ds.manifest, det, {});
    REQUIRE(t.records.size() == 600);
    std::vector<double> s, inv;
    for (std::size_t i = 0; i < t.records.size(); ++i) {
        REQUIRE(t.records[i].image_id == ds.truth[i].image_id);
        s.push_back(t.records[i].score);
        inv.push_back(1.0 - ds.truth[i].occlusion);
        CHECK(t.records[i].score >= 0.0);
        CHECK(t.records[i].score <= 1.0);
    }
    CHECK(testsupport::spearman(s, inv) >= 0.99);
}

TEST_CASE("score table serialization round trip") {
    ScoreTable t;
    t.backend_id = "b1";
    t.records.push_back({"a", 0, 0.5, {box(1, 2, 3, 4, 0.5)}, "b1"});
    t.records.push_back({"b", 1, 0.0, {}, "b1"});
    TempDir dir;
    write_file_atomic(dir / "t.jsonl", serialize_score_table(t, "tmpl {class_name}"));
    auto back = load_score_table(dir / "t.jsonl");
    CHECK(back.backend_id == "b1");
    CHECK(back.records == t.records);
    auto f = read_score_file(dir / "t.jsonl");
    CHECK(f.prompt_template == "tmpl {class_name}");
}

TEST_CASE("subprocess detector speaks the line protocol") {
    Fixture f;
    const std::string cmd = std::string(SPURANK_BIN) + " mock-detector --truth " + (f.dir / "ground_truth.jsonl").string();
    SubprocessDetector sub(cmd);
    auto in_proc = f.mock();
    CHECK(sub.backend_id() == in_proc.backend_id());
    auto a = batch_score(f.ds.manifest, sub, {});
    auto b = batch_score(f.ds.manifest, in_proc, {});
    CHECK(a.records == b.records);
    CHECK(a.skipped.empty());

    CHECK_THROWS_AS(SubprocessDetector("exit 0"), Error);
}

TEST_CASE("serve_detector answers info, detect and error requests") {
    Fixture f;
    auto det = f.mock();
    const auto img = fs::absolute(f.dir / "images/train/train_c01_0004.png").string();
    std::istringstream in(R"({"request_id":0,"info":true})"
                          "\n"
                          R"({"request_id":7,"image_path":")" +
                          img +
                          R"(","queries":["a photo of a class_01"]})"
                          "\n"
                          R"({"request_id":8,"image_path":"/nope/x.png","queries":["q"]})"
                          "\n");
    std::ostringstream out;
    serve_detector(det, in, out);
    auto lines = split_lines(out.str());
    REQUIRE(lines.size() >= 3);
    auto info = nlohmann::json::parse(lines[0]);
    CHECK(info["backend_id"] == det.backend_id());
    auto reply = nlohmann::json::parse(lines[1]);
    CHECK(reply["request_id"] == 7);
    REQUIRE(reply["boxes"].size() == 1);
    CHECK(reply["boxes"][0]["query_index"] == 0);
    auto err = nlohmann::json::parse(lines[2]);
    CHECK(err.contains("error"));
}
