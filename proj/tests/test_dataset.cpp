#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace spurank;
using testsupport::TempDir;

namespace {

std::string header(const std::string& classes) { return R"({"root":"imgs","classes":[)" + classes + "]}\n"; }

std::string rec(const std::string& id, int cls, const std::string& name = "a", const std::string& split = "train") {
    return R"({"image_id":")" + id + R"(","class_id":)" + std::to_string(cls) + R"(,"class_name":")" + name + R"(","split":")" + split +
           R"(","path":")" + id + R"(.png"})" + "\n";
}

const std::string kTwoClasses = R"({"class_id":0,"class_name":"a"},{"class_id":1,"class_name":"b"})";

}  // namespace

TEST_CASE("manifest: empty record list is valid") {
    auto m = parse_manifest(header(kTwoClasses));
    CHECK(m.size() == 0);
    CHECK(m.classes().size() == 2);
    CHECK(validate_manifest(m, true).empty());
}

TEST_CASE("manifest: duplicate image_id names the id") {
    const std::string text = header(kTwoClasses) + rec("x1", 0) + rec("x2", 1) + rec("x1", 1);
    try {
        parse_manifest(text);
        FAIL("expected duplicate-id error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::duplicate_id);
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("x1"));
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("line 4"));
    }
}

TEST_CASE("manifest: unknown class and malformed lines report line numbers") {
    try {
        parse_manifest(header(kTwoClasses) + rec("x1", 0) + rec("x2", 7));
        FAIL("expected unknown-class error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::unknown_class);
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("line 3"));
    }
    try {
        parse_manifest(header(kTwoClasses) + rec("x1", 0) + "{not json\n");
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::parse);
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("line 3"));
    }
    CHECK_THROWS_AS(parse_manifest(""), Error);
    try {
        parse_manifest(header(kTwoClasses) + R"({"image_id":"q","class_id":0,"class_name":"a","split":"test","path":"q.png"})");
        FAIL("expected bad split");
    } catch (const Error& e) {
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("line 2"));
    }
}

TEST_CASE("manifest: missing file is an io error") {
    try {
        load_manifest("/nonexistent/manifest.jsonl");
        FAIL("expected io error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::io);
    }
}

TEST_CASE("manifest: records are sorted by image_id") {
    auto m = parse_manifest(header(kTwoClasses) + rec("c", 0) + rec("a", 1) + rec("b", 0));
    REQUIRE(m.size() == 3);
    CHECK(m.records()[0].image_id == "a");
    CHECK(m.records()[1].image_id == "b");
    CHECK(m.records()[2].image_id == "c");
    CHECK(m.at("b").class_id == 0);
    CHECK(m.find("zz") == nullptr);
    CHECK_THROWS_AS(m.at("zz"), Error);
}

TEST_CASE("manifest: 1000-record write/load round trip is byte-identical") {
    std::mt19937_64 rng(11);
    std::map<int, std::string> classes{{0, "cat"}, {1, "dog"}, {2, "bird \"quoted\""}};
    std::vector<ImageRecord> records;
    for (int i = 0; i < 1000; ++i) {
        const int c = static_cast<int>(rng() % 3);
        char id[32];
        std::snprintf(id, sizeof id, "img_%05d", static_cast<int>(rng() % 100000) * 1000 + i);
        records.push_back({id, c, classes[c], static_cast<Split>(rng() % 3), std::string("d/") + id + ".png"});
    }
    DatasetManifest m("root", classes, records);
    TempDir tmp;
    const auto path = tmp / "m.jsonl";
    write_manifest(path, m);
    const std::string first = read_file(path);
    auto loaded = load_manifest(path);
    CHECK(loaded.records() == m.records());
    CHECK(loaded.classes() == m.classes());
    CHECK(serialize_manifest(loaded) == first);
}

TEST_CASE("validate_manifest reports problems as entries") {
    TempDir tmp;
    auto m = parse_manifest(header(kTwoClasses) + rec("present", 0) + rec("absent", 1), tmp.path());
    fs::create_directories(tmp / "imgs");
    write_file_atomic(tmp / "imgs" / "present.png", "x");
    auto report = validate_manifest(m, true);
    REQUIRE(report.size() == 1);
    CHECK(report[0].kind == IssueKind::missing_file);
    CHECK(report[0].image_id == "absent");
    CHECK(validate_manifest(m, false).empty());

    DatasetManifest bad("r", {{0, "a"}, {1, "b"}}, {{"p", 7, "x", Split::train, "p.png"}, {"q", 0, "", Split::val, "../../q.png"}});
    auto issues = validate_manifest(bad, false);
    std::set<IssueKind> kinds;
    for (const auto& i : issues) kinds.insert(i.kind);
    CHECK(kinds == std::set<IssueKind>{IssueKind::unknown_class, IssueKind::empty_class_name, IssueKind::path_outside_root});
}

TEST_CASE("synthetic: counts, naming and ground truth") {
    TempDir tmp;
    auto cfg = testsupport::small_synthetic();
    auto ds = generate_synthetic(cfg, tmp.path());
    const std::size_t expected = 3 * 12 + 3 * 6 + 2 * 4;
    CHECK(ds.manifest.size() == expected);
    CHECK(ds.truth.size() == expected);
    CHECK(ds.manifest.split_records(Split::train).size() == 36);
    CHECK(ds.manifest.split_records(Split::val).size() == 18);
    CHECK(ds.manifest.split_records(Split::ood).size() == 8);
    CHECK(ds.manifest.find("train_c02_0011") != nullptr);

    auto loaded = load_manifest(tmp / "manifest.jsonl");
    CHECK(loaded.records() == ds.manifest.records());
    CHECK(validate_manifest(loaded, true).empty());
    auto gt = load_ground_truth(tmp / "ground_truth.jsonl");
    REQUIRE(gt.size() == ds.truth.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        CHECK(gt[i].image_id == ds.truth[i].image_id);
        CHECK(gt[i].occlusion == ds.truth[i].occlusion);
        CHECK(gt[i].fg_box == ds.truth[i].fg_box);
        CHECK(gt[i].occlusion >= 0.0);
        CHECK(gt[i].occlusion <= 1.0);
        const auto& b = gt[i].fg_box;
        CHECK(b.x_min >= 0);
        CHECK(b.y_min >= 0);
        CHECK(b.x_max <= cfg.image_size);
        CHECK(b.y_max <= cfg.image_size);
        CHECK(b.x_min < b.x_max);
    }
    CHECK(read_file(tmp / "ood_mapping.txt") == "class_00 0\nclass_01 1\n");
}

TEST_CASE("synthetic: default config has 3000 train records") {
    SyntheticConfig cfg;
    std::size_t n = 0;
    for (int c = 0; c < cfg.num_classes; ++c) n += static_cast<std::size_t>(cfg.per_class);
    CHECK(n == 3000);
}

TEST_CASE("synthetic: regeneration is byte-identical") {
    TempDir a, b;
    auto cfg = testsupport::small_synthetic(5);
    auto da = generate_synthetic(cfg, a.path());
    generate_synthetic(cfg, b.path());
    for (const char* f : {"manifest.jsonl", "ground_truth.jsonl", "ood_mapping.txt"}) CHECK(read_file(a / f) == read_file(b / f));
    for (const auto& r : da.manifest.records()) CHECK(sha256_hex(read_file(a / r.path)) == sha256_hex(read_file(b / r.path)));

    TempDir c;
    cfg.seed = 6;
    generate_synthetic(cfg, c.path());
    CHECK(read_file(a / "ground_truth.jsonl") != read_file(c / "ground_truth.jsonl"));
}

TEST_CASE("synthetic: occlusion 1 makes the glyph invisible, pixels outside the box ignore o") {
    const auto palette = class_palette(4);
    const Rgb bg = palette[2];
    auto hidden = paint_scene(64, 1, bg, 1.0, 16, 16);
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c)
            for (int ch = 0; ch < 3; ++ch) REQUIRE(hidden.at(r, c)[ch] == bg[static_cast<std::size_t>(ch)]);

    auto clear = paint_scene(64, 1, bg, 0.0, 16, 16);
    auto half = paint_scene(64, 1, bg, 0.5, 16, 16);
    bool glyph_differs = false;
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c) {
            const bool inside = r >= 16 && r < 48 && c >= 16 && c < 48;
            for (int ch = 0; ch < 3; ++ch) {
                if (!inside) {
                    REQUIRE(clear.at(r, c)[ch] == hidden.at(r, c)[ch]);
                    REQUIRE(half.at(r, c)[ch] == hidden.at(r, c)[ch]);
                } else if (clear.at(r, c)[ch] != hidden.at(r, c)[ch]) {
                    glyph_differs = true;
                }
            }
        }
    CHECK(glyph_differs);
}

TEST_CASE("synthetic: palette colors differ by at least 64 in some channel") {
    const auto p = class_palette(64);
    REQUIRE(p.size() == 64);
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = i + 1; j < p.size(); ++j) {
            int cheb = 0;
            for (int ch = 0; ch < 3; ++ch) cheb = std::max(cheb, std::abs(int(p[i][ch]) - int(p[j][ch])));
            CHECK(cheb >= 64);
        }
}

TEST_CASE("synthetic: glyphs depend on class only and differ between classes") {
    CHECK(class_glyph(3) == class_glyph(3));
    for (int a = 0; a < 10; ++a)
        for (int b = a + 1; b < 10; ++b) CHECK(class_glyph(a) != class_glyph(b));
}

TEST_CASE("synthetic: config validation") {
    SyntheticConfig c;
    c.num_classes = 1;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.per_class = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.p_spur_train = 1.5;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.image_size = 40;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("keyed rng and hashing helpers") {
    auto a = keyed_rng(1, "s", "k");
    auto b = keyed_rng(1, "s", "k");
    auto c = keyed_rng(2, "s", "k");
    auto d = keyed_rng(1, "s", "k2");
    const auto va = a();
    CHECK(va == b());
    CHECK(va != c());
    CHECK(va != d());

    std::mt19937_64 rng(3);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const auto v = uniform_index(rng, 7);
        REQUIRE(v < 7);
        ++counts[v];
    }
    for (int n : counts) CHECK(n > 800);
    for (int i = 0; i < 1000; ++i) {
        const double u = unit_uniform(rng);
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(split_lines("a\r\nb\n\nc") == std::vector<std::string>{"a", "b", "", "c"});
}

TEST_CASE("parallel_for covers every index and rethrows") {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) {
                        if (i == 4) throw Error(ErrorKind::io, "boom");
                    }),
                    Error);
}

TEST_CASE("png round trip") {
    TempDir tmp;
    RgbImage img(5, 7);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 13);
    write_png(tmp / "x.png", img);
    auto back = read_png(tmp / "x.png");
    CHECK(back.height == 5);
    CHECK(back.width == 7);
    CHECK(back.pixels == img.pixels);
    write_file_atomic(tmp / "bad.png", "not a png");
    CHECK_THROWS_AS(read_png(tmp / "bad.png"), Error);
    auto t = to_tensor(img);
    CHECK(t.at(0, 1, 0) == Catch::Approx(39.0 / 255.0));
}
