#include <cmath>
#include <filesystem>
#include <fstream>

#include "../vendor/doctest.h"
#include "cafcn/data.hpp"
#include "cafcn/errors.hpp"

using namespace cafcn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Geometric point-in-shape test on the pixel centre, independent of the rasteriser.
bool inside(const Placement& s, double px, double py) {
    const double cx = px + 0.5, cy = py + 0.5;
    switch (s.kind) {
        case ShapeKind::Square:
            return cx >= s.x && cx < s.x + s.size && cy >= s.y && cy < s.y + s.size;
        case ShapeKind::Disc: {
            const double r = s.size / 2;
            return std::pow(cx - (s.x + r), 2) + std::pow(cy - (s.y + r), 2) <= r * r;
        }
        case ShapeKind::Triangle: {
            if (cy < s.y || cy > s.y + s.size) return false;
            const double half = (cy - s.y) / 2.0;  // half-width grows by 1/2 per row
            const double mid = s.x + s.size / 2;
            return std::abs(cx - mid) < half + 1e-9;
        }
    }
    return false;
}

SyntheticSpec clean(ShapeKind kind) {
    SyntheticSpec s;
    s.common_shape = kind;
    s.distractor_count = 0;
    s.noise_stddev = 0.0;
    s.seed = 17;
    return s;
}

}  // namespace

TEST_CASE("clean generation rasterises exactly the common shape") {
    for (ShapeKind kind : {ShapeKind::Square, ShapeKind::Disc, ShapeKind::Triangle}) {
        const PairSample p = generate_pair(clean(kind));
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x) {
                CHECK(p.mask1[y * 32 + x] == (covers(p.metadata.common1, x, y) ? 1.0 : 0.0));
                if (kind != ShapeKind::Triangle) {
                    CHECK(covers(p.metadata.common1, x, y) == inside(p.metadata.common1, x, y));
                }
            }
    }
}

TEST_CASE("shape coverage") {
    const Placement sq{ShapeKind::Square, 2.0, 3.0, 4.0, {}};
    CHECK(covers(sq, 2, 3));
    CHECK(covers(sq, 5, 6));
    CHECK_FALSE(covers(sq, 6, 6));
    const Placement disc{ShapeKind::Disc, 0.0, 0.0, 8.0, {}};
    CHECK(covers(disc, 3, 3));
    CHECK_FALSE(covers(disc, 0, 0));
    const Placement tri{ShapeKind::Triangle, 0.0, 0.0, 8.0, {}};
    CHECK(covers(tri, 3, 6));
    CHECK_FALSE(covers(tri, 0, 1));
    CHECK(to_string(ShapeKind::Disc) == "disc");
    CHECK(shape_kind_from_string("triangle") == ShapeKind::Triangle);
    CHECK_THROWS_AS(shape_kind_from_string("hexagon"), SpecError);
}

TEST_CASE("noise-free common shape has the same colour in both images") {
    const PairSample p = generate_pair(clean(ShapeKind::Square));
    const auto& a = p.metadata.common1;
    const auto& b = p.metadata.common2;
    for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t ia = (std::size_t(a.y + 1) * 32 + std::size_t(a.x + 1)) * 3 + c;
        const std::size_t ib = (std::size_t(b.y + 1) * 32 + std::size_t(b.x + 1)) * 3 + c;
        CHECK(p.image1[ia] == p.image2[ib]);
    }
}

TEST_CASE("distractors never enter the mask") {
    SyntheticSpec s;
    s.seed = 5;
    s.noise_stddev = 0.0;
    s.distractor_colors = {{1.0, 1.0, 1.0}};  // brighter than anything else
    for (int i = 0; i < 10; ++i) {
        s.seed = 100 + i;
        const PairSample p = generate_pair(s);
        for (const auto& d : p.metadata.distractors1)
            for (std::size_t y = 0; y < 32; ++y)
                for (std::size_t x = 0; x < 32; ++x)
                    if (covers(d, x, y)) CHECK(p.mask1[y * 32 + x] == 0.0);
    }
}

TEST_CASE("generation is deterministic and validated") {
    SyntheticSpec s;
    s.seed = 9;
    const PairSample a = generate_pair(s), b = generate_pair(s);
    CHECK(a.image1 == b.image1);
    CHECK(a.image2 == b.image2);
    CHECK(a.mask2 == b.mask2);
    s.randomize_appearance = true;
    const PairSample r = generate_pair(s);
    for (double v : r.image1.values()) CHECK((v >= 0.0 && v <= 1.0));

    SyntheticSpec bad;
    bad.max_size = 40;
    CHECK_THROWS_AS(generate_pair(bad), SpecError);
    bad = SyntheticSpec{};
    bad.distractor_count = 60;
    CHECK_THROWS_AS(generate_pair(bad), SpecError);
}

TEST_CASE("dataset on disk") {
    const fs::path root = fs::temp_directory_path() / "cafcn_data_test";
    fs::remove_all(root);
    SyntheticSpec s;
    s.seed = 21;

    SUBCASE("empty dataset") {
        write_dataset(root / "empty", generate_dataset(s, 0));
        CHECK(slurp(root / "empty" / "manifest.tsv").empty());
        CHECK(std::distance(fs::directory_iterator(root / "empty"), fs::directory_iterator{}) == 1);
    }
    SUBCASE("round trip and reproducibility") {
        const auto pairs = generate_dataset(s, 3);
        write_dataset(root / "a", pairs);
        write_dataset(root / "b", generate_dataset(s, 3));
        for (const char* f : {"manifest.tsv", "pair_00001/img1.ppm", "pair_00002/gt2.pgm"})
            CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
        const auto entries = read_manifest(root / "a" / "manifest.tsv");
        REQUIRE(entries.size() == 3);
        CHECK(entries[1].image2 == fs::path("pair_00001/img2.ppm"));
        const auto loaded = load_dataset(root / "a");
        REQUIRE(loaded.size() == 3);
        CHECK(loaded[2].mask1 == pairs[2].mask1);
        for (std::size_t i = 0; i < pairs[0].image1.size(); ++i)
            CHECK(loaded[0].image1[i] == quantize(pairs[0].image1[i]) / 255.0);
    }
    SUBCASE("train and held-out splits are disjoint") {
        SyntheticSpec t = s;
        t.seed = 22;
        const auto train = generate_dataset(s, 20);
        const auto held = generate_dataset(t, 5);
        for (const auto& h : held)
            for (const auto& p : train) CHECK(h.image1 != p.image1);
    }
    fs::remove_all(root);
}

TEST_CASE("portable graymap and pixmap") {
    const fs::path dir = fs::temp_directory_path() / "cafcn_pnm_test";
    fs::create_directories(dir);

    SUBCASE("constant 0.5 map quantises to 128") {
        save_map(Tensor({3, 5, 1}, 0.5), dir / "half.pgm");
        const Tensor t = load_map(dir / "half.pgm");
        CHECK(t.shape() == Shape{3, 5, 1});
        for (double v : t.values()) CHECK(v == 128.0 / 255.0);
        CHECK(quantize(0.5) == 128);
    }
    SUBCASE("zero map round-trips") {
        save_map(Tensor({4, 4, 1}), dir / "zero.pgm");
        const Tensor z = load_map(dir / "zero.pgm");
        for (double v : z.values()) CHECK(v == 0.0);
    }
    SUBCASE("quantised maps round-trip exactly") {
        Tensor t({2, 3, 3});
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = double((i * 37) % 256) / 255.0;
        CHECK(decode_pnm(encode_pnm(t), 3) == t);
        CHECK(encode_pnm(t).rfind("P6\n3 2\n255\n", 0) == 0);
    }
    SUBCASE("malformed files") {
        CHECK_THROWS_AS(decode_pnm("P4\n1 1\n255\n\x01", 1), FormatError);
        try {
            decode_pnm(std::string("P5\n2 2\n255\n\x01\x02", 13), 1);
            FAIL("truncated payload accepted");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 13);
        }
        CHECK_THROWS_AS(decode_pnm("P5\n2 2\n65535\n", 1), FormatError);
        CHECK_THROWS_AS(decode_pnm("P5\nx 2\n255\n", 1), FormatError);
        CHECK_THROWS_AS(decode_pnm(encode_pnm(Tensor({1, 1, 3})), 1), FormatError);
    }
    fs::remove_all(dir);
}

TEST_CASE("histogram grouping") {
    auto solid = [](double r, double g, double b) {
        Tensor t({4, 4, 3});
        for (std::size_t i = 0; i < 16; ++i) {
            t[i * 3] = r;
            t[i * 3 + 1] = g;
            t[i * 3 + 2] = b;
        }
        return t;
    };
    const auto h = color_histogram(solid(0.2, 0.5, 0.9));
    CHECK(h.size() == 96);
    double sum = 0.0;
    for (std::size_t i = 0; i < 32; ++i) sum += h[i];
    CHECK(sum == doctest::Approx(1.0));

    const std::vector<Tensor> imgs{solid(0.9, 0.1, 0.1), solid(0.1, 0.1, 0.9), solid(0.88, 0.12, 0.1),
                                   solid(0.9, 0.1, 0.1)};
    const auto groups = group_by_histogram(imgs, 2);
    REQUIRE(groups.size() == 2);
    std::vector<int> seen(4, 0);
    for (const auto& g : groups)
        for (auto i : g) ++seen[i];
    CHECK(seen == std::vector<int>{1, 1, 1, 1});
    for (const auto& g : groups) {
        const bool has_blue = std::find(g.begin(), g.end(), 1u) != g.end();
        if (has_blue) CHECK(g.size() == 1);
        if (std::find(g.begin(), g.end(), 0u) != g.end()) CHECK(std::find(g.begin(), g.end(), 3u) != g.end());
    }
    CHECK_THROWS_AS(group_by_histogram(imgs, 5), UsageError);
}
