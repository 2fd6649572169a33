#include "cafcn/data.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace cafcn {

std::string to_string(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::Square: return "square";
        case ShapeKind::Disc: return "disc";
        case ShapeKind::Triangle: return "triangle";
    }
    return "unknown";
}

ShapeKind shape_kind_from_string(const std::string& name) {
    if (name == "square") return ShapeKind::Square;
    if (name == "disc") return ShapeKind::Disc;
    if (name == "triangle") return ShapeKind::Triangle;
    throw SpecError("unknown shape kind: " + name);
}

namespace {

// Signed area test for edge v0 -> v1; positive on the interior side for the
// apex, right-base, left-base winding used below (y grows downwards).
double edge(double x0, double y0, double x1, double y1, double px, double py) {
    return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
}

bool top_left(double x0, double y0, double x1, double y1) {
    const double dx = x1 - x0;
    const double dy = y1 - y0;
    return dy < 0.0 || (dy == 0.0 && dx > 0.0);
}

bool inside_edge(double x0, double y0, double x1, double y1, double px, double py) {
    const double w = edge(x0, y0, x1, y1, px, py);
    return w > 0.0 || (w == 0.0 && top_left(x0, y0, x1, y1));
}

}  // namespace

bool covers(const Placement& s, std::size_t px, std::size_t py) {
    const double cx = static_cast<double>(px) + 0.5;
    const double cy = static_cast<double>(py) + 0.5;
    switch (s.kind) {
        case ShapeKind::Square:
            return cx >= s.x && cx < s.x + s.size && cy >= s.y && cy < s.y + s.size;
        case ShapeKind::Disc: {
            const double r = 0.5 * s.size;
            const double dx = cx - (s.x + r);
            const double dy = cy - (s.y + r);
            return dx * dx + dy * dy <= r * r;
        }
        case ShapeKind::Triangle: {
            const double ax = s.x + 0.5 * s.size, ay = s.y;
            const double bx = s.x + s.size, by = s.y + s.size;
            const double qx = s.x, qy = s.y + s.size;
            return inside_edge(ax, ay, bx, by, cx, cy) && inside_edge(bx, by, qx, qy, cx, cy) &&
                   inside_edge(qx, qy, ax, ay, cx, cy);
        }
    }
    return false;
}

void SyntheticSpec::validate() const {
    const double s = static_cast<double>(image_size);
    if (image_size == 0) throw SpecError("image size must be positive");
    if (min_size <= 0.0 || min_size > max_size) throw SpecError("invalid common shape size range");
    if (max_size > s) throw SpecError("common shape cannot fit in the image");
    if (distractor_count > 0) {
        if (distractor_min_size <= 0.0 || distractor_min_size > distractor_max_size) {
            throw SpecError("invalid distractor size range");
        }
        if (distractor_max_size > s) throw SpecError("distractor cannot fit in the image");
    }
    auto check_color = [](const Color& c) {
        for (double v : c) {
            if (!(v >= 0.0 && v <= 1.0)) throw SpecError("colours must lie in [0, 1]");
        }
    };
    check_color(common_color);
    for (const auto& c : distractor_colors) check_color(c);
    for (const auto& c : palette) check_color(c);
    if (!randomize_appearance && distractor_count > 0 && distractor_colors.empty()) {
        throw SpecError("distractors need at least one colour");
    }
    if (randomize_appearance && palette.size() < 2) {
        throw SpecError("appearance randomisation needs at least two palette colours");
    }
    if (noise_stddev < 0.0) throw SpecError("noise standard deviation must be non-negative");
}

namespace {

struct Box {
    double x0, y0, x1, y1;
    bool overlaps(const Box& o, double margin) const {
        return x0 < o.x1 + margin && o.x0 < x1 + margin && y0 < o.y1 + margin &&
               o.y0 < y1 + margin;
    }
};

Box bounds(const Placement& p) { return {p.x, p.y, p.x + p.size, p.y + p.size}; }

ShapeKind random_kind(std::mt19937_64& rng) {
    return static_cast<ShapeKind>(std::uniform_int_distribution<int>(0, 2)(rng));
}

Placement place(ShapeKind kind, double lo, double hi, const Color& color, double image_size,
                std::mt19937_64& rng) {
    Placement p;
    p.kind = kind;
    p.color = color;
    p.size = std::uniform_real_distribution<double>(lo, hi)(rng);
    std::uniform_real_distribution<double> pos(0.0, image_size - p.size);
    p.x = pos(rng);
    p.y = pos(rng);
    return p;
}

struct ImageDraw {
    Tensor image;
    Tensor mask;
    Color background;
    Placement common;
    std::vector<Placement> distractors;
};

ImageDraw draw_image(const SyntheticSpec& spec, ShapeKind common_kind, const Color& common_color,
                     std::span<const Color> distractor_colors, std::mt19937_64& rng) {
    const auto n = spec.image_size;
    const double size = static_cast<double>(n);
    ImageDraw d;
    std::uniform_real_distribution<double> bg(0.35, 0.65);
    d.background = {bg(rng), bg(rng), bg(rng)};
    d.common = place(common_kind, spec.min_size, spec.max_size, common_color, size, rng);

    std::vector<Box> taken{bounds(d.common)};
    for (std::size_t k = 0; k < spec.distractor_count; ++k) {
        const Color& color = distractor_colors[std::uniform_int_distribution<std::size_t>(
            0, distractor_colors.size() - 1)(rng)];
        const ShapeKind kind = random_kind(rng);
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            Placement p = place(kind, spec.distractor_min_size, spec.distractor_max_size, color,
                                size, rng);
            const Box b = bounds(p);
            if (std::none_of(taken.begin(), taken.end(),
                             [&](const Box& t) { return b.overlaps(t, 1.0); })) {
                taken.push_back(b);
                d.distractors.push_back(p);
                placed = true;
            }
        }
        if (!placed) throw SpecError("distractor cannot be placed without overlap");
    }

    d.image = Tensor({n, n, 3});
    d.mask = Tensor({n, n, 1});
    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const Color* c = &d.background;
            if (covers(d.common, x, y)) {
                c = &d.common.color;
                d.mask.at(y, x, 0) = 1.0;
            }
            for (const auto& p : d.distractors) {
                if (covers(p, x, y)) c = &p.color;
            }
            for (std::size_t ch = 0; ch < 3; ++ch) d.image.at(y, x, ch) = (*c)[ch];
        }
    }
    if (spec.noise_stddev > 0.0) {
        std::normal_distribution<double> noise(0.0, spec.noise_stddev);
        for (auto& v : d.image.values()) v = std::clamp(v + noise(rng), 0.0, 1.0);
    }
    return d;
}

}  // namespace

PairSample generate_pair(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);

    ShapeKind kind = spec.common_shape;
    Color common = spec.common_color;
    std::vector<Color> others = spec.distractor_colors;
    if (spec.randomize_appearance) {
        const auto pick =
            std::uniform_int_distribution<std::size_t>(0, spec.palette.size() - 1)(rng);
        common = spec.palette[pick];
        others.clear();
        for (std::size_t i = 0; i < spec.palette.size(); ++i) {
            if (i != pick) others.push_back(spec.palette[i]);
        }
        std::shuffle(others.begin(), others.end(), rng);
        kind = random_kind(rng);
    }

    std::span<const Color> first(others), second(others);
    if (spec.randomize_appearance && others.size() >= 2) {
        first = first.first(others.size() / 2);
        second = second.subspan(others.size() / 2);
    }
    ImageDraw a = draw_image(spec, kind, common, first, rng);
    ImageDraw b = draw_image(spec, kind, common, second, rng);

    PairSample s;
    s.metadata.seed = spec.seed;
    s.metadata.background1 = a.background;
    s.metadata.background2 = b.background;
    s.metadata.common1 = a.common;
    s.metadata.common2 = b.common;
    s.metadata.distractors1 = std::move(a.distractors);
    s.metadata.distractors2 = std::move(b.distractors);
    s.image1 = std::move(a.image);
    s.image2 = std::move(b.image);
    s.mask1 = std::move(a.mask);
    s.mask2 = std::move(b.mask);
    return s;
}

std::uint64_t derive_seed(std::uint64_t root, std::size_t index) {
    // splitmix64 finaliser over (root, index).
    std::uint64_t z = root + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(index) + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::vector<PairSample> generate_dataset(const SyntheticSpec& spec, std::size_t n) {
    std::vector<PairSample> out;
    out.reserve(n);
    SyntheticSpec s = spec;
    for (std::size_t i = 0; i < n; ++i) {
        s.seed = derive_seed(spec.seed, i);
        out.push_back(generate_pair(s));
    }
    return out;
}

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string encode_pnm(const Tensor& t) {
    if (t.rank() != 3 || (t.channels() != 1 && t.channels() != 3)) {
        throw DimensionError("pnm export needs H x W x 1 or H x W x 3, got " + t.shape_string());
    }
    std::ostringstream os;
    os << (t.channels() == 1 ? "P5" : "P6") << '\n' << t.width() << ' ' << t.height() << "\n255\n";
    std::string out = os.str();
    out.reserve(out.size() + t.size());
    for (double v : t.values()) out.push_back(static_cast<char>(quantize(v)));
    return out;
}

namespace {

class PnmParser {
public:
    explicit PnmParser(std::string_view bytes) : b_(bytes) {}

    void skip_space_and_comments() {
        while (pos_ < b_.size()) {
            const char c = b_[pos_];
            if (c == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t number(const char* what) {
        skip_space_and_comments();
        const std::size_t start = pos_;
        std::size_t v = 0;
        while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
            v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
            if (v > 1u << 20) throw FormatError(std::string(what) + " too large", start);
            ++pos_;
        }
        if (pos_ == start) throw FormatError(std::string("expected ") + what, pos_);
        return v;
    }

    std::size_t pos_ = 0;
    std::string_view b_;
};

}  // namespace

Tensor decode_pnm(std::string_view bytes, int expected_channels) {
    PnmParser p(bytes);
    if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError("missing PNM magic", 0);
    const char kind = bytes[1];
    int channels = 0;
    if (kind == '5') {
        channels = 1;
    } else if (kind == '6') {
        channels = 3;
    } else {
        throw FormatError(std::string("unsupported PNM magic P") + kind, 0);
    }
    if (expected_channels != 0 && channels != expected_channels) {
        throw FormatError(std::string("expected ") + (expected_channels == 1 ? "P5" : "P6") +
                              " but found P" + kind,
                          0);
    }
    p.pos_ = 2;
    if (p.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[p.pos_]))) {
        throw FormatError("magic must be followed by whitespace", p.pos_);
    }
    const auto width = p.number("width");
    const auto height = p.number("height");
    const auto maxval_at = p.pos_;
    const auto maxval = p.number("maxval");
    if (width == 0 || height == 0) throw FormatError("zero image dimension", maxval_at);
    if (maxval != 255) throw FormatError("only maxval 255 is supported", maxval_at);
    if (p.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[p.pos_]))) {
        throw FormatError("header must end with one whitespace byte", p.pos_);
    }
    ++p.pos_;
    const std::size_t need = width * height * static_cast<std::size_t>(channels);
    if (bytes.size() - p.pos_ < need) {
        throw FormatError("truncated payload: need " + std::to_string(need) + " bytes", bytes.size());
    }
    Tensor t({height, width, static_cast<std::size_t>(channels)});
    for (std::size_t i = 0; i < need; ++i) {
        t[i] = static_cast<double>(static_cast<unsigned char>(bytes[p.pos_ + i])) / 255.0;
    }
    return t;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

Tensor as_map(const Tensor& map) {
    if (map.rank() == 2) return map.reshaped({map.dim(0), map.dim(1), 1});
    return map;
}

}  // namespace

void save_map(const Tensor& map, const std::filesystem::path& path) {
    write_file(path, encode_pnm(as_map(map)));
}

Tensor load_map(const std::filesystem::path& path) { return decode_pnm(read_file(path), 1); }

void save_image(const Tensor& image, const std::filesystem::path& path) {
    write_file(path, encode_pnm(image));
}

Tensor load_image(const std::filesystem::path& path) { return decode_pnm(read_file(path), 3); }

std::filesystem::path write_dataset(const std::filesystem::path& root,
                                    std::span<const PairSample> pairs) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    std::ostringstream manifest;
    char name[32];
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::snprintf(name, sizeof name, "pair_%05zu", i);
        const fs::path dir = root / name;
        fs::create_directories(dir);
        save_image(pairs[i].image1, dir / "img1.ppm");
        save_image(pairs[i].image2, dir / "img2.ppm");
        save_map(pairs[i].mask1, dir / "gt1.pgm");
        save_map(pairs[i].mask2, dir / "gt2.pgm");
        const std::string rel(name);
        manifest << rel << "/img1.ppm\t" << rel << "/img2.ppm\t" << rel << "/gt1.pgm\t" << rel
                 << "/gt2.pgm\n";
    }
    const fs::path path = root / "manifest.tsv";
    write_file(path, manifest.str());
    return path;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
    std::ifstream is(manifest);
    if (!is) throw std::runtime_error("cannot open manifest " + manifest.string());
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t offset = 0;
    while (std::getline(is, line)) {
        const std::size_t line_start = offset;
        offset += line.size() + 1;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 4) {
            throw FormatError("manifest line needs four tab-separated paths", line_start);
        }
        out.push_back({fields[0], fields[1], fields[2], fields[3]});
    }
    return out;
}

std::vector<PairSample> load_dataset(const std::filesystem::path& root) {
    std::vector<PairSample> out;
    auto binarize = [](Tensor m) {
        for (auto& v : m.values()) v = v >= 128.0 / 255.0 ? 1.0 : 0.0;
        return m;
    };
    for (const auto& e : read_manifest(root / "manifest.tsv")) {
        PairSample s;
        s.image1 = load_image(root / e.image1);
        s.image2 = load_image(root / e.image2);
        s.mask1 = binarize(load_map(root / e.mask1));
        s.mask2 = binarize(load_map(root / e.mask2));
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<double> color_histogram(const Tensor& image, std::size_t bins) {
    if (image.rank() != 3 || bins == 0 || bins > 256) {
        throw DimensionError("histogram needs an H x W x C image");
    }
    const auto c = image.channels();
    const auto pixels = image.height() * image.width();
    std::vector<double> h(bins * c, 0.0);
    for (std::size_t p = 0; p < pixels; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const auto level = quantize(image[p * c + ch]);
            h[ch * bins + level * bins / 256] += 1.0;
        }
    }
    for (auto& v : h) v /= static_cast<double>(pixels);
    return h;
}

std::vector<std::vector<std::size_t>> group_by_histogram(std::span<const Tensor> images,
                                                         std::size_t group_count) {
    if (group_count == 0) throw UsageError("group count must be positive");
    if (images.size() < group_count) throw UsageError("fewer images than requested groups");

    struct Group {
        std::vector<std::size_t> members;
        std::vector<double> sum;  // histogram sum; mean = sum / members
    };
    std::vector<Group> groups;
    for (std::size_t i = 0; i < images.size(); ++i) {
        groups.push_back({{i}, color_histogram(images[i])});
    }
    auto distance = [](const Group& a, const Group& b) {
        const double na = static_cast<double>(a.members.size());
        const double nb = static_cast<double>(b.members.size());
        double d = 0.0;
        for (std::size_t k = 0; k < a.sum.size(); ++k) {
            const double diff = a.sum[k] / na - b.sum[k] / nb;
            d += diff * diff;
        }
        return std::sqrt(d);
    };
    while (groups.size() > group_count) {
        std::size_t bi = 0;
        std::size_t bj = 1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < groups.size(); ++i) {
            for (std::size_t j = i + 1; j < groups.size(); ++j) {
                const double d = distance(groups[i], groups[j]);
                if (d < best) {
                    best = d;
                    bi = i;
                    bj = j;
                }
            }
        }
        Group& keep = groups[bi];
        keep.members.insert(keep.members.end(), groups[bj].members.begin(),
                            groups[bj].members.end());
        for (std::size_t k = 0; k < keep.sum.size(); ++k) keep.sum[k] += groups[bj].sum[k];
        groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(bj));
    }
    std::vector<std::vector<std::size_t>> out;
    for (auto& g : groups) {
        std::sort(g.members.begin(), g.members.end());
        out.push_back(std::move(g.members));
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace cafcn
