#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cafcn/tensor.hpp"

namespace cafcn {

using Color = std::array<double, 3>;

enum class ShapeKind { Square, Disc, Triangle };

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& name);

/// Axis-aligned placement of one rasterised shape. `size` is the side of the
/// square, the diameter of the disc, or the base and height of the upright
/// isosceles triangle; (x, y) is the top-left corner of its bounding box.
struct Placement {
    ShapeKind kind = ShapeKind::Square;
    double x = 0.0;
    double y = 0.0;
    double size = 0.0;
    Color color{};
};

/// True when the centre of pixel (px, py) lies inside the shape.
///
/// Pixel centres sit at (px + 0.5, py + 0.5). Triangle edges follow a
/// top-left fill rule so a centre exactly on a shared edge belongs to one side.
bool covers(const Placement& shape, std::size_t px, std::size_t py);

struct SyntheticSpec {
    std::size_t image_size = 32;
    ShapeKind common_shape = ShapeKind::Square;
    Color common_color{0.9, 0.2, 0.2};
    std::size_t distractor_count = 2;
    std::vector<Color> distractor_colors{{0.2, 0.8, 0.2}, {0.2, 0.3, 0.9}};
    double noise_stddev = 0.05;
    std::uint64_t seed = 1;

    /// When set, every pair draws its common colour and shape from the
    /// palette below, and the two images take their distractors from disjoint
    /// halves of the remaining colours. The common
    /// object can then only be told apart by appearing in both images.
    bool randomize_appearance = false;
    std::vector<Color> palette{{0.9, 0.15, 0.15}, {0.15, 0.8, 0.15}, {0.15, 0.25, 0.95},
                               {0.95, 0.85, 0.1}, {0.85, 0.2, 0.9},  {0.1, 0.85, 0.9}};

    double min_size = 8.0;
    double max_size = 13.0;
    double distractor_min_size = 6.0;
    double distractor_max_size = 10.0;

    void validate() const;
};

struct PairMetadata {
    std::uint64_t seed = 0;
    Color background1{};
    Color background2{};
    Placement common1;
    Placement common2;
    std::vector<Placement> distractors1;
    std::vector<Placement> distractors2;
};

struct PairSample {
    Tensor image1;  // S x S x 3 in [0, 1]
    Tensor image2;
    Tensor mask1;   // S x S x 1, exactly the common object's pixels
    Tensor mask2;
    PairMetadata metadata;
};

PairSample generate_pair(const SyntheticSpec& spec);

/// Pair i uses a seed derived from the root seed and i.
std::uint64_t derive_seed(std::uint64_t root, std::size_t index);

std::vector<PairSample> generate_dataset(const SyntheticSpec& spec, std::size_t n);

struct ManifestEntry {
    std::filesystem::path image1, image2, mask1, mask2;  // relative to the dataset root
};

/// Writes pair_%05d/{img1.ppm,img2.ppm,gt1.pgm,gt2.pgm} and manifest.tsv.
/// Returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& root,
                                    std::span<const PairSample> pairs);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest);

/// Loads every pair listed in a manifest (masks binarised at level 128).
std::vector<PairSample> load_dataset(const std::filesystem::path& root);

// Portable graymap (binary P5) and pixmap (binary P6), maxval 255.

/// Values in [0, 1], quantised as round(v * 255) on save.
void save_map(const Tensor& map, const std::filesystem::path& path);
/// H x W x 1 tensor of level / 255.
Tensor load_map(const std::filesystem::path& path);

void save_image(const Tensor& image, const std::filesystem::path& path);
Tensor load_image(const std::filesystem::path& path);

/// In-memory variants used by the file functions; parse errors carry byte offsets.
std::string encode_pnm(const Tensor& t);
Tensor decode_pnm(std::string_view bytes, int expected_channels);

std::uint8_t quantize(double v);

/// 32-bin histogram per colour channel, normalised to sum 1 per channel.
std::vector<double> color_histogram(const Tensor& image, std::size_t bins = 32);

/// Agglomerative grouping by Euclidean distance between mean histograms:
/// start from singletons and repeatedly merge the closest pair of groups until
/// `group_count` remain. Every index appears in exactly one group.
std::vector<std::vector<std::size_t>> group_by_histogram(std::span<const Tensor> images,
                                                         std::size_t group_count);

}  // namespace cafcn
