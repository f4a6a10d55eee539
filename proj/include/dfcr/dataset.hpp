#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfcr/tensor.hpp"

namespace dfcr {

class FormatError : public InputError {
 public:
  using InputError::InputError;
};

class TruncationError : public InputError {
 public:
  using InputError::InputError;
};

/// Band order of the 9-band stack.
inline constexpr std::array<const char*, 9> kBandNames{"red", "green", "blue", "nir", "sar",
                                                       "dem", "slope", "aspect", "hillshade"};

/// Multi-band tile. Bands are planar: value(b, y, x) = data[(b*H + y)*W + x].
struct MbtTile {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t bands = 0;
  std::vector<float> data;

  MbtTile() = default;
  MbtTile(std::uint32_t h, std::uint32_t w, std::uint32_t c) : height(h), width(w), bands(c), data(std::size_t{h} * w * c) {}

  float& at(std::size_t b, std::size_t y, std::size_t x) { return data[(b * height + y) * width + x]; }
  float at(std::size_t b, std::size_t y, std::size_t x) const { return data[(b * height + y) * width + x]; }
};

/// MBT layout: "MBT1", u32 height, u32 width, u32 bands, u8 dtype (1 = float32),
/// then H*W*bands little-endian float32 values, planar, row-major.
inline constexpr std::size_t kMbtHeaderBytes = 4 + 4 + 4 + 4 + 1;
std::size_t mbt_payload_bytes(std::uint32_t height, std::uint32_t width, std::uint32_t bands);

std::vector<std::uint8_t> write_mbt(const MbtTile& tile);
/// Throws FormatError on a bad magic or dtype, TruncationError when the byte
/// count disagrees with the header.
MbtTile read_mbt(std::span<const std::uint8_t> bytes);

void save_mbt(const std::string& path, const MbtTile& tile);
MbtTile load_mbt(const std::string& path);

struct TileWindow {
  std::size_t row = 0;  // top-left pixel
  std::size_t col = 0;
  MbtTile tile;
};

/// Non-overlapping window×window tiles, left to right then top to bottom.
/// Edge remainders narrower than the window are dropped.
std::vector<TileWindow> tile_image(const MbtTile& image, std::size_t window);

enum class Split { Train, Val, Test, Unassigned };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::size_t label = 0;
  Split split = Split::Unassigned;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  nlohmann::json generator = nlohmann::json::object();
  std::array<double, 3> fractions{0.6, 0.2, 0.2};
  std::string root;  // directory the paths are relative to; not serialized

  std::size_t count(Split s) const;
  std::vector<std::size_t> class_counts() const;
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
/// Writes manifest.json; paths must already exist under m.root.
void save_manifest(const std::string& path, const DatasetManifest& m);
/// Loads and checks that every referenced tile exists.
DatasetManifest load_manifest(const std::string& path);

/// Assigns train/val/test. Validation and test take floor(n * fraction) and
/// train takes the remainder. With `stratified`, classes are split
/// separately and the leftover val/test slots go to the classes with the
/// largest fractional parts, so the totals equal the unstratified ones.
/// Classes too small to reach every non-empty split are reported in
/// `warnings` and assigned best-effort.
DatasetManifest split_dataset(DatasetManifest m, std::array<double, 3> fractions, std::uint64_t seed,
                              bool stratified = true, std::vector<std::string>* warnings = nullptr);

/// Per-class tile counts of the 4-class template set: mine, tree cover,
/// cropland, water.
inline constexpr std::array<std::size_t, 4> kTemplateCounts{672, 800, 204, 869};
inline constexpr std::array<const char*, 4> kTemplateClasses{"mine", "tree_cover", "cropland", "water"};

struct GeneratorParams {
  std::vector<std::size_t> counts{kTemplateCounts.begin(), kTemplateCounts.end()};
  std::size_t size = 32;
  std::uint64_t seed = 0;
  /// Scales every random perturbation; larger is harder.
  double noise = 1.0;

  /// Template counts multiplied by `scale`, rounded, at least 1 per class.
  static std::vector<std::size_t> scaled_counts(double scale);
};

nlohmann::json to_json(const GeneratorParams& p);
GeneratorParams generator_from_json(const nlohmann::json& j);

/// One synthetic 9-band tile of class `label`, a pure function of
/// (seed, label, index).
///
/// Class signatures, before per-tile jitter and pixel noise:
///   mine:  bright, grey-brown RGB, low NIR, rough SAR, pitted DEM (steep)
///   tree:  dark green RGB, high NIR, moderate SAR, rolling DEM
///   crop:  mid RGB/NIR modulated by periodic field stripes, low SAR, gentle DEM
///   water: dark blue RGB, near-zero NIR, smooth low SAR, flat DEM
/// slope, aspect and hillshade are derived from the DEM by finite differences.
MbtTile synthetic_tile(std::size_t label, std::size_t index, std::size_t size, std::uint64_t seed, double noise);

/// Writes every tile under `dir/tiles/` plus `dir/manifest.json` (unsplit).
DatasetManifest generate_synthetic(const GeneratorParams& params, const std::string& dir);

/// In-memory variant without any files; entries carry no paths.
struct InMemoryData {
  Tensor images;  // [N,H,W,bands], NHWC
  std::vector<std::size_t> labels;
};
InMemoryData synthetic_batch(const GeneratorParams& params);

/// Loads one split into NHWC memory.
InMemoryData load_split(const DatasetManifest& m, Split split);
InMemoryData to_nhwc(const std::vector<MbtTile>& tiles, const std::vector<std::size_t>& labels);

/// Per-band mean and standard deviation over an NHWC set.
struct BandStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};
BandStats band_stats(const Tensor& images);
void standardize(Tensor& images, const BandStats& stats);

/// Ridge linear classifier on per-band means. Fit on `train`, returns OA on
/// `test`.
double linear_probe_accuracy(const InMemoryData& train, const InMemoryData& test, std::size_t num_classes,
                             double ridge = 1e-3);

}  // namespace dfcr
