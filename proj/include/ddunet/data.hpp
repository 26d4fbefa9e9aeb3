#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ddunet {

namespace fs = std::filesystem;

// 8-bit interleaved image, rows top to bottom.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;
};

/// Decodes any PNG into `channels` (1 = grayscale, 3 = RGB) 8-bit samples.
Image read_png(const fs::path& path, std::size_t channels);
void write_png(const fs::path& path, const Image& image);

/// Half-pixel-centre bilinear resize (edges clamped). Identity when the size is unchanged.
Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);
/// src = floor(dst * in / out) per axis.
Image resize_nearest(const Image& image, std::size_t width, std::size_t height);

enum class SampleTag { day, night, synthetic, untagged };

std::string to_string(SampleTag tag);
/// "d0001" -> day, "n0042" -> night, "syn_0003" -> synthetic.
SampleTag tag_from_stem(const std::string& stem);

struct DatasetRecord {
  std::string stem;
  fs::path image_path;
  fs::path mask_path;
  SampleTag tag = SampleTag::untagged;
};

struct DatasetIndex {
  std::vector<DatasetRecord> records;  // sorted by stem
  std::vector<std::size_t> train;      // indices into records
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
  double test_ratio = 0.1;
  bool stratified = false;
};

/// Sorts records by stem, shuffles with `seed`, and sends the last
/// round(n * test_ratio) shuffled records to test, the rest to train. With
/// `stratify` each tag group is split on its own.
DatasetIndex split_records(std::vector<DatasetRecord> records, double test_ratio, std::uint64_t seed,
                           bool stratify = false);

/// Indexes `<root>/images/*.png` against `<root>/GTmaps/*.png`. A mask matches
/// an image when its stem equals the image stem or the image stem + "_GT".
DatasetIndex load_dataset(const fs::path& root, double test_ratio, std::uint64_t seed, bool stratify = false);

struct SegmentationSample {
  std::size_t size = 0;
  std::vector<float> image;         // (3, size, size) planar, [0, 1]
  std::vector<std::uint8_t> mask;   // (size, size), cloud = 1
  SampleTag tag = SampleTag::untagged;
};

/// Bilinear-resizes the image and nearest-resizes the mask to target_size,
/// then binarises the mask at >= 128. `hflip` mirrors both horizontally.
SegmentationSample load_sample(const DatasetRecord& record, std::size_t target_size, bool hflip = false);

/// Loads an image alone, resized to target_size, as (3, size, size) planar floats.
std::vector<float> load_image_tensor(const fs::path& path, std::size_t target_size, Image* original = nullptr);

struct SyntheticOptions {
  std::size_t count = 200;
  std::size_t size = 48;
  std::uint64_t seed = 0;
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 4;
};

struct SyntheticSample {
  Image image;  // RGB
  Image mask;   // gray, 0 or 255
};

/// Sky-like background (vertical colour gradient + low noise) with 1-4 soft
/// elliptical cloud blobs. Blob opacity is exp(-ln2 * d^4) for normalised
/// elliptical radius d, so the mask (opacity >= 0.5) is the union of the
/// ellipses d <= 1. Output is a pure function of (options, index).
SyntheticSample render_synthetic(const SyntheticOptions& options, std::size_t index);

/// Writes `count` samples as `<out>/images/syn_XXXX.png` + `<out>/GTmaps/syn_XXXX.png`
/// and returns the index (split with test ratio 0.1 and the same seed).
DatasetIndex generate_synthetic(const SyntheticOptions& options, const fs::path& out_dir);

}  // namespace ddunet
