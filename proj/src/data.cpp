#include "ddunet/data.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "ddunet/errors.hpp"
#include "ddunet/rng.hpp"

namespace ddunet {

Image read_png(const fs::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ConfigError("read_png: channels must be 1 or 3");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw IoError("cannot decode PNG '" + path.string() + "': " + png.message);
  }
  png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image img;
  img.width = png.width;
  img.height = png.height;
  img.channels = channels;
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return img;
}

void write_png(const fs::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ConfigError("write_png: channels must be 1 or 3");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + png.message);
  }
}

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
  if (image.width == width && image.height == height) return image;
  Image out{width, height, image.channels, std::vector<std::uint8_t>(width * height * image.channels)};
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double ly = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double lx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) {
          return static_cast<double>(image.pixels[(yy * image.width + xx) * image.channels + c]);
        };
        const double v = (px(y0, x0) * (1 - lx) + px(y0, x1) * lx) * (1 - ly) + (px(y1, x0) * (1 - lx) + px(y1, x1) * lx) * ly;
        out.pixels[(y * width + x) * image.channels + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

Image resize_nearest(const Image& image, std::size_t width, std::size_t height) {
  if (image.width == width && image.height == height) return image;
  Image out{width, height, image.channels, std::vector<std::uint8_t>(width * height * image.channels)};
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * image.height / height;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = x * image.width / width;
      for (std::size_t c = 0; c < image.channels; ++c) {
        out.pixels[(y * width + x) * image.channels + c] = image.pixels[(sy * image.width + sx) * image.channels + c];
      }
    }
  }
  return out;
}

std::string to_string(SampleTag tag) {
  switch (tag) {
    case SampleTag::day: return "day";
    case SampleTag::night: return "night";
    case SampleTag::synthetic: return "synthetic";
    case SampleTag::untagged: break;
  }
  return "untagged";
}

SampleTag tag_from_stem(const std::string& stem) {
  if (stem.rfind("syn", 0) == 0) return SampleTag::synthetic;
  if (stem.size() >= 2 && std::isdigit(static_cast<unsigned char>(stem[1]))) {
    if (stem[0] == 'd' || stem[0] == 'D') return SampleTag::day;
    if (stem[0] == 'n' || stem[0] == 'N') return SampleTag::night;
  }
  return SampleTag::untagged;
}

namespace {

void shuffle_and_cut(std::vector<std::size_t>& ids, double ratio, Rng& rng, std::vector<std::size_t>& train,
                     std::vector<std::size_t>& test) {
  rng.shuffle(ids);
  const std::size_t n_test = static_cast<std::size_t>(std::llround(static_cast<double>(ids.size()) * ratio));
  const auto cut = ids.end() - static_cast<long>(n_test);
  train.insert(train.end(), ids.begin(), cut);
  test.insert(test.end(), cut, ids.end());
}

}  // namespace

DatasetIndex split_records(std::vector<DatasetRecord> records, double test_ratio, std::uint64_t seed, bool stratify) {
  if (!(test_ratio >= 0.0 && test_ratio <= 1.0)) {
    throw ConfigError("split: test ratio must lie in [0, 1], got " + std::to_string(test_ratio));
  }
  if (records.empty()) throw DataError("split: dataset is empty");
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.stem < b.stem; });
  DatasetIndex index;
  index.records = std::move(records);
  index.seed = seed;
  index.test_ratio = test_ratio;
  index.stratified = stratify;
  Rng rng(seed);
  if (!stratify) {
    std::vector<std::size_t> ids(index.records.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    shuffle_and_cut(ids, test_ratio, rng, index.train, index.test);
  } else {
    std::map<SampleTag, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < index.records.size(); ++i) groups[index.records[i].tag].push_back(i);
    for (auto& [tag, ids] : groups) shuffle_and_cut(ids, test_ratio, rng, index.train, index.test);
  }
  return index;
}

DatasetIndex load_dataset(const fs::path& root, double test_ratio, std::uint64_t seed, bool stratify) {
  const fs::path images = root / "images", masks = root / "GTmaps";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw IoError("dataset '" + root.string() + "' must contain images/ and GTmaps/ directories");
  }
  std::map<std::string, fs::path> mask_by_stem;
  for (const auto& e : fs::directory_iterator(masks)) {
    if (e.is_regular_file() && e.path().extension() == ".png") mask_by_stem[e.path().stem().string()] = e.path();
  }
  std::vector<DatasetRecord> records;
  std::vector<std::string> missing;
  for (const auto& e : fs::directory_iterator(images)) {
    if (!e.is_regular_file() || e.path().extension() != ".png") continue;
    const std::string stem = e.path().stem().string();
    auto it = mask_by_stem.find(stem);
    if (it == mask_by_stem.end()) it = mask_by_stem.find(stem + "_GT");
    if (it == mask_by_stem.end()) {
      missing.push_back(stem);
      continue;
    }
    records.push_back({stem, e.path(), it->second, tag_from_stem(stem)});
  }
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) list += (i ? ", " : "") + missing[i];
    if (missing.size() > 10) list += ", ...";
    throw DataError("dataset '" + root.string() + "': no mask for " + std::to_string(missing.size()) +
                    " image(s): " + list);
  }
  if (records.empty()) throw DataError("dataset '" + root.string() + "' contains no PNG images");
  return split_records(std::move(records), test_ratio, seed, stratify);
}

namespace {

std::vector<float> to_planar(const Image& rgb, bool hflip) {
  const std::size_t h = rgb.height, w = rgb.width;
  std::vector<float> out(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = hflip ? w - 1 - x : x;
      for (std::size_t c = 0; c < 3; ++c) {
        out[(c * h + y) * w + x] = static_cast<float>(rgb.pixels[(y * w + sx) * 3 + c]) / 255.0f;
      }
    }
  return out;
}

}  // namespace

std::vector<float> load_image_tensor(const fs::path& path, std::size_t target_size, Image* original) {
  Image img = read_png(path, 3);
  if (original) *original = img;
  return to_planar(resize_bilinear(img, target_size, target_size), false);
}

SegmentationSample load_sample(const DatasetRecord& record, std::size_t target_size, bool hflip) {
  SegmentationSample s;
  s.size = target_size;
  s.tag = record.tag;
  s.image = to_planar(resize_bilinear(read_png(record.image_path, 3), target_size, target_size), hflip);
  const Image mask = resize_nearest(read_png(record.mask_path, 1), target_size, target_size);
  s.mask.resize(target_size * target_size);
  for (std::size_t y = 0; y < target_size; ++y)
    for (std::size_t x = 0; x < target_size; ++x) {
      const std::size_t sx = hflip ? target_size - 1 - x : x;
      s.mask[y * target_size + x] = mask.pixels[y * target_size + sx] >= 128 ? 1 : 0;
    }
  return s;
}

SyntheticSample render_synthetic(const SyntheticOptions& options, std::size_t index) {
  if (options.size < 16) throw ConfigError("synthetic: size must be >= 16");
  if (options.min_blobs > options.max_blobs) throw ConfigError("synthetic: min_blobs exceeds max_blobs");
  Rng rng(options.seed * 0x9E3779B97F4A7C15ULL + index + 1);
  const std::size_t n = options.size;
  const double sz = static_cast<double>(n);

  // Sky: darker saturated blue at the zenith, paler towards the horizon.
  const double top[3] = {rng.uniform(0.05, 0.25), rng.uniform(0.25, 0.45), rng.uniform(0.6, 0.9)};
  const double lift = rng.uniform(0.1, 0.25);
  const double tilt = rng.uniform(-0.08, 0.08);
  const double cloud_level = rng.uniform(0.85, 1.0);

  struct Blob {
    double cx, cy, a, b, cos_t, sin_t;
  };
  const std::size_t span = options.max_blobs - options.min_blobs + 1;
  const std::size_t count = options.min_blobs + static_cast<std::size_t>(rng.below(span));
  std::vector<Blob> blobs;
  for (std::size_t k = 0; k < count; ++k) {
    const double theta = rng.uniform(0.0, std::numbers::pi);
    blobs.push_back({rng.uniform(0.15, 0.85) * sz, rng.uniform(0.15, 0.85) * sz, rng.uniform(0.1, 0.28) * sz,
                     rng.uniform(0.1, 0.28) * sz, std::cos(theta), std::sin(theta)});
  }

  SyntheticSample out;
  out.image = Image{n, n, 3, std::vector<std::uint8_t>(n * n * 3)};
  out.mask = Image{n, n, 1, std::vector<std::uint8_t>(n * n)};
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double opacity = 0.0;
      for (const Blob& bl : blobs) {
        const double dx = px - bl.cx, dy = py - bl.cy;
        const double u = (dx * bl.cos_t + dy * bl.sin_t) / bl.a;
        const double v = (-dx * bl.sin_t + dy * bl.cos_t) / bl.b;
        const double d2 = u * u + v * v;
        opacity = std::max(opacity, std::exp(-std::numbers::ln2 * d2 * d2));
      }
      const double grad = lift * (py / sz) + tilt * (px / sz - 0.5);
      for (std::size_t c = 0; c < 3; ++c) {
        const double sky = std::clamp(top[c] + grad, 0.0, 1.0);
        const double value = sky * (1.0 - opacity) + cloud_level * opacity + rng.normal(0.0, 0.015);
        out.image.pixels[(y * n + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
      }
      out.mask.pixels[y * n + x] = opacity >= 0.5 ? 255 : 0;
    }
  }
  return out;
}

DatasetIndex generate_synthetic(const SyntheticOptions& options, const fs::path& out_dir) {
  if (options.count < 2) throw ConfigError("synthetic: count must be >= 2");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "GTmaps", ec);
  if (!fs::is_directory(out_dir / "images") || !fs::is_directory(out_dir / "GTmaps")) {
    throw IoError("cannot create dataset directories under '" + out_dir.string() + "'");
  }
  std::vector<DatasetRecord> records;
  for (std::size_t i = 0; i < options.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "syn_%04zu", i);
    const SyntheticSample s = render_synthetic(options, i);
    DatasetRecord r{name, out_dir / "images" / (std::string(name) + ".png"),
                    out_dir / "GTmaps" / (std::string(name) + ".png"), SampleTag::synthetic};
    write_png(r.image_path, s.image);
    write_png(r.mask_path, s.mask);
    records.push_back(std::move(r));
  }
  return split_records(std::move(records), 0.1, options.seed);
}

}  // namespace ddunet
