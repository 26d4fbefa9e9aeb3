#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "ddunet/checkpoint.hpp"
#include "ddunet/data.hpp"
#include "ddunet/loader.hpp"
#include "test_util.hpp"

using namespace ddunet;
using testutil::random_tensor;
using testutil::TempDir;
using testutil::to_double;

namespace {

std::vector<DatasetRecord> stub_records(std::size_t n, const std::string& prefix = "img") {
  std::vector<DatasetRecord> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    r[i].stem = prefix + std::to_string(100000 + i);
    r[i].tag = tag_from_stem(r[i].stem);
  }
  return r;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image gray(std::size_t w, std::size_t h, std::vector<std::uint8_t> px) { return Image{w, h, 1, std::move(px)}; }

// Writes a tiny dataset: `n` RGB images and masks under root.
void write_dataset(const fs::path& root, const std::vector<std::string>& stems, std::size_t size = 8,
                   const std::string& mask_suffix = "") {
  fs::create_directories(root / "images");
  fs::create_directories(root / "GTmaps");
  Rng rng(1);
  for (const auto& s : stems) {
    Image img{size, size, 3, std::vector<std::uint8_t>(size * size * 3)};
    for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(256));
    Image mask = gray(size, size, std::vector<std::uint8_t>(size * size));
    for (auto& v : mask.pixels) v = rng.below(2) ? 255 : 0;
    write_png(root / "images" / (s + ".png"), img);
    write_png(root / "GTmaps" / (s + mask_suffix + ".png"), mask);
  }
}

}  // namespace

TEST(Split, TenSamplesGiveNineAndOne) {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const auto idx = split_records(stub_records(10), 0.1, seed);
    EXPECT_EQ(idx.train.size(), 9u);
    EXPECT_EQ(idx.test.size(), 1u);
  }
}

TEST(Split, FullDatasetSizes) {
  // 6078 day plus 690 night images.
  std::vector<DatasetRecord> records = stub_records(6078, "d");
  auto night = stub_records(690, "n");
  records.insert(records.end(), night.begin(), night.end());
  const auto idx = split_records(records, 0.1, 0);
  EXPECT_EQ(idx.train.size(), 6091u);
  EXPECT_EQ(idx.test.size(), 677u);
  const auto strat = split_records(records, 0.1, 0, true);
  EXPECT_EQ(strat.test.size(), 608u + 69u);
  std::size_t night_test = 0;
  for (std::size_t i : strat.test) night_test += strat.records[i].tag == SampleTag::night;
  EXPECT_EQ(night_test, 69u);
}

TEST(Split, DisjointCompleteAndWithinRatio) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(300);
    const double ratio = rng.uniform(0.05, 0.5);
    const auto idx = split_records(stub_records(n), ratio, rng.next_u64());
    std::set<std::size_t> all(idx.train.begin(), idx.train.end());
    for (std::size_t i : idx.test) EXPECT_TRUE(all.insert(i).second) << "index in both splits";
    EXPECT_EQ(all.size(), n);
    EXPECT_LE(std::abs(static_cast<double>(idx.test.size()) / static_cast<double>(n) - ratio),
              1.0 / static_cast<double>(n));
  }
}

TEST(Split, PureFunctionOfSortedNamesAndSeed) {
  auto records = stub_records(50);
  const auto a = split_records(records, 0.2, 7);
  std::reverse(records.begin(), records.end());
  const auto b = split_records(records, 0.2, 7);
  auto stems = [](const DatasetIndex& idx, const std::vector<std::size_t>& ids) {
    std::vector<std::string> s;
    for (std::size_t i : ids) s.push_back(idx.records[i].stem);
    return s;
  };
  EXPECT_EQ(stems(a, a.test), stems(b, b.test));
  EXPECT_EQ(stems(a, a.train), stems(b, b.train));
  EXPECT_NE(stems(a, a.test), stems(split_records(records, 0.2, 8), split_records(records, 0.2, 8).test));
}

TEST(Split, Errors) {
  EXPECT_ANY_THROW(split_records({}, 0.1, 0));
  EXPECT_THROW(split_records(stub_records(5), 1.5, 0), ConfigError);
  EXPECT_THROW(split_records(stub_records(5), -0.1, 0), ConfigError);
}

TEST(Tags, FromStem) {
  EXPECT_EQ(tag_from_stem("d0001"), SampleTag::day);
  EXPECT_EQ(tag_from_stem("D12"), SampleTag::day);
  EXPECT_EQ(tag_from_stem("n0042"), SampleTag::night);
  EXPECT_EQ(tag_from_stem("syn_0003"), SampleTag::synthetic);
  EXPECT_EQ(tag_from_stem("day"), SampleTag::untagged);
  EXPECT_EQ(tag_from_stem("image7"), SampleTag::untagged);
}

TEST(Png, RoundTripAndGrayExpansion) {
  TempDir dir("png");
  Rng rng(4);
  Image rgb{5, 3, 3, std::vector<std::uint8_t>(45)};
  for (auto& v : rgb.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  write_png(dir.path() / "rgb.png", rgb);
  const Image back = read_png(dir.path() / "rgb.png", 3);
  EXPECT_EQ(back.width, 5u);
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.pixels, rgb.pixels);

  write_png(dir.path() / "g.png", gray(2, 1, {10, 200}));
  const Image expanded = read_png(dir.path() / "g.png", 3);
  EXPECT_EQ(expanded.pixels, (std::vector<std::uint8_t>{10, 10, 10, 200, 200, 200}));
}

TEST(Png, UndecodableFileNamesPath) {
  TempDir dir("badpng");
  const fs::path p = dir.path() / "broken.png";
  write_bytes(p, {'n', 'o', 't', ' ', 'p', 'n', 'g'});
  try {
    read_png(p, 3);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.png"), std::string::npos);
  }
  EXPECT_THROW(read_png(dir.path() / "missing.png", 1), IoError);
}

TEST(Resize, NearestPreservesCheckerboardBlocks) {
  Image board = gray(4, 4, std::vector<std::uint8_t>(16));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) board.pixels[y * 4 + x] = (x + y) % 2 ? 255 : 0;
  const Image big = resize_nearest(board, 8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(big.pixels[y * 8 + x], board.pixels[(y / 2) * 4 + x / 2]);
}

TEST(Resize, BilinearIdentityAndConstant) {
  Rng rng(5);
  Image img{6, 4, 3, std::vector<std::uint8_t>(72)};
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  EXPECT_EQ(resize_bilinear(img, 6, 4).pixels, img.pixels);
  Image flat{3, 3, 3, std::vector<std::uint8_t>(27, 77)};
  for (auto v : resize_bilinear(flat, 7, 5).pixels) EXPECT_EQ(v, 77);
  // Halving averages 2x2 blocks under half-pixel centres.
  const Image half = resize_bilinear(gray(2, 2, {0, 100, 100, 200}), 1, 1);
  EXPECT_EQ(half.pixels[0], 100);
}

TEST(Dataset, LoadsAndMatchesGtSuffix) {
  TempDir dir("ds");
  write_dataset(dir.path(), {"d001", "d002", "n001", "n002", "x5"}, 8, "_GT");
  const auto idx = load_dataset(dir.path(), 0.2, 3);
  ASSERT_EQ(idx.records.size(), 5u);
  EXPECT_EQ(idx.records[0].stem, "d001");
  EXPECT_EQ(idx.records[2].tag, SampleTag::night);
  EXPECT_EQ(idx.train.size() + idx.test.size(), 5u);
  EXPECT_EQ(idx.test.size(), 1u);
  const auto again = load_dataset(dir.path(), 0.2, 3);
  EXPECT_EQ(again.test, idx.test);
}

TEST(Dataset, MissingMaskListsStem) {
  TempDir dir("ds_missing");
  write_dataset(dir.path(), {"a1", "a2"});
  fs::remove(dir.path() / "GTmaps" / "a2.png");
  try {
    load_dataset(dir.path(), 0.1, 0);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("a2"), std::string::npos);
  }
}

TEST(Dataset, EmptyIsError) {
  TempDir dir("ds_empty");
  fs::create_directories(dir.path() / "images");
  fs::create_directories(dir.path() / "GTmaps");
  EXPECT_THROW(load_dataset(dir.path(), 0.1, 0), DataError);
  EXPECT_ANY_THROW(load_dataset(dir.path() / "nope", 0.1, 0));
}

TEST(Sample, MaskBinarisationBoundary) {
  TempDir dir("sample");
  fs::create_directories(dir.path());
  DatasetRecord r;
  r.stem = "s";
  r.image_path = dir.path() / "s.png";
  r.mask_path = dir.path() / "s_mask.png";
  write_png(r.image_path, Image{2, 2, 3, std::vector<std::uint8_t>(12, 255)});
  write_png(r.mask_path, gray(2, 2, {127, 128, 0, 255}));
  const auto s = load_sample(r, 2);
  EXPECT_EQ(s.mask, (std::vector<std::uint8_t>{0, 1, 0, 1}));
  for (float v : s.image) EXPECT_EQ(v, 1.0f);
  const auto f = load_sample(r, 2, true);
  EXPECT_EQ(f.mask, (std::vector<std::uint8_t>{1, 0, 1, 0}));

  write_png(r.mask_path, gray(2, 2, {255, 255, 255, 255}));
  const auto all = load_sample(r, 4);
  EXPECT_EQ(all.mask, std::vector<std::uint8_t>(16, 1));
  EXPECT_EQ(all.image.size(), 3u * 16u);
}

TEST(Synthetic, DeterministicBytes) {
  TempDir a("syn_a"), b("syn_b");
  SyntheticOptions o;
  o.count = 4;
  o.size = 32;
  o.seed = 11;
  generate_synthetic(o, a.path());
  generate_synthetic(o, b.path());
  for (const char* sub : {"images", "GTmaps"})
    for (int i = 0; i < 4; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "syn_%04d.png", i);
      const auto x = read_bytes(a.path() / sub / name);
      EXPECT_FALSE(x.empty());
      EXPECT_EQ(x, read_bytes(b.path() / sub / name)) << sub << "/" << name;
    }
}

TEST(Synthetic, BothClassesPresentAcrossSeeds) {
  for (std::uint64_t seed : {0u, 1u, 7u, 42u, 1234u}) {
    SyntheticOptions o;
    o.count = 8;
    o.size = 48;
    o.seed = seed;
    std::size_t mixed = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      const auto s = render_synthetic(o, i);
      const auto ones = std::count(s.mask.pixels.begin(), s.mask.pixels.end(), 255);
      const auto zeros = std::count(s.mask.pixels.begin(), s.mask.pixels.end(), 0);
      EXPECT_EQ(static_cast<std::size_t>(ones + zeros), s.mask.pixels.size());
      mixed += ones > 0 && zeros > 0;
    }
    EXPECT_GE(mixed, 7u) << "seed " << seed;
  }
}

TEST(Synthetic, BlobFreeConfigGivesEmptyMasks) {
  SyntheticOptions o;
  o.min_blobs = 0;
  o.max_blobs = 0;
  o.size = 24;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto s = render_synthetic(o, i);
    EXPECT_EQ(std::count(s.mask.pixels.begin(), s.mask.pixels.end(), 0), 24 * 24);
  }
}

TEST(Synthetic, WritesDatasetLayoutAndValidates) {
  TempDir dir("syn_layout");
  SyntheticOptions o;
  o.count = 10;
  o.size = 16;
  const auto idx = generate_synthetic(o, dir.path());
  EXPECT_EQ(idx.records.size(), 10u);
  EXPECT_EQ(idx.test.size(), 1u);
  EXPECT_EQ(idx.records[3].tag, SampleTag::synthetic);
  const auto loaded = load_dataset(dir.path(), 0.1, o.seed);
  EXPECT_EQ(loaded.test, idx.test);
  o.count = 1;
  EXPECT_ANY_THROW(generate_synthetic(o, dir.path() / "one"));
  o.count = 4;
  o.size = 8;
  EXPECT_THROW(generate_synthetic(o, dir.path() / "tiny"), ConfigError);
}

TEST(Synthetic, UnwritableDirectoryIsIoError) {
  TempDir dir("syn_ro");
  write_bytes(dir.path() / "file", {'x'});
  SyntheticOptions o;
  o.count = 2;
  o.size = 16;
  EXPECT_THROW(generate_synthetic(o, dir.path() / "file" / "sub"), IoError);
}

TEST(Loader, PrefetchMatchesSynchronousOrder) {
  TempDir dir("loader");
  SyntheticOptions o;
  o.count = 11;
  o.size = 16;
  const auto idx = generate_synthetic(o, dir.path());
  std::vector<std::size_t> ids(11);
  for (std::size_t i = 0; i < 11; ++i) ids[i] = (i * 7) % 11;
  const auto reqs = make_requests(ids, 4);
  ASSERT_EQ(reqs.size(), 3u);
  EXPECT_EQ(reqs.back().records.size(), 3u);
  BatchLoader sync(idx, reqs, 16, 0), async(idx, reqs, 16, 2);
  std::size_t n = 0;
  while (auto a = sync.next()) {
    auto b = async.next();
    ASSERT_TRUE(b.has_value());
    EXPECT_EQ(a->records, b->records);
    EXPECT_EQ(to_double(a->images), to_double(b->images));
    EXPECT_EQ(a->masks, b->masks);
    EXPECT_EQ(a->images.dim(0), a->records.size());
    ++n;
  }
  EXPECT_FALSE(async.next().has_value());
  EXPECT_EQ(n, 3u);
}

TEST(Loader, WorkerErrorsResurface) {
  TempDir dir("loader_err");
  SyntheticOptions o;
  o.count = 6;
  o.size = 16;
  const auto idx = generate_synthetic(o, dir.path());
  fs::remove(idx.records[4].image_path);
  BatchLoader loader(idx, make_requests({0, 1, 2, 3, 4, 5}, 2), 16, 2);
  EXPECT_TRUE(loader.next().has_value());
  EXPECT_TRUE(loader.next().has_value());
  EXPECT_THROW(loader.next(), IoError);
}

TEST(Loader, AbandonedLoaderShutsDown) {
  TempDir dir("loader_abandon");
  SyntheticOptions o;
  o.count = 8;
  o.size = 16;
  const auto idx = generate_synthetic(o, dir.path());
  BatchLoader loader(idx, make_requests({0, 1, 2, 3, 4, 5, 6, 7}, 1), 16, 1);
  EXPECT_TRUE(loader.next().has_value());
}

// ---- checkpoints ----

namespace {

struct CkptFixture : ::testing::Test {
  TempDir dir{"ckpt"};
  DdunetConfig cfg;
  CkptFixture() {
    cfg.base_channels = 2;
    cfg.input_size = 16;
  }
  fs::path path() const { return dir.path() / "m.ckpt"; }
  std::vector<double> eval(DdunetModel<float>& m) {
    Rng rng(99);
    return to_double(m.forward(random_tensor<float>({2, 3, 16, 16}, rng, 0, 1), Mode::eval)[0]);
  }
};

}  // namespace

TEST_F(CkptFixture, RoundTripIsBitExact) {
  DdunetModel<float> model(cfg, 4);
  Rng rng(5);
  model.forward(random_tensor<float>({2, 3, 16, 16}, rng, 0, 1), Mode::train);  // non-default running stats
  save_checkpoint(model, path(), {cfg, 3, 4});
  CheckpointMeta meta;
  auto loaded = load_checkpoint<float>(path(), &meta);
  EXPECT_EQ(meta.config, cfg);
  EXPECT_EQ(meta.epoch, 3u);
  EXPECT_EQ(meta.seed, 4u);
  const auto a = model.params().all(), b = loaded->params().all();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    for (std::size_t k = 0; k < a[i].tensor.numel(); ++k)
      ASSERT_EQ(std::bit_cast<std::uint32_t>(a[i].tensor.data()[k]), std::bit_cast<std::uint32_t>(b[i].tensor.data()[k]));
  }
  EXPECT_EQ(eval(model), eval(*loaded));
  EXPECT_EQ(read_checkpoint_meta(path()).config, cfg);
}

TEST_F(CkptFixture, SpecialFloatPatternsSurvive) {
  DdunetModel<float> model(cfg, 4);
  Tensor<float> w = model.params().parameters()[0].tensor;
  const std::uint32_t patterns[] = {0x00000001u, 0x807fffffu, 0x80000000u, 0x7f7fffffu, 0x7f800000u, 0x7fc00001u};
  for (std::size_t i = 0; i < std::size(patterns); ++i) w.mutable_data()[i] = std::bit_cast<float>(patterns[i]);
  save_checkpoint(model, path(), {cfg, 0, 4});
  auto loaded = load_checkpoint<float>(path());
  const auto lw = loaded->params().parameters()[0].tensor;
  for (std::size_t i = 0; i < std::size(patterns); ++i) EXPECT_EQ(std::bit_cast<std::uint32_t>(lw.data()[i]), patterns[i]);
}

TEST_F(CkptFixture, TruncationIsDetected) {
  DdunetModel<float> model(cfg, 4);
  save_checkpoint(model, path(), {cfg, 0, 4});
  auto bytes = read_bytes(path());
  for (std::size_t cut : {std::size_t{1}, bytes.size() / 2, bytes.size() - 20}) {
    write_bytes(path(), std::vector<char>(bytes.begin(), bytes.end() - static_cast<long>(cut)));
    try {
      load_checkpoint<float>(path());
      FAIL() << "expected truncated";
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind(), CheckpointErrorKind::truncated) << to_string(e.kind());
    }
  }
}

TEST_F(CkptFixture, PayloadFlipFailsChecksumOrChangesForward) {
  DdunetModel<float> model(cfg, 4);
  save_checkpoint(model, path(), {cfg, 0, 4});
  auto bytes = read_bytes(path());
  bytes[bytes.size() - 1] ^= 0x40;  // exponent byte of the last stored value
  write_bytes(path(), bytes);
  try {
    load_checkpoint<float>(path());
    FAIL() << "expected checksum failure";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointErrorKind::checksum);
  }
  auto damaged = load_checkpoint<float>(path(), nullptr, LoadOptions{false});
  EXPECT_NE(eval(*damaged), eval(model));
}

TEST_F(CkptFixture, HeaderErrorsHaveDistinctKinds) {
  DdunetModel<float> model(cfg, 4);
  save_checkpoint(model, path(), {cfg, 0, 4});
  const auto good = read_bytes(path());
  auto expect_kind = [&](std::vector<char> bytes, CheckpointErrorKind kind) {
    write_bytes(path(), bytes);
    try {
      load_checkpoint<float>(path());
      ADD_FAILURE() << "expected " << to_string(kind);
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind(), kind) << to_string(e.kind()) << ": " << e.what();
    }
  };
  auto magic = good;
  magic[0] = 'X';
  expect_kind(magic, CheckpointErrorKind::bad_magic);
  auto version = good;
  version[4] = 9;
  expect_kind(version, CheckpointErrorKind::bad_version);
  auto width = good;
  width[8] = 3;  // base_channels 2 -> 3: stored tensors no longer fit
  expect_kind(width, CheckpointErrorKind::shape_mismatch);
  auto trailing = good;
  trailing.push_back(0);
  expect_kind(trailing, CheckpointErrorKind::trailing_data);
  EXPECT_THROW(load_checkpoint<float>(dir.path() / "absent.ckpt"), IoError);
}
