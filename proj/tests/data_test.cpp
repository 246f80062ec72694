#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

#include "psp/data.hpp"

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("psp_data_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

psp::SegSample random_sample(std::int64_t h, std::int64_t w, int k, std::mt19937_64& rng) {
  psp::SegSample s{psp::Image(h, w), psp::LabelMap::single(h, w)};
  std::uniform_int_distribution<int> byte(0, 255), lab(0, k - 1);
  for (auto& v : s.image.data) v = static_cast<float>(byte(rng)) / 255.0f;
  for (auto& v : s.labels.data) v = lab(rng);
  return s;
}

std::set<std::int32_t> label_set(const psp::LabelMap& m) { return {m.data.begin(), m.data.end()}; }

}  // namespace

TEST(Netpbm, ZeroPpmGivesZeroImage) {
  TempDir d;
  write_bytes(d.path / "a.ppm", std::string("P6\n2 2\n255\n") + std::string(12, '\0'));
  auto img = psp::read_ppm(d.path / "a.ppm");
  EXPECT_EQ(img.height, 2);
  EXPECT_EQ(img.width, 2);
  for (float v : img.data) EXPECT_EQ(v, 0.0f);
}

TEST(Netpbm, Byte255IsIgnore) {
  TempDir d;
  write_bytes(d.path / "l.pgm", std::string("P5\n# comment\n2 1\n255\n") + std::string{'\x01', '\xff'});
  auto m = psp::read_pgm(d.path / "l.pgm");
  EXPECT_EQ(m.at(0, 0), 1);
  EXPECT_EQ(m.at(0, 1), psp::kIgnoreLabel);
}

TEST(Netpbm, LabelRoundTrip) {
  TempDir d;
  std::mt19937_64 rng(4);
  for (int t = 0; t < 10; ++t) {
    auto s = random_sample(7 + t, 11, 200, rng);
    s.labels.data[0] = psp::kIgnoreLabel;
    psp::write_pgm(d.path / "l.pgm", s.labels);
    EXPECT_EQ(psp::read_pgm(d.path / "l.pgm"), s.labels);
    psp::write_ppm(d.path / "i.ppm", s.image);
    EXPECT_EQ(psp::read_ppm(d.path / "i.ppm"), s.image);
  }
}

TEST(Netpbm, MalformedAndTruncated) {
  TempDir d;
  write_bytes(d.path / "bad.ppm", "P3\n2 2\n255\n");
  EXPECT_THROW(psp::read_ppm(d.path / "bad.ppm"), psp::FormatError);
  write_bytes(d.path / "bad2.ppm", "P6\nx 2\n255\n");
  EXPECT_THROW(psp::read_ppm(d.path / "bad2.ppm"), psp::FormatError);
  write_bytes(d.path / "deep.ppm", "P6\n1 1\n65535\n");
  EXPECT_THROW(psp::read_ppm(d.path / "deep.ppm"), psp::FormatError);
  write_bytes(d.path / "short.ppm", std::string("P6\n2 2\n255\n") + std::string(11, '\0'));
  EXPECT_THROW(psp::read_ppm(d.path / "short.ppm"), psp::FormatError);
  EXPECT_THROW(psp::read_pgm(d.path / "missing.pgm"), psp::FormatError);
}

TEST(Netpbm, LoadSampleValidation) {
  TempDir d;
  std::mt19937_64 rng(5);
  auto s = random_sample(4, 4, 3, rng);
  psp::write_ppm(d.path / "i.ppm", s.image);
  psp::write_pgm(d.path / "l.pgm", s.labels);
  EXPECT_EQ(psp::load_sample(d.path / "i.ppm", d.path / "l.pgm", 3), s);
  EXPECT_THROW(psp::load_sample(d.path / "i.ppm", d.path / "l.pgm", 2), psp::FormatError);
  auto other = random_sample(4, 5, 3, rng);
  psp::write_pgm(d.path / "l5.pgm", other.labels);
  EXPECT_THROW(psp::load_sample(d.path / "i.ppm", d.path / "l5.pgm", 3), psp::FormatError);
}

TEST(Augment, MirrorIsInvolution) {
  std::mt19937_64 rng(6);
  auto s = random_sample(5, 9, 4, rng);
  EXPECT_EQ(psp::mirror_sample(psp::mirror_sample(s)), s);
  EXPECT_NE(psp::mirror_sample(s), s);
}

TEST(Augment, ResizeDoublesBeforeCrop) {
  std::mt19937_64 rng(7);
  auto s = random_sample(16, 16, 4, rng);
  auto r = psp::resize_sample(s, 2.0);
  EXPECT_EQ(r.image.height, 32);
  EXPECT_EQ(r.image.width, 32);
  EXPECT_EQ(r.labels.height, 32);
  // nearest neighbour: each source label covers a 2x2 block
  for (std::int64_t y = 0; y < 32; ++y)
    for (std::int64_t x = 0; x < 32; ++x) EXPECT_EQ(r.labels.at(y, x), s.labels.at(y / 2, x / 2));
}

TEST(Augment, ConstantImageSurvivesResampling) {
  psp::SegSample s{psp::Image(12, 12, 0.25f), psp::LabelMap::single(12, 12, 1)};
  for (double f : {0.5, 0.8, 1.7}) {
    for (float v : psp::resize_sample(s, f).image.data) EXPECT_NEAR(v, 0.25f, 1e-6f);
  }
  for (float v : psp::rotate_sample(s, 7.0).image.data) EXPECT_NEAR(v, 0.25f, 1e-6f);
  for (float v : psp::gaussian_blur(s.image, 0.8).data) EXPECT_NEAR(v, 0.25f, 1e-6f);
}

TEST(Augment, LabelClosure) {
  std::mt19937_64 rng(8);
  psp::AugmentConfig cfg;
  cfg.crop_size = 32;
  for (int t = 0; t < 40; ++t) {
    auto s = random_sample(24 + t % 7, 20 + t % 5, 3, rng);
    auto allowed = label_set(s.labels);
    allowed.insert(psp::kIgnoreLabel);
    auto a = psp::augment(s, cfg, rng);
    EXPECT_EQ(a.image.height, 32);
    EXPECT_EQ(a.labels.width, 32);
    for (auto v : label_set(a.labels)) EXPECT_TRUE(allowed.count(v)) << v;
  }
}

TEST(Augment, FiducialMovesWithLabel) {
  // a bright block carrying a unique label, tracked through every geometric step
  psp::SegSample s{psp::Image(40, 40, 0.0f), psp::LabelMap::single(40, 40, 0)};
  for (std::int64_t y = 5; y < 9; ++y)
    for (std::int64_t x = 6; x < 10; ++x) {
      for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = 1.0f;
      s.labels.at(y, x) = 1;
    }
  psp::AugmentConfig cfg;
  cfg.crop_size = 48;
  cfg.blur_prob = 0;
  cfg.pad_image = {0, 0, 0};
  std::mt19937_64 rng(9);
  // resampling blurs the block edge, so compare centroids rather than single pixels
  for (int t = 0; t < 30; ++t) {
    auto a = psp::augment(s, cfg, rng);
    double ly = 0, lx = 0, ln = 0, iy = 0, ix = 0, in = 0;
    for (std::int64_t y = 0; y < 48; ++y)
      for (std::int64_t x = 0; x < 48; ++x) {
        double v = a.image.at(0, y, x);
        iy += v * static_cast<double>(y), ix += v * static_cast<double>(x), in += v;
        if (a.labels.at(y, x) != 1) continue;
        ly += static_cast<double>(y), lx += static_cast<double>(x), ln += 1;
      }
    if (ln < 4) continue;  // block cropped away
    EXPECT_NEAR(ly / ln, iy / in, 1.0) << "trial " << t;
    EXPECT_NEAR(lx / ln, ix / in, 1.0) << "trial " << t;
  }
}

TEST(Augment, DisabledOnlyCrops) {
  std::mt19937_64 rng(10);
  auto s = random_sample(16, 16, 3, rng);
  psp::AugmentConfig cfg;
  cfg.enabled = false;
  cfg.crop_size = 16;
  EXPECT_EQ(psp::augment(s, cfg, rng), s);
}

TEST(Augment, PadCropFillsBottomRight) {
  std::mt19937_64 rng(11);
  auto s = random_sample(5, 6, 3, rng);
  auto c = psp::pad_crop(s, 8, 0, 0, {0.1f, 0.2f, 0.3f}, psp::kIgnoreLabel);
  EXPECT_EQ(c.labels.at(4, 5), s.labels.at(4, 5));
  EXPECT_EQ(c.labels.at(5, 0), psp::kIgnoreLabel);
  EXPECT_EQ(c.labels.at(0, 6), psp::kIgnoreLabel);
  EXPECT_EQ(c.image.at(2, 7, 7), 0.3f);
  EXPECT_THROW(psp::pad_crop(s, 8, 1, 0, {}, 255), std::out_of_range);
}

TEST(Augment, SameSeedSameResult) {
  std::mt19937_64 g(12);
  auto s = random_sample(30, 30, 3, g);
  psp::AugmentConfig cfg;
  cfg.crop_size = 32;
  std::mt19937_64 a(99), b(99);
  EXPECT_EQ(psp::augment(s, cfg, a), psp::augment(s, cfg, b));
}

TEST(Augment, ConfigValidation) {
  psp::AugmentConfig cfg;
  cfg.crop_size = 60;
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
  cfg = {};
  cfg.resize_min = 0;
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
}

TEST(Batches, SizesAndLastShortBatch) {
  std::mt19937_64 rng(13);
  auto b = psp::epoch_batches(10, 4, rng);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 4u);
  EXPECT_EQ(b[1].size(), 4u);
  EXPECT_EQ(b[2].size(), 2u);
  std::set<std::size_t> seen;
  for (const auto& batch : b) seen.insert(batch.begin(), batch.end());
  EXPECT_EQ(seen.size(), 10u);
}

TEST(Batches, SeededOrder) {
  std::mt19937_64 a(14), b(14);
  EXPECT_EQ(psp::epoch_batches(50, 8, a), psp::epoch_batches(50, 8, b));
}

TEST(Batches, EpochsDiffer) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto e1 = psp::epoch_batches(32, 4, rng);
    auto e2 = psp::epoch_batches(32, 4, rng);
    EXPECT_NE(e1, e2) << seed;
  }
}

TEST(Batches, EmptyDatasetAndAssembly) {
  std::mt19937_64 rng(15);
  EXPECT_THROW(psp::make_batches({}, 4, rng), std::invalid_argument);
  std::vector<psp::SegSample> samples{random_sample(8, 8, 3, rng), random_sample(8, 8, 3, rng),
                                      random_sample(8, 8, 3, rng)};
  auto batches = psp::make_batches(samples, 2, rng);
  ASSERT_EQ(batches.size(), 2u);
  EXPECT_EQ(batches[0].images.shape(), (psp::Shape{2, 3, 8, 8}));
  EXPECT_EQ(batches[1].labels.batch, 1);
  samples.push_back(random_sample(8, 16, 3, rng));
  EXPECT_THROW(psp::assemble_batch(samples), psp::ShapeError);
}

TEST(Synth, Deterministic) {
  psp::SynthConfig cfg;
  cfg.seed = 3;
  auto a = psp::synth_generate(cfg, 4);
  auto b = psp::synth_generate(cfg, 4);
  EXPECT_EQ(a, b);
  EXPECT_EQ(psp::synth_generate(cfg, 2, 2)[1], a[3]);
  cfg.seed = 4;
  EXPECT_NE(psp::synth_generate(cfg, 1)[0], a[0]);
}

TEST(Synth, LabelsAndScenesConsistent) {
  psp::SynthConfig cfg;
  auto samples = psp::synth_generate(cfg, 20);
  const int s = cfg.scene_classes;
  for (const auto& smp : samples) {
    EXPECT_EQ(smp.image.height, cfg.height);
    psp::validate_labels(smp.labels, cfg.num_classes());
    // every object pixel shares a row with background of its own scene in the same region
    for (std::int64_t y = 0; y < smp.labels.height; ++y)
      for (std::int64_t x = 0; x < smp.labels.width; ++x) {
        auto l = smp.labels.at(y, x);
        if (l < s) continue;
        bool found = false;
        for (std::int64_t yy = 0; yy < smp.labels.height && !found; ++yy) found = smp.labels.at(yy, x) == l - s;
        for (std::int64_t xx = 0; xx < smp.labels.width && !found; ++xx) found = smp.labels.at(y, xx) == l - s;
        EXPECT_TRUE(found);
      }
  }
}

TEST(Synth, PairedObjectClassesLookAlike) {
  // per-channel mean and spread of object pixels must match across scenes,
  // and a two-sample KS statistic on the red channel must be small
  psp::SynthConfig cfg;
  cfg.seed = 21;
  auto samples = psp::synth_generate(cfg, 200);
  const int s = cfg.scene_classes;
  std::vector<std::vector<float>> red(static_cast<std::size_t>(s));
  std::vector<std::array<double, 6>> mom(static_cast<std::size_t>(s), std::array<double, 6>{});
  std::vector<double> count(static_cast<std::size_t>(s), 0);
  for (const auto& smp : samples)
    for (std::int64_t y = 0; y < smp.labels.height; ++y)
      for (std::int64_t x = 0; x < smp.labels.width; ++x) {
        auto l = smp.labels.at(y, x);
        if (l < s) continue;
        auto k = static_cast<std::size_t>(l - s);
        red[k].push_back(smp.image.at(0, y, x));
        for (int c = 0; c < 3; ++c) {
          double v = smp.image.at(c, y, x);
          mom[k][static_cast<std::size_t>(c)] += v;
          mom[k][static_cast<std::size_t>(c + 3)] += v * v;
        }
        count[k] += 1;
      }
  for (int k = 1; k < s; ++k) {
    for (int c = 0; c < 3; ++c) {
      auto mean = [&](int j) { return mom[j][c] / count[j]; };
      auto var = [&](int j) { return mom[j][c + 3] / count[j] - mean(j) * mean(j); };
      EXPECT_NEAR(mean(k), mean(0), 2e-3) << "channel " << c;
      EXPECT_NEAR(var(k), var(0), 2e-3) << "channel " << c;
    }
    auto a = red[0], b = red[static_cast<std::size_t>(k)];
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double ks = 0;
    for (int q = 0; q <= 255; ++q) {
      float t = static_cast<float>(q) / 255.0f;
      double fa = static_cast<double>(std::upper_bound(a.begin(), a.end(), t) - a.begin()) / static_cast<double>(a.size());
      double fb = static_cast<double>(std::upper_bound(b.begin(), b.end(), t) - b.begin()) / static_cast<double>(b.size());
      ks = std::max(ks, std::abs(fa - fb));
    }
    EXPECT_LT(ks, 0.01);
  }
}

TEST(Synth, ClassFrequenciesWithinTwiceUniform) {
  psp::SynthConfig cfg;
  cfg.seed = 5;
  auto samples = psp::synth_generate(cfg, 1000);
  std::vector<double> freq(static_cast<std::size_t>(cfg.num_classes()), 0);
  double total = 0;
  for (const auto& smp : samples)
    for (auto l : smp.labels.data) {
      if (l == psp::kIgnoreLabel) continue;
      freq[static_cast<std::size_t>(l)] += 1;
      total += 1;
    }
  const double uniform = 1.0 / cfg.num_classes();
  for (std::size_t k = 0; k < freq.size(); ++k) {
    EXPECT_GT(freq[k] / total, uniform / 2) << k;
    EXPECT_LT(freq[k] / total, uniform * 2) << k;
  }
}

TEST(Synth, ConfigValidation) {
  psp::SynthConfig cfg;
  cfg.scene_classes = 1;
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
  cfg = {};
  cfg.object_size_max = cfg.width;
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
}

TEST(Dataset, WriteReadLayout) {
  TempDir d;
  psp::SynthConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.object_size_min = 8;
  cfg.object_size_max = 16;
  cfg.halo = 4;
  auto samples = psp::synth_generate(cfg, 8);
  auto dir = d.path / "ds";
  psp::write_dataset(dir, samples, false);
  EXPECT_TRUE(fs::exists(dir / "images" / "0007.ppm"));
  EXPECT_TRUE(fs::exists(dir / "labels" / "0000.pgm"));
  EXPECT_EQ(read_bytes(dir / "manifest.txt").substr(0, 10), "0000\n0001\n");
  EXPECT_EQ(psp::read_dataset(dir, cfg.num_classes()), samples);

  auto before = read_bytes(dir / "images" / "0003.ppm");
  EXPECT_THROW(psp::write_dataset(dir, samples, false), std::runtime_error);
  psp::write_dataset(dir, samples, true);
  EXPECT_EQ(read_bytes(dir / "images" / "0003.ppm"), before);

  psp::write_dataset(dir, {samples[0]}, true);
  EXPECT_FALSE(fs::exists(dir / "images" / "0001.ppm"));
  EXPECT_EQ(psp::read_dataset(dir, cfg.num_classes()).size(), 1u);
}

TEST(Dataset, EmptyManifest) {
  TempDir d;
  write_bytes(d.path / "manifest.txt", "\n");
  EXPECT_THROW(psp::read_dataset(d.path, 4), psp::FormatError);
}

TEST(Palette, DocumentedColours) {
  using C = std::array<std::uint8_t, 3>;
  EXPECT_EQ(psp::palette_color(0), (C{0, 0, 0}));
  EXPECT_EQ(psp::palette_color(1), (C{128, 0, 0}));
  EXPECT_EQ(psp::palette_color(2), (C{0, 128, 0}));
  EXPECT_EQ(psp::palette_color(3), (C{128, 128, 0}));
  EXPECT_EQ(psp::palette_color(4), (C{0, 0, 128}));
  EXPECT_EQ(psp::palette_color(8), (C{64, 0, 0}));
  EXPECT_EQ(psp::palette_color(psp::kIgnoreLabel), (C{224, 224, 192}));
  EXPECT_THROW(psp::palette_color(-1), std::invalid_argument);
  // distinct colours for every class id
  std::set<C> seen;
  for (int c = 0; c < 255; ++c) seen.insert(psp::palette_color(c));
  EXPECT_EQ(seen.size(), 255u);
}

TEST(Palette, ColorizeQuantizesExactly) {
  auto m = psp::LabelMap::single(2, 3);
  m.at(1, 2) = 3;
  auto img = psp::colorize(m);
  EXPECT_EQ(img.height, 2);
  EXPECT_EQ(img.width, 3);
  EXPECT_EQ(psp::detail::quantize(img.at(0, 1, 2)), 128);
  EXPECT_EQ(psp::detail::quantize(img.at(1, 1, 2)), 128);
  EXPECT_EQ(psp::detail::quantize(img.at(2, 1, 2)), 0);
  EXPECT_EQ(img.at(0, 0, 0), 0.0f);
}
