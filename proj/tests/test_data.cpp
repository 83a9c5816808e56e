#include "sadkit/io.hpp"
#include "sadkit/synth.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>

using namespace sadkit;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sadkit_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

SceneParams two_straight_lanes() {
  SceneParams p;
  p.seed = 77;
  p.slots = {false, true, true, false};
  return p;
}

}  // namespace

TEST_CASE("sadt round trip") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-5, 5);
  std::vector<float> v(2 * 3 * 4);
  for (auto& x : v) x = u(rng);
  std::stringstream buf;
  write_sadt(buf, {2, 3, 4}, v.data());
  SadtTensor t = read_sadt(buf);
  CHECK(t.shape == Shape{2, 3, 4});
  CHECK(t.values == v);

  const std::string bytes = [&] {
    std::stringstream s;
    write_sadt(s, {2}, v.data());
    return s.str();
  }();
  CHECK(bytes.substr(0, 4) == "SADT");
  CHECK(bytes.size() == 4 + 4 + 4 + 2 * 4);
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // rank, little-endian

  std::stringstream bad("JUNKxxxxxxxx");
  CHECK_THROWS_AS(read_sadt(bad), IoError);
  std::stringstream truncated(bytes.substr(0, 14));
  CHECK_THROWS_AS(read_sadt(truncated), IoError);
}

TEST_CASE("pgm round trip and gray mapping") {
  const auto dir = scratch_dir("pgm");
  GrayImage img{3, 5, {}};
  for (int i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 17));
  write_pgm(dir / "a.pgm", img);
  GrayImage back = read_pgm(dir / "a.pgm");
  CHECK(back.height == 3);
  CHECK(back.width == 5);
  CHECK(back.pixels == img.pixels);

  write_text(dir / "c.pgm", "P5\n# comment\n2 1\n255\n\x01\x02");
  GrayImage c = read_pgm(dir / "c.pgm");
  CHECK(c.pixels == std::vector<std::uint8_t>{1, 2});
  CHECK_THROWS_AS(read_pgm(dir / "missing.pgm"), IoError);

  const float ramp[4] = {-1, 0, 1, 3};
  GrayImage g = to_gray(ramp, 2, 2);
  CHECK(g.pixels.front() == 0);
  CHECK(g.pixels.back() == 255);
  const float flat[2] = {4, 4};
  CHECK(to_gray(flat, 1, 2).pixels == std::vector<std::uint8_t>{0, 0});
}

TEST_CASE("synth: same seed, same scene") {
  SynthConfig cfg;
  const SceneParams p = sample_scene_params(1234, cfg);
  LaneSample a = generate_scene(p), b = generate_scene(p);
  CHECK((a.image == b.image).all());
  CHECK(a.labels == b.labels);
  LaneSample c = generate_scene(sample_scene_params(1235, cfg));
  CHECK_FALSE((a.image == c.image).all());
  CHECK(a.image.minCoeff() >= 0.0f);
  CHECK(a.image.maxCoeff() <= 1.0f);
}

TEST_CASE("synth: straight lanes match the analytic raster") {
  const SceneParams p = two_straight_lanes();
  const LaneSample s = generate_scene(p);
  const double h = 128, w = 256;
  const double vp_x = w / 2, vp_y = 0.32 * h;
  const double xb[2] = {vp_x - 0.5 * 0.38 * w, vp_x + 0.5 * 0.38 * w};
  const Index top = static_cast<Index>(std::ceil(vp_y + 0.12 * (h - 1 - vp_y)));
  long mismatches = 0;
  for (Index r = 0; r < 128; ++r) {
    for (Index c = 0; c < 256; ++c) {
      int expect = 0;
      if (r >= top) {
        const double t = (static_cast<double>(r) - vp_y) / (h - 1 - vp_y);
        for (int k = 0; k < 2; ++k) {
          const double x = vp_x + (xb[k] - vp_x) * t;
          if (std::abs(static_cast<double>(c) - std::floor(x + 0.5)) <= 2) expect = k + 2;
        }
      }
      mismatches += s.labels[static_cast<std::size_t>(r * 256 + c)] != expect;
    }
  }
  CHECK(mismatches == 0);
  CHECK(s.exist == ExistBits{0, 1, 1, 0});
}

TEST_CASE("synth: empty road") {
  SceneParams p;
  p.seed = 5;
  p.occluders = 2;
  const LaneSample s = generate_scene(p);
  CHECK(std::all_of(s.labels.begin(), s.labels.end(), [](auto l) { return l == 0; }));
  CHECK(s.exist == ExistBits{0, 0, 0, 0});
}

TEST_CASE("synth: existence bits agree with labels") {
  SynthConfig cfg;
  cfg.height = 48;
  cfg.width = 96;
  cfg.lane_width = 3;
  cfg.max_offset = 2;
  cfg.min_lanes = 0;
  int bad = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const SceneParams p = sample_scene_params(sample_seed(99, i), cfg);
    const LaneSample s = generate_scene(p);
    for (int k = 0; k < kLaneSlots; ++k) {
      const bool present = std::find(s.labels.begin(), s.labels.end(), k + 1) != s.labels.end();
      bad += s.exist[static_cast<std::size_t>(k)] != present;
      bad += p.slots[static_cast<std::size_t>(k)] != present;
    }
  }
  CHECK(bad == 0);
}

TEST_CASE("synth: infeasible scenes are rejected") {
  SceneParams p = two_straight_lanes();
  p.bottom_offset = {0, 46, -46, 0};  // gap 97.28 - 92 < 5 + 2
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  CHECK_THROWS_AS(generate_scene(p), std::invalid_argument);
  p.bottom_offset = {0, 0, 0, 0};
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("synth: label dilation against a brute-force distance oracle") {
  const SceneParams p = two_straight_lanes();
  const LaneSample s = generate_scene(p);
  CHECK(median_run_length(s.labels, 128, 256) == 5);
  const auto d = dilate_labels(s.labels, 128, 256, 9);
  const double radius = 2;  // (9 - 5) / 2
  long bad = 0;
  for (Index r = 0; r < 128; ++r) {
    for (Index c = 0; c < 256; ++c) {
      const auto i = static_cast<std::size_t>(r * 256 + c);
      int expect = s.labels[i];
      if (expect == 0) {
        long best = 1L << 40;
        for (Index rr = std::max<Index>(0, r - 2); rr <= std::min<Index>(127, r + 2); ++rr) {
          for (Index cc = std::max<Index>(0, c - 2); cc <= std::min<Index>(255, c + 2); ++cc) {
            const int l = s.labels[static_cast<std::size_t>(rr * 256 + cc)];
            const long d2 = (rr - r) * (rr - r) + (cc - c) * (cc - c);
            if (l == 0 || static_cast<double>(d2) > radius * radius) continue;
            if (d2 < best || (d2 == best && l < expect)) {
              best = d2;
              expect = l;
            }
          }
        }
      }
      bad += d[i] != expect;
    }
  }
  CHECK(bad == 0);
  CHECK(median_run_length(d, 128, 256) == 9);
  CHECK(dilate_labels(s.labels, 128, 256, 3) == s.labels);
}

TEST_CASE("synth: 3 px labels") {
  SceneParams p = two_straight_lanes();
  p.lane_width = 3;
  CHECK(median_run_length(generate_scene(p).labels, 128, 256) == 3);
}

TEST_CASE("augment: identity, mirror and bit swap") {
  SceneParams p = two_straight_lanes();
  p.slots = {true, true, false, false};
  const LaneSample s = generate_scene(p);
  const LaneSample same = augment(s, {});
  CHECK((same.image == s.image).all());
  CHECK(same.labels == s.labels);

  AugmentOps flip;
  flip.hflip = true;
  const LaneSample m = augment(s, flip);
  CHECK(m.exist == ExistBits{0, 0, 1, 1});
  CHECK(m.labels[static_cast<std::size_t>(127 * 256 + 0)] == s.labels[static_cast<std::size_t>(127 * 256 + 255)]);
  const LaneSample mm = augment(m, flip);
  CHECK((mm.image == s.image).all());
  CHECK(mm.labels == s.labels);

  AugmentOps rot;
  rot.rotate_deg = 3;
  rot.crop_fraction = 0.9;
  const LaneSample r = augment(s, rot);
  CHECK(r.exist == existence_from_labels(r.labels));
  CHECK_THROWS_AS(augment(s, AugmentOps{0, 0.0}), std::invalid_argument);
}

TEST_CASE("dataset: generation is reproducible and survives a disk round trip") {
  SynthConfig cfg;
  cfg.height = 32;
  cfg.width = 64;
  cfg.lane_width = 3;
  cfg.max_offset = 1;
  Dataset a = generate_dataset(6, 42, cfg);
  Dataset b = generate_dataset(6, 42, cfg);
  REQUIRE(a.samples.size() == 6);
  CHECK(a.ids[3] == "000003");
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK((a.samples[i].image == b.samples[i].image).all());
    CHECK(a.samples[i].labels == b.samples[i].labels);
  }
  const auto dir = scratch_dir("dataset");
  write_dataset(dir, a, 42, cfg);
  CHECK(read_text(dir / "exist" / "000000.txt").size() == 5);
  Dataset c = load_dataset(dir);
  REQUIRE(c.samples.size() == 6);
  CHECK(c.height == 32);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK((c.samples[i].image == a.samples[i].image).all());
    CHECK(c.samples[i].labels == a.samples[i].labels);
    CHECK(c.samples[i].exist == a.samples[i].exist);
  }
  CHECK_THROWS(load_dataset(dir / "nope"));
}
