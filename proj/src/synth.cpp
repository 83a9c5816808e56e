#include "sadkit/synth.hpp"

#include "sadkit/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <thread>

namespace sadkit {

namespace {

using json = nlohmann::json;

constexpr double kHorizon = 0.32;  // vanishing point row as a fraction of height
constexpr double kMinDepth = 0.12;  // lanes stop where they shrink below this fraction

struct Rgb {
  float r, g, b;
};

void put(ArrayX<float>& img, Index h, Index w, Index y, Index x, const Rgb& c) {
  const Index plane = h * w;
  img[y * w + x] = c.r;
  img[plane + y * w + x] = c.g;
  img[2 * plane + y * w + x] = c.b;
}

// Smooth random field: bilinear interpolation of a coarse grid of uniforms.
std::vector<float> value_noise(std::mt19937_64& rng, Index h, Index w, Index cells_y, Index cells_x) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> grid(static_cast<std::size_t>((cells_y + 1) * (cells_x + 1)));
  for (float& g : grid) g = u(rng);
  std::vector<float> out(static_cast<std::size_t>(h * w));
  for (Index y = 0; y < h; ++y) {
    const float fy = static_cast<float>(y) * static_cast<float>(cells_y) / static_cast<float>(h);
    const Index gy = std::min<Index>(static_cast<Index>(fy), cells_y - 1);
    const float ty = fy - static_cast<float>(gy);
    for (Index x = 0; x < w; ++x) {
      const float fx = static_cast<float>(x) * static_cast<float>(cells_x) / static_cast<float>(w);
      const Index gx = std::min<Index>(static_cast<Index>(fx), cells_x - 1);
      const float tx = fx - static_cast<float>(gx);
      auto at = [&](Index a, Index b) { return grid[static_cast<std::size_t>(a * (cells_x + 1) + b)]; };
      const float top = at(gy, gx) * (1 - tx) + at(gy, gx + 1) * tx;
      const float bot = at(gy + 1, gx) * (1 - tx) + at(gy + 1, gx + 1) * tx;
      out[static_cast<std::size_t>(y * w + x)] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

float bilinear_at(const float* plane, Index h, Index w, double y, double x) {
  if (y < -0.5 || x < -0.5 || y > static_cast<double>(h) - 0.5 || x > static_cast<double>(w) - 0.5) return 0.0f;
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const Index y0 = static_cast<Index>(std::floor(y)), x0 = static_cast<Index>(std::floor(x));
  const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const float fy = static_cast<float>(y - static_cast<double>(y0));
  const float fx = static_cast<float>(x - static_cast<double>(x0));
  const float top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const float bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace

ExistBits existence_from_labels(const std::vector<std::uint8_t>& labels) {
  ExistBits e{};
  for (std::uint8_t l : labels) {
    if (l >= 1 && l <= kLaneSlots) e[static_cast<std::size_t>(l - 1)] = 1;
  }
  return e;
}

int SceneParams::lane_count() const { return static_cast<int>(std::count(slots.begin(), slots.end(), true)); }

void SceneParams::validate() const {
  if (height < 16 || width < 16) throw std::invalid_argument("scene: image must be at least 16x16");
  if (lane_width < 1) throw std::invalid_argument("scene: lane width must be at least 1 px");
  if (!(illumination > 0.0)) throw std::invalid_argument("scene: illumination must be positive");
  if (noise < 0.0) throw std::invalid_argument("scene: noise must be nonnegative");
  if (occluders < 0) throw std::invalid_argument("scene: occluder count must be nonnegative");
  if (!(slot_spread > 0.0)) throw std::invalid_argument("scene: slot spread must be positive");
  if (std::abs(vp_dy) > 0.25) throw std::invalid_argument("scene: vanishing point jitter too large");
  const SceneGeometry g = scene_geometry(*this);
  int prev = -1;
  for (int k = 0; k < kLaneSlots; ++k) {
    if (!slots[static_cast<std::size_t>(k)]) continue;
    if (prev >= 0) {
      const double gap = g.bottom_x[static_cast<std::size_t>(k)] - g.bottom_x[static_cast<std::size_t>(prev)];
      if (gap < lane_width + 2) {
        throw std::invalid_argument("scene: infeasible geometry, lanes in slots " + std::to_string(prev + 1) +
                                    " and " + std::to_string(k + 1) + " touch or cross");
      }
    }
    prev = k;
  }
}

SceneGeometry scene_geometry(const SceneParams& p) {
  SceneGeometry g;
  const double w = static_cast<double>(p.width), h = static_cast<double>(p.height);
  g.vp_x = w * (0.5 + p.vp_dx);
  g.vp_y = h * (kHorizon + p.vp_dy);
  for (int k = 0; k < kLaneSlots; ++k) {
    g.bottom_x[static_cast<std::size_t>(k)] =
        g.vp_x + (k - 1.5) * p.slot_spread * w + p.bottom_offset[static_cast<std::size_t>(k)];
  }
  // Stop lanes where adjacent bands would come within a pixel of each other.
  double min_gap = std::numeric_limits<double>::infinity();
  int prev = -1;
  for (int k = 0; k < kLaneSlots; ++k) {
    if (!p.slots[static_cast<std::size_t>(k)]) continue;
    if (prev >= 0) {
      min_gap = std::min(min_gap, g.bottom_x[static_cast<std::size_t>(k)] - g.bottom_x[static_cast<std::size_t>(prev)]);
    }
    prev = k;
  }
  double t_min = kMinDepth;
  if (std::isfinite(min_gap) && min_gap > 0) t_min = std::max(t_min, (p.lane_width + 2) / min_gap);
  const double row = g.vp_y + t_min * (h - 1 - g.vp_y);
  g.top_row = std::min<Index>(p.height - 1, static_cast<Index>(std::ceil(row)));
  return g;
}

double lane_center(const SceneParams& p, const SceneGeometry& g, int slot, double row) {
  const double t = (row - g.vp_y) / (static_cast<double>(p.height - 1) - g.vp_y);
  const double bend = p.curvature * (1 - t) * (1 - t);
  return g.vp_x + (g.bottom_x[static_cast<std::size_t>(slot)] - g.vp_x) * t + bend;
}

LaneSample generate_scene(const SceneParams& p) {
  p.validate();
  const Index h = p.height, w = p.width;
  const SceneGeometry g = scene_geometry(p);
  LaneSample s;
  s.height = h;
  s.width = w;
  s.seed = p.seed;
  s.labels.assign(static_cast<std::size_t>(h * w), 0);
  s.image = ArrayX<float>::Zero(3 * h * w);

  std::mt19937_64 rng(p.seed);
  std::uniform_real_distribution<float> u01(0.0f, 1.0f);

  // Ground plane and sky.
  const std::vector<float> coarse = value_noise(rng, h, w, 4, 8);
  const std::vector<float> fine = value_noise(rng, h, w, 32, 64);
  const float road_base = 0.28f + 0.1f * u01(rng);
  const Index horizon = static_cast<Index>(std::floor(g.vp_y));
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      if (y <= horizon) {
        const float f = static_cast<float>(y) / static_cast<float>(std::max<Index>(horizon, 1));
        put(s.image, h, w, y, x, {0.5f + 0.1f * f, 0.62f + 0.1f * f, 0.8f + 0.05f * coarse[i]});
      } else {
        const float v = road_base + 0.05f * coarse[i] + 0.03f * fine[i];
        put(s.image, h, w, y, x, {v, v, v * 1.02f});
      }
    }
  }

  // Lane bands: labels are the analytic rasterization; paint follows them
  // except in dash gaps.
  const Index half = (p.lane_width - 1) / 2;
  for (int k = 0; k < kLaneSlots; ++k) {
    if (!p.slots[static_cast<std::size_t>(k)]) continue;
    const bool yellow = u01(rng) < 0.25f;
    const Rgb paint = yellow ? Rgb{0.85f, 0.75f, 0.3f} : Rgb{0.88f, 0.88f, 0.86f};
    const double dash_freq = 1.2 + 0.6 * u01(rng);
    const double dash_phase = u01(rng);
    for (Index y = g.top_row; y < h; ++y) {
      const double x = lane_center(p, g, k, static_cast<double>(y));
      const Index c0 = static_cast<Index>(std::floor(x + 0.5)) - half;
      const double t = (static_cast<double>(y) - g.vp_y) / (static_cast<double>(h - 1) - g.vp_y);
      const double depth = 1.0 / t;
      const bool painted = !p.dashed[static_cast<std::size_t>(k)] ||
                           std::fmod(depth * dash_freq + dash_phase, 1.0) < 0.55;
      for (Index c = std::max<Index>(c0, 0); c < std::min<Index>(c0 + p.lane_width, w); ++c) {
        s.labels[static_cast<std::size_t>(y * w + c)] = static_cast<std::uint8_t>(k + 1);
        if (painted) put(s.image, h, w, y, c, paint);
      }
    }
  }

  // Vehicles and shadows hide paint but not labels.
  for (int o = 0; o < p.occluders; ++o) {
    const double t = 0.2 + 0.8 * u01(rng);
    const double yc = g.vp_y + t * (static_cast<double>(h - 1) - g.vp_y);
    const double bh = (6.0 + 14.0 * u01(rng)) * t * static_cast<double>(h) / 128.0;
    const double bw = (20.0 + 40.0 * u01(rng)) * t * static_cast<double>(w) / 256.0;
    const double xc = static_cast<double>(w) * (0.1 + 0.8 * u01(rng));
    const float shade = 0.05f + 0.25f * u01(rng);
    const Rgb col{shade, shade * (0.8f + 0.4f * u01(rng)), shade * (0.8f + 0.4f * u01(rng))};
    const Index y0 = std::max<Index>(0, static_cast<Index>(yc - bh / 2));
    const Index y1 = std::min<Index>(h, static_cast<Index>(yc + bh / 2) + 1);
    const Index x0 = std::max<Index>(0, static_cast<Index>(xc - bw / 2));
    const Index x1 = std::min<Index>(w, static_cast<Index>(xc + bw / 2) + 1);
    for (Index y = y0; y < y1; ++y) {
      for (Index x = x0; x < x1; ++x) put(s.image, h, w, y, x, col);
    }
  }

  s.image *= static_cast<float>(p.illumination);
  if (p.noise > 0) {
    std::normal_distribution<float> n(0.0f, static_cast<float>(p.noise));
    for (Index i = 0; i < s.image.size(); ++i) s.image[i] += n(rng);
  }
  s.image = s.image.cwiseMax(0.0f).cwiseMin(1.0f);
  s.exist = existence_from_labels(s.labels);
  return s;
}

SceneParams sample_scene_params(std::uint64_t seed, const SynthConfig& c) {
  if (c.min_lanes < 0 || c.max_lanes > kLaneSlots || c.min_lanes > c.max_lanes) {
    throw std::invalid_argument("synth: lane count range must lie in 0..4");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneParams p;
  p.height = c.height;
  p.width = c.width;
  p.lane_width = c.lane_width;
  const int n = std::uniform_int_distribution<int>(c.min_lanes, c.max_lanes)(rng);
  std::array<int, kLaneSlots> order{0, 1, 2, 3};
  std::shuffle(order.begin(), order.end(), rng);
  for (int i = 0; i < n; ++i) p.slots[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  for (auto& o : p.bottom_offset) o = (2 * u(rng) - 1) * c.max_offset;
  p.vp_dx = (2 * u(rng) - 1) * c.vp_jitter;
  p.vp_dy = (2 * u(rng) - 1) * c.vp_jitter;
  p.curvature = (2 * u(rng) - 1) * c.max_curvature * static_cast<double>(c.width);
  for (auto& d : p.dashed) d = u(rng) < c.dashed_probability;
  p.occluders = std::uniform_int_distribution<int>(0, c.max_occluders)(rng);
  p.illumination = c.min_illumination + (c.max_illumination - c.min_illumination) * u(rng);
  p.noise = c.max_noise * u(rng);
  p.seed = rng();
  return p;
}

int median_run_length(const std::vector<std::uint8_t>& labels, Index height, Index width) {
  std::vector<int> runs;
  for (Index y = 0; y < height; ++y) {
    Index x = 0;
    while (x < width) {
      const std::uint8_t l = labels[static_cast<std::size_t>(y * width + x)];
      Index e = x + 1;
      while (e < width && labels[static_cast<std::size_t>(y * width + e)] == l) ++e;
      if (l != 0) runs.push_back(static_cast<int>(e - x));
      x = e;
    }
  }
  if (runs.empty()) return 0;
  std::nth_element(runs.begin(), runs.begin() + static_cast<std::ptrdiff_t>((runs.size() - 1) / 2), runs.end());
  return runs[(runs.size() - 1) / 2];
}

std::vector<std::uint8_t> dilate_labels(const std::vector<std::uint8_t>& labels, Index height, Index width,
                                        int width_px) {
  if (static_cast<Index>(labels.size()) != height * width) throw std::invalid_argument("dilate_labels: size mismatch");
  if (width_px < 1) throw std::invalid_argument("dilate_labels: width must be at least 1");
  const int current = median_run_length(labels, height, width);
  const Index r = current == 0 ? 0 : (width_px - current) / 2;
  if (r <= 0) return labels;

  std::vector<std::uint8_t> out = labels;
  std::vector<Index> best(labels.size(), std::numeric_limits<Index>::max());
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      const std::uint8_t l = labels[static_cast<std::size_t>(y * width + x)];
      if (l == 0) continue;
      for (Index dy = -r; dy <= r; ++dy) {
        const Index yy = y + dy;
        if (yy < 0 || yy >= height) continue;
        for (Index dx = -r; dx <= r; ++dx) {
          const Index xx = x + dx, d2 = dx * dx + dy * dy;
          if (xx < 0 || xx >= width || d2 > r * r) continue;
          const std::size_t i = static_cast<std::size_t>(yy * width + xx);
          if (labels[i] != 0) continue;
          if (d2 < best[i] || (d2 == best[i] && l < out[i])) {
            best[i] = d2;
            out[i] = l;
          }
        }
      }
    }
  }
  return out;
}

LaneSample augment(const LaneSample& in, const AugmentOps& ops) {
  if (!(ops.crop_fraction > 0.0 && ops.crop_fraction <= 1.0)) {
    throw std::invalid_argument("augment: crop fraction must lie in (0,1]");
  }
  const Index h = in.height, w = in.width;
  LaneSample out = in;
  if (ops.rotate_deg != 0.0 || ops.crop_fraction != 1.0) {
    const double fh = ops.crop_fraction * static_cast<double>(h), fw = ops.crop_fraction * static_cast<double>(w);
    const double y0 = std::clamp(ops.crop_y, 0.0, 1.0) * (static_cast<double>(h) - fh);
    const double x0 = std::clamp(ops.crop_x, 0.0, 1.0) * (static_cast<double>(w) - fw);
    const double th = ops.rotate_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(th), st = std::sin(th);
    const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
    const Index plane = h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        // Undo the rotation, then map crop coordinates to the source.
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double qy = cy + ct * dy - st * dx;
        const double qx = cx + st * dy + ct * dx;
        const double sy = y0 + (qy + 0.5) * fh / static_cast<double>(h) - 0.5;
        const double sx = x0 + (qx + 0.5) * fw / static_cast<double>(w) - 0.5;
        for (Index c = 0; c < 3; ++c) {
          out.image[c * plane + y * w + x] = bilinear_at(in.image.data() + c * plane, h, w, sy, sx);
        }
        const Index ny = static_cast<Index>(std::floor(sy + 0.5)), nx = static_cast<Index>(std::floor(sx + 0.5));
        out.labels[static_cast<std::size_t>(y * w + x)] =
            ny >= 0 && ny < h && nx >= 0 && nx < w ? in.labels[static_cast<std::size_t>(ny * w + nx)] : 0;
      }
    }
  }
  if (ops.hflip) {
    const Index plane = h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index c = 0; c < 3; ++c) {
        float* row = out.image.data() + c * plane + y * w;
        std::reverse(row, row + w);
      }
      auto row = out.labels.begin() + static_cast<std::ptrdiff_t>(y * w);
      std::reverse(row, row + w);
    }
    for (auto& l : out.labels) {
      if (l != 0) l = static_cast<std::uint8_t>(kLaneSlots + 1 - l);
    }
  }
  out.exist = existence_from_labels(out.labels);
  return out;
}

AugmentOps sample_augment(std::uint64_t seed, const AugmentConfig& c) {
  AugmentOps ops;
  if (!c.enabled) return ops;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ops.rotate_deg = (2 * u(rng) - 1) * c.max_rotate_deg;
  ops.crop_fraction = c.min_crop_fraction + (1.0 - c.min_crop_fraction) * u(rng);
  ops.crop_x = u(rng);
  ops.crop_y = u(rng);
  ops.hflip = c.hflip && u(rng) < 0.5;
  return ops;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t sample_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t state = master ^ (index * 0xd1b54a32d192ed03ULL);
  splitmix64(state);
  return splitmix64(state);
}

unsigned worker_threads() {
  if (const char* env = std::getenv("SADKIT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return 1;
}

Dataset generate_dataset(std::size_t count, std::uint64_t seed, const SynthConfig& config) {
  Dataset d;
  d.height = config.height;
  d.width = config.width;
  d.samples.resize(count);
  d.ids.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    d.ids[i] = buf;
  }
  const unsigned workers = std::max(1u, std::min<unsigned>(worker_threads(), static_cast<unsigned>(count)));
  auto work = [&](unsigned wid) {
    for (std::size_t i = wid; i < count; i += workers) {
      d.samples[i] = generate_scene(sample_scene_params(sample_seed(seed, i), config));
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < workers; ++t) pool.emplace_back(work, t);
    for (auto& t : pool) t.join();
  }
  return d;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data, std::uint64_t seed,
                   const SynthConfig& config) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "img");
  fs::create_directories(dir / "lbl");
  fs::create_directories(dir / "exist");
  json index;
  index["height"] = data.height;
  index["width"] = data.width;
  index["count"] = data.samples.size();
  index["seed"] = seed;
  index["lane_width"] = config.lane_width;
  index["samples"] = json::array();
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const LaneSample& s = data.samples[i];
    const std::string& id = data.ids[i];
    write_sadt(dir / "img" / (id + ".sadt"), {3, s.height, s.width}, s.image.data());
    write_pgm(dir / "lbl" / (id + ".pgm"), GrayImage{s.height, s.width, s.labels});
    std::string bits;
    for (auto b : s.exist) bits.push_back(b ? '1' : '0');
    write_text(dir / "exist" / (id + ".txt"), bits + "\n");
    index["samples"].push_back({{"id", id}, {"seed", s.seed}});
  }
  write_text(dir / "index.json", index.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  json index;
  try {
    index = json::parse(read_text(dir / "index.json"));
  } catch (const json::exception& e) {
    throw IoError((dir / "index.json").string() + ": " + e.what());
  }
  Dataset d;
  d.height = index.at("height").get<Index>();
  d.width = index.at("width").get<Index>();
  for (const auto& entry : index.at("samples")) {
    const std::string id = entry.at("id").get<std::string>();
    LaneSample s;
    s.height = d.height;
    s.width = d.width;
    s.seed = entry.value("seed", std::uint64_t{0});
    SadtTensor img = read_sadt(dir / "img" / (id + ".sadt"));
    if (img.shape != Shape{3, d.height, d.width}) {
      throw IoError(id + ": image shape " + to_string(img.shape) + " does not match the index");
    }
    s.image = Eigen::Map<ArrayX<float>>(img.values.data(), static_cast<Index>(img.values.size()));
    GrayImage lbl = read_pgm(dir / "lbl" / (id + ".pgm"));
    if (lbl.height != d.height || lbl.width != d.width) throw IoError(id + ": label size does not match the index");
    s.labels = std::move(lbl.pixels);
    const std::string bits = read_text(dir / "exist" / (id + ".txt"));
    for (int k = 0; k < kLaneSlots; ++k) {
      if (static_cast<int>(bits.size()) <= k || (bits[static_cast<std::size_t>(k)] != '0' && bits[static_cast<std::size_t>(k)] != '1')) {
        throw IoError(id + ": malformed existence bits");
      }
      s.exist[static_cast<std::size_t>(k)] = bits[static_cast<std::size_t>(k)] == '1';
    }
    d.ids.push_back(id);
    d.samples.push_back(std::move(s));
  }
  if (d.samples.empty()) throw IoError(dir.string() + ": dataset is empty");
  return d;
}

}  // namespace sadkit
