#pragma once

#include "sadkit/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sadkit {

inline constexpr int kLaneSlots = 4;

using ExistBits = std::array<std::uint8_t, kLaneSlots>;

/// One synthetic road scene. Class k (1..4) marks the lane in slot k, slots
/// numbered left to right; 0 is background.
struct LaneSample {
  Index height = 0;
  Index width = 0;
  ArrayX<float> image;               // [3,H,W], values in [0,1]
  std::vector<std::uint8_t> labels;  // [H,W]
  ExistBits exist{};
  std::uint64_t seed = 0;
};

/// Recomputes existence bits from the label map.
ExistBits existence_from_labels(const std::vector<std::uint8_t>& labels);

struct SceneParams {
  std::uint64_t seed = 0;  // drives texture, paint colour, occluder placement and noise
  Index height = 128;
  Index width = 256;
  std::array<bool, kLaneSlots> slots{};            // occupied lane slots
  std::array<double, kLaneSlots> bottom_offset{};  // px shift of each lane at the bottom row
  double slot_spread = 0.38;                       // slot spacing at the bottom row, fraction of width
  double vp_dx = 0.0;                              // vanishing point jitter, fraction of width
  double vp_dy = 0.0;                              // fraction of height
  double curvature = 0.0;                          // px bend shared by all lanes, largest near the horizon
  int lane_width = 5;                              // px, labels and paint
  std::array<bool, kLaneSlots> dashed{};
  double illumination = 1.0;
  int occluders = 0;
  double noise = 0.0;  // std of additive Gaussian noise

  int lane_count() const;
  void validate() const;
};

/// Horizon row and vanishing point column.
struct SceneGeometry {
  double vp_x = 0, vp_y = 0;
  Index top_row = 0;  // first labelled row
  std::array<double, kLaneSlots> bottom_x{};
};

SceneGeometry scene_geometry(const SceneParams& params);

/// Lane centre column at `row` for the given slot.
double lane_center(const SceneParams& params, const SceneGeometry& geom, int slot, double row);

/// Renders a scene. Throws std::invalid_argument when the lanes would touch or
/// cross inside the image.
LaneSample generate_scene(const SceneParams& params);

/// Ranges for random scenes.
struct SynthConfig {
  Index height = 128;
  Index width = 256;
  int min_lanes = 1;
  int max_lanes = 4;
  int lane_width = 5;
  double vp_jitter = 0.05;
  double max_curvature = 0.12;  // fraction of width
  double max_offset = 6.0;      // px
  double dashed_probability = 0.5;
  int max_occluders = 3;
  double min_illumination = 0.6;
  double max_illumination = 1.2;
  double max_noise = 0.06;
};

SceneParams sample_scene_params(std::uint64_t seed, const SynthConfig& config);

/// Grows each lane band to `width_px` using a disk of radius
/// floor((width_px - w) / 2), where w is the median horizontal run length of
/// lane pixels. A background pixel takes the class of the nearest lane pixel
/// within the radius (ties go to the smaller class). Narrower targets leave the
/// map unchanged.
std::vector<std::uint8_t> dilate_labels(const std::vector<std::uint8_t>& labels, Index height, Index width,
                                        int width_px);

/// Median horizontal run length of lane pixels (0 when there are none).
int median_run_length(const std::vector<std::uint8_t>& labels, Index height, Index width);

struct AugmentOps {
  double rotate_deg = 0.0;
  double crop_fraction = 1.0;  // side of the crop window relative to the image
  double crop_x = 0.5;         // window position in [0,1] along each axis
  double crop_y = 0.5;
  bool hflip = false;
};

/// Crop (resized back), then rotation about the centre, then mirror. Labels
/// are resampled nearest-neighbour, the image bilinearly; mirroring maps lane
/// class k to 5 - k. Existence bits are recomputed.
LaneSample augment(const LaneSample& sample, const AugmentOps& ops);

/// Random augmentation parameters.
struct AugmentConfig {
  bool enabled = false;
  double max_rotate_deg = 4.0;
  double min_crop_fraction = 0.85;
  bool hflip = true;
};

AugmentOps sample_augment(std::uint64_t seed, const AugmentConfig& config);

std::uint64_t splitmix64(std::uint64_t& state);
/// Seed of sample `index` in a dataset generated from `master`.
std::uint64_t sample_seed(std::uint64_t master, std::uint64_t index);

struct Dataset {
  Index height = 0;
  Index width = 0;
  std::vector<std::string> ids;
  std::vector<LaneSample> samples;
};

/// Generates `count` samples; worker count from SADKIT_THREADS (default 1).
Dataset generate_dataset(std::size_t count, std::uint64_t seed, const SynthConfig& config);

/// Layout: index.json, img/<id>.sadt, lbl/<id>.pgm, exist/<id>.txt.
void write_dataset(const std::filesystem::path& dir, const Dataset& data, std::uint64_t seed,
                   const SynthConfig& config);
Dataset load_dataset(const std::filesystem::path& dir);

/// Worker count from SADKIT_THREADS, at least 1.
unsigned worker_threads();

}  // namespace sadkit
