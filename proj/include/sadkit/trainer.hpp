#pragma once

#include "sadkit/losses.hpp"
#include "sadkit/metrics.hpp"
#include "sadkit/model.hpp"
#include "sadkit/paths.hpp"
#include "sadkit/postprocess.hpp"
#include "sadkit/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sadkit {

inline constexpr int kEncoderBlocks = 4;

struct SadConfig {
  PathSet paths{{2, 3}, {3, 4}};
  int activation_episode = 1000;
  bool detach_target = true;
  bool allow_backward_paths = false;

  /// Checks the path set against the encoder depth and the episode budget.
  void validate(int total_episodes) const;
};

enum class TrainMode { kBaseline, kSad, kDeepSupervision };

TrainMode parse_train_mode(const std::string& name);
std::string to_string(TrainMode mode);

/// Settings for validation decoding and the lane F1 metric.
struct EvalConfig {
  PostprocessConfig post{8, 0.5, 0.15, true};  // 5 px labels smooth to peaks near 0.27
  double line_width = 10;
  double iou_thresh = 0.5;
  int max_samples = 0;  // 0 = whole set
};

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.0;
  int batch_size = 8;
  int total_episodes = 2000;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::kBaseline;
  int val_every = 100;
  AugmentConfig augment;
  EvalConfig eval;

  void validate() const;
};

struct EpisodeRecord {
  int episode = 0;
  double seg = 0, iou = 0, exist = 0, distill = 0;
  std::vector<double> deep;  // one unweighted CE per supervised block
  double total = 0;
  bool sad_active = false;
  std::optional<double> val_f1;

  std::string to_json() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int episode, const std::string& what)
      : std::runtime_error(what + " at episode " + std::to_string(episode)), episode_(episode) {}
  int episode() const { return episode_; }

 private:
  int episode_;
};

template <typename Scalar>
struct TrainHooks {
  std::function<void(const EpisodeRecord&)> on_record;
  /// Called after every optimizer step with the 1-based count of completed
  /// episodes.
  std::function<void(int, LaneModel<Scalar>&)> on_step;
  /// Called whenever validation F1 improves.
  std::function<void(int, double, LaneModel<Scalar>&)> on_best;
};

struct TrainResult {
  std::vector<EpisodeRecord> log;
  double best_val_f1 = -1;
  int best_episode = -1;
  double final_val_f1 = -1;
};

/// Plain (optionally momentum) SGD. Each episode draws one batch from a
/// seeded shuffle of `data`; the distillation term joins the loss once
/// `episode >= sad.activation_episode` in sad mode. `val` may be null.
template <typename Scalar>
TrainResult train(LaneModel<Scalar>& model, const Dataset& data, const Dataset* val, const TrainConfig& config,
                  const SadConfig& sad, const LossWeights& weights, const TrainHooks<Scalar>& hooks = {});

/// Baseline objective plus an unweighted cross-entropy on each listed
/// deep-supervision head. Blocks must be among the model's heads; an empty
/// list trains the baseline.
template <typename Scalar>
TrainResult train_deep_supervision(LaneModel<Scalar>& model, const Dataset& data, const Dataset* val,
                                   const TrainConfig& config, const LossWeights& weights,
                                   const std::vector<int>& blocks, const TrainHooks<Scalar>& hooks = {});

/// Inference-mode forward pass over a batch of samples; returns class
/// probabilities [N,N_c,H,W] and existence probabilities [N,L].
template <typename Scalar>
std::pair<ArrayX<float>, ArrayX<float>> predict(LaneModel<Scalar>& model, const std::vector<const LaneSample*>& batch);

/// Lane F1 of the decoded predictions against lanes traced from the labels.
template <typename Scalar>
F1Result evaluate_f1(LaneModel<Scalar>& model, const Dataset& data, const EvalConfig& config);

/// Ground-truth lanes of one sample, as used by evaluation.
std::vector<LanePoints> reference_lanes(const LaneSample& sample);

/// Checkpoint: <stem>.json manifest {config, episode, seed} and <stem>.bin
/// holding every state array as SADT records in visit_state order.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& stem, LaneModel<Scalar>& model, int episode, std::uint64_t seed);

template <typename Scalar>
LaneModel<Scalar> load_checkpoint(const std::filesystem::path& stem, int* episode = nullptr);

extern template TrainResult train(LaneModel<float>&, const Dataset&, const Dataset*, const TrainConfig&,
                                  const SadConfig&, const LossWeights&, const TrainHooks<float>&);
extern template TrainResult train(LaneModel<double>&, const Dataset&, const Dataset*, const TrainConfig&,
                                  const SadConfig&, const LossWeights&, const TrainHooks<double>&);

}  // namespace sadkit
