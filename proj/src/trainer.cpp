#include "sadkit/trainer.hpp"

#include "sadkit/config.hpp"
#include "sadkit/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace sadkit {

void SadConfig::validate(int total_episodes) const {
  validate_paths(paths, kEncoderBlocks, allow_backward_paths);
  if (activation_episode < 0) throw std::invalid_argument("sad: activation_episode must be nonnegative");
  if (activation_episode > total_episodes) {
    throw std::invalid_argument("sad: activation_episode " + std::to_string(activation_episode) +
                                " exceeds total episodes " + std::to_string(total_episodes));
  }
}

TrainMode parse_train_mode(const std::string& name) {
  if (name == "baseline") return TrainMode::kBaseline;
  if (name == "sad") return TrainMode::kSad;
  if (name == "deep_supervision") return TrainMode::kDeepSupervision;
  throw std::invalid_argument("unknown mode '" + name + "' (expected baseline, sad or deep_supervision)");
}

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kBaseline:
      return "baseline";
    case TrainMode::kSad:
      return "sad";
    case TrainMode::kDeepSupervision:
      return "deep_supervision";
  }
  return "baseline";
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("train: learning rate must be positive");
  if (momentum < 0 || momentum >= 1) throw std::invalid_argument("train: momentum must lie in [0,1)");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be positive");
  if (total_episodes < 1) throw std::invalid_argument("train: total episodes must be positive");
  if (val_every < 1) throw std::invalid_argument("train: val_every must be positive");
}

std::string EpisodeRecord::to_json() const {
  Json j{{"episode", episode}, {"L_seg", seg},         {"L_IoU", iou},    {"L_exist", exist},
         {"L_distill", distill}, {"sad_active", sad_active}, {"total", total}};
  if (!deep.empty()) j["L_deep"] = deep;
  j["val_f1"] = val_f1 ? Json(*val_f1) : Json(nullptr);
  return j.dump();
}

std::vector<LanePoints> reference_lanes(const LaneSample& sample) {
  return lanes_from_labels(sample.labels, sample.height, sample.width, kLaneSlots + 1, 1);
}

namespace {

template <typename Scalar>
Tensor<Scalar> batch_images(const std::vector<const LaneSample*>& batch) {
  const Index h = batch.front()->height, w = batch.front()->width, n = static_cast<Index>(batch.size());
  ArrayX<Scalar> v(n * 3 * h * w);
  for (Index i = 0; i < n; ++i) {
    v.segment(i * 3 * h * w, 3 * h * w) = batch[static_cast<std::size_t>(i)]->image.template cast<Scalar>();
  }
  return Tensor<Scalar>({n, 3, h, w}, std::move(v));
}

template <typename Scalar>
TrainResult run(LaneModel<Scalar>& model, const Dataset& data, const Dataset* val, const TrainConfig& config,
                const SadConfig* sad, const LossWeights& weights, const std::vector<int>& deep_blocks,
                const TrainHooks<Scalar>& hooks) {
  config.validate();
  weights.validate();
  if (sad) sad->validate(config.total_episodes);
  if (data.samples.empty()) throw std::invalid_argument("train: dataset is empty");
  const ModelConfig& mc = model.config();
  if (data.height != mc.input_h || data.width != mc.input_w) {
    throw std::invalid_argument("train: dataset is " + std::to_string(data.height) + "x" +
                                std::to_string(data.width) + " but the model expects " +
                                std::to_string(mc.input_h) + "x" + std::to_string(mc.input_w));
  }
  std::vector<std::size_t> head_of;
  for (int b : deep_blocks) {
    const auto& built = mc.deep_supervision_blocks;
    const auto it = std::find(built.begin(), built.end(), b);
    if (it == built.end()) {
      throw std::invalid_argument("train: deep supervision on block " + std::to_string(b) +
                                  " but the model has no head there");
    }
    head_of.push_back(static_cast<std::size_t>(it - built.begin()));
  }

  std::vector<Tensor<Scalar>> params = model.parameters();
  std::vector<ArrayX<Scalar>> velocity;
  if (config.momentum > 0) {
    for (const auto& p : params) velocity.push_back(ArrayX<Scalar>::Zero(p.size()));
  }
  const Scalar lr = static_cast<Scalar>(config.learning_rate);
  const Scalar mu = static_cast<Scalar>(config.momentum);

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  TrainResult result;
  for (int episode = 0; episode < config.total_episodes; ++episode) {
    // Batch: next indices of a shuffled pass, reshuffled when exhausted.
    std::vector<LaneSample> augmented;
    std::vector<const LaneSample*> batch;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&data.samples[order[cursor++]]);
    }
    if (config.augment.enabled) {
      augmented.reserve(batch.size());
      for (auto& s : batch) {
        augmented.push_back(augment(*s, sample_augment(rng(), config.augment)));
        s = &augmented.back();
      }
    }
    std::vector<std::uint8_t> labels, bits;
    for (const LaneSample* s : batch) {
      labels.insert(labels.end(), s->labels.begin(), s->labels.end());
      bits.insert(bits.end(), s->exist.begin(), s->exist.end());
    }

    EpisodeRecord rec;
    rec.episode = episode;
    rec.sad_active = sad && episode >= sad->activation_episode;
    {
      Tape<Scalar> tape;
      TapeScope<Scalar> scope(tape);
      ForwardOutput<Scalar> out = model.forward(batch_images<Scalar>(batch), true);
      DistillSettings ds;
      if (sad) ds = {sad->paths, rec.sad_active, sad->detach_target, sad->allow_backward_paths};
      LossInputs<Scalar> in{out.seg_scores, labels, out.exist_probs, bits, out.activations};
      LossTerms<Scalar> terms = total_loss(in, weights, ds);
      Tensor<Scalar> total = terms.total;
      for (std::size_t k : head_of) {
        Tensor<Scalar> ce = seg_ce_loss(out.deep_heads[k], labels, 1.0);
        rec.deep.push_back(static_cast<double>(ce.item()));
        total = add(total, ce);
      }
      rec.seg = static_cast<double>(terms.seg.item());
      rec.iou = static_cast<double>(terms.iou.item());
      rec.exist = static_cast<double>(terms.exist.item());
      rec.distill = static_cast<double>(terms.distill.item());
      rec.total = static_cast<double>(total.item());
      if (!std::isfinite(rec.total)) throw TrainingDiverged(episode, "non-finite loss " + std::to_string(rec.total));
      tape.backward(total);
    }

    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<Scalar>& p = params[i];
      if (!p.has_grad()) continue;
      if (velocity.empty()) {
        p.value_mut() -= lr * p.grad();
      } else {
        velocity[i] = mu * velocity[i] + p.grad();
        p.value_mut() -= lr * velocity[i];
      }
      p.zero_grad();
    }
    if (hooks.on_step) hooks.on_step(episode + 1, model);

    const bool last = episode + 1 == config.total_episodes;
    if (val && ((episode + 1) % config.val_every == 0 || last)) {
      const double f1 = evaluate_f1(model, *val, config.eval).f1;
      rec.val_f1 = f1;
      result.final_val_f1 = f1;
      if (f1 > result.best_val_f1) {
        result.best_val_f1 = f1;
        result.best_episode = episode + 1;
        if (hooks.on_best) hooks.on_best(episode + 1, f1, model);
      }
    }
    if (hooks.on_record) hooks.on_record(rec);
    result.log.push_back(std::move(rec));
  }
  return result;
}

}  // namespace

template <typename Scalar>
TrainResult train(LaneModel<Scalar>& model, const Dataset& data, const Dataset* val, const TrainConfig& config,
                  const SadConfig& sad, const LossWeights& weights, const TrainHooks<Scalar>& hooks) {
  if (config.mode == TrainMode::kDeepSupervision) {
    return run(model, data, val, config, nullptr, weights, model.config().deep_supervision_blocks, hooks);
  }
  return run(model, data, val, config, config.mode == TrainMode::kSad ? &sad : nullptr, weights, {}, hooks);
}

template <typename Scalar>
TrainResult train_deep_supervision(LaneModel<Scalar>& model, const Dataset& data, const Dataset* val,
                                   const TrainConfig& config, const LossWeights& weights,
                                   const std::vector<int>& blocks, const TrainHooks<Scalar>& hooks) {
  return run(model, data, val, config, nullptr, weights, blocks, hooks);
}

template <typename Scalar>
std::pair<ArrayX<float>, ArrayX<float>> predict(LaneModel<Scalar>& model,
                                                const std::vector<const LaneSample*>& batch) {
  NoGrad<Scalar> no_grad;
  ForwardOutput<Scalar> out = model.forward(batch_images<Scalar>(batch), false);
  ArrayX<float> probs = channel_softmax(out.seg_scores).value().template cast<float>();
  ArrayX<float> exist = ArrayX<float>::Ones(static_cast<Index>(batch.size()) * kLaneSlots);
  if (out.exist_probs.defined()) exist = out.exist_probs.value().template cast<float>();
  return {std::move(probs), std::move(exist)};
}

template <typename Scalar>
F1Result evaluate_f1(LaneModel<Scalar>& model, const Dataset& data, const EvalConfig& config) {
  const std::size_t count = config.max_samples > 0
                                ? std::min<std::size_t>(data.samples.size(), static_cast<std::size_t>(config.max_samples))
                                : data.samples.size();
  const ModelConfig& mc = model.config();
  const Index h = mc.input_h, w = mc.input_w, c = mc.num_classes, plane = h * w;
  long tp = 0, fp = 0, fn = 0;
  constexpr std::size_t kChunk = 8;
  for (std::size_t start = 0; start < count; start += kChunk) {
    std::vector<const LaneSample*> batch;
    for (std::size_t i = start; i < std::min(count, start + kChunk); ++i) batch.push_back(&data.samples[i]);
    const auto [probs, exist] = predict(model, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto lanes = decode_lanes(probs.data() + static_cast<Index>(i) * c * plane, c, h, w,
                                      exist.data() + static_cast<Index>(i) * mc.lane_slots, config.post);
      std::vector<LanePoints> pred;
      for (const auto& l : lanes) pred.push_back(l.sample(1.0));
      const F1Result r = culane_f1(pred, reference_lanes(*batch[i]), h, w, config.line_width, config.iou_thresh);
      tp += r.tp;
      fp += r.fp;
      fn += r.fn;
    }
  }
  return f1_from_counts(tp, fp, fn);
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& stem, LaneModel<Scalar>& model, int episode, std::uint64_t seed) {
  Json manifest{{"config", to_json(model.config())}, {"episode", episode}, {"seed", seed}};
  std::filesystem::path json_path = stem, bin_path = stem;
  json_path += ".json";
  bin_path += ".bin";
  write_text(json_path, manifest.dump(2) + "\n");
  if (bin_path.has_parent_path()) std::filesystem::create_directories(bin_path.parent_path());
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw IoError("cannot open " + bin_path.string() + " for writing");
  model.visit_state([&](const std::string&, const Shape& shape, ArrayX<Scalar>& v) {
    const ArrayX<float> f = v.template cast<float>();
    write_sadt(out, shape, f.data());
  });
}

template <typename Scalar>
LaneModel<Scalar> load_checkpoint(const std::filesystem::path& stem, int* episode) {
  std::filesystem::path json_path = stem, bin_path = stem;
  json_path += ".json";
  bin_path += ".bin";
  Json manifest;
  try {
    manifest = Json::parse(read_text(json_path));
  } catch (const Json::exception& e) {
    throw IoError(json_path.string() + ": " + e.what());
  }
  auto model = LaneModel<Scalar>::build(model_config_from_json(manifest.at("config")), 0);
  if (episode) *episode = manifest.value("episode", 0);
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + bin_path.string());
  model.visit_state([&](const std::string& name, const Shape& shape, ArrayX<Scalar>& v) {
    SadtTensor t = read_sadt(in);
    if (t.shape != shape) {
      throw IoError(bin_path.string() + ": " + name + " has shape " + to_string(t.shape) + ", expected " +
                    to_string(shape));
    }
    v = Eigen::Map<const ArrayX<float>>(t.values.data(), static_cast<Index>(t.values.size())).template cast<Scalar>();
  });
  return model;
}

#define SADKIT_INSTANTIATE_TRAINER(S)                                                                               \
  template TrainResult train(LaneModel<S>&, const Dataset&, const Dataset*, const TrainConfig&, const SadConfig&, \
                             const LossWeights&, const TrainHooks<S>&);                                          \
  template TrainResult train_deep_supervision(LaneModel<S>&, const Dataset&, const Dataset*, const TrainConfig&,  \
                                              const LossWeights&, const std::vector<int>&, const TrainHooks<S>&); \
  template std::pair<ArrayX<float>, ArrayX<float>> predict(LaneModel<S>&, const std::vector<const LaneSample*>&); \
  template F1Result evaluate_f1(LaneModel<S>&, const Dataset&, const EvalConfig&);                                \
  template void save_checkpoint(const std::filesystem::path&, LaneModel<S>&, int, std::uint64_t);                 \
  template LaneModel<S> load_checkpoint(const std::filesystem::path&, int*);

SADKIT_INSTANTIATE_TRAINER(float)
SADKIT_INSTANTIATE_TRAINER(double)

#undef SADKIT_INSTANTIATE_TRAINER

}  // namespace sadkit
