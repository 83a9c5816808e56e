#include "sadkit/config.hpp"

#include <set>
#include <stdexcept>

namespace sadkit {

namespace {

// Reads fields from one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }
  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw std::invalid_argument("unknown config key '" + where_ + "." + key + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw std::invalid_argument("config key '" + where_ + "." + key + "': " + e.what());
    }
  }

  const Json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

Json paths_to_json(const PathSet& paths) {
  Json a = Json::array();
  for (const auto& p : paths) a.push_back({p.from, p.to});
  return a;
}

PathSet paths_from_json(const Json& j, const std::string& where) {
  if (j.is_string()) return parse_paths(j.get<std::string>());
  if (!j.is_array()) throw std::invalid_argument(where + ": expected [[i,j],...] or \"P23+P34\"");
  PathSet out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2) throw std::invalid_argument(where + ": each path is a pair [i, j]");
    out.push_back({p[0].get<int>(), p[1].get<int>()});
  }
  return out;
}

}  // namespace

Json to_json(const ModelConfig& c) {
  return {{"input_h", c.input_h},
          {"input_w", c.input_w},
          {"input_channels", c.input_channels},
          {"num_classes", c.num_classes},
          {"lane_slots", c.lane_slots},
          {"encoder_widths", c.encoder_widths},
          {"decoder_widths", c.decoder_widths},
          {"exist_channels", c.exist_channels},
          {"exist_hidden", c.exist_hidden},
          {"enable_e3_e4_concat", c.enable_e3_e4_concat},
          {"existence_branch", c.existence_branch},
          {"deep_supervision_blocks", c.deep_supervision_blocks}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  Fields f(j, "model");
  f.get("input_h", c.input_h);
  f.get("input_w", c.input_w);
  f.get("input_channels", c.input_channels);
  f.get("num_classes", c.num_classes);
  f.get("lane_slots", c.lane_slots);
  f.get("encoder_widths", c.encoder_widths);
  f.get("decoder_widths", c.decoder_widths);
  f.get("exist_channels", c.exist_channels);
  f.get("exist_hidden", c.exist_hidden);
  f.get("enable_e3_e4_concat", c.enable_e3_e4_concat);
  f.get("existence_branch", c.existence_branch);
  f.get("deep_supervision_blocks", c.deep_supervision_blocks);
  return c;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["model"] = to_json(c.model);
  const TrainConfig& t = c.train;
  j["train"] = {{"learning_rate", t.learning_rate},
                {"momentum", t.momentum},
                {"batch_size", t.batch_size},
                {"total_episodes", t.total_episodes},
                {"seed", t.seed},
                {"mode", to_string(t.mode)},
                {"val_every", t.val_every},
                {"augment",
                 {{"enabled", t.augment.enabled},
                  {"max_rotate_deg", t.augment.max_rotate_deg},
                  {"min_crop_fraction", t.augment.min_crop_fraction},
                  {"hflip", t.augment.hflip}}},
                {"eval",
                 {{"row_stride", t.eval.post.row_stride},
                  {"exist_thresh", t.eval.post.exist_thresh},
                  {"point_thresh", t.eval.post.point_thresh},
                  {"smooth", t.eval.post.smooth},
                  {"line_width", t.eval.line_width},
                  {"iou_thresh", t.eval.iou_thresh},
                  {"max_samples", t.eval.max_samples}}}};
  j["sad"] = {{"paths", paths_to_json(c.sad.paths)},
              {"activation_episode", c.sad.activation_episode},
              {"detach_target", c.sad.detach_target},
              {"allow_backward_paths", c.sad.allow_backward_paths}};
  j["loss"] = {{"alpha", c.loss.alpha},
               {"beta", c.loss.beta},
               {"gamma", c.loss.gamma},
               {"background_ce_weight", c.loss.background_ce_weight},
               {"iou_form", to_string(c.loss.iou_form)}};
  const SynthConfig& s = c.synth;
  j["synth"] = {{"height", s.height},
                {"width", s.width},
                {"min_lanes", s.min_lanes},
                {"max_lanes", s.max_lanes},
                {"lane_width", s.lane_width},
                {"vp_jitter", s.vp_jitter},
                {"max_curvature", s.max_curvature},
                {"max_offset", s.max_offset},
                {"dashed_probability", s.dashed_probability},
                {"max_occluders", s.max_occluders},
                {"min_illumination", s.min_illumination},
                {"max_illumination", s.max_illumination},
                {"max_noise", s.max_noise}};
  j["data"] = {{"train_dir", c.data.train_dir},   {"val_dir", c.data.val_dir},
               {"train_count", c.data.train_count}, {"val_count", c.data.val_count},
               {"seed", c.data.seed},             {"train_label_width", c.data.train_label_width}};
  j["deep_supervision_blocks"] = c.deep_supervision_blocks;
  j["ablation_path_sets"] = Json::array();
  for (const auto& ps : c.ablation_path_sets) j["ablation_path_sets"].push_back(paths_to_json(ps));
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  Fields top(j, "config");
  if (const Json* m = top.sub("model")) c.model = model_config_from_json(*m);
  if (const Json* tj = top.sub("train")) {
    TrainConfig& t = c.train;
    Fields f(*tj, "train");
    f.get("learning_rate", t.learning_rate);
    f.get("momentum", t.momentum);
    f.get("batch_size", t.batch_size);
    f.get("total_episodes", t.total_episodes);
    f.get("seed", t.seed);
    std::string mode = to_string(t.mode);
    f.get("mode", mode);
    t.mode = parse_train_mode(mode);
    f.get("val_every", t.val_every);
    if (const Json* a = f.sub("augment")) {
      Fields g(*a, "train.augment");
      g.get("enabled", t.augment.enabled);
      g.get("max_rotate_deg", t.augment.max_rotate_deg);
      g.get("min_crop_fraction", t.augment.min_crop_fraction);
      g.get("hflip", t.augment.hflip);
    }
    if (const Json* e = f.sub("eval")) {
      Fields g(*e, "train.eval");
      g.get("row_stride", t.eval.post.row_stride);
      g.get("exist_thresh", t.eval.post.exist_thresh);
      g.get("point_thresh", t.eval.post.point_thresh);
      g.get("smooth", t.eval.post.smooth);
      g.get("line_width", t.eval.line_width);
      g.get("iou_thresh", t.eval.iou_thresh);
      g.get("max_samples", t.eval.max_samples);
    }
  }
  if (const Json* sj = top.sub("sad")) {
    Fields f(*sj, "sad");
    if (const Json* p = f.sub("paths")) c.sad.paths = paths_from_json(*p, f.path("paths"));
    f.get("activation_episode", c.sad.activation_episode);
    f.get("detach_target", c.sad.detach_target);
    f.get("allow_backward_paths", c.sad.allow_backward_paths);
  }
  if (const Json* lj = top.sub("loss")) {
    Fields f(*lj, "loss");
    f.get("alpha", c.loss.alpha);
    f.get("beta", c.loss.beta);
    f.get("gamma", c.loss.gamma);
    f.get("background_ce_weight", c.loss.background_ce_weight);
    std::string form = to_string(c.loss.iou_form);
    f.get("iou_form", form);
    c.loss.iou_form = parse_iou_form(form);
  }
  if (const Json* sj = top.sub("synth")) {
    SynthConfig& s = c.synth;
    Fields f(*sj, "synth");
    f.get("height", s.height);
    f.get("width", s.width);
    f.get("min_lanes", s.min_lanes);
    f.get("max_lanes", s.max_lanes);
    f.get("lane_width", s.lane_width);
    f.get("vp_jitter", s.vp_jitter);
    f.get("max_curvature", s.max_curvature);
    f.get("max_offset", s.max_offset);
    f.get("dashed_probability", s.dashed_probability);
    f.get("max_occluders", s.max_occluders);
    f.get("min_illumination", s.min_illumination);
    f.get("max_illumination", s.max_illumination);
    f.get("max_noise", s.max_noise);
  }
  if (const Json* dj = top.sub("data")) {
    Fields f(*dj, "data");
    f.get("train_dir", c.data.train_dir);
    f.get("val_dir", c.data.val_dir);
    f.get("train_count", c.data.train_count);
    f.get("val_count", c.data.val_count);
    f.get("seed", c.data.seed);
    f.get("train_label_width", c.data.train_label_width);
  }
  top.get("deep_supervision_blocks", c.deep_supervision_blocks);
  if (const Json* a = top.sub("ablation_path_sets")) {
    if (!a->is_array()) throw std::invalid_argument("ablation_path_sets: expected an array of path sets");
    c.ablation_path_sets.clear();
    for (const auto& ps : *a) c.ablation_path_sets.push_back(paths_from_json(ps, "ablation_path_sets"));
  }
  return c;
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' must look like dotted.key=value");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::exception&) {
    value = text;
  }
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw std::invalid_argument("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) *node = Json::object();
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

}  // namespace sadkit
