#include "sadkit/cli.hpp"

#include "sadkit/attention.hpp"
#include "sadkit/config.hpp"
#include "sadkit/io.hpp"
#include "sadkit/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

namespace sadkit {

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--out", o.out, "output directory");
  app->add_option("--seed", o.seed, "seed override");
  app->add_option("--set", o.overrides, "dotted.key=value override (repeatable)");
}

// Config file, then dotted overrides, then the flags given to the subcommand.
RunConfig resolve(const CommonOptions& o, const std::vector<std::string>& extra) {
  Json doc = Json::object();
  if (!o.config.empty()) {
    try {
      doc = Json::parse(read_text(o.config));
    } catch (const Json::exception& e) {
      throw std::invalid_argument(o.config + ": " + e.what());
    }
  }
  for (const auto& s : o.overrides) apply_override(doc, s);
  for (const auto& s : extra) apply_override(doc, s);
  return run_config_from_json(doc);
}

// Every run leaves its resolved config and a manifest beside its outputs.
void write_manifest(const fs::path& out, const std::string& command, const CommonOptions& o, const RunConfig& c,
                    std::uint64_t seed) {
  fs::create_directories(out);
  write_text(out / "config.json", to_json(c).dump(2) + "\n");
  Json m{{"subcommand", command}, {"config", o.config}, {"out", o.out}, {"seed", seed}};
  write_text(out / "run.json", m.dump(2) + "\n");
}

Dataset load_training_data(const RunConfig& c, const std::string& dir) {
  Dataset d = load_dataset(dir);
  if (c.data.train_label_width > 0) {
    for (auto& s : d.samples) {
      s.labels = dilate_labels(s.labels, s.height, s.width, c.data.train_label_width);
      s.exist = existence_from_labels(s.labels);
    }
  }
  return d;
}

ModelConfig model_for(const RunConfig& c, const Dataset& d) {
  ModelConfig m = c.model;
  m.input_h = d.height;
  m.input_w = d.width;
  if (c.train.mode == TrainMode::kDeepSupervision) m.deep_supervision_blocks = c.deep_supervision_blocks;
  return m;
}

struct TrainOutcome {
  TrainResult result;
  fs::path best;
};

// One training run with logs and checkpoints under `out`.
TrainOutcome train_run(const RunConfig& c, const Dataset& train_set, const Dataset& val_set, const fs::path& out,
                       const std::vector<int>& save_at, std::ostream& err) {
  auto model = LaneModel<float>::build(model_for(c, train_set), c.train.seed);
  fs::create_directories(out / "checkpoints");
  std::ofstream log(out / "log.jsonl");
  if (!log) throw IoError("cannot write " + (out / "log.jsonl").string());
  TrainHooks<float> hooks;
  hooks.on_record = [&](const EpisodeRecord& r) {
    log << r.to_json() << "\n";
    if (r.val_f1) {
      err << "episode " << r.episode + 1 << " loss " << r.total << " val_f1 " << *r.val_f1
          << (r.sad_active ? " (sad)" : "") << "\n";
    }
  };
  hooks.on_step = [&](int episode, LaneModel<float>& m) {
    if (std::find(save_at.begin(), save_at.end(), episode) != save_at.end()) {
      save_checkpoint(out / "checkpoints" / ("episode_" + std::to_string(episode)), m, episode, c.train.seed);
    }
  };
  TrainOutcome o;
  o.best = out / "checkpoints" / "best";
  hooks.on_best = [&](int episode, double, LaneModel<float>& m) { save_checkpoint(o.best, m, episode, c.train.seed); };
  if (c.train.mode == TrainMode::kDeepSupervision) {
    o.result = train_deep_supervision(model, train_set, &val_set, c.train, c.loss, c.deep_supervision_blocks, hooks);
  } else {
    o.result = train(model, train_set, &val_set, c.train, c.sad, c.loss, hooks);
  }
  save_checkpoint(out / "checkpoints" / "final", model, c.train.total_episodes, c.train.seed);
  Json summary{{"mode", to_string(c.train.mode)},
               {"best_val_f1", o.result.best_val_f1},
               {"best_episode", o.result.best_episode},
               {"final_val_f1", o.result.final_val_f1}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  return o;
}

std::vector<std::uint8_t> lane_mask(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> m(labels.size());
  std::transform(labels.begin(), labels.end(), m.begin(), [](auto l) { return l ? 255 : 0; });
  return m;
}

// One-hot maps of the labels with certain existence: the identity prediction.
std::pair<ArrayX<float>, ArrayX<float>> oracle_prediction(const LaneSample& s, Index classes) {
  const Index plane = s.height * s.width;
  ArrayX<float> probs = ArrayX<float>::Zero(classes * plane);
  for (Index i = 0; i < plane; ++i) probs[s.labels[static_cast<std::size_t>(i)] * plane + i] = 1.0f;
  ArrayX<float> exist(kLaneSlots);
  for (int k = 0; k < kLaneSlots; ++k) exist[k] = s.exist[static_cast<std::size_t>(k)];
  return {std::move(probs), std::move(exist)};
}

int cmd_gen_data(const CommonOptions& o, std::ostream& out) {
  RunConfig c = resolve(o, {});
  if (o.seed) c.data.seed = *o.seed;
  const fs::path dir = o.out;
  write_manifest(dir, "gen-data", o, c, c.data.seed);
  const Dataset train_set = generate_dataset(c.data.train_count, c.data.seed, c.synth);
  write_dataset(dir / "train", train_set, c.data.seed, c.synth);
  const std::uint64_t val_seed = sample_seed(c.data.seed, 0xffffffffULL);
  const Dataset val_set = generate_dataset(c.data.val_count, val_seed, c.synth);
  write_dataset(dir / "val", val_set, val_seed, c.synth);
  out << Json{{"train", (dir / "train").string()}, {"val", (dir / "val").string()},
              {"train_count", c.data.train_count}, {"val_count", c.data.val_count}}
             .dump()
      << "\n";
  return 0;
}

struct TrainOptions {
  std::string mode;
  std::optional<int> activation;
  std::vector<int> save_at;
};

int cmd_train(const CommonOptions& o, const TrainOptions& t, std::ostream& out, std::ostream& err) {
  std::vector<std::string> extra;
  if (!t.mode.empty()) extra.push_back("train.mode=\"" + t.mode + "\"");
  if (t.activation) extra.push_back("sad.activation_episode=" + std::to_string(*t.activation));
  RunConfig c = resolve(o, extra);
  if (o.seed) c.train.seed = *o.seed;
  const fs::path dir = o.out;
  write_manifest(dir, "train", o, c, c.train.seed);
  const Dataset train_set = load_training_data(c, c.data.train_dir);
  const Dataset val_set = load_dataset(c.data.val_dir);
  const TrainOutcome r = train_run(c, train_set, val_set, dir, t.save_at, err);
  out << read_text(dir / "summary.json");
  return 0;
}

struct InferOptions {
  std::string checkpoint;
  std::string data;
  bool gt_oracle = false;
};

int cmd_infer(const CommonOptions& o, const InferOptions& io, std::ostream& out) {
  RunConfig c = resolve(o, {});
  const fs::path dir = o.out;
  write_manifest(dir, "infer", o, c, c.train.seed);
  const Dataset data = load_dataset(io.data.empty() ? c.data.val_dir : io.data);
  std::optional<LaneModel<float>> model;
  if (!io.gt_oracle) {
    if (io.checkpoint.empty()) throw std::invalid_argument("infer: --checkpoint is required without --gt-oracle");
    model = load_checkpoint<float>(io.checkpoint);
  }
  const Index h = data.height, w = data.width, classes = kLaneSlots + 1, plane = h * w;
  for (const char* sub : {"probs", "lanes", "masks"}) fs::create_directories(dir / sub);
  for (std::size_t start = 0; start < data.samples.size(); start += 8) {
    std::vector<const LaneSample*> batch;
    for (std::size_t i = start; i < std::min(data.samples.size(), start + 8); ++i) batch.push_back(&data.samples[i]);
    // Model inference runs on the whole batch at once.
    ArrayX<float> batch_probs, batch_exist;
    if (!io.gt_oracle) std::tie(batch_probs, batch_exist) = predict(*model, batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::string& id = data.ids[start + i];
      ArrayX<float> probs, exist;
      if (io.gt_oracle) {
        std::tie(probs, exist) = oracle_prediction(*batch[i], classes);
      } else {
        probs = batch_probs.segment(static_cast<Index>(i) * classes * plane, classes * plane);
        exist = batch_exist.segment(static_cast<Index>(i) * kLaneSlots, kLaneSlots);
      }
      write_sadt(dir / "probs" / (id + ".sadt"), {classes, h, w}, probs.data());
      std::vector<LanePoints> lanes;
      for (const auto& l : decode_lanes(probs.data(), classes, h, w, exist.data(), c.train.eval.post)) {
        lanes.push_back(l.sample(1.0));
      }
      write_text(dir / "lanes" / (id + ".json"), polylines_to_json(lanes) + "\n");
      GrayImage mask{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(plane), 0)};
      for (Index p = 0; p < plane; ++p) {
        Index best = 0;
        for (Index k = 1; k < classes; ++k) {
          if (probs[k * plane + p] > probs[best * plane + p]) best = k;
        }
        mask.pixels[static_cast<std::size_t>(p)] = best ? 255 : 0;
      }
      write_pgm(dir / "masks" / (id + ".pgm"), mask);
    }
  }
  out << Json{{"samples", data.samples.size()}, {"out", dir.string()}}.dump() << "\n";
  return 0;
}

struct EvalOptions {
  std::string pred;
  std::string gt;
  bool masks = false;
};

std::vector<fs::path> files_with(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ext) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_eval(const CommonOptions& o, const EvalOptions& e, std::ostream& out) {
  RunConfig c = resolve(o, {});
  const fs::path dir = o.out;
  write_manifest(dir, "eval", o, c, c.train.seed);
  MetricReport report;
  if (e.masks) {
    std::vector<std::uint8_t> pred_all, gt_all;
    const fs::path gt_dir = fs::exists(fs::path(e.gt) / "lbl") ? fs::path(e.gt) / "lbl" : fs::path(e.gt);
    for (const auto& p : files_with(e.pred, ".pgm")) {
      const fs::path g = gt_dir / p.filename();
      if (!fs::exists(g)) throw IoError("no ground truth for " + p.string());
      const GrayImage a = read_pgm(p), b = read_pgm(g);
      if (a.height != b.height || a.width != b.width) throw IoError(p.string() + ": size differs from ground truth");
      pred_all.insert(pred_all.end(), a.pixels.begin(), a.pixels.end());
      const auto m = lane_mask(b.pixels);
      gt_all.insert(gt_all.end(), m.begin(), m.end());
    }
    if (gt_all.empty()) throw IoError(e.pred + ": no .pgm masks");
    report.pixel = pixel_metrics(pred_all, gt_all);
  } else {
    // Ground truth is a dataset directory or a directory of polyline files.
    const bool dataset = fs::exists(fs::path(e.gt) / "index.json");
    std::map<std::string, std::vector<LanePoints>> gt;
    Index h = c.synth.height, w = c.synth.width;
    if (dataset) {
      const Dataset d = load_dataset(e.gt);
      h = d.height;
      w = d.width;
      for (std::size_t i = 0; i < d.samples.size(); ++i) gt[d.ids[i]] = reference_lanes(d.samples[i]);
    } else {
      for (const auto& p : files_with(e.gt, ".json")) gt[p.stem().string()] = polylines_from_json(read_text(p));
    }
    const fs::path pred_dir = fs::exists(fs::path(e.pred) / "lanes") ? fs::path(e.pred) / "lanes" : fs::path(e.pred);
    long tp = 0, fp = 0, fn = 0, correct = 0, points = 0, pred_lanes = 0, pred_matched = 0, gt_lanes = 0,
         gt_matched = 0;
    std::size_t seen = 0;
    for (const auto& p : files_with(pred_dir, ".json")) {
      const auto it = gt.find(p.stem().string());
      if (it == gt.end()) throw IoError("no ground truth for " + p.string());
      ++seen;
      const auto pred = polylines_from_json(read_text(p));
      const F1Result f = culane_f1(pred, it->second, h, w, c.train.eval.line_width, c.train.eval.iou_thresh);
      tp += f.tp;
      fp += f.fp;
      fn += f.fn;
      long npts = 0;
      for (const auto& l : it->second) npts += static_cast<long>(l.size());
      if (npts > 0) {
        const TusimpleResult t = tusimple_accuracy(pred, it->second);
        correct += t.correct_points;
        points += t.gt_points;
        gt_lanes += static_cast<long>(it->second.size());
        gt_matched += t.matched_lanes;
        pred_lanes += static_cast<long>(pred.size());
        pred_matched += static_cast<long>(pred.size()) - std::lround(t.fp_rate * static_cast<double>(pred.size()));
      }
    }
    if (seen != gt.size()) {
      throw IoError("predictions cover " + std::to_string(seen) + " of " + std::to_string(gt.size()) + " samples");
    }
    report.culane = f1_from_counts(tp, fp, fn);
    if (points > 0) {
      TusimpleResult t;
      t.correct_points = correct;
      t.gt_points = points;
      t.matched_lanes = static_cast<int>(gt_matched);
      t.accuracy = static_cast<double>(correct) / static_cast<double>(points);
      t.fp_rate = pred_lanes ? static_cast<double>(pred_lanes - pred_matched) / static_cast<double>(pred_lanes) : 0;
      t.fn_rate = static_cast<double>(gt_lanes - gt_matched) / static_cast<double>(gt_lanes);
      report.tusimple = t;
    }
  }
  const std::string json = report.to_json();
  write_text(dir / "metrics.json", json + "\n");
  out << json << "\n";
  return 0;
}

struct ExportOptions {
  std::vector<std::string> checkpoints;
  std::string data;
  std::size_t index = 0;
  std::string mapping = "sum_p";
  double p = 2;
};

int cmd_export_attention(const CommonOptions& o, const ExportOptions& x, std::ostream& out) {
  RunConfig c = resolve(o, {});
  const fs::path dir = o.out;
  write_manifest(dir, "export-attention", o, c, c.train.seed);
  const Dataset data = load_dataset(x.data.empty() ? c.data.val_dir : x.data);
  if (x.index >= data.samples.size()) throw std::invalid_argument("export-attention: --index out of range");
  const MappingFunction fn = parse_mapping_function(x.mapping);
  const LaneSample& s = data.samples[x.index];
  Json written = Json::array();
  for (const auto& stem : x.checkpoints) {
    auto model = load_checkpoint<float>(stem);
    NoGrad<float> no_grad;
    const Tensor<float> input({1, 3, s.height, s.width}, s.image);
    const ForwardOutput<float> fwd = model.forward(input, false);
    const fs::path sub = dir / fs::path(stem).filename();
    fs::create_directories(sub);
    for (int k = 0; k < kEncoderBlocks; ++k) {
      const Tensor<float>& a = fwd.activations[static_cast<std::size_t>(k)];
      // The training-time map (squared sum, resized, softmaxed) unless another
      // mapping function is asked for.
      const Tensor<float> m = fn == MappingFunction::kSumP && x.p == 2 ? atgen(a, s.height, s.width)
                                                                        : attention_map(a, fn, x.p);
      const Index mh = m.shape()[m.shape().size() - 2], mw = m.shape().back();
      const fs::path file = sub / ("A" + std::to_string(k + 1) + ".pgm");
      write_pgm(file, to_gray(m.value().data(), mh, mw));
      written.push_back(file.string());
    }
  }
  out << Json{{"written", written}}.dump() << "\n";
  return 0;
}

int cmd_ablate_paths(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  RunConfig c = resolve(o, {});
  if (o.seed) c.train.seed = *o.seed;
  const fs::path dir = o.out;
  write_manifest(dir, "ablate-paths", o, c, c.train.seed);
  if (c.ablation_path_sets.empty()) throw std::invalid_argument("ablate-paths: no path sets configured");
  for (const auto& ps : c.ablation_path_sets) validate_paths(ps, kEncoderBlocks, c.sad.allow_backward_paths);
  const Dataset train_set = load_training_data(c, c.data.train_dir);
  const Dataset val_set = load_dataset(c.data.val_dir);
  Json rows = Json::array();
  std::ostringstream table;
  table << "| paths | val F1 | best episode |\n|---|---|---|\n";
  for (const auto& ps : c.ablation_path_sets) {
    RunConfig run = c;
    run.train.mode = TrainMode::kSad;
    run.sad.paths = ps;
    const std::string name = to_string(ps);
    err << "ablation " << name << "\n";
    const TrainOutcome r = train_run(run, train_set, val_set, dir / name, {}, err);
    rows.push_back({{"paths", name}, {"val_f1", r.result.best_val_f1}, {"best_episode", r.result.best_episode}});
    table << "| " << name << " | " << std::fixed << std::setprecision(4) << r.result.best_val_f1 << " | "
          << r.result.best_episode << " |\n";
  }
  write_text(dir / "ablation.json", Json{{"rows", rows}}.dump(2) + "\n");
  write_text(dir / "ablation.md", table.str());
  out << table.str();
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lane detection with self attention distillation"};
  app.require_subcommand(1);
  CommonOptions common;

  auto* gen = app.add_subcommand("gen-data", "generate synthetic train/val sets");
  add_common(gen, common);

  TrainOptions topt;
  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, common);
  tr->add_option("--mode", topt.mode, "baseline, sad or deep_supervision");
  tr->add_option("--activation-episode", topt.activation, "episode at which distillation joins the loss");
  tr->add_option("--save-at", topt.save_at, "extra checkpoint episodes");

  InferOptions iopt;
  auto* inf = app.add_subcommand("infer", "write probability maps and lanes");
  add_common(inf, common);
  inf->add_option("--checkpoint", iopt.checkpoint, "checkpoint stem");
  inf->add_option("--data", iopt.data, "dataset directory");
  inf->add_flag("--gt-oracle", iopt.gt_oracle, "predict the ground truth itself");

  EvalOptions eopt;
  auto* ev = app.add_subcommand("eval", "score predictions");
  add_common(ev, common);
  ev->add_option("--pred", eopt.pred, "infer output or a directory of lane files")->required();
  ev->add_option("--gt", eopt.gt, "dataset or lane directory")->required();
  ev->add_flag("--masks", eopt.masks, "compare PGM masks instead of lanes");

  ExportOptions xopt;
  auto* ex = app.add_subcommand("export-attention", "write attention maps of one sample");
  add_common(ex, common);
  ex->add_option("--checkpoint", xopt.checkpoints, "checkpoint stems")->required();
  ex->add_option("--data", xopt.data, "dataset directory");
  ex->add_option("--index", xopt.index, "sample index");
  ex->add_option("--mapping", xopt.mapping, "sum, sum_p or max_p");
  ex->add_option("--p", xopt.p, "exponent");

  auto* ab = app.add_subcommand("ablate-paths", "train each configured path set");
  add_common(ab, common);

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    }
    if (gen->parsed()) return cmd_gen_data(common, out);
    if (tr->parsed()) return cmd_train(common, topt, out, err);
    if (inf->parsed()) return cmd_infer(common, iopt, out);
    if (ev->parsed()) return cmd_eval(common, eopt, out);
    if (ex->parsed()) return cmd_export_attention(common, xopt, out);
    if (ab->parsed()) return cmd_ablate_paths(common, out, err);
    return 2;
  } catch (const CLI::ParseError& e) {
    err << Json{{"error", e.what()}, {"kind", "usage"}}.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << Json{{"error", e.what()}, {"kind", "runtime"}}.dump() << "\n";
    return 1;
  }
}

}  // namespace sadkit
