// SPDX-License-Identifier: Apache-2.0

#include "maskuno/cli/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "maskuno/core/digest.hpp"
#include "maskuno/eval/misrouting.hpp"
#include "maskuno/pipeline/checkpoint.hpp"
#include "maskuno/split/switch_split.hpp"
#include "maskuno/synth/annotations.hpp"
#include "maskuno/train/train.hpp"

namespace maskuno::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument:
      return kExitUsage;
    case ErrorKind::Divergence:
      return kExitDivergence;
    case ErrorKind::Incomparable:
      return kExitIncomparable;
    default:
      return kExitData;
  }
}

json to_json(const RunManifest& m) {
  return {{"format", "maskuno-run-manifest"},
          {"version", 1},
          {"command", m.command},
          {"args", m.args},
          {"resolved", m.resolved},
          {"inputs", m.inputs},
          {"outputs", m.outputs},
          {"out_root", m.out_root},
          {"seed", m.seed},
          {"wall_clock_seconds", m.wall_clock_seconds}};
}

RunManifest manifest_from_json(const json& j) {
  try {
    RunManifest m;
    m.command = j.at("command");
    m.args = j.at("args").get<std::vector<std::string>>();
    m.resolved = j.at("resolved");
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.out_root = j.at("out_root");
    m.seed = j.at("seed");
    m.wall_clock_seconds = j.at("wall_clock_seconds");
    return m;
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, std::string("run manifest: ") + e.what());
  }
}

RunManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Data, "cannot open manifest " + path.string());
  try {
    return manifest_from_json(json::parse(in));
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- predictions files

void write_predictions(const fs::path& path, const std::vector<synth::SceneSample>& samples,
                       const eval::Predictions& predictions) {
  json list = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (const auto& d : predictions[i]) {
      list.push_back({{"image_id", samples[i].sample_id},
                      {"class_id", d.label.id},
                      {"score", d.score},
                      {"bbox", {d.box.x1, d.box.y1, d.box.width(), d.box.height()}},
                      {"mask", {{"encoding", "bits-hex"}, {"data", synth::encode_mask_bits(d.mask)}}}});
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Data, "cannot write predictions " + path.string());
  out << json{{"format", "maskuno-predictions"}, {"version", 1}, {"predictions", list}}.dump() << "\n";
}

eval::Predictions read_predictions(const fs::path& path, const std::vector<synth::SceneSample>& samples) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Data, "cannot open predictions " + path.string());
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < samples.size(); ++i) index[samples[i].sample_id] = i;
  eval::Predictions out(samples.size());
  try {
    const json doc = json::parse(in);
    std::size_t k = 0;
    for (const auto& p : doc.at("predictions")) {
      const std::string where = path.string() + ": prediction #" + std::to_string(k++);
      const auto it = index.find(p.at("image_id").get<std::int64_t>());
      if (it == index.end()) fail(ErrorKind::Data, where + " names an unknown image");
      const auto& s = samples[it->second];
      const auto bbox = p.at("bbox").get<std::vector<double>>();
      if (bbox.size() != 4) fail(ErrorKind::Parse, where + ": bbox needs 4 numbers");
      core::Detection d;
      d.box = {bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]};
      d.label = core::ClassLabel{p.at("class_id").get<int>()};
      d.score = p.at("score");
      d.mask = synth::decode_mask_bits(p.at("mask").at("data"), s.height, s.width);
      out[it->second].push_back(std::move(d));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": " + e.what());
  }
  return out;
}

namespace {

// ---------------------------------------------------------------- plumbing

struct Context {
  fs::path out_root;
  std::ostream& out;
  std::ostream& err;
  RunManifest manifest;
  std::map<std::string, std::string> resolved_inputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

fs::path resolve_out(const Context& ctx, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : ctx.out_root / path;
}

fs::path resolve_in(Context& ctx, const std::string& p) {
  fs::path path(p);
  if (!path.is_absolute() && !fs::exists(path) && fs::exists(ctx.out_root / path)) path = ctx.out_root / path;
  if (!fs::exists(path)) fail(ErrorKind::Data, "input not found: " + p);
  path = fs::absolute(path).lexically_normal();
  ctx.resolved_inputs[p] = path.generic_string();
  return path;
}

std::string relative_to_root(const Context& ctx, const fs::path& p) {
  const fs::path abs = fs::absolute(p).lexically_normal();
  const fs::path root = fs::absolute(ctx.out_root).lexically_normal();
  const fs::path rel = abs.lexically_relative(root);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return abs.generic_string();
}

void add_input(Context& ctx, const fs::path& p) {
  if (fs::is_directory(p))
    ctx.manifest.inputs[p.generic_string()] = synth::dataset_digest(p);
  else
    ctx.manifest.inputs[p.generic_string()] = core::file_digest(p);
}

void add_output(Context& ctx, const fs::path& p) { ctx.manifest.outputs[relative_to_root(ctx, p)] = core::file_digest(p); }

void write_manifest(Context& ctx, const fs::path& primary) {
  fs::path path = primary;
  path += ".manifest.json";
  for (std::size_t i = 1; i < ctx.manifest.args.size(); ++i) {
    const auto it = ctx.resolved_inputs.find(ctx.manifest.args[i]);
    if (ctx.manifest.args[i - 1].rfind("--", 0) == 0 && it != ctx.resolved_inputs.end())
      ctx.manifest.args[i] = it->second;
  }
  ctx.manifest.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Data, "cannot write manifest " + path.string());
  out << to_json(ctx.manifest).dump(2) << "\n";
  ctx.out << "manifest: " << path.string() << "\n";
}

std::vector<int> parse_class_list(const std::string& text, int num_classes) {
  std::vector<int> out;
  if (text == "all") {
    for (int c = 1; c <= num_classes; ++c) out.push_back(c);
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  std::set<int> seen;
  while (std::getline(ss, item, ',')) {
    int c = 0;
    try {
      std::size_t used = 0;
      c = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidArgument, "--classes: '" + item + "' is not a class id");
    }
    if (c < 1 || c > num_classes)
      fail(ErrorKind::Data, "--classes: class " + std::to_string(c) + " is not in the catalog (1.." +
                                std::to_string(num_classes) + ")");
    if (seen.insert(c).second) out.push_back(c);
  }
  if (out.empty()) fail(ErrorKind::InvalidArgument, "--classes: empty list");
  return out;
}

// ---------------------------------------------------------------- options

struct GenerateOpts {
  int classes = 5, train = 500, val = 100, size = 128, min_instances = 1, max_instances = 4, rare_class = 5;
  double rare_weight = 0.35, min_visible = 0.25;
  bool no_occlusion = false;
  std::uint64_t seed = 7;
  std::string out = "data";
};

struct TrainOpts {
  std::string data, out = "baseline.ckpt", log;
  int epochs = 12, head_epochs = 4, batch = 8, eval_samples = 0;
  double lr = 0.01;
  std::uint64_t seed = 1;
};

struct SurgeryOpts {
  std::string checkpoint, init = "slice", out = "maskuno.ckpt";
  std::uint64_t seed = 0;
};

struct HeadsOpts {
  std::string checkpoint, data, classes = "all", mode = "sequential", out = "maskuno-trained.ckpt";
  int jobs = 0, head_epochs = 4, batch = 8;
  double lr = 0.01;
  std::uint64_t seed = 1;
};

struct EvalOpts {
  std::string checkpoint, predictions, data, tag, out = "report.json", iou = "mask", misrouting;
  bool per_class = true, allow_untrained = false;
};

struct CompareOpts {
  std::vector<std::string> before, after;
  std::string out = "comparison", plot;
};

struct ReplayOpts {
  std::string manifest, out_root;
};

train::TrainConfig train_config(int epochs, int head_epochs, int batch, double lr, std::uint64_t seed) {
  train::TrainConfig c;
  c.epochs = epochs;
  c.head_epochs = head_epochs;
  c.batch_size = batch;
  c.learning_rate = lr;
  c.seed = seed;
  c.validate();
  return c;
}

// ---------------------------------------------------------------- commands

void cmd_generate(Context& ctx, const GenerateOpts& o) {
  synth::DatasetSpec spec;
  spec.num_classes = o.classes;
  spec.train_samples = o.train;
  spec.val_samples = o.val;
  spec.image_size = o.size;
  spec.min_instances = o.min_instances;
  spec.max_instances = o.max_instances;
  spec.allow_occlusion = !o.no_occlusion;
  spec.min_visible_fraction = o.min_visible;
  spec.rare_class = o.rare_class;
  spec.rare_weight = o.rare_weight;
  spec.seed = o.seed;
  spec.validate();
  const fs::path dir = resolve_out(ctx, o.out);
  synth::write_dataset(dir, spec);
  ctx.manifest.seed = o.seed;

  const auto val = synth::read_annotations(dir / "val.json");
  ctx.out << "dataset: " << dir.string() << "\n";
  ctx.out << "dataset digest: " << synth::dataset_digest(dir) << "\n";
  ctx.out << "validation split per class (images, instances):\n";
  for (int c = 1; c <= spec.num_classes; ++c) {
    const auto sub = synth::split_validation_per_class(val.samples, core::ClassLabel{c}, spec.num_classes);
    int instances = 0;
    for (const auto& s : sub.samples) instances += int(s.annotations.size());
    ctx.out << "  " << c << " " << synth::class_name(c) << ": " << sub.samples.size() << " images, " << instances
            << " instances\n";
    if (sub.warning) ctx.err << "warning: " << *sub.warning << "\n";
  }
  for (const char* f : {"spec.json", "train.json", "train.images.bin", "val.json", "val.images.bin"})
    add_output(ctx, dir / f);
  write_manifest(ctx, dir);
}

void cmd_train_baseline(Context& ctx, const TrainOpts& o) {
  const fs::path data = resolve_in(ctx, o.data);
  add_input(ctx, data);
  auto config = train_config(o.epochs, o.head_epochs, o.batch, o.lr, o.seed);
  config.eval_samples = o.eval_samples;
  const fs::path ckpt = resolve_out(ctx, o.out);
  fs::path log = o.log.empty() ? fs::path(ckpt.string() + ".log.jsonl") : resolve_out(ctx, o.log);
  config.log_path = log.string();
  ctx.manifest.seed = o.seed;

  const auto spec = synth::load_dataset_spec(data);
  const auto train_set = synth::load_split(data, synth::Split::Train);
  auto val = synth::load_split(data, synth::Split::Val);
  if (config.eval_samples > 0 && std::size_t(config.eval_samples) < val.size()) val.resize(std::size_t(config.eval_samples));
  pipeline::PipelineConfig model_config;
  model_config.num_classes = spec.num_classes;
  model_config.image_size = spec.image_size;
  const auto result = train::train_baseline(train_set, model_config, config, [&](const pipeline::PipelineModel& m) {
    const double v = train::validation_map(m, val, spec.num_classes);
    ctx.out << "  val mask mAP " << v << "\n" << std::flush;
    return v;
  });
  auto record = train::baseline_record(result, config);
  record.provenance["dataset_digest"] = synth::dataset_digest(data);
  pipeline::save_checkpoint(record, ckpt);
  ctx.out << "trained " << result.history.size() << " epochs" << (result.plateaued ? " (plateau reached)" : "")
          << "\ncheckpoint: " << ckpt.string() << "\ndigest: " << record.digest << "\n";
  add_output(ctx, ckpt);
  add_output(ctx, log);
  write_manifest(ctx, ckpt);
}

void cmd_surgery(Context& ctx, const SurgeryOpts& o) {
  const fs::path in = resolve_in(ctx, o.checkpoint);
  add_input(ctx, in);
  const auto record = pipeline::load_checkpoint(in);
  if (record.kind != "baseline")
    fail(ErrorKind::Data, in.string() + " is a " + record.kind + " checkpoint; surgery needs a baseline");
  const auto baseline = pipeline::baseline_from_record(record);
  auto model = split::surgery(baseline, split::init_mode_from_string(o.init), o.seed, record.digest);
  auto out_record = split::to_record(model, record.classes);
  out_record.provenance["dataset_digest"] = record.provenance.value("dataset_digest", "");
  out_record.epoch = record.epoch;
  out_record.metric_history = record.metric_history;
  const fs::path out = resolve_out(ctx, o.out);
  pipeline::save_checkpoint(out_record, out);
  ctx.manifest.seed = o.seed;
  ctx.out << "surgery (" << o.init << "): " << model.heads.size() << " single-class heads\ncheckpoint: " << out.string()
          << "\ndigest: " << out_record.digest << "\n";
  add_output(ctx, out);
  write_manifest(ctx, out);
}

void check_dataset(const pipeline::CheckpointRecord& record, const fs::path& data) {
  const std::string expected = record.provenance.value("dataset_digest", "");
  const std::string actual = synth::dataset_digest(data);
  if (!expected.empty() && expected != actual)
    fail(ErrorKind::Data, "dataset digest " + actual + " does not match the checkpoint's training data " + expected);
}

void cmd_train_heads(Context& ctx, const HeadsOpts& o) {
  const fs::path in = resolve_in(ctx, o.checkpoint);
  const fs::path data = resolve_in(ctx, o.data);
  add_input(ctx, in);
  add_input(ctx, data);
  const auto record = pipeline::load_checkpoint(in);
  auto model = split::maskuno_from_record(record);
  check_dataset(record, data);
  const auto config = train_config(1, o.head_epochs, o.batch, o.lr, o.seed);
  const auto classes = parse_class_list(o.classes, model.config().num_classes);
  const auto train_set = synth::load_split(data, synth::Split::Train);
  const auto cache = train::build_feature_cache(model.base, train_set, config.train_proposals);
  const auto metrics =
      train::train_all_heads(model, classes, train_set, cache, config, train::head_mode_from_string(o.mode), o.jobs);
  for (const auto& m : metrics)
    ctx.out << "  class " << m.class_id << " " << synth::class_name(m.class_id) << ": mask loss " << m.initial_loss
            << " -> " << m.final_loss << " (" << m.steps << " steps)\n";
  auto out_record = split::to_record(model, record.classes);
  out_record.provenance["dataset_digest"] = record.provenance.value("dataset_digest", "");
  out_record.epoch = record.epoch;
  out_record.metric_history = record.metric_history;
  const fs::path out = resolve_out(ctx, o.out);
  pipeline::save_checkpoint(out_record, out);
  ctx.manifest.seed = o.seed;
  ctx.out << "checkpoint: " << out.string() << "\ndigest: " << out_record.digest << "\n";
  add_output(ctx, out);
  write_manifest(ctx, out);
}

void cmd_evaluate(Context& ctx, const EvalOpts& o) {
  if (o.checkpoint.empty() == o.predictions.empty())
    fail(ErrorKind::InvalidArgument, "evaluate needs exactly one of --checkpoint or --predictions");
  const fs::path data = resolve_in(ctx, o.data);
  add_input(ctx, data);
  const auto spec = synth::load_dataset_spec(data);
  const auto val = synth::load_split(data, synth::Split::Val);
  const auto kind = o.iou == "box" ? eval::IouKind::Box : eval::IouKind::Mask;
  if (o.iou != "box" && o.iou != "mask") fail(ErrorKind::InvalidArgument, "--iou must be mask or box");
  const std::string dataset = synth::dataset_digest(data);

  eval::Predictions preds;
  std::string tag = o.tag, ckpt_digest;
  std::optional<split::MaskUnoModel> maskuno;
  if (!o.predictions.empty()) {
    const fs::path p = resolve_in(ctx, o.predictions);
    add_input(ctx, p);
    preds = read_predictions(p, val);
    ckpt_digest = core::file_digest(p);
    if (tag.empty()) tag = "predictions";
  } else {
    const fs::path p = resolve_in(ctx, o.checkpoint);
    add_input(ctx, p);
    const auto record = pipeline::load_checkpoint(p);
    check_dataset(record, data);
    ckpt_digest = record.digest;
    if (tag.empty()) tag = record.kind;
    std::function<std::vector<core::Detection>(const core::Tensor&)> predict;
    std::optional<pipeline::PipelineModel> baseline;
    std::optional<split::CascadeModel> cascade;
    if (record.kind == "baseline") {
      baseline = pipeline::baseline_from_record(record);
      predict = [&](const core::Tensor& img) { return pipeline::baseline_inference(*baseline, img); };
    } else if (record.kind == "maskuno" || record.kind == "cascade") {
      if (record.kind == "cascade") {
        cascade = split::cascade_from_record(record);
        maskuno = cascade->first;
        predict = [&](const core::Tensor& img) { return split::cascade_forward(*cascade, img); };
      } else {
        maskuno = split::maskuno_from_record(record);
        predict = [&](const core::Tensor& img) { return split::maskuno_inference(*maskuno, img); };
      }
      std::vector<int> untrained;
      for (int c = 1; c <= maskuno->config().num_classes; ++c)
        if (!maskuno->provenance.heads.contains(std::to_string(c))) untrained.push_back(c);
      if (!untrained.empty() && !o.allow_untrained) {
        std::string list;
        for (int c : untrained) list += (list.empty() ? "" : ", ") + std::to_string(c);
        fail(ErrorKind::Data, "heads for classes " + list + " have not been trained (pass --allow-untrained to "
                              "evaluate the surgery state)");
      }
    } else {
      fail(ErrorKind::Data, "unknown checkpoint kind '" + record.kind + "'");
    }
    for (const auto& s : val) preds.push_back(predict(s.image));
  }
  const auto half = eval::evaluate_per_class(val, spec.num_classes, preds, tag, ckpt_digest, dataset, kind);
  const fs::path out = resolve_out(ctx, o.out);
  eval::write_half(half, out);
  ctx.out << "model " << tag << " on " << val.size() << " validation images (" << (kind == eval::IouKind::Mask ? "mask" : "box")
          << " IoU)\n";
  for (const auto& c : half.classes) {
    ctx.out << "  " << c.class_id << " " << c.name << ":";
    const auto v = c.breakdown.values();
    for (std::size_t k = 0; k < v.size(); ++k) {
      ctx.out << " " << eval::ApBreakdown::names()[k] << "=";
      if (v[k])
        ctx.out << *v[k];
      else
        ctx.out << "-";
    }
    ctx.out << "\n";
    if (c.warning) ctx.err << "warning: " << *c.warning << "\n";
  }
  if (const auto m = half.mean_ap()) ctx.out << "mean AP over classes: " << *m << "\n";
  add_output(ctx, out);
  if (!o.misrouting.empty()) {
    if (!maskuno) fail(ErrorKind::InvalidArgument, "--misrouting needs a maskuno checkpoint");
    const auto stats = eval::misrouting_rate(*maskuno, val);
    const fs::path mpath = resolve_out(ctx, o.misrouting);
    std::ofstream mout(mpath);
    mout << json{{"dispatched", stats.dispatched},
                 {"matched", stats.matched},
                 {"misrouted", stats.misrouted},
                 {"background", stats.background},
                 {"rate", stats.rate() ? json(*stats.rate()) : json(nullptr)}}
                .dump(2)
         << "\n";
    mout.close();
    ctx.out << "misrouting: " << stats.misrouted << " of " << stats.matched << " matched ROIs, " << stats.background
            << " background\n";
    add_output(ctx, mpath);
  }
  write_manifest(ctx, out);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  out << text;
}

void cmd_compare(Context& ctx, const CompareOpts& o) {
  if (o.before.size() != o.after.size())
    fail(ErrorKind::InvalidArgument, "compare needs the same number of --before and --after reports");
  std::vector<eval::EvalReport> reports;
  json all = json::array();
  std::string tables, csv;
  for (std::size_t i = 0; i < o.before.size(); ++i) {
    const fs::path b = resolve_in(ctx, o.before[i]), a = resolve_in(ctx, o.after[i]);
    add_input(ctx, b);
    add_input(ctx, a);
    reports.push_back(eval::compare_reports(eval::read_half(b), eval::read_half(a)));
    tables += eval::render_table(reports.back()) + "\n";
    const std::string c = eval::render_csv(reports.back());
    csv += i == 0 ? c : c.substr(c.find('\n') + 1);
    all.push_back(eval::to_json(reports.back()));
  }
  const fs::path dir = resolve_out(ctx, o.out);
  fs::create_directories(dir);
  const fs::path chart = o.plot.empty() ? dir / "chart.svg" : resolve_out(ctx, o.plot);
  write_text(dir / "comparison.json", all.dump(2) + "\n");
  write_text(dir / "table.txt", tables);
  write_text(dir / "table.csv", csv);
  write_text(chart, eval::render_bar_chart(reports));
  ctx.out << tables << "chart: " << chart.string() << "\n";
  for (const auto& p : {dir / "comparison.json", dir / "table.txt", dir / "table.csv", chart}) add_output(ctx, p);
  write_manifest(ctx, dir);
}

// ---------------------------------------------------------------- argument bookkeeping

std::vector<std::string> reconstruct_args(CLI::App* sub, json& resolved) {
  std::vector<std::string> args{sub->get_name()};
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "out-root" || opt->count() == 0) continue;
    if (opt->get_type_size() == 0) {
      if (opt->as<bool>()) {
        args.push_back("--" + name);
        resolved[name] = true;
      }
      continue;
    }
    const auto& results = opt->results();
    for (const auto& r : results) {
      args.push_back("--" + name);
      args.push_back(r);
    }
    resolved[name] = results.size() == 1 ? json(results.front()) : json(results);
  }
  return args;
}

int replay(const ReplayOpts& o, std::ostream& out, std::ostream& err) {
  const RunManifest m = read_manifest(o.manifest);
  if (m.command == "replay") fail(ErrorKind::InvalidArgument, "cannot replay a replay");
  for (const auto& [path, digest] : m.inputs) {
    const std::string now =
        fs::is_directory(path) ? synth::dataset_digest(path) : fs::exists(path) ? core::file_digest(path) : "missing";
    if (now != digest) fail(ErrorKind::Data, "input " + path + " changed since the recorded run");
  }
  std::vector<std::string> args{"--out-root", o.out_root};
  args.insert(args.end(), m.args.begin(), m.args.end());
  std::ostringstream inner_out;
  const int code = run(args, inner_out, err);
  if (code != kExitOk) {
    err << "replayed command exited with code " << code << "\n";
    return code;
  }
  bool all_match = true;
  for (const auto& [rel, digest] : m.outputs) {
    const fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : fs::path(o.out_root) / rel;
    const std::string now = fs::exists(p) ? core::file_digest(p) : "missing";
    const bool ok = now == digest;
    all_match = all_match && ok;
    out << (ok ? "match     " : "MISMATCH  ") << rel << "\n";
  }
  out << (all_match ? "replay reproduced every output\n" : "replay diverged from the recorded run\n");
  return all_match ? kExitOk : kExitData;
}

fs::path default_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Instance segmentation with per-class mask heads on synthetic shapes", "maskuno"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML file with option values (flags take precedence)");
  std::string out_root;
  app.add_option("--out-root", out_root, "Output root (default: $" + std::string(kOutputRootEnv) + " or ./runs)");

  GenerateOpts gen;
  auto* g = app.add_subcommand("generate", "Generate the synthetic shapes dataset");
  g->add_option("--classes", gen.classes, "Number of foreground classes")->required();
  g->add_option("--train", gen.train, "Training images")->required();
  g->add_option("--val", gen.val, "Validation images")->required();
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  g->add_option("--min-instances", gen.min_instances)->capture_default_str();
  g->add_option("--max-instances", gen.max_instances)->capture_default_str();
  g->add_flag("--no-occlusion", gen.no_occlusion, "Place instances without overlap");
  g->add_option("--min-visible", gen.min_visible, "Drop occluded instances below this visible fraction");
  g->add_option("--rare-class", gen.rare_class, "Under-sampled class id (0 = none)")->capture_default_str();
  g->add_option("--rare-weight", gen.rare_weight)->capture_default_str();
  g->add_option("--out", gen.out, "Dataset directory")->capture_default_str();

  TrainOpts tr;
  auto* t = app.add_subcommand("train-baseline", "Train the multi-class baseline to plateau");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Checkpoint path")->capture_default_str();
  t->add_option("--log", tr.log, "Metric log (JSON lines)");
  t->add_option("--epochs", tr.epochs, "Epoch cap")->capture_default_str();
  t->add_option("--batch", tr.batch)->capture_default_str();
  t->add_option("--lr", tr.lr)->capture_default_str();
  t->add_option("--eval-samples", tr.eval_samples, "Validation images for the plateau metric (0 = all)");
  t->add_option("--seed", tr.seed)->capture_default_str();

  SurgeryOpts su;
  auto* s = app.add_subcommand("surgery", "Replace the multi-class mask head by single-class heads");
  s->add_option("--checkpoint", su.checkpoint, "Baseline checkpoint")->required();
  s->add_option("--init", su.init, "slice or fresh")->check(CLI::IsMember({"slice", "fresh"}))->capture_default_str();
  s->add_option("--seed", su.seed, "Seed for fresh initialisation")->capture_default_str();
  s->add_option("--out", su.out)->capture_default_str();

  HeadsOpts he;
  auto* h = app.add_subcommand("train-heads", "Train the single-class mask heads");
  h->add_option("--checkpoint", he.checkpoint, "Checkpoint produced by surgery")->required();
  h->add_option("--data", he.data, "Dataset directory")->required();
  h->add_option("--classes", he.classes, "all or a comma-separated list of class ids")->capture_default_str();
  h->add_option("--mode", he.mode)->check(CLI::IsMember({"sequential", "parallel"}))->capture_default_str();
  h->add_option("--jobs", he.jobs, "Parallel workers (0 = one per class)");
  h->add_option("--head-epochs", he.head_epochs)->capture_default_str();
  h->add_option("--batch", he.batch)->capture_default_str();
  h->add_option("--lr", he.lr)->capture_default_str();
  h->add_option("--seed", he.seed)->capture_default_str();
  h->add_option("--out", he.out)->capture_default_str();

  EvalOpts ev;
  auto* e = app.add_subcommand("evaluate", "Per-class AP on the validation split");
  e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint");
  e->add_option("--predictions", ev.predictions, "Predictions file instead of a model");
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--tag", ev.tag, "Model tag in the report");
  e->add_option("--iou", ev.iou, "mask or box")->capture_default_str();
  e->add_flag("--per-class", ev.per_class, "Evaluate on per-class sub-datasets (always on)");
  e->add_flag("--allow-untrained", ev.allow_untrained, "Accept heads that were never trained");
  e->add_option("--misrouting", ev.misrouting, "Also write the misrouting diagnostic to this file");
  e->add_option("--out", ev.out)->capture_default_str();

  CompareOpts co;
  auto* c = app.add_subcommand("compare", "Before/after table and bar chart");
  c->add_option("--before", co.before, "Report before the split")->required();
  c->add_option("--after", co.after, "Report after the split")->required();
  c->add_option("--plot", co.plot, "Bar chart path (SVG)");
  c->add_option("--out", co.out, "Output directory")->capture_default_str();

  ReplayOpts re;
  auto* r = app.add_subcommand("replay", "Re-run a command from its manifest and compare output digests");
  r->add_option("--manifest", re.manifest)->required();
  r->add_option("--out-root", re.out_root, "Where the re-run writes its outputs")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (r->parsed()) return replay(re, out, err);
    CLI::App* sub = app.get_subcommands().front();
    Context ctx{out_root.empty() ? default_root() : fs::path(out_root), out, err, {}};
    fs::create_directories(ctx.out_root);
    ctx.manifest.command = sub->get_name();
    ctx.manifest.args = reconstruct_args(sub, ctx.manifest.resolved);
    ctx.manifest.out_root = fs::absolute(ctx.out_root).generic_string();
    std::map<CLI::App*, std::function<void()>> handlers{
        {g, [&] { cmd_generate(ctx, gen); }},         {t, [&] { cmd_train_baseline(ctx, tr); }},
        {s, [&] { cmd_surgery(ctx, su); }},           {h, [&] { cmd_train_heads(ctx, he); }},
        {e, [&] { cmd_evaluate(ctx, ev); }},          {c, [&] { cmd_compare(ctx, co); }}};
    handlers.at(sub)();
    return kExitOk;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return exit_code_for(ex.kind());
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitData;
  }
}

}  // namespace maskuno::cli
