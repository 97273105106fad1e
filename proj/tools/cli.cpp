// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "cake/bench.hpp"
#include "cake/config.hpp"
#include "cake/gradcheck_suite.hpp"
#include "cake/metrics.hpp"
#include "cake/parallel.hpp"
#include "cake/stream.hpp"
#include "cake/train.hpp"
#include "cake/weights.hpp"
#include "json.hpp"

namespace cake::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Reported as a usage error (exit 2) rather than a runtime failure.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

spdlog::level::level_enum log_level() {
  const char* env = std::getenv("CAKE_LOG");
  const std::string v = env ? env : "info";
  if (v == "error") return spdlog::level::err;
  if (v == "debug") return spdlog::level::debug;
  return spdlog::level::info;
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::shared_ptr<spdlog::logger> log;
};

// Per-stage seeds, all derived from the run seed.
std::uint64_t stage_seed(std::uint64_t seed, int stage) { return seed * 16 + std::uint64_t(stage) + 1; }
constexpr int kTeacherInit = 8, kStudentInit = 9;

fs::path split_path(const fs::path& dir, const std::string& split) { return dir / (split + ".ckds"); }

Dataset load_split(const fs::path& dir, const std::string& split) {
  const auto p = split_path(dir, split);
  if (!fs::exists(p)) throw IoError("dataset split not found: " + p.string() + " (run `cake synth` first)");
  return load_dataset(p);
}

json histogram_json(const Dataset& ds) {
  auto h = ds.label_histogram();
  std::size_t total = 0;
  for (auto c : h) total += c;
  return {{"clips", ds.clips.size()},
          {"frames", total},
          {"class_frames", h},
          {"background_fraction", total ? double(h[0]) / double(total) : 0.0}};
}

// ---- synth ---------------------------------------------------------------

int cmd_synth(Context& ctx, const std::string& out_dir) {
  const auto& d = ctx.cfg.data;
  const fs::path dir = out_dir.empty() ? fs::path(d.dir) : fs::path(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto splits = synth_splits(ctx.cfg.seed, d.synth, d.train_clips, d.val_clips, d.test_clips);
  for (auto [name, ds] : {std::pair<const char*, const Dataset*>{"train", &splits.train},
                          {"val", &splits.val},
                          {"test", &splits.test}}) {
    save_dataset(*ds, split_path(dir, name));
    json rec = histogram_json(*ds);
    rec["split"] = name;
    rec["path"] = split_path(dir, name).string();
    ctx.out << rec.dump() << "\n";
    ctx.log->info("wrote {} ({} clips)", split_path(dir, name).string(), ds->clips.size());
  }
  return kOk;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string stage;
  std::string data_dir;
  std::string checkpoint;
  std::string out;
  std::string metrics;
};

int cmd_train(Context& ctx, const TrainArgs& a) {
  static const std::vector<std::string> stages{"teacher", "1", "2", "3"};
  const auto it = std::find(stages.begin(), stages.end(), a.stage);
  if (it == stages.end()) throw UsageError("--stage must be one of teacher, 1, 2, 3");
  const int stage = int(it - stages.begin());
  const auto& cfg = ctx.cfg;
  const fs::path data_dir = a.data_dir.empty() ? fs::path(cfg.data.dir) : fs::path(a.data_dir);

  // Prerequisite checkpoint: stage n needs the checkpoint written after stage n - 1.
  std::optional<Checkpoint> ckpt;
  if (stage > 0) {
    const std::string need = stage_name(Stage(stage - 1)) + " checkpoint required";
    if (a.checkpoint.empty()) throw std::runtime_error(need + " (pass --checkpoint)");
    if (!fs::exists(a.checkpoint)) throw std::runtime_error(need + ": " + a.checkpoint + " does not exist");
    ckpt = read_checkpoint(a.checkpoint);
    if (int(ckpt->stage) < stage - 1)
      throw std::runtime_error(need + ": " + a.checkpoint + " was written after " + stage_name(ckpt->stage));
  }

  const fs::path metrics_path = a.metrics.empty() ? fs::path(a.out + ".metrics.jsonl") : fs::path(a.metrics);
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics log " + metrics_path.string());
  MetricsSink sink = [&](const MetricRecord& r) {
    json rec = {{"stage", r.stage}, {"epoch", r.epoch}};
    for (const auto& [k, v] : r.values) rec[k] = v;
    metrics << rec.dump() << "\n";
    metrics.flush();
    ctx.log->debug("{}", rec.dump());
  };

  Rng teacher_rng(stage_seed(cfg.seed, kTeacherInit));
  auto teacher = Teacher<float>::init(cfg.model, teacher_rng);
  Rng student_rng(stage_seed(cfg.seed, kStudentInit));
  auto student = Student<float>::init(cfg.model, student_rng);
  if (ckpt) {
    load_teacher(*ckpt, teacher);
    if (stage >= 2) load_student(*ckpt, student);
  }

  const auto train = load_split(data_dir, "train");
  const auto val = load_split(data_dir, "val");
  const std::uint64_t seed = stage_seed(cfg.seed, stage);
  json summary = {{"stage", a.stage}};
  switch (stage) {
    case 0:
      ctx.log->info("training teacher on {} clips", train.clips.size());
      train_teacher(teacher, train, cfg.model.t_clip, cfg.train, seed, sink);
      summary["val_acc"] = teacher_accuracy(teacher, val, cfg.model.t_clip);
      break;
    case 1: {
      ctx.log->info("stage 1: backbone + DMA");
      train_stage1(student, teacher, train, cfg.train, seed, sink, cfg.model.use_dma ? &val : nullptr);
      if (cfg.model.use_dma) summary["val_probe"] = probe_dma_with_teacher_head(student, teacher, val);
      break;
    }
    case 2:
    case 3: {
      ctx.log->info("stage {}: precomputing stream features", stage);
      const auto tr = precompute_features(student, train);
      const auto va = precompute_features(student, val);
      if (stage == 2) {
        auto rep = train_stage2(student, tr, cfg.train, seed, sink, &va);
        summary["queue"] = rep.queue_size;
        summary["train_acc"] = rep.final_step_accuracy;
      } else {
        train_stage3(student, tr, cfg.train, seed, sink, &va);
      }
      summary["val_map"] = per_frame_map(evaluate_streams(student, va));
      break;
    }
  }
  save_checkpoint(a.out, Stage(stage), teacher, stage >= 1 ? &student : nullptr);
  summary["checkpoint"] = a.out;
  summary["metrics"] = metrics_path.string();
  ctx.out << summary.dump() << "\n";
  return kOk;
}

// ---- infer ---------------------------------------------------------------

Student<float> load_model(const RunConfig& cfg, const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  auto ckpt = read_checkpoint(path);
  Rng rng(0);
  auto student = Student<float>::init(cfg.model, rng);
  load_student(ckpt, student);
  return student;
}

fs::path data_file(const RunConfig& cfg, const std::string& given) {
  return given.empty() ? split_path(cfg.data.dir, "test") : fs::path(given);
}

int cmd_infer(Context& ctx, const std::string& checkpoint, const std::string& data, const std::string& out_path) {
  auto model = load_model(ctx.cfg, checkpoint);
  const auto ds = load_dataset(data_file(ctx.cfg, data));
  std::ofstream file;
  std::ostream* out = &ctx.out;
  if (!out_path.empty()) {
    file.open(out_path, std::ios::trunc);
    if (!file) throw IoError("cannot write " + out_path);
    out = &file;
  }
  std::size_t records = 0;
  for (std::size_t c = 0; c < ds.clips.size(); ++c) {
    StreamState state;
    const auto& clip = ds.clips[c];
    for (std::size_t t = 0; t < clip.length(); ++t) {
      auto step = stream_step(model, state, clip.frame(t));
      json rec = {{"clip", c}, {"t", t}, {"scores", step.scores}};
      *out << rec.dump() << "\n";
      ++records;
    }
  }
  ctx.log->info("wrote {} score records", records);
  return kOk;
}

// ---- eval ----------------------------------------------------------------

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw IoError(path + ":" + std::to_string(n) + ": not a JSON record");
    }
  }
  return out;
}

json report_json(const MapReport& r, std::size_t frames) {
  json classes = json::array();
  for (const auto& c : r.classes)
    classes.push_back({{"label", c.label}, {"positives", c.positives}, {"ap", c.ap}, {"cap", c.cap}});
  return {{"frames", frames}, {"map", r.map}, {"mcap", r.mcap}, {"classes", classes}, {"excluded", r.excluded}};
}

struct EvalArgs {
  std::string scores;
  std::string data;
  std::string metrics;
  std::string checkpoint;
  std::string embeddings;
};

int cmd_eval(Context& ctx, const EvalArgs& a) {
  if (a.scores.empty() && a.metrics.empty() && a.embeddings.empty())
    throw UsageError("eval needs --scores, --metrics or --dump-embeddings");
  json result;
  if (!a.metrics.empty()) {
    // Last record of every stage.
    json last = json::object();
    for (auto& rec : read_jsonl(a.metrics)) {
      if (!rec.contains("stage") || !rec.contains("epoch")) throw IoError(a.metrics + ": record lacks stage/epoch");
      last[rec["stage"].get<std::string>()] = rec;
    }
    result["metrics"] = last;
  }
  const bool need_data = !a.scores.empty() || !a.embeddings.empty();
  Dataset ds;
  if (need_data) ds = load_dataset(data_file(ctx.cfg, a.data));
  if (!a.scores.empty()) {
    ScoreTrack track;
    track.num_classes = ds.classes + 1;
    std::vector<Label> labels;
    for (const auto& c : ds.clips) labels.insert(labels.end(), c.labels.begin(), c.labels.end());
    auto recs = read_jsonl(a.scores);
    if (recs.size() != labels.size())
      throw std::runtime_error("length mismatch: " + std::to_string(recs.size()) + " score records, " +
                               std::to_string(labels.size()) + " labelled frames");
    for (std::size_t i = 0; i < recs.size(); ++i) {
      auto row = recs[i].at("scores").get<std::vector<float>>();
      if (row.size() != track.num_classes)
        throw std::runtime_error("record " + std::to_string(i) + " has " + std::to_string(row.size()) +
                                 " scores, expected " + std::to_string(track.num_classes));
      track.append(row, labels[i]);
    }
    track.validate(1e-5);
    result["scores"] = report_json(evaluate_track(track), track.frames());
  }
  if (!a.embeddings.empty()) {
    auto model = load_model(ctx.cfg, a.checkpoint);
    std::ofstream csv(a.embeddings, std::ios::trunc);
    if (!csv) throw IoError("cannot write " + a.embeddings);
    const std::size_t H = model.cfg.gru_hidden;
    for (std::size_t j = 0; j < H; ++j) csv << "h" << j << ",";
    csv << "label\n";
    std::size_t rows = 0;
    for (const auto& clip : ds.clips) {
      auto tr = stream_clip(model, clip);
      for (std::size_t t = 0; t < clip.length(); ++t, ++rows) {
        for (std::size_t j = 0; j < H; ++j) csv << fmt::format("{}", tr.hidden[t * H + j]) << ",";
        csv << int(clip.labels[t]) << "\n";
      }
    }
    result["embeddings"] = {{"path", a.embeddings}, {"rows", rows}, {"columns", H + 1}};
  }
  ctx.out << result.dump() << "\n";
  return kOk;
}

// ---- bench ---------------------------------------------------------------

struct BenchArgs {
  std::string checkpoint;
  std::size_t frames = 0, warmup = 0, height = 0, width = 0;
};

int cmd_bench(Context& ctx, BenchArgs a) {
  const auto& cfg = ctx.cfg;
  Student<float> model;
  if (a.checkpoint.empty()) {
    Rng rng(stage_seed(cfg.seed, kStudentInit));
    model = Student<float>::init(cfg.model, rng);
    ctx.log->info("bench on a freshly initialised model (no --checkpoint)");
  } else {
    model = load_model(cfg, a.checkpoint);
  }
  SynthConfig data = cfg.data.synth;
  if (a.height) data.height = a.height;
  if (a.width) data.width = a.width;
  const std::size_t frames = a.frames ? a.frames : cfg.bench.frames;
  const std::size_t warmup = a.warmup ? a.warmup : cfg.bench.warmup;
  if (frames < warmup + 100) throw UsageError("--frames must be at least warmup + 100");
  auto r = run_bench(model, data, frames, warmup, cfg.seed);
  const double ms = 1e3;
  json rec = {{"fps_mean", r.fps_mean},
              {"latency_mean_ms", r.latency_mean * ms},
              {"latency_p50_ms", r.latency_p50 * ms},
              {"latency_p95_ms", r.latency_p95 * ms},
              {"breakdown_ms",
               {{"backbone", r.breakdown.backbone * ms},
                {"dma", r.breakdown.dma * ms},
                {"gru", r.breakdown.gru * ms},
                {"head", r.breakdown.head * ms}}},
              {"breakdown_sum_ms", r.breakdown.sum() * ms},
              {"frames", r.frames},
              {"warmup", r.warmup},
              {"threads", r.threads},
              {"height", r.height},
              {"width", r.width}};
  ctx.out << rec.dump() << "\n";
  return kOk;
}

// ---- gradcheck -------------------------------------------------------------

int cmd_gradcheck(Context& ctx, const std::string& scope, std::size_t seeds, bool inject_fault) {
  auto suites = registered_grad_suites();
  if (inject_fault) suites.push_back(corrupted_backward_fixture());
  std::vector<GradSuiteResult> results;
  try {
    results = run_grad_suites(suites, scope, seeds);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  std::size_t failed = 0;
  for (const auto& r : results) {
    failed += !r.report.pass;
    ctx.out << fmt::format("{} {}/{} max_rel_err={:.3e} checked={} excluded={} seeds={} time={:.2f}s\n",
                           r.report.pass ? "PASS" : "FAIL", r.module, r.op, r.report.max_rel_err, r.report.checked,
                           r.report.excluded, r.seeds, r.seconds);
  }
  ctx.out << fmt::format("{} of {} operations passed\n", results.size() - failed, results.size());
  return failed ? kFailure : kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto log = std::make_shared<spdlog::logger>("cake", sink);
  log->set_pattern("[%l] %v");
  log->set_level(log_level());

  CLI::App app{"cake: streaming action detection toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Run configuration (JSON)");
  app.add_option("--seed", g.seed, "Override the configured seed");
  app.add_option("--threads", g.threads, "Worker threads for tensor ops")->check(CLI::PositiveNumber);

  auto* synth = app.add_subcommand("synth", "Generate train/val/test splits");
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output directory (default: data.dir)");

  auto* train = app.add_subcommand("train", "Run one training stage");
  TrainArgs ta;
  train->add_option("--stage", ta.stage, "teacher, 1, 2 or 3")->required();
  train->add_option("--data", ta.data_dir, "Dataset directory (default: data.dir)");
  train->add_option("--checkpoint", ta.checkpoint, "Checkpoint of the previous stage");
  train->add_option("--out", ta.out, "Checkpoint to write")->required();
  train->add_option("--metrics", ta.metrics, "Metrics log (default: <out>.metrics.jsonl)");

  auto* infer = app.add_subcommand("infer", "Stream a dataset split, one score record per frame");
  std::string inf_ckpt, inf_data, inf_out;
  infer->add_option("--checkpoint", inf_ckpt, "Checkpoint with a trained student")->required();
  infer->add_option("--data", inf_data, "Dataset split file (default: <data.dir>/test.ckds)");
  infer->add_option("--out", inf_out, "Score file (default: stdout)");

  auto* eval = app.add_subcommand("eval", "Score per-frame predictions against labels");
  EvalArgs ea;
  eval->add_option("--scores", ea.scores, "Score records from `infer`");
  eval->add_option("--data", ea.data, "Dataset split file with the labels (default: <data.dir>/test.ckds)");
  eval->add_option("--metrics", ea.metrics, "Metrics log from `train`; prints each stage's last record");
  eval->add_option("--checkpoint", ea.checkpoint, "Model for --dump-embeddings");
  eval->add_option("--dump-embeddings", ea.embeddings, "Write per-frame GRU states and labels as CSV");

  auto* bench = app.add_subcommand("bench", "Time streaming inference");
  BenchArgs ba;
  bench->add_option("--checkpoint", ba.checkpoint, "Model to time (default: fresh initialisation)");
  bench->add_option("--frames", ba.frames, "Total frames, warmup included (default: bench.frames)");
  bench->add_option("--warmup", ba.warmup, "Untimed leading frames (default: bench.warmup)");
  bench->add_option("--height", ba.height, "Override frame height");
  bench->add_option("--width", ba.width, "Override frame width");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  std::string scope = "all";
  std::size_t seeds = 20;
  bool inject = false;
  gc->add_option("--scope", scope, "all or a module name");
  gc->add_option("--seeds", seeds, "Random instances per operation")->check(CLI::PositiveNumber);
  gc->add_flag("--inject-fault", inject, "Include a deliberately broken backward");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    Context ctx{g.config_path.empty() ? RunConfig{} : load_config(g.config_path), out, log};
    if (g.seed) ctx.cfg.seed = *g.seed;
    ctx.cfg.validate();
    set_num_threads(g.threads ? *g.threads : (bench->parsed() ? ctx.cfg.bench.threads : 1));
    if (synth->parsed()) return cmd_synth(ctx, synth_out);
    if (train->parsed()) return cmd_train(ctx, ta);
    if (infer->parsed()) return cmd_infer(ctx, inf_ckpt, inf_data, inf_out);
    if (eval->parsed()) return cmd_eval(ctx, ea);
    if (bench->parsed()) return cmd_bench(ctx, ba);
    if (gc->parsed()) return cmd_gradcheck(ctx, scope, seeds, inject);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace cake::cli
