// SPDX-License-Identifier: Apache-2.0

#include "cake/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace cake {

using json = nlohmann::json;

namespace {

// Reads the keys of one JSON object and rejects any it did not ask for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }
  /// Throws on the first key no getter asked for.
  void done() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key " + where(k));
  }

  void get(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, std::uint64_t& out, int) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, Label& out) {
    std::size_t v = out;
    get(key, v);
    if (v > 255) throw ConfigError(where(key) + " must be < 256");
    out = Label(v);
  }
  template <class T>
  void get_list(const char* key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array");
      std::vector<T> items;
      for (const auto& e : *v) {
        if constexpr (std::is_same_v<T, bool>) {
          if (!e.is_boolean()) throw ConfigError(where(key) + " must hold booleans");
        } else {
          if (!e.is_number_unsigned()) throw ConfigError(where(key) + " must hold non-negative integers");
        }
        items.push_back(e.get<T>());
      }
      out = std::move(items);
    }
  }
  void get_strings(const char* key, std::vector<std::string>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array");
      std::vector<std::string> items;
      for (const auto& e : *v) {
        if (!e.is_string()) throw ConfigError(where(key) + " must hold strings");
        items.push_back(e.get<std::string>());
      }
      out = std::move(items);
    }
  }
  /// Calls f(Section&) on a nested object, if present.
  template <class F>
  void nested(const char* key, F&& f) {
    if (const json* v = find(key)) {
      Section s(*v, where(key));
      f(s);
      s.done();
    }
  }
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json* find(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* mode_name(BackgroundMode m) {
  switch (m) {
    case BackgroundMode::static_scene: return "static_scene";
    case BackgroundMode::random_texture: return "random_texture";
    case BackgroundMode::flicker_blob: return "flicker_blob";
  }
  return "";
}

BackgroundMode parse_mode(const std::string& s, const std::string& where) {
  for (auto m : {BackgroundMode::static_scene, BackgroundMode::random_texture, BackgroundMode::flicker_blob})
    if (s == mode_name(m)) return m;
  throw ConfigError(where + ": unknown background mode '" + s + "'");
}

void read_stage(Section& s, StageOptions& o) {
  s.get("epochs", o.epochs);
  s.get("batch", o.batch);
  s.get("lr", o.lr);
  s.get("momentum", o.momentum);
  s.get("weight_decay", o.weight_decay);
  s.get("grad_clip", o.grad_clip);
  s.get("cosine", o.cosine);
  std::string opt = o.optimizer == OptimizerKind::sgd ? "sgd" : "adamw";
  s.get("optimizer", opt);
  if (opt == "sgd") o.optimizer = OptimizerKind::sgd;
  else if (opt == "adamw") o.optimizer = OptimizerKind::adamw;
  else throw ConfigError(s.where("optimizer") + ": expected \"sgd\" or \"adamw\"");
}

json write_stage(const StageOptions& o) {
  return {{"epochs", o.epochs},
          {"batch", o.batch},
          {"lr", o.lr},
          {"momentum", o.momentum},
          {"weight_decay", o.weight_decay},
          {"optimizer", o.optimizer == OptimizerKind::sgd ? "sgd" : "adamw"},
          {"grad_clip", o.grad_clip},
          {"cosine", o.cosine}};
}

}  // namespace

void RunConfig::validate() const {
  data.synth.validate();
  model.validate();
  train.validate();
  if (data.train_clips == 0) throw ConfigError("data.train_clips must be >= 1");
  if (data.synth.classes != model.classes)
    throw ConfigError("data.classes (" + std::to_string(data.synth.classes) + ") differs from model.classes (" +
                      std::to_string(model.classes) + ")");
  if (train.loss.clip_length > data.synth.frames)
    throw ConfigError("loss.clip_length exceeds data.frames");
  if (model.t_clip > data.synth.min_action)
    throw ConfigError("model.t_clip exceeds data.min_action; no training windows would exist");
  if (bench.frames < bench.warmup + 100) throw ConfigError("bench.frames must be >= bench.warmup + 100");
  if (bench.threads == 0) throw ConfigError("bench.threads must be >= 1");
}

RunConfig RunConfig::paper_preset() {
  RunConfig c;
  c.model = ModelConfig::paper_preset();
  c.model.classes = c.data.synth.classes;
  // 13-frame clips need action segments at least that long.
  c.data.synth.min_action = 14;
  c.data.synth.max_action = 16;
  c.data.synth.height = c.data.synth.width = 24;
  c.data.synth.frames = 160;
  c.train.stage1.epochs = 100;
  c.train.stage1.lr = 0.1;
  c.train.stage2.epochs = 50;
  c.train.loss.temperature = 0.07;
  return c;
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  {
    Section root(j, "");
    root.get("seed", c.seed, 0);
    root.nested("data", [&](Section& s) {
      auto& d = c.data;
      s.get("dir", d.dir);
      s.get("train_clips", d.train_clips);
      s.get("val_clips", d.val_clips);
      s.get("test_clips", d.test_clips);
      s.get("classes", d.synth.classes);
      s.get("frames", d.synth.frames);
      s.get("height", d.synth.height);
      s.get("width", d.synth.width);
      s.get("blob", d.synth.blob);
      s.get("background_fraction", d.synth.background_fraction);
      s.get("min_action", d.synth.min_action);
      s.get("max_action", d.synth.max_action);
      std::vector<std::string> names;
      for (auto m : d.synth.background_modes) names.emplace_back(mode_name(m));
      s.get_strings("background_modes", names);
      d.synth.background_modes.clear();
      for (const auto& n : names) d.synth.background_modes.push_back(parse_mode(n, s.where("background_modes")));
    });
    root.nested("model", [&](Section& s) {
      auto& m = c.model;
      s.get("classes", m.classes);
      s.get("d_feat", m.d_feat);
      s.get_list("backbone_widths", m.backbone_widths);
      s.get_list("backbone_pool", m.backbone_pool);
      s.get_list("teacher_widths", m.teacher_widths);
      s.get("t_clip", m.t_clip);
      s.get("gru_hidden", m.gru_hidden);
      s.get("proj_dim", m.proj_dim);
      s.get("use_dma", m.use_dma);
      s.get("reduction", m.reduction);
      s.get("kernels", m.kernels);
      s.get("dynamic", m.dynamic);
      s.get("dynamic_hallucination", m.dynamic_hallucination);
    });
    root.nested("loss", [&](Section& s) {
      auto& l = c.train.loss;
      s.get("distill", l.distill);
      s.get("contrast", l.contrast);
      s.get("focal_gamma", l.focal_gamma);
      s.get("focal_alpha", l.focal_alpha);
      s.get("temperature", l.temperature);
      s.get("clip_length", l.clip_length);
      s.get("background", l.background);
    });
    root.nested("train", [&](Section& s) {
      auto& t = c.train;
      s.nested("teacher", [&](Section& st) { read_stage(st, t.teacher); });
      s.nested("stage1", [&](Section& st) { read_stage(st, t.stage1); });
      s.nested("stage2", [&](Section& st) { read_stage(st, t.stage2); });
      s.nested("stage3", [&](Section& st) { read_stage(st, t.stage3); });
      std::string mode = t.contrast_mode == ContrastMode::floating ? "floating" : "standard";
      s.get("contrast_mode", mode);
      if (mode == "floating") t.contrast_mode = ContrastMode::floating;
      else if (mode == "standard") t.contrast_mode = ContrastMode::standard;
      else throw ConfigError("train.contrast_mode: expected \"floating\" or \"standard\"");
      std::string s3 = t.stage3_loss == StepLoss::focal ? "focal" : "cross_entropy";
      s.get("stage3_loss", s3);
      if (s3 == "focal") t.stage3_loss = StepLoss::focal;
      else if (s3 == "cross_entropy") t.stage3_loss = StepLoss::cross_entropy;
      else throw ConfigError("train.stage3_loss: expected \"focal\" or \"cross_entropy\"");
      s.get("queue_size", t.queue_size);
      s.get("ema_momentum", t.ema_momentum);
      s.get("chunks_per_epoch", t.chunks_per_epoch);
    });
    root.nested("bench", [&](Section& s) {
      s.get("frames", c.bench.frames);
      s.get("warmup", c.bench.warmup);
      s.get("threads", c.bench.threads);
    });
    root.done();
  }
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

std::string serialize_config(const RunConfig& c) {
  const auto& d = c.data;
  const auto& m = c.model;
  const auto& l = c.train.loss;
  const auto& t = c.train;
  json modes = json::array();
  for (auto bm : d.synth.background_modes) modes.push_back(mode_name(bm));
  json j = {
      {"seed", c.seed},
      {"data",
       {{"dir", d.dir},
        {"train_clips", d.train_clips},
        {"val_clips", d.val_clips},
        {"test_clips", d.test_clips},
        {"classes", d.synth.classes},
        {"frames", d.synth.frames},
        {"height", d.synth.height},
        {"width", d.synth.width},
        {"blob", d.synth.blob},
        {"background_fraction", d.synth.background_fraction},
        {"min_action", d.synth.min_action},
        {"max_action", d.synth.max_action},
        {"background_modes", modes}}},
      {"model",
       {{"classes", m.classes},
        {"d_feat", m.d_feat},
        {"backbone_widths", m.backbone_widths},
        {"backbone_pool", m.backbone_pool},
        {"teacher_widths", m.teacher_widths},
        {"t_clip", m.t_clip},
        {"gru_hidden", m.gru_hidden},
        {"proj_dim", m.proj_dim},
        {"use_dma", m.use_dma},
        {"reduction", m.reduction},
        {"kernels", m.kernels},
        {"dynamic", m.dynamic},
        {"dynamic_hallucination", m.dynamic_hallucination}}},
      {"loss",
       {{"distill", l.distill},
        {"contrast", l.contrast},
        {"focal_gamma", l.focal_gamma},
        {"focal_alpha", l.focal_alpha},
        {"temperature", l.temperature},
        {"clip_length", l.clip_length},
        {"background", l.background}}},
      {"train",
       {{"teacher", write_stage(t.teacher)},
        {"stage1", write_stage(t.stage1)},
        {"stage2", write_stage(t.stage2)},
        {"stage3", write_stage(t.stage3)},
        {"contrast_mode", t.contrast_mode == ContrastMode::floating ? "floating" : "standard"},
        {"stage3_loss", t.stage3_loss == StepLoss::focal ? "focal" : "cross_entropy"},
        {"queue_size", t.queue_size},
        {"ema_momentum", t.ema_momentum},
        {"chunks_per_epoch", t.chunks_per_epoch}}},
      {"bench", {{"frames", c.bench.frames}, {"warmup", c.bench.warmup}, {"threads", c.bench.threads}}}};
  return j.dump(2) + "\n";
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write config " + path.string());
  out << serialize_config(cfg);
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace cake
