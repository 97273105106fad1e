// SPDX-License-Identifier: Apache-2.0
//
// Config files, checkpoints and the bench harness.

#include <cstring>
#include <filesystem>
#include <fstream>

#include "cake/bench.hpp"
#include "cake/config.hpp"
#include "cake/weights.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cake;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "cake_test_io";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), long(bytes.size()));
}

std::string u32(std::uint32_t v) {
  std::string s(4, '\0');
  std::memcpy(s.data(), &v, 4);
  return s;
}

Student<float> make_student(std::uint64_t seed) {
  Rng rng(seed);
  return Student<float>::init(ModelConfig{}, rng);
}

}  // namespace

TEST_CASE("config: defaults and the reference preset round-trip") {
  for (const auto& cfg : {RunConfig{}, RunConfig::paper_preset()}) {
    auto text = serialize_config(cfg);
    CHECK(parse_config(text) == cfg);
    CHECK(serialize_config(parse_config(text)) == text);
  }
  RunConfig c;
  c.seed = 42;
  c.train.stage1.cosine = false;
  c.train.contrast_mode = ContrastMode::standard;
  c.data.synth.background_modes = {BackgroundMode::flicker_blob};
  c.model.backbone_widths = {8, 12};
  auto path = scratch("cfg.json");
  save_config(path, c);
  CHECK(load_config(path) == c);
}

TEST_CASE("config: the reference preset carries the reference model sizes") {
  auto p = RunConfig::paper_preset();
  CHECK_NOTHROW(p.validate());
  CHECK(p.model.t_clip == 13);
  CHECK(p.model.gru_hidden == 1024);
  CHECK(p.model.proj_dim == 128);
  CHECK(p.model.reduction == doctest::Approx(1.0 / 16.0));
  CHECK(p.train.stage1.lr == 0.1);
  CHECK(p.train.stage1.optimizer == OptimizerKind::sgd);
  CHECK(p.train.stage2.optimizer == OptimizerKind::adamw);
}

TEST_CASE("config: unknown keys and wrong types are rejected") {
  CHECK_THROWS_AS(parse_config(R"({"sed": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"model": {"dfeat": 3}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"train": {"stage2": {"lrr": 0.1}}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"model": {"d_feat": -3}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"model": {"d_feat": "big"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"train": {"stage1": {"optimizer": "rmsprop"}}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"data": {"background_modes": ["sunset"]}})"), ConfigError);
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
  try {
    parse_config(R"({"loss": {"temprature": 0.1}})");
    FAIL("accepted an unknown key");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("temprature") != std::string::npos);
  }
  CHECK(parse_config("{}") == RunConfig{});
}

TEST_CASE("config: cross-field validation") {
  CHECK_THROWS(parse_config(R"({"model": {"classes": 3}})"));
  CHECK_THROWS(parse_config(R"({"model": {"t_clip": 9}})"));
  CHECK_THROWS(parse_config(R"({"bench": {"frames": 120, "warmup": 50}})"));
  CHECK_THROWS(parse_config(R"({"train": {"queue_size": 0}})"));
}

TEST_CASE("weights: round trip is bit-exact") {
  auto s = make_student(3);
  NamedParams<float> named;
  s.collect(named);
  auto path = scratch("w.bin");
  save_weights(path, named);
  auto back = read_weights(path);
  REQUIRE(back.size() == named.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    CHECK(back[i].first == named[i].first);
    CHECK(back[i].second.shape() == named[i].second.shape());
    CHECK(std::memcmp(back[i].second.data().data(), named[i].second.data().data(),
                      named[i].second.numel() * sizeof(float)) == 0);
  }
  auto first = slurp(path);
  save_weights(path, back);
  CHECK(slurp(path) == first);
}

TEST_CASE("weights: bad magic, version, sizes and trailing bytes fail cleanly") {
  auto path = scratch("bad.bin");
  spit(path, "CAKX" + u32(1) + u32(0));
  CHECK_THROWS_AS(read_weights(path), WeightsError);
  spit(path, "CAKE" + u32(99) + u32(0));
  CHECK_THROWS_AS(read_weights(path), WeightsError);
  spit(path, "CA");
  CHECK_THROWS_AS(read_weights(path), WeightsError);

  // Huge declared extents in a tiny file must fail the size check, not allocate.
  spit(path, "CAKE" + u32(1) + u32(1) + u32(1) + "x" + u32(2) + u32(0x7fffffff) + u32(0x7fffffff));
  CHECK_THROWS_AS(read_weights(path), WeightsError);
  spit(path, "CAKE" + u32(1) + u32(0xffffffff));
  CHECK_THROWS_AS(read_weights(path), WeightsError);
  spit(path, "CAKE" + u32(1) + u32(1) + u32(0xfffffff0) + "x");
  CHECK_THROWS_AS(read_weights(path), WeightsError);

  spit(path, "CAKE" + u32(1) + u32(0) + "z");
  CHECK_THROWS_AS(read_weights(path), WeightsError);
  spit(path, "CAKE" + u32(1) + u32(0));
  CHECK(read_weights(path).empty());
  CHECK_THROWS_AS(read_weights(scratch("missing.bin")), IoError);
}

TEST_CASE("weights: assignment names the missing or mismatched tensor") {
  auto a = make_student(4), b = make_student(5);
  NamedParams<float> na, nb;
  a.collect(na);
  b.collect(nb);
  assign_weights(nb, na);
  for (std::size_t i = 0; i < na.size(); ++i)
    CHECK(std::vector<float>(na[i].second.data().begin(), na[i].second.data().end()) ==
          std::vector<float>(nb[i].second.data().begin(), nb[i].second.data().end()));

  NamedParams<float> missing(na.begin() + 1, na.end());
  try {
    assign_weights(nb, missing);
    FAIL("missing tensor accepted");
  } catch (const WeightsError& e) {
    CHECK(std::string(e.what()).find(na[0].first) != std::string::npos);
  }
  NamedParams<float> wrong = na;
  wrong[0].second = Tensor::zeros({1});
  CHECK_THROWS_AS(assign_weights(nb, wrong), WeightsError);
}

TEST_CASE("checkpoints carry the stage and the student only when present") {
  Rng rng(6);
  auto teacher = Teacher<float>::init(ModelConfig{}, rng);
  auto s = make_student(7);
  auto path = scratch("ck.bin");
  save_checkpoint(path, Stage::teacher, teacher, nullptr);
  auto ck = read_checkpoint(path);
  CHECK(ck.stage == Stage::teacher);
  CHECK_FALSE(ck.has_student());
  auto other = make_student(8);
  CHECK_THROWS_AS(load_student(ck, other), WeightsError);

  save_checkpoint(path, Stage::stage2, teacher, &s);
  ck = read_checkpoint(path);
  CHECK(ck.stage == Stage::stage2);
  REQUIRE(ck.has_student());
  load_student(ck, other);
  NamedParams<float> x, y;
  s.collect(x);
  other.collect(y);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(std::vector<float>(x[i].second.data().begin(), x[i].second.data().end()) ==
          std::vector<float>(y[i].second.data().begin(), y[i].second.data().end()));
  Rng r2(9);
  auto t2 = Teacher<float>::init(ModelConfig{}, r2);
  load_teacher(ck, t2);
  CHECK(stage_name(Stage::stage1) == "stage 1");
}

TEST_CASE("percentile is nearest-rank") {
  std::vector<double> v{5, 1, 4, 2, 3};
  CHECK(percentile(v, 0.5) == 3);
  CHECK(percentile(v, 0.0) == 1);
  CHECK(percentile(v, 1.0) == 5);
  CHECK(percentile(v, 0.95) == 5);
  CHECK(percentile(v, 0.2) == 1);
  CHECK_THROWS_AS(percentile({}, 0.5), ContractError);
  CHECK_THROWS_AS(percentile(v, 1.5), ContractError);
}

TEST_CASE("bench: breakdown parts sum to at most the total latency") {
  auto s = make_student(10);
  SynthConfig sc;
  auto r = run_bench(s, sc, 160, 20, 3);
  CHECK(r.frames == 140);
  CHECK(r.latencies.size() == 140);
  CHECK(r.fps_mean > 0);
  CHECK(r.breakdown.sum() <= r.latency_mean);
  CHECK(r.latency_p50 <= r.latency_p95);
  CHECK(r.breakdown.backbone > 0);
  CHECK_THROWS_AS(run_bench(s, sc, 110, 20, 3), ContractError);
}
