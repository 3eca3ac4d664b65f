#include <doctest.h>

#include <cmath>
#include <fstream>

#include "lindit/harness.hpp"
#include "support/fixtures.hpp"

using namespace lindit;
using lindit::testing::bit_equal;
using lindit::testing::small_config;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("lindit-test-" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig small_run(int steps) {
  RunConfig c;
  c.model = small_config(2);
  c.train.steps = steps;
  c.train.batch = 4;
  c.eval.prompts = 4;
  c.eval.steps = 2;
  return c;
}

// d_model 128, d_ff 160: the MLP matrices exceed the quantization threshold.
ModelConfig quantizing_config() {
  ModelConfig c;
  c.depth = 1;
  c.d_model = 128;
  c.d_ff = 160;
  c.patch = 2;
  c.timesteps = 100;
  return c;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += line.empty() ? 0 : 1;
  return n;
}

}  // namespace

TEST_CASE("run config round-trips through JSON") {
  RunConfig c = small_run(7);
  c.seeds = {3, 5};
  c.task.held_out = {"two red squares"};
  c.growth.base_checkpoints = {"a", "b"};
  c.scaling.n_values = {1, 4};
  c.parity.noise = 0.25;
  const RunConfig back = run_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.seeds == c.seeds);
  CHECK(back.model == c.model);
}

TEST_CASE("run config rejects unknown keys at every level") {
  CHECK_THROWS_AS(run_config_from_json(json{{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"model", {{"depht", 3}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"optimizer", {{"learning_rate", 1e-3}}}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(json{{"growth", {{"steps", 5}, {"extra", true}}}}), ConfigError);
  CHECK_NOTHROW(run_config_from_json(json::object()));
}

TEST_CASE("run config validation") {
  RunConfig c = small_run(1);
  c.experiment = "nonsense";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_run(1);
  c.seeds.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_run(1);
  c.seeds = {0, 1, 2};
  c.prune.checkpoints = {"x", "y"};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_run(1);
  c.task.held_out = {"seven purple dragons"};
  CHECK_THROWS_AS(c.task.grammar(), ConfigError);

  TempDir dir("config");
  std::ofstream(dir.path / "bad.json") << "{\"train\": {\"steps\": 3, \"oops\": 1}}";
  CHECK_THROWS_AS(load_run_config(dir.path / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_run_config(dir.path / "missing.json"), ConfigError);
}

TEST_CASE("checkpoint round-trip is bit-identical including quantized optimizer state") {
  const ModelConfig mc = quantizing_config();
  TaskConfig task;
  Trainer t(init_model<float>(mc, 1), CameConfig{}, toy_stream(task, mc, 2, 9), 9);
  t.run(2);
  const Checkpoint ck = t.checkpoint();
  int quantized = 0;
  for (const auto& st : ck.optimizer->states) quantized += st.mode == StateMode::Quantized ? 1 : 0;
  REQUIRE(quantized >= 2);

  TempDir dir("ckpt");
  save_checkpoint(dir.path / "c", ck);
  const Checkpoint back = load_checkpoint(dir.path / "c");
  CHECK(bit_identical(back.model, ck.model));
  REQUIRE(back.optimizer.has_value());
  CHECK(*back.optimizer == *ck.optimizer);
  for (std::size_t i = 0; i < ck.optimizer->states.size(); ++i) {
    const auto& a = ck.optimizer->states[i];
    const auto& b = back.optimizer->states[i];
    REQUIRE(a.m_blocks.size() == b.m_blocks.size());
    for (std::size_t k = 0; k < a.m_blocks.size(); ++k) {
      CHECK(a.m_blocks[k].codes == b.m_blocks[k].codes);
      CHECK(std::memcmp(&a.m_blocks[k].lo, &b.m_blocks[k].lo, sizeof(float)) == 0);
      CHECK(std::memcmp(&a.m_blocks[k].hi, &b.m_blocks[k].hi, sizeof(float)) == 0);
    }
  }
  CHECK(back.meta == ck.meta);
}

TEST_CASE("checkpoint manifest offsets are disjoint and inside the payload") {
  TempDir dir("manifest");
  const auto model = init_model<float>(small_config(2), 4);
  save_checkpoint(dir.path / "c", Checkpoint{model, std::nullopt, {}});
  const json m = read_json(dir.path / "c" / "manifest.json");
  const auto payload = m.at("payload_bytes").get<std::size_t>();
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& [name, e] : m.at("tensors").items()) {
    spans.emplace_back(e.at("offset").get<std::size_t>(), e.at("length").get<std::size_t>());
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    CHECK(spans[i].first + spans[i].second <= payload);
    if (i > 0) CHECK(spans[i - 1].first + spans[i - 1].second <= spans[i].first);
  }

  json bad = m;
  bad["tensors"].begin().value()["offset"] = payload;
  write_json(dir.path / "c" / "manifest.json", bad);
  CHECK_THROWS_AS(load_checkpoint(dir.path / "c"), InputError);
  CHECK_THROWS_AS(load_checkpoint(dir.path / "nowhere"), ConfigError);
}

TEST_CASE("steps = 0 leaves the checkpoint equal to initialization") {
  TempDir dir("zero");
  const RunConfig c = small_run(0);
  const auto res = train(c, 4, dir.path);
  CHECK(res.losses.empty());
  const Checkpoint ck = load_checkpoint(res.final_checkpoint);
  CHECK(bit_identical(ck.model, init_model<float>(c.model, derive_seed(4, {0x1417}))));
  CHECK(read_metrics(res.metrics).empty());
}

TEST_CASE("training is deterministic per seed and metrics steps strictly increase") {
  TempDir dir("det");
  RunConfig c = small_run(6);
  c.train.eval_every = 3;
  const auto a = train(c, 2, dir.path / "a");
  const auto b = train(c, 2, dir.path / "b");
  const auto other = train(c, 3, dir.path / "c");
  CHECK(a.losses == b.losses);
  CHECK(a.losses != other.losses);
  CHECK(bit_identical(a.model, b.model));
  const auto rows = read_metrics(a.metrics);
  REQUIRE(rows.size() == 6);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].step == i + 1);
    CHECK(rows[i].loss == a.losses[i]);
    CHECK(rows[i].eval_success.has_value() == ((i + 1) % 3 == 0));
  }
}

TEST_CASE("metrics log rejects non-increasing steps") {
  TempDir dir("metrics");
  MetricsLog log(dir.path / "m.jsonl");
  log.append({1, 0.5, 1e-3, 0.0, std::nullopt});
  log.append({3, 0.4, 1e-3, 0.1, 0.25});
  CHECK_THROWS_AS(log.append({3, 0.3, 1e-3, 0.2, std::nullopt}), ContractError);
  CHECK_THROWS_AS(log.append({2, 0.3, 1e-3, 0.2, std::nullopt}), ContractError);
  const auto rows = read_metrics(log.path());
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].eval_success == 0.25);
}

TEST_CASE("resume reproduces the uninterrupted run's losses bit for bit") {
  TempDir dir("resume");
  RunConfig c = small_run(8);
  c.train.checkpoint_every = 3;
  const auto full = train(c, 6, dir.path / "full");
  CHECK(fs::exists(dir.path / "full" / "checkpoints" / "step-0"));
  CHECK(fs::exists(dir.path / "full" / "checkpoints" / "step-6"));

  const auto resumed = train(c, 6, dir.path / "full", dir.path / "full" / "checkpoints" / "step-3");
  REQUIRE(resumed.losses.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(resumed.losses[i] == full.losses[i + 3]);
  CHECK(bit_identical(resumed.model, full.model));
  const auto rows = read_metrics(dir.path / "full" / "metrics.jsonl");
  REQUIRE(rows.size() == 8);
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].loss == full.losses[i]);

  SUBCASE("mismatched seed or batch is a config error") {
    CHECK_THROWS_AS(train(c, 7, dir.path / "x", dir.path / "full" / "checkpoints" / "step-3"), ConfigError);
    RunConfig d = c;
    d.train.batch = 5;
    CHECK_THROWS_AS(train(d, 6, dir.path / "y", dir.path / "full" / "checkpoints" / "step-3"), ConfigError);
  }
}

TEST_CASE("non-finite loss aborts with the last good checkpoint path") {
  TempDir dir("nan");
  RunConfig c = small_run(4);
  c.train.checkpoint_every = 1;
  train(c, 1, dir.path / "ok");
  const fs::path good = dir.path / "ok" / "checkpoints" / "step-2";
  Checkpoint ck = load_checkpoint(good);
  ck.model.params.head_w.setConstant(std::nanf(""));
  const fs::path poisoned = dir.path / "poisoned";
  save_checkpoint(poisoned, ck);
  try {
    train(c, 1, dir.path / "run", poisoned);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find(poisoned.string()) != std::string::npos);
  }
}

TEST_CASE("report on an empty directory finds nothing") {
  TempDir dir("empty");
  const auto s = report(dir.path);
  CHECK(s.found.empty());
  CHECK(s.absent.size() == kExperimentNames.size());
  CHECK_THROWS_AS(report(dir.path / "missing"), ConfigError);
}

TEST_CASE("report writes one CSV row per metrics row") {
  TempDir dir("report");
  train(small_run(5), 0, dir.path / "train");
  const auto s = report(dir.path);
  REQUIRE(s.found.size() == 1);
  CHECK(count_lines(dir.path / "train" / "metrics.csv") == 1 + 5);
  CHECK(s.absent.size() == kExperimentNames.size());
}

TEST_CASE("experiments on a tiny model write parseable results") {
  TempDir dir("experiments");
  RunConfig c = small_run(4);
  c.seeds = {0};
  const auto base = train(c, 0, dir.path / "base");
  const std::string base_ck = base.final_checkpoint.string();

  SUBCASE("growth") {
    c.growth.base_checkpoints = {base_ck};
    c.growth.target_depth = 4;
    c.growth.steps = 4;
    c.growth.eval_every = 2;
    c.growth.eval_batches = 2;
    c.growth.eval_batch = 4;
    const json r = run_experiment("growth", c, dir.path / "growth");
    const json& s = r.at("per_seed").at(0);
    CHECK(s.at("identity_preserved").get<bool>());
    CHECK(s.at("base_success") == s.at("grown_step0_success"));
    CHECK(s.at("budget_steps") == 4);
    CHECK(read_json(dir.path / "growth" / "result.json") == r);
    CHECK(count_lines(dir.path / "growth" / "seed-0" / "curve.csv") == 1 + 3);
    const auto rep = report(dir.path / "growth");
    CHECK(rep.text.find("steps_ratio") != std::string::npos);
    std::ifstream table(dir.path / "growth" / "per_seed.csv");
    std::string header;
    std::getline(table, header);
    CHECK(header.find("steps_ratio") != std::string::npos);
  }
  SUBCASE("stability") {
    c.stability.base_checkpoints = {base_ck};
    c.stability.target_depth = 4;
    c.stability.drop_last = 1;
    c.stability.steps = 3;
    c.stability.early_window = 2;
    const json r = run_experiment("stability", c, dir.path / "stability");
    const json& strategies = r.at("per_seed").at(0).at("strategies");
    REQUIRE(strategies.size() == 3);
    for (const auto& s : strategies) CHECK(s.at("budget_steps") == 3);
    CHECK(strategies.at(0).at("strategy") == "partial");
  }
  SUBCASE("parity") {
    c.parity.steps = 5;
    c.parity.samples = 16;
    c.parity.in_dim = 130;
    c.parity.hidden = 130;
    c.parity.out_dim = 4;
    c.seeds = {0, 1};
    const json r = run_experiment("parity", c, dir.path / "parity");
    CHECK(r.at("per_seed").size() == 2);
    CHECK(r.at("memory").at("bytes_saved") == (12544000LL + 5017600LL) * 24);
  }
  SUBCASE("prune") {
    c.prune.checkpoints = {base_ck};
    c.prune.target_depth = 1;
    c.prune.finetune_steps = 2;
    c.prune.calibration_prompts = 2;
    c.prune.bi_steps = 4;
    c.prune.timesteps = 2;
    c.prune.eval_batches = 1;
    c.prune.eval_batch = 4;
    const json r = run_experiment("prune", c, dir.path / "prune");
    const json& s = r.at("per_seed").at(0);
    CHECK(s.at("bi_scores").size() == 2);
    CHECK(s.at("kept_blocks").size() == 1);
  }
  SUBCASE("scaling") {
    c.scaling.base_checkpoints = {base_ck};
    c.scaling.large_checkpoints = {base_ck};
    c.scaling.n_values = {1, 2};
    c.scaling.compare_n = 2;
    c.scaling.prompts = 3;
    c.scaling.steps = 2;
    c.scaling.long_steps = 4;
    const json r = run_experiment("scaling", c, dir.path / "scaling");
    const json& s = r.at("per_seed").at(0);
    CHECK(s.at("base_curve").size() == 2);
    CHECK(s.contains("small_scaled_beats_large_single"));
    CHECK(r.contains("samples_beat_steps"));
  }
  SUBCASE("missing base checkpoint is a config error") {
    c.growth.base_checkpoints = {(dir.path / "nowhere").string()};
    CHECK_THROWS_AS(run_experiment("growth", c, dir.path / "g"), ConfigError);
    c.growth.base_checkpoints.clear();
    CHECK_THROWS_AS(run_experiment("growth", c, dir.path / "g"), ConfigError);
    CHECK_THROWS_AS(run_experiment("nonsense", c, dir.path / "g"), ConfigError);
  }
}
