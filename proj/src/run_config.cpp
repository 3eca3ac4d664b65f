#include <fstream>

#include "lindit/harness.hpp"
#include "lindit/serialization.hpp"

namespace lindit {

toy::GrammarConfig TaskConfig::grammar() const {
  toy::GrammarConfig g;
  g.counts = counts;
  g.relation_fraction = relation_fraction;
  for (const auto& text : held_out) {
    try {
      g.held_out.push_back(toy::parse_prompt(text));
    } catch (const InputError& e) {
      throw ConfigError(std::string("task.held_out: ") + e.what());
    }
  }
  g.validate();
  return g;
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_checkpoint_list(const std::vector<std::string>& paths, std::size_t seeds, const std::string& where) {
  require(paths.empty() || paths.size() == 1 || paths.size() == seeds,
          where + ": give one checkpoint per seed or a single shared one");
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  optimizer.validate();
  task.grammar();
  require(train.steps >= 0, "train.steps must be >= 0");
  require(train.batch >= 1, "train.batch must be >= 1");
  require(train.eval_every >= 0 && train.checkpoint_every >= 0, "train cadences must be >= 0");
  require(eval.prompts >= 1 && eval.samples_per_prompt >= 1 && eval.steps >= 1, "eval sizes must be >= 1");
  require(!seeds.empty(), "seeds must not be empty");
  require(!out.empty(), "out must not be empty");
  require(experiment.empty() ||
              std::find(kExperimentNames.begin(), kExperimentNames.end(), experiment) != kExperimentNames.end(),
          "unknown experiment '" + experiment + "'");
  require(growth.steps >= 1 && growth.eval_every >= 1 && growth.eval_batches >= 1 && growth.eval_batch >= 1,
          "growth sizes must be >= 1");
  require(growth.sigma > 0.0, "growth.sigma must be > 0");
  check_checkpoint_list(growth.base_checkpoints, seeds.size(), "growth.base_checkpoints");
  require(stability.steps >= 1 && stability.early_window >= 1 && stability.lr > 0.0, "stability sizes must be >= 1");
  check_checkpoint_list(stability.base_checkpoints, seeds.size(), "stability.base_checkpoints");
  require(parity.steps >= 1 && parity.in_dim >= 1 && parity.hidden >= 1 && parity.out_dim >= 1 && parity.samples >= 1,
          "parity sizes must be >= 1");
  require(parity.noise >= 0.0, "parity noise must be >= 0");
  require(prune.target_depth >= 1 && prune.finetune_steps >= 0 && prune.calibration_prompts >= 1 &&
              prune.timesteps >= 1 && prune.bi_steps >= 1 && prune.finetune_lr >= 0.0,
          "prune sizes must be positive");
  check_checkpoint_list(prune.checkpoints, seeds.size(), "prune.checkpoints");
  require(!scaling.n_values.empty() && scaling.prompts >= 1 && scaling.steps >= 1 && scaling.long_steps >= 1 &&
              scaling.compare_n >= 1,
          "scaling sizes must be >= 1");
  for (int n : scaling.n_values) require(n >= 1, "scaling.n_values must be >= 1");
  check_checkpoint_list(scaling.base_checkpoints, seeds.size(), "scaling.base_checkpoints");
  require(scaling.large_checkpoints.empty() || scaling.large_checkpoints.size() == scaling.base_checkpoints.size(),
          "scaling.large_checkpoints must match base_checkpoints");
}

nlohmann::json to_json(const RunConfig& c) {
  return {
      {"model", to_json(c.model)},
      {"optimizer", to_json(c.optimizer)},
      {"task", {{"counts", c.task.counts}, {"relation_fraction", c.task.relation_fraction}, {"held_out", c.task.held_out}}},
      {"train",
       {{"steps", c.train.steps},
        {"batch", c.train.batch},
        {"eval_every", c.train.eval_every},
        {"checkpoint_every", c.train.checkpoint_every}}},
      {"eval",
       {{"prompts", c.eval.prompts},
        {"samples_per_prompt", c.eval.samples_per_prompt},
        {"steps", c.eval.steps},
        {"seed", c.eval.seed}}},
      {"seeds", c.seeds},
      {"experiment", c.experiment},
      {"out", c.out},
      {"growth",
       {{"base_checkpoints", c.growth.base_checkpoints},
        {"target_depth", c.growth.target_depth},
        {"drop_last", c.growth.drop_last},
        {"sigma", c.growth.sigma},
        {"steps", c.growth.steps},
        {"eval_every", c.growth.eval_every},
        {"eval_batches", c.growth.eval_batches},
        {"eval_batch", c.growth.eval_batch}}},
      {"stability",
       {{"base_checkpoints", c.stability.base_checkpoints},
        {"target_depth", c.stability.target_depth},
        {"drop_last", c.stability.drop_last},
        {"lr", c.stability.lr},
        {"steps", c.stability.steps},
        {"early_window", c.stability.early_window}}},
      {"parity",
       {{"steps", c.parity.steps},
        {"in_dim", c.parity.in_dim},
        {"hidden", c.parity.hidden},
        {"out_dim", c.parity.out_dim},
        {"samples", c.parity.samples},
        {"lr", c.parity.lr},
        {"noise", c.parity.noise}}},
      {"prune",
       {{"checkpoints", c.prune.checkpoints},
        {"target_depth", c.prune.target_depth},
        {"finetune_steps", c.prune.finetune_steps},
        {"finetune_lr", c.prune.finetune_lr},
        {"calibration_prompts", c.prune.calibration_prompts},
        {"timesteps", c.prune.timesteps},
        {"bi_steps", c.prune.bi_steps},
        {"eval_batches", c.prune.eval_batches},
        {"eval_batch", c.prune.eval_batch}}},
      {"scaling",
       {{"base_checkpoints", c.scaling.base_checkpoints},
        {"large_checkpoints", c.scaling.large_checkpoints},
        {"n_values", c.scaling.n_values},
        {"prompts", c.scaling.prompts},
        {"steps", c.scaling.steps},
        {"long_steps", c.scaling.long_steps},
        {"compare_n", c.scaling.compare_n}}},
  };
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"model", "optimizer", "task", "train", "eval", "seeds", "experiment", "out", "growth",
                       "stability", "parity", "prune", "scaling"},
                      "config");
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("optimizer")) c.optimizer = came_config_from_json(j.at("optimizer"));
  if (j.contains("task")) {
    const auto& t = j.at("task");
    reject_unknown_keys(t, {"counts", "relation_fraction", "held_out"}, "task");
    read_optional(t, "counts", c.task.counts, "task");
    read_optional(t, "relation_fraction", c.task.relation_fraction, "task");
    read_optional(t, "held_out", c.task.held_out, "task");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown_keys(t, {"steps", "batch", "eval_every", "checkpoint_every"}, "train");
    read_optional(t, "steps", c.train.steps, "train");
    read_optional(t, "batch", c.train.batch, "train");
    read_optional(t, "eval_every", c.train.eval_every, "train");
    read_optional(t, "checkpoint_every", c.train.checkpoint_every, "train");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown_keys(e, {"prompts", "samples_per_prompt", "steps", "seed"}, "eval");
    read_optional(e, "prompts", c.eval.prompts, "eval");
    read_optional(e, "samples_per_prompt", c.eval.samples_per_prompt, "eval");
    read_optional(e, "steps", c.eval.steps, "eval");
    read_optional(e, "seed", c.eval.seed, "eval");
  }
  read_optional(j, "seeds", c.seeds, "config");
  read_optional(j, "experiment", c.experiment, "config");
  read_optional(j, "out", c.out, "config");
  if (j.contains("growth")) {
    const auto& g = j.at("growth");
    const std::string w = "growth";
    reject_unknown_keys(g,
                        {"base_checkpoints", "target_depth", "drop_last", "sigma", "steps", "eval_every",
                         "eval_batches", "eval_batch"},
                        w);
    read_optional(g, "base_checkpoints", c.growth.base_checkpoints, w);
    read_optional(g, "target_depth", c.growth.target_depth, w);
    read_optional(g, "drop_last", c.growth.drop_last, w);
    read_optional(g, "sigma", c.growth.sigma, w);
    read_optional(g, "steps", c.growth.steps, w);
    read_optional(g, "eval_every", c.growth.eval_every, w);
    read_optional(g, "eval_batches", c.growth.eval_batches, w);
    read_optional(g, "eval_batch", c.growth.eval_batch, w);
  }
  if (j.contains("stability")) {
    const auto& s = j.at("stability");
    const std::string w = "stability";
    reject_unknown_keys(s, {"base_checkpoints", "target_depth", "drop_last", "lr", "steps", "early_window"}, w);
    read_optional(s, "base_checkpoints", c.stability.base_checkpoints, w);
    read_optional(s, "target_depth", c.stability.target_depth, w);
    read_optional(s, "drop_last", c.stability.drop_last, w);
    read_optional(s, "lr", c.stability.lr, w);
    read_optional(s, "steps", c.stability.steps, w);
    read_optional(s, "early_window", c.stability.early_window, w);
  }
  if (j.contains("parity")) {
    const auto& p = j.at("parity");
    const std::string w = "parity";
    reject_unknown_keys(p, {"steps", "in_dim", "hidden", "out_dim", "samples", "lr", "noise"}, w);
    read_optional(p, "steps", c.parity.steps, w);
    read_optional(p, "in_dim", c.parity.in_dim, w);
    read_optional(p, "hidden", c.parity.hidden, w);
    read_optional(p, "out_dim", c.parity.out_dim, w);
    read_optional(p, "samples", c.parity.samples, w);
    read_optional(p, "lr", c.parity.lr, w);
    read_optional(p, "noise", c.parity.noise, w);
  }
  if (j.contains("prune")) {
    const auto& p = j.at("prune");
    const std::string w = "prune";
    reject_unknown_keys(p,
                        {"checkpoints", "target_depth", "finetune_steps", "finetune_lr", "calibration_prompts",
                         "timesteps", "bi_steps", "eval_batches", "eval_batch"},
                        w);
    read_optional(p, "checkpoints", c.prune.checkpoints, w);
    read_optional(p, "target_depth", c.prune.target_depth, w);
    read_optional(p, "finetune_steps", c.prune.finetune_steps, w);
    read_optional(p, "finetune_lr", c.prune.finetune_lr, w);
    read_optional(p, "calibration_prompts", c.prune.calibration_prompts, w);
    read_optional(p, "timesteps", c.prune.timesteps, w);
    read_optional(p, "bi_steps", c.prune.bi_steps, w);
    read_optional(p, "eval_batches", c.prune.eval_batches, w);
    read_optional(p, "eval_batch", c.prune.eval_batch, w);
  }
  if (j.contains("scaling")) {
    const auto& s = j.at("scaling");
    const std::string w = "scaling";
    reject_unknown_keys(s,
                        {"base_checkpoints", "large_checkpoints", "n_values", "prompts", "steps", "long_steps",
                         "compare_n"},
                        w);
    read_optional(s, "base_checkpoints", c.scaling.base_checkpoints, w);
    read_optional(s, "large_checkpoints", c.scaling.large_checkpoints, w);
    read_optional(s, "n_values", c.scaling.n_values, w);
    read_optional(s, "prompts", c.scaling.prompts, w);
    read_optional(s, "steps", c.scaling.steps, w);
    read_optional(s, "long_steps", c.scaling.long_steps, w);
    read_optional(s, "compare_n", c.scaling.compare_n, w);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace lindit
