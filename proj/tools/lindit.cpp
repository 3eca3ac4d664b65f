#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>

#include "lindit/harness.hpp"
#include "lindit/inference_scaling.hpp"
#include "lindit/pruning.hpp"

using namespace lindit;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitNothing = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string precision = "f32";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "RunConfig JSON file");
  cmd->add_option("--seed", c.seed, "Seed (replaces the config's seed list)");
  cmd->add_option("--out", c.out, "Output directory or file");
  cmd->add_option("--precision", c.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.out = c.out;
  cfg.validate();
  return cfg;
}

void require_f32(const Common& c, const std::string& cmd) {
  if (c.precision != "f32") throw ConfigError(cmd + ": only --precision f32 is supported");
}

std::string require(const std::string& v, const std::string& what) {
  if (v.empty()) throw ConfigError("missing " + what);
  return v;
}

std::vector<std::vector<int>> read_prompt_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read prompts file " + path);
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(toy::parse_prompt(line).tokens());
  }
  return out;
}

void write_ppm(const toy::Grid& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << "P6\n" << toy::kGridW << " " << toy::kGridH << "\n255\n";
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index ch = 0; ch < g.cols(); ++ch) {
      const double v = std::clamp(static_cast<double>(g(i, ch)), 0.0, 1.0);
      out.put(static_cast<char>(std::lround(v * 255.0)));
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linear diffusion transformer toolkit"};
  app.require_subcommand(1);

  Common train_c, grow_c, bi_c, prune_c, ft_c, select_c, exp_c;

  auto* train_cmd = app.add_subcommand("train", "Train a model from initialization or resume");
  add_common(train_cmd, train_c);
  std::string resume;
  train_cmd->add_option("--resume", resume, "Checkpoint directory to resume from");

  auto* grow_cmd = app.add_subcommand("grow", "Grow a checkpoint to a deeper model");
  add_common(grow_cmd, grow_c);
  std::string grow_ckpt, strategy = "partial";
  int grow_target = 0, drop_last = 2;
  double sigma = 0.02;
  bool no_identity = false;
  grow_cmd->add_option("--checkpoint", grow_ckpt)->required();
  grow_cmd->add_option("--strategy", strategy)->check(CLI::IsMember({"partial", "cyclic", "block"}));
  grow_cmd->add_option("--target-depth", grow_target)->required();
  grow_cmd->add_option("--drop-last", drop_last);
  grow_cmd->add_option("--sigma", sigma);
  grow_cmd->add_flag("--no-identity-init", no_identity);

  auto* bi_cmd = app.add_subcommand("analyze-bi", "Block importance over calibration prompts");
  add_common(bi_cmd, bi_c);
  std::string bi_ckpt, prompts_file;
  int bi_timesteps = 5, bi_steps = 20;
  bi_cmd->add_option("--checkpoint", bi_ckpt)->required();
  bi_cmd->add_option("--prompts", prompts_file, "One prompt per line")->required();
  bi_cmd->add_option("--timesteps", bi_timesteps);
  bi_cmd->add_option("--steps", bi_steps);

  auto* prune_cmd = app.add_subcommand("prune", "Drop the least important blocks");
  add_common(prune_cmd, prune_c);
  std::string prune_ckpt, report_file;
  int prune_target = 0;
  prune_cmd->add_option("--checkpoint", prune_ckpt)->required();
  prune_cmd->add_option("--report", report_file)->required();
  prune_cmd->add_option("--target-depth", prune_target)->required();

  auto* ft_cmd = app.add_subcommand("finetune", "Short recovery fine-tune with a fresh optimizer");
  add_common(ft_cmd, ft_c);
  std::string ft_ckpt;
  int ft_steps = 100;
  double ft_lr = 0.0;
  ft_cmd->add_option("--checkpoint", ft_ckpt)->required();
  ft_cmd->add_option("--steps", ft_steps);
  ft_cmd->add_option("--lr", ft_lr, "Learning rate (default: config optimizer lr)");

  auto* select_cmd = app.add_subcommand("select", "Best-of-n selection by tournament");
  add_common(select_cmd, select_c);
  std::string select_ckpt, prompt_text, bracket_out, image_out;
  int n = 64, steps = 20;
  select_cmd->add_option("--checkpoint", select_ckpt)->required();
  select_cmd->add_option("--prompt", prompt_text)->required();
  select_cmd->add_option("--n", n);
  select_cmd->add_option("--steps", steps);
  select_cmd->add_option("--bracket-out", bracket_out);
  select_cmd->add_option("--image", image_out, "Write the winner as PPM");

  auto* exp_cmd = app.add_subcommand("experiment", "Run a reproduction experiment");
  add_common(exp_cmd, exp_c);
  std::string exp_name;
  exp_cmd->add_option("name", exp_name)->required()->check(CLI::IsMember(kExperimentNames));

  auto* report_cmd = app.add_subcommand("report", "Summarize a run directory");
  std::string run_dir;
  report_cmd->add_option("dir", run_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train_cmd) {
      require_f32(train_c, "train");
      const RunConfig cfg = resolve(train_c);
      for (std::uint64_t seed : cfg.seeds) {
        const fs::path out = cfg.seeds.size() == 1 ? fs::path(cfg.out) : fs::path(cfg.out) / ("seed-" + std::to_string(seed));
        const auto res = train(cfg, seed, out, resume.empty() ? std::nullopt : std::optional<fs::path>(resume));
        std::cout << "seed " << seed << ": " << res.losses.size() << " steps";
        if (!res.losses.empty()) std::cout << ", final loss " << res.losses.back();
        std::cout << ", checkpoint " << res.final_checkpoint.string() << "\n";
      }
    } else if (*grow_cmd) {
      require_f32(grow_c, "grow");
      const Checkpoint base = load_checkpoint(grow_ckpt);
      GrowthPlan plan;
      plan.base_depth = base.model.depth();
      plan.target_depth = grow_target;
      plan.drop_last = drop_last;
      plan.strategy = {parse_growth_kind(strategy), sigma};
      plan.identity_init = !no_identity;
      const std::uint64_t seed = grow_c.seed.value_or(0);
      const auto grown = grow(base.model, plan, seed);
      const std::string out = require(grow_c.out, "--out");
      save_checkpoint(out, Checkpoint{grown, std::nullopt,
                                      {{"grown_from", grow_ckpt}, {"strategy", strategy}, {"seed", seed}}});
      std::cout << "grew " << plan.base_depth << " -> " << grown.depth() << " blocks (" << strategy << ") into " << out
                << "\n";
    } else if (*bi_cmd) {
      const Checkpoint ck = load_checkpoint(bi_ckpt);
      const auto prompts = read_prompt_file(prompts_file);
      const auto ts = probe_timesteps(ck.model.config.timesteps, bi_steps, bi_timesteps);
      const std::uint64_t seed = bi_c.seed.value_or(0);
      const auto rep = bi_c.precision == "f64"
                           ? compute_block_importance(ck.model.cast<double>(), prompts, ts, seed, bi_steps)
                           : compute_block_importance(ck.model, prompts, ts, seed, bi_steps);
      for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
      write_json(require(bi_c.out, "--out"), json(rep.scores));
      for (std::size_t i = 0; i < rep.scores.size(); ++i) std::cout << "block " << i << ": " << rep.scores[i] << "\n";
    } else if (*prune_cmd) {
      require_f32(prune_c, "prune");
      const Checkpoint ck = load_checkpoint(prune_ckpt);
      const json scores = read_json(report_file);
      if (!scores.is_array()) throw ConfigError("prune: report must be a JSON array of scores");
      BlockImportanceReport rep;
      rep.scores = scores.get<std::vector<double>>();
      const auto pruned = prune(ck.model, rep, PruneSpec{prune_target});
      const std::string out = require(prune_c.out, "--out");
      save_checkpoint(out, Checkpoint{pruned, std::nullopt,
                                      {{"pruned_from", prune_ckpt}, {"kept", blocks_to_keep(rep.scores, prune_target)}}});
      std::cout << "pruned " << ck.model.depth() << " -> " << pruned.depth() << " blocks into " << out << "\n";
    } else if (*ft_cmd) {
      require_f32(ft_c, "finetune");
      const RunConfig cfg = resolve(ft_c);
      const Checkpoint ck = load_checkpoint(ft_ckpt);
      CameConfig opt = cfg.optimizer;
      if (ft_lr > 0.0) opt.lr = ft_lr;
      const std::uint64_t seed = cfg.seeds.front();
      const auto stream = toy_stream(cfg.task, ck.model.config, cfg.train.batch, derive_seed(seed, {0xf7}));
      const auto res = finetune_recover(ck.model, stream, ft_steps, opt);
      const std::string out = require(ft_c.out, "--out");
      save_checkpoint(out, Checkpoint{res.model, std::nullopt, {{"finetuned_from", ft_ckpt}, {"steps", ft_steps}}});
      std::cout << ft_steps << " fine-tune steps";
      if (!res.losses.empty()) std::cout << ", final loss " << res.losses.back();
      std::cout << ", checkpoint " << out << "\n";
    } else if (*select_cmd) {
      require_f32(select_c, "select");
      const Checkpoint ck = load_checkpoint(select_ckpt);
      const toy::ToyPrompt prompt = toy::parse_prompt(prompt_text);
      const OracleVerifier oracle;
      const auto res = select_best_of_n(ModelGenerator(ck.model), prompt, n, steps, oracle, select_c.seed.value_or(0));
      if (!bracket_out.empty()) write_bracket_jsonl(res, bracket_out);
      const int w = res.winners.front();
      const auto& v = res.verdicts.at(static_cast<std::size_t>(w));
      std::cout << "winner " << w << " (seed " << res.candidates.at(static_cast<std::size_t>(w)).seed << "): "
                << (v.match ? "match" : "no match") << ", confidence " << v.confidence << "\n";
      if (!image_out.empty()) write_ppm(res.candidates.at(static_cast<std::size_t>(w)).grid, image_out);
    } else if (*exp_cmd) {
      require_f32(exp_c, "experiment");
      RunConfig cfg = resolve(exp_c);
      cfg.experiment = exp_name;
      const json r = run_experiment(exp_name, cfg, cfg.out);
      std::cout << "wrote " << (fs::path(cfg.out) / "result.json").string() << "\n";
      for (const auto& [k, v] : r.items()) {
        if (v.is_primitive() && k != "experiment") std::cout << k << " = " << v.dump() << "\n";
      }
    } else if (*report_cmd) {
      const auto s = report(run_dir);
      std::cout << s.text;
      if (s.found.empty()) return kExitNothing;
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}
