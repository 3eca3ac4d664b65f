#include <algorithm>
#include <cmath>
#include <fstream>

#include "lindit/harness.hpp"
#include "lindit/inference_scaling.hpp"
#include "lindit/pruning.hpp"

namespace lindit {

using nlohmann::json;

namespace {

const std::string& checkpoint_for(const std::vector<std::string>& paths, std::size_t i, const std::string& what) {
  if (paths.empty()) throw ConfigError(what + ": no checkpoint given");
  return paths.size() == 1 ? paths[0] : paths.at(i);
}

Checkpoint load_required(const std::string& path, const std::string& what) {
  if (!fs::exists(fs::path(path) / "manifest.json")) throw ConfigError(what + ": missing checkpoint " + path);
  return load_checkpoint(path);
}

fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed-" + std::to_string(seed)); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void write_csv(const fs::path& path, const std::string& header, const std::vector<std::vector<double>>& rows) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << header << "\n";
  out.precision(10);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << "\n";
  }
}

json finish(const fs::path& out, json result) {
  write_json(out / "result.json", result);
  return result;
}

json success_json(const SuccessEval& s) { return {{"success", s.success}, {"trials", s.trials}}; }

}  // namespace

json experiment_growth_vs_scratch(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto& g = cfg.growth;
  json per_seed = json::array();
  bool all_pass = true;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    const std::uint64_t seed = cfg.seeds[i];
    const Checkpoint base = load_required(checkpoint_for(g.base_checkpoints, i, "growth"), "growth");
    GrowthPlan plan;
    plan.base_depth = base.model.depth();
    plan.target_depth = g.target_depth;
    plan.drop_last = g.drop_last;
    plan.strategy = GrowthStrategy::partial(g.sigma);
    const auto grown0 = grow(base.model, plan, derive_seed(seed, {0x6e}));
    ModelConfig scfg = base.model.config;
    scfg.depth = g.target_depth;
    const auto scratch0 = init_model<float>(scfg, derive_seed(seed, {0x5c}));

    const auto set = eval_loss_set(cfg.task, scfg, g.eval_batches, g.eval_batch, derive_seed(seed, {0xe5}));
    const BatchStream stream = toy_stream(cfg.task, scfg, cfg.train.batch, derive_seed(seed, {0x6d}));
    Trainer grown(grown0, cfg.optimizer, stream, derive_seed(seed, {0x6d}));
    Trainer scratch(scratch0, cfg.optimizer, stream, derive_seed(seed, {0x6d}));

    const double base_loss = eval_loss(base.model, set);
    std::vector<std::vector<double>> curve;
    curve.push_back({0.0, eval_loss(grown.model(), set), eval_loss(scratch.model(), set)});
    for (int done = 0; done < g.steps;) {
      const int chunk = std::min(g.eval_every, g.steps - done);
      grown.run(chunk);
      scratch.run(chunk);
      done += chunk;
      curve.push_back({static_cast<double>(done), eval_loss(grown.model(), set), eval_loss(scratch.model(), set)});
    }
    const double target = curve.back()[2];
    std::optional<int> grown_steps;
    for (const auto& row : curve) {
      if (row[1] <= target) {
        grown_steps = static_cast<int>(row[0]);
        break;
      }
    }
    const bool pass = grown_steps.has_value() && *grown_steps < g.steps;
    all_pass = all_pass && pass;

    const auto base_success = eval_success(base.model, cfg.task, cfg.eval);
    const auto grown0_success = eval_success(grown0, cfg.task, cfg.eval);
    const auto scratch0_success = eval_success(scratch0, cfg.task, cfg.eval);
    const auto grown_success = eval_success(grown.model(), cfg.task, cfg.eval);
    const auto scratch_success = eval_success(scratch.model(), cfg.task, cfg.eval);

    const fs::path dir = seed_dir(out, seed);
    write_csv(dir / "curve.csv", "step,grown_loss,scratch_loss", curve);
    save_checkpoint(dir / "grown", Checkpoint{grown.model(), std::nullopt, {{"seed", seed}, {"role", "grown"}}});
    save_checkpoint(dir / "scratch", Checkpoint{scratch.model(), std::nullopt, {{"seed", seed}, {"role", "scratch"}}});

    per_seed.push_back({{"seed", seed},
                        {"base_depth", plan.base_depth},
                        {"target_depth", plan.target_depth},
                        {"drop_last", plan.drop_last},
                        {"budget_steps", g.steps},
                        {"target_loss", target},
                        {"grown_steps_to_target", grown_steps ? json(*grown_steps) : json(nullptr)},
                        {"steps_ratio", grown_steps ? json(static_cast<double>(*grown_steps) / g.steps) : json(nullptr)},
                        {"base_eval_loss", base_loss},
                        {"grown_step0_eval_loss", curve.front()[1]},
                        {"identity_preserved", curve.front()[1] == base_loss},
                        {"base_success", success_json(base_success)},
                        {"grown_step0_success", success_json(grown0_success)},
                        {"scratch_step0_success", success_json(scratch0_success)},
                        {"grown_final_success", success_json(grown_success)},
                        {"scratch_final_success", success_json(scratch_success)},
                        {"grown_checkpoint", (dir / "grown").string()},
                        {"scratch_checkpoint", (dir / "scratch").string()},
                        {"curve_csv", (dir / "curve.csv").string()},
                        {"pass", pass}});
  }
  return finish(out, {{"experiment", "growth"}, {"per_seed", per_seed}, {"pass", all_pass}});
}

json experiment_init_stability(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto& s = cfg.stability;
  json per_seed = json::array();
  bool partial_finite = true;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    const std::uint64_t seed = cfg.seeds[i];
    const Checkpoint base = load_required(checkpoint_for(s.base_checkpoints, i, "stability"), "stability");
    CameConfig opt = cfg.optimizer;
    opt.lr = s.lr;
    json strategies = json::array();
    for (auto strategy : {GrowthStrategy::partial(), GrowthStrategy::cyclic(), GrowthStrategy::block()}) {
      GrowthPlan plan;
      plan.base_depth = base.model.depth();
      plan.target_depth = s.target_depth;
      plan.drop_last = strategy.kind == GrowthKind::PartialPreservation ? s.drop_last : 0;
      plan.strategy = strategy;
      ModelConfig mcfg = base.model.config;
      mcfg.depth = s.target_depth;
      const BatchStream stream = toy_stream(cfg.task, mcfg, cfg.train.batch, derive_seed(seed, {0x57}));
      Trainer trainer(grow(base.model, plan, derive_seed(seed, {0x6e})), opt, stream, derive_seed(seed, {0x57}));
      std::vector<double> losses;
      std::optional<int> diverged_at;
      std::string error;
      for (int k = 0; k < s.steps; ++k) {
        try {
          losses.push_back(trainer.run(1).front());
        } catch (const NumericError& e) {
          diverged_at = k;
          error = e.what();
          break;
        }
      }
      const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(s.early_window), losses.size());
      double mean = 0.0, var = 0.0;
      for (std::size_t k = 0; k < w; ++k) mean += losses[k] / static_cast<double>(w);
      for (std::size_t k = 0; k < w; ++k) var += (losses[k] - mean) * (losses[k] - mean) / static_cast<double>(w);
      const bool finite = !diverged_at.has_value();
      if (strategy.kind == GrowthKind::PartialPreservation) partial_finite = partial_finite && finite;
      std::vector<std::vector<double>> rows;
      for (std::size_t k = 0; k < losses.size(); ++k) rows.push_back({static_cast<double>(k + 1), losses[k]});
      const fs::path csv = seed_dir(out, seed) / (to_string(strategy.kind) + ".csv");
      write_csv(csv, "step,loss", rows);
      strategies.push_back({{"strategy", to_string(strategy.kind)},
                            {"budget_steps", s.steps},
                            {"completed_steps", losses.size()},
                            {"finite", finite},
                            {"diverged_at", diverged_at ? json(*diverged_at) : json(nullptr)},
                            {"error", error},
                            {"early_loss_variance", var},
                            {"final_loss", losses.empty() ? json(nullptr) : json(losses.back())},
                            {"trace_csv", csv.string()}});
    }
    per_seed.push_back({{"seed", seed}, {"lr", s.lr}, {"strategies", strategies}});
  }
  return finish(out, {{"experiment", "stability"}, {"per_seed", per_seed}, {"partial_all_finite", partial_finite}});
}

double regression_final_loss(const ParityExperimentConfig& p, const CameConfig& opt, std::uint64_t seed,
                             std::vector<double>* trace) {
  Rng data_rng(derive_seed(seed, {0x9a}));
  const MatrixF x = normal_matrix<float>(p.samples, p.in_dim, 1.0, data_rng);
  const MatrixF a = normal_matrix<float>(p.in_dim, p.hidden, 1.0 / std::sqrt(p.in_dim), data_rng);
  const MatrixF b = normal_matrix<float>(p.hidden, p.out_dim, 1.0 / std::sqrt(p.hidden), data_rng);
  const MatrixF y = MatrixF((x * a).cwiseMax(0.0f) * b) + normal_matrix<float>(p.samples, p.out_dim, p.noise, data_rng);

  Rng init_rng(derive_seed(seed, {0x51}));
  MatrixF w1 = normal_matrix<float>(p.in_dim, p.hidden, 1.0 / std::sqrt(p.in_dim), init_rng);
  MatrixF w2 = normal_matrix<float>(p.hidden, p.out_dim, 1.0 / std::sqrt(p.hidden), init_rng);
  ParamState s1 = make_state("w1", p.in_dim, p.hidden, ParamKind::Matrix, opt);
  ParamState s2 = make_state("w2", p.hidden, p.out_dim, ParamKind::Matrix, opt);

  auto loss_of = [&](bool grads) {
    Tape<float> tape(grads);
    Var<float> v1 = tape.parameter(w1), v2 = tape.parameter(w2);
    Var<float> loss = mse(matmul(relu(matmul(tape.constant(x), v1)), v2), tape.constant(y));
    if (grads) {
      tape.backward(loss);
      came_step(s1, w1, tape.grad(v1), opt);
      came_step(s2, w2, tape.grad(v2), opt);
    }
    return static_cast<double>(loss.value()(0, 0));
  };
  for (int k = 0; k < p.steps; ++k) {
    const double l = loss_of(true);
    if (trace != nullptr) trace->push_back(l);
  }
  return loss_of(false);
}

json experiment_optimizer_parity(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto& p = cfg.parity;
  CameConfig q = cfg.optimizer;
  q.lr = p.lr;
  q.quantize = true;
  CameConfig full = q;
  full.quantize = false;
  json per_seed = json::array();
  bool all_in_band = true;
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<double> tq, tf;
    const double lq = regression_final_loss(p, q, seed, &tq);
    const double lf = regression_final_loss(p, full, seed, &tf);
    const double ratio = lq / lf;
    const bool in_band = ratio >= 0.9 && ratio <= 1.1;
    all_in_band = all_in_band && in_band;
    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < tq.size(); ++k) rows.push_back({static_cast<double>(k + 1), tq[k], tf[k]});
    write_csv(seed_dir(out, seed) / "loss.csv", "step,loss_8bit,loss_32bit", rows);
    per_seed.push_back({{"seed", seed}, {"final_loss_8bit", lq}, {"final_loss_32bit", lf}, {"ratio", ratio},
                        {"in_band", in_band}});
  }

  std::vector<ParamState> layers;
  for (auto [r, c] : {std::pair{2240, 5600}, std::pair{2240, 2240}, std::pair{64, 64}}) {
    layers.push_back(make_state(std::to_string(r) + "x" + std::to_string(c), r, c, ParamKind::Matrix, q));
  }
  const MemoryReport mem = memory_report(layers);
  json layer_rows = json::array();
  double worst_rel = 0.0;
  for (const auto& l : mem.layers) {
    const double n = static_cast<double>(l.elements);
    const bool quantized = l.mode == StateMode::Quantized;
    const double predicted = n * (1.0 + 16.0 / 2048.0);
    const double rel = quantized ? std::abs(static_cast<double>(l.first_moment_bytes) - predicted) / predicted : 0.0;
    if (quantized) worst_rel = std::max(worst_rel, rel);
    layer_rows.push_back({{"name", l.name},
                          {"elements", l.elements},
                          {"quantized", quantized},
                          {"first_moment_bytes", l.first_moment_bytes},
                          {"second_order_bytes", l.second_order_bytes},
                          {"predicted_first_moment_bytes", quantized ? json(predicted) : json(nullptr)},
                          {"relative_error", rel}});
  }
  return finish(out, {{"experiment", "parity"},
                      {"per_seed", per_seed},
                      {"all_in_band", all_in_band},
                      {"memory",
                       {{"bytes_saved", mem.bytes_saved},
                        {"bytes_used", mem.bytes_used},
                        {"layers", layer_rows},
                        {"worst_relative_error", worst_rel}}}});
}

json experiment_prune_recover(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto& p = cfg.prune;
  json per_seed = json::array();
  bool all_pass = true;
  std::vector<int> loss_improved;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    const std::uint64_t seed = cfg.seeds[i];
    const Checkpoint ck = load_required(checkpoint_for(p.checkpoints, i, "prune"), "prune");
    const auto& model = ck.model;
    std::vector<std::vector<int>> calib;
    for (const auto& pr : eval_prompts(cfg.task, p.calibration_prompts, derive_seed(seed, {0xb1}))) {
      calib.push_back(pr.tokens());
    }
    const auto ts = probe_timesteps(model.config.timesteps, p.bi_steps, p.timesteps);
    const auto report = compute_block_importance(model, calib, ts, derive_seed(seed, {0xb2}), p.bi_steps);
    const auto pruned = prune(model, report, PruneSpec{p.target_depth});
    CameConfig opt = cfg.optimizer;
    if (p.finetune_lr > 0.0) opt.lr = p.finetune_lr;
    const BatchStream stream = toy_stream(cfg.task, pruned.config, cfg.train.batch, derive_seed(seed, {0xf7}));
    const auto ft = finetune_recover(pruned, stream, p.finetune_steps, opt);

    const auto set = eval_loss_set(cfg.task, model.config, p.eval_batches, p.eval_batch, derive_seed(seed, {0xe6}));
    const double loss_unpruned = eval_loss(model, set), loss_pruned = eval_loss(pruned, set),
                 loss_ft = eval_loss(ft.model, set);
    const auto s_unpruned = eval_success(model, cfg.task, cfg.eval);
    const auto s_pruned = eval_success(pruned, cfg.task, cfg.eval);
    const auto s_ft = eval_success(ft.model, cfg.task, cfg.eval);
    const bool recovered = s_ft.success >= 0.9 * s_unpruned.success;
    const bool improved = s_ft.success > s_pruned.success;
    const bool pass = recovered && improved;
    all_pass = all_pass && pass;
    loss_improved.push_back(loss_ft < loss_pruned ? 1 : 0);

    const fs::path dir = seed_dir(out, seed);
    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < ft.losses.size(); ++k) rows.push_back({static_cast<double>(k + 1), ft.losses[k]});
    write_csv(dir / "finetune.csv", "step,loss", rows);
    std::vector<std::vector<double>> bi_rows;
    for (std::size_t b = 0; b < report.scores.size(); ++b) bi_rows.push_back({static_cast<double>(b), report.scores[b]});
    write_csv(dir / "bi.csv", "block,bi", bi_rows);
    save_checkpoint(dir / "finetuned", Checkpoint{ft.model, std::nullopt, {{"seed", seed}, {"role", "finetuned"}}});

    per_seed.push_back({{"seed", seed},
                        {"bi_scores", report.scores},
                        {"kept_blocks", blocks_to_keep(report.scores, p.target_depth)},
                        {"bi_warnings", report.warnings},
                        {"finetune_steps", p.finetune_steps},
                        {"unpruned_success", success_json(s_unpruned)},
                        {"pruned_success", success_json(s_pruned)},
                        {"finetuned_success", success_json(s_ft)},
                        {"unpruned_eval_loss", loss_unpruned},
                        {"pruned_eval_loss", loss_pruned},
                        {"finetuned_eval_loss", loss_ft},
                        {"recovery_ratio", s_unpruned.success > 0 ? json(s_ft.success / s_unpruned.success) : json(nullptr)},
                        {"recovered", recovered},
                        {"improved_over_pruned", improved},
                        {"pass", pass}});
  }
  std::sort(loss_improved.begin(), loss_improved.end());
  return finish(out, {{"experiment", "prune"},
                      {"per_seed", per_seed},
                      {"pass", all_pass},
                      {"median_loss_improved", loss_improved[loss_improved.size() / 2] == 1}});
}

json experiment_inference_scaling(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto& s = cfg.scaling;
  const OracleVerifier oracle;
  std::vector<int> n_values = s.n_values;
  if (std::find(n_values.begin(), n_values.end(), s.compare_n) == n_values.end()) n_values.push_back(s.compare_n);
  if (std::find(n_values.begin(), n_values.end(), 1) == n_values.end()) n_values.push_back(1);
  std::sort(n_values.begin(), n_values.end());

  auto curve = [&](const LinearDiT<float>& model, const std::vector<toy::ToyPrompt>& prompts, std::vector<int> ns,
                   int steps, std::uint64_t seed) {
    CoverageOptions opt;
    opt.n_values = std::move(ns);
    opt.steps = steps;
    opt.seed = seed;
    return coverage_curve(ModelGenerator(model), prompts, oracle, opt);
  };
  auto rows_json = [](const std::vector<CoverageRow>& rows) {
    json j = json::array();
    for (const auto& r : rows) {
      j.push_back({{"n", r.n}, {"success", r.success}, {"analytic", r.analytic}, {"stderr", r.stderr_}, {"trials", r.trials}});
    }
    return j;
  };
  auto monotone = [](const std::vector<CoverageRow>& rows) {
    for (std::size_t k = 1; k < rows.size(); ++k) {
      if (rows[k].success < rows[k - 1].success) return false;
    }
    return true;
  };
  auto at_n = [](const std::vector<CoverageRow>& rows, int n) {
    for (const auto& r : rows) {
      if (r.n == n) return r.success;
    }
    return 0.0;
  };

  json per_seed = json::array();
  std::vector<double> many_short, one_long;
  bool all_monotone = true;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    const std::uint64_t seed = cfg.seeds[i];
    const Checkpoint base = load_required(checkpoint_for(s.base_checkpoints, i, "scaling"), "scaling");
    const auto prompts = eval_prompts(cfg.task, s.prompts, derive_seed(seed, {0x5c, 1}));
    const std::uint64_t sample_seed = derive_seed(seed, {0x5c, 2});
    const auto rows = curve(base.model, prompts, n_values, s.steps, sample_seed);
    const auto long_rows = curve(base.model, prompts, {1}, s.long_steps, sample_seed);
    const double short_n = at_n(rows, s.compare_n), long_1 = long_rows.front().success;
    many_short.push_back(short_n);
    one_long.push_back(long_1);
    const bool mono = monotone(rows);
    all_monotone = all_monotone && mono;

    std::vector<std::vector<double>> csv;
    for (const auto& r : rows) csv.push_back({static_cast<double>(r.n), r.success, r.analytic, r.stderr_});
    write_csv(seed_dir(out, seed) / "coverage_base.csv", "n,success,analytic,stderr", csv);

    json entry{{"seed", seed},
               {"base_depth", base.model.depth()},
               {"base_curve", rows_json(rows)},
               {"base_monotone", mono},
               {"steps", s.steps},
               {"long_steps", s.long_steps},
               {"compare_n", s.compare_n},
               {"success_many_short", short_n},
               {"success_one_long", long_1},
               {"samples_beat_steps", short_n > long_1}};
    if (!s.large_checkpoints.empty()) {
      const Checkpoint large = load_required(s.large_checkpoints.at(i), "scaling");
      const auto lrows = curve(large.model, prompts, n_values, s.steps, sample_seed);
      std::vector<std::vector<double>> lcsv;
      for (const auto& r : lrows) lcsv.push_back({static_cast<double>(r.n), r.success, r.analytic, r.stderr_});
      write_csv(seed_dir(out, seed) / "coverage_large.csv", "n,success,analytic,stderr", lcsv);
      const bool lmono = monotone(lrows);
      all_monotone = all_monotone && lmono;
      double best = 0.0;
      int best_n = 1;
      for (const auto& r : rows) {
        if (r.success > best) {
          best = r.success;
          best_n = r.n;
        }
      }
      entry["large_depth"] = large.model.depth();
      entry["large_curve"] = rows_json(lrows);
      entry["large_monotone"] = lmono;
      entry["base_best"] = {{"n", best_n}, {"success", best}};
      entry["large_single"] = at_n(lrows, 1);
      entry["small_scaled_beats_large_single"] = best > at_n(lrows, 1);
    }
    per_seed.push_back(entry);
  }
  const double med_short = median(many_short), med_long = median(one_long);
  return finish(out, {{"experiment", "scaling"},
                      {"per_seed", per_seed},
                      {"curves_monotone", all_monotone},
                      {"median_success_many_short", med_short},
                      {"median_success_one_long", med_long},
                      {"samples_beat_steps", med_short > med_long}});
}

json run_experiment(const std::string& name, const RunConfig& cfg, const fs::path& out) {
  if (name == "growth") return experiment_growth_vs_scratch(cfg, out);
  if (name == "stability") return experiment_init_stability(cfg, out);
  if (name == "parity") return experiment_optimizer_parity(cfg, out);
  if (name == "prune") return experiment_prune_recover(cfg, out);
  if (name == "scaling") return experiment_inference_scaling(cfg, out);
  throw ConfigError("unknown experiment '" + name + "'");
}

}  // namespace lindit
