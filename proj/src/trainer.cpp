#include <cmath>

#include "lindit/harness.hpp"
#include "lindit/inference_scaling.hpp"

namespace lindit {

nlohmann::json to_json(const MetricsRow& r) {
  nlohmann::json j{{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"wall", r.wall}};
  if (r.eval_success) j["eval_success"] = *r.eval_success;
  return j;
}

MetricsRow metrics_row_from_json(const nlohmann::json& j) {
  MetricsRow r;
  try {
    r.step = j.at("step").get<std::uint64_t>();
    r.loss = j.at("loss").is_null() ? std::nan("") : j.at("loss").get<double>();
    r.lr = j.at("lr").get<double>();
    r.wall = j.at("wall").get<double>();
    if (j.contains("eval_success")) r.eval_success = j.at("eval_success").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metrics row: ") + e.what());
  }
  return r;
}

std::vector<MetricsRow> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read metrics " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      rows.push_back(metrics_row_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("metrics " + path.string() + ": " + e.what());
    }
  }
  return rows;
}

MetricsLog::MetricsLog(const fs::path& path, std::uint64_t keep_through)
    : path_(path), start_(std::chrono::steady_clock::now()) {
  std::vector<MetricsRow> kept;
  if (keep_through > 0 && fs::exists(path)) {
    for (const auto& r : read_metrics(path)) {
      if (r.step <= keep_through) kept.push_back(r);
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw ConfigError("cannot write metrics " + path.string());
  for (const auto& r : kept) {
    out_ << to_json(r).dump() << "\n";
    last_ = r.step;
  }
  out_.flush();
}

void MetricsLog::append(MetricsRow row) {
  if (last_ && row.step <= *last_) {
    throw ContractError("metrics: step " + std::to_string(row.step) + " does not follow " + std::to_string(*last_));
  }
  out_ << to_json(row).dump() << "\n";
  out_.flush();
  last_ = row.step;
}

double MetricsLog::elapsed() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
}

BatchStream toy_stream(const TaskConfig& task, const ModelConfig& model, int batch, std::uint64_t seed) {
  const toy::GrammarConfig grammar = task.grammar();
  const CosineSchedule schedule(model.timesteps);
  return [grammar, schedule, batch, seed](std::uint64_t step) -> NoisedBatch {
    return toy::training_batch(grammar, schedule, batch, seed, step);
  };
}

Trainer::Trainer(LinearDiT<float> model, const CameConfig& opt, BatchStream stream, std::uint64_t data_seed,
                 std::uint64_t step)
    : model_(std::move(model)), opt_(model_.params, opt), stream_(std::move(stream)), data_seed_(data_seed), step_(step) {}

namespace {

CameOptimizer restore_optimizer(const Checkpoint& ckpt) {
  if (!ckpt.optimizer) throw ConfigError("checkpoint has no optimizer state to resume from");
  return CameOptimizer(ckpt.optimizer->config, ckpt.optimizer->states);
}

template <typename T>
T meta_field(const Checkpoint& ckpt, const char* key) {
  if (!ckpt.meta.contains(key)) throw ConfigError(std::string("checkpoint meta lacks '") + key + "'");
  return ckpt.meta.at(key).get<T>();
}

}  // namespace

Trainer::Trainer(const Checkpoint& ckpt, BatchStream stream)
    : model_(ckpt.model),
      opt_(restore_optimizer(ckpt)),
      stream_(std::move(stream)),
      data_seed_(meta_field<std::uint64_t>(ckpt, "data_seed")),
      step_(meta_field<std::uint64_t>(ckpt, "step")) {}

std::vector<double> Trainer::run(int steps, const StepCallback& on_step) {
  auto losses = train_steps(model_, opt_, stream_, step_, steps, on_step);
  step_ += losses.size();
  return losses;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c{model_, OptimizerSnapshot{opt_.config(), opt_.states()}, {}};
  c.meta = {{"step", step_}, {"data_seed", data_seed_}};
  return c;
}

TrainOutcome train(const RunConfig& cfg, std::uint64_t seed, const fs::path& out, const std::optional<fs::path>& resume) {
  cfg.validate();
  fs::create_directories(out);
  const std::uint64_t data_seed = derive_seed(seed, {0xda7a});
  BatchStream stream = toy_stream(cfg.task, cfg.model, cfg.train.batch, data_seed);
  std::optional<Trainer> trainer;
  std::string last_good = "none";
  if (resume) {
    const Checkpoint ck = load_checkpoint(*resume);
    if (!(ck.model.config == cfg.model)) throw ConfigError("resume: checkpoint model config differs from config");
    if (ck.meta.value("batch", cfg.train.batch) != cfg.train.batch) {
      throw ConfigError("resume: checkpoint was trained with a different batch size");
    }
    trainer.emplace(ck, stream);
    if (trainer->data_seed() != data_seed) throw ConfigError("resume: checkpoint belongs to a different seed");
    last_good = resume->string();
  } else {
    trainer.emplace(init_model<float>(cfg.model, derive_seed(seed, {0x1417})), cfg.optimizer, stream, data_seed);
  }
  auto save = [&](const fs::path& dir) {
    Checkpoint c = trainer->checkpoint();
    c.meta["batch"] = cfg.train.batch;
    c.meta["seed"] = seed;
    save_checkpoint(dir, c);
    last_good = dir.string();
  };
  auto step_dir = [&](std::uint64_t s) { return out / "checkpoints" / ("step-" + std::to_string(s)); };

  MetricsLog log(out / "metrics.jsonl", trainer->step());
  const auto total = static_cast<std::uint64_t>(cfg.train.steps);
  if (cfg.train.checkpoint_every > 0 && !resume) save(step_dir(trainer->step()));
  TrainOutcome res{{}, {}, out / "final", log.path()};
  while (trainer->step() < total) {
    double loss = 0.0;
    try {
      loss = trainer->run(1).front();
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + "; last good checkpoint: " + last_good);
    }
    res.losses.push_back(loss);
    const std::uint64_t s = trainer->step();
    MetricsRow row{s, loss, cfg.optimizer.lr, log.elapsed(), std::nullopt};
    if (cfg.train.eval_every > 0 && s % static_cast<std::uint64_t>(cfg.train.eval_every) == 0) {
      row.eval_success = eval_success(trainer->model(), cfg.task, cfg.eval).success;
    }
    log.append(row);
    if (cfg.train.checkpoint_every > 0 && s % static_cast<std::uint64_t>(cfg.train.checkpoint_every) == 0) {
      save(step_dir(s));
    }
  }
  save(res.final_checkpoint);
  res.model = trainer->model();
  return res;
}

std::vector<toy::ToyPrompt> eval_prompts(const TaskConfig& task, int count, std::uint64_t seed) {
  const auto grammar = task.grammar();
  std::vector<toy::ToyPrompt> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(toy::sample_prompt(grammar, derive_seed(seed, {static_cast<std::uint64_t>(i), 0xe7a1}), toy::Split::Any));
  }
  return out;
}

SuccessEval eval_success(const LinearDiT<float>& model, const TaskConfig& task, const EvalConfig& eval) {
  const auto prompts = eval_prompts(task, eval.prompts, eval.seed);
  std::vector<toy::ToyPrompt> all;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (int k = 0; k < eval.samples_per_prompt; ++k) {
      all.push_back(prompts[i]);
      seeds.push_back(derive_seed(eval.seed, {i, static_cast<std::uint64_t>(k), 0x5a}));
    }
  }
  const auto grids = ModelGenerator(model).generate(all, seeds, eval.steps);
  int ok = 0;
  for (std::size_t i = 0; i < grids.size(); ++i) ok += oracle_verify(all[i], grids[i]).match ? 1 : 0;
  return {static_cast<double>(ok) / static_cast<double>(grids.size()), static_cast<int>(grids.size())};
}

std::vector<NoisedBatch> eval_loss_set(const TaskConfig& task, const ModelConfig& model, int batches, int batch,
                                       std::uint64_t seed) {
  const BatchStream stream = toy_stream(task, model, batch, derive_seed(seed, {0xe1}));
  std::vector<NoisedBatch> out;
  for (int b = 0; b < batches; ++b) out.push_back(stream(static_cast<std::uint64_t>(b)));
  return out;
}

double eval_loss(const LinearDiT<float>& model, const std::vector<NoisedBatch>& set) {
  if (set.empty()) throw InputError("eval_loss: empty set");
  double total = 0.0;
  for (const auto& b : set) total += diffusion_loss(model, b);
  return total / static_cast<double>(set.size());
}

}  // namespace lindit
