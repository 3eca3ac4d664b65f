#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lindit/checkpoint.hpp"
#include "lindit/growth.hpp"
#include "lindit/toy_task.hpp"
#include "lindit/training.hpp"

namespace lindit {

namespace fs = std::filesystem;

struct TaskConfig {
  std::vector<int> counts{1, 2};
  double relation_fraction = 0.5;
  std::vector<std::string> held_out;  // prompt texts never drawn for training

  toy::GrammarConfig grammar() const;
};

struct TrainSettings {
  int steps = 2000;
  int batch = 64;
  int eval_every = 0;        // 0: no periodic success evaluation
  int checkpoint_every = 0;  // 0: final checkpoint only
};

// Oracle success over a fixed prompt set drawn from `seed`.
struct EvalConfig {
  int prompts = 200;
  int samples_per_prompt = 1;
  int steps = 20;
  std::uint64_t seed = 9001;
};

struct GrowthExperimentConfig {
  std::vector<std::string> base_checkpoints;  // one per seed, or one shared
  int target_depth = 12;
  int drop_last = 0;
  double sigma = 0.02;
  int steps = 1000;
  int eval_every = 50;
  int eval_batches = 8;
  int eval_batch = 32;
};

struct StabilityExperimentConfig {
  std::vector<std::string> base_checkpoints;
  int target_depth = 12;
  int drop_last = 2;
  double lr = 5e-3;
  int steps = 200;
  int early_window = 50;
};

struct ParityExperimentConfig {
  int steps = 500;
  int in_dim = 128;
  int hidden = 160;
  int out_dim = 32;
  int samples = 1536;
  double lr = 1e-3;
  double noise = 0.1;  // label noise std; keeps the final loss off zero
};

struct PruneExperimentConfig {
  std::vector<std::string> checkpoints;
  int target_depth = 6;
  int finetune_steps = 100;
  double finetune_lr = 0.0;  // 0: use optimizer.lr
  int calibration_prompts = 100;
  int timesteps = 5;
  int bi_steps = 20;
  int eval_batches = 8;
  int eval_batch = 32;
};

struct ScalingExperimentConfig {
  std::vector<std::string> base_checkpoints;
  std::vector<std::string> large_checkpoints;  // optional, same length as base
  std::vector<int> n_values{1, 2, 4, 8, 16, 32, 64};
  int prompts = 100;
  int steps = 20;
  int long_steps = 320;
  int compare_n = 16;
};

struct RunConfig {
  ModelConfig model;
  CameConfig optimizer;
  TaskConfig task;
  TrainSettings train;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{0};
  std::string experiment;
  std::string out = "runs/default";
  GrowthExperimentConfig growth;
  StabilityExperimentConfig stability;
  ParityExperimentConfig parity;
  PruneExperimentConfig prune;
  ScalingExperimentConfig scaling;

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const fs::path& path);

inline const std::vector<std::string> kExperimentNames{"growth", "stability", "parity", "prune", "scaling"};

// ---------------------------------------------------------------------------

struct MetricsRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall = 0.0;  // seconds since the writer was opened
  std::optional<double> eval_success;
};

nlohmann::json to_json(const MetricsRow& r);
MetricsRow metrics_row_from_json(const nlohmann::json& j);

// Append-only JSON-lines log; steps must strictly increase.
class MetricsLog {
 public:
  // Keeps existing rows with step <= keep_through and drops the rest (all of
  // them for a fresh run, since steps start at 1).
  explicit MetricsLog(const fs::path& path, std::uint64_t keep_through = 0);
  void append(MetricsRow row);
  double elapsed() const;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::ofstream out_;
  std::optional<std::uint64_t> last_;
  std::chrono::steady_clock::time_point start_;
};

std::vector<MetricsRow> read_metrics(const fs::path& path);

// ---------------------------------------------------------------------------

// Deterministic data stream for (task, batch, seed): batch k is a pure function of k.
BatchStream toy_stream(const TaskConfig& task, const ModelConfig& model, int batch, std::uint64_t seed);

// Model plus optimizer state plus position in the data stream.
class Trainer {
 public:
  Trainer(LinearDiT<float> model, const CameConfig& opt, BatchStream stream, std::uint64_t data_seed,
          std::uint64_t step = 0);
  // Restores model, optimizer and step from a checkpoint written by checkpoint().
  Trainer(const Checkpoint& ckpt, BatchStream stream);

  std::vector<double> run(int steps, const StepCallback& on_step = {});
  Checkpoint checkpoint() const;

  const LinearDiT<float>& model() const { return model_; }
  std::uint64_t step() const { return step_; }
  std::uint64_t data_seed() const { return data_seed_; }

 private:
  LinearDiT<float> model_;
  CameOptimizer opt_;
  BatchStream stream_;
  std::uint64_t data_seed_;
  std::uint64_t step_;
};

struct TrainOutcome {
  LinearDiT<float> model;
  std::vector<double> losses;  // this invocation only
  fs::path final_checkpoint;
  fs::path metrics;
};

// Trains cfg.model from initialization (or resumes from `resume`) until
// cfg.train.steps total steps. Writes out/metrics.jsonl, out/checkpoints/step-N
// at the checkpoint cadence and out/final. A non-finite loss raises NumericError
// naming the last good checkpoint.
TrainOutcome train(const RunConfig& cfg, std::uint64_t seed, const fs::path& out,
                   const std::optional<fs::path>& resume = std::nullopt);

// ---------------------------------------------------------------------------

std::vector<toy::ToyPrompt> eval_prompts(const TaskConfig& task, int count, std::uint64_t seed);

struct SuccessEval {
  double success = 0.0;
  int trials = 0;
};

SuccessEval eval_success(const LinearDiT<float>& model, const TaskConfig& task, const EvalConfig& eval);

// Fixed noised batches for comparing diffusion losses across models.
std::vector<NoisedBatch> eval_loss_set(const TaskConfig& task, const ModelConfig& model, int batches, int batch,
                                       std::uint64_t seed);
double eval_loss(const LinearDiT<float>& model, const std::vector<NoisedBatch>& set);

// ---------------------------------------------------------------------------
// Experiments. Each writes <out>/result.json (returned) plus CSV series.

nlohmann::json experiment_growth_vs_scratch(const RunConfig& cfg, const fs::path& out);
nlohmann::json experiment_init_stability(const RunConfig& cfg, const fs::path& out);
nlohmann::json experiment_optimizer_parity(const RunConfig& cfg, const fs::path& out);
nlohmann::json experiment_prune_recover(const RunConfig& cfg, const fs::path& out);
nlohmann::json experiment_inference_scaling(const RunConfig& cfg, const fs::path& out);
nlohmann::json run_experiment(const std::string& name, const RunConfig& cfg, const fs::path& out);

// 2-layer ReLU regression used by the parity experiment: final training loss.
double regression_final_loss(const ParityExperimentConfig& p, const CameConfig& opt, std::uint64_t seed,
                             std::vector<double>* trace = nullptr);

// ---------------------------------------------------------------------------

struct ReportSummary {
  std::string text;
  std::vector<std::string> found;
  std::vector<std::string> absent;
  std::vector<fs::path> written;
};

// Summarizes every experiment result and metrics log under run_dir and writes
// CSV series next to them. found is empty when there is nothing to report.
ReportSummary report(const fs::path& run_dir);

void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

}  // namespace lindit
