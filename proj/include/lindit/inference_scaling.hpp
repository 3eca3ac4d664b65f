#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lindit/model.hpp"
#include "lindit/toy_task.hpp"

namespace lindit {

// A yes/no judgment with a confidence in [0, 1]; only the ordering of
// confidences matters to the tournament.
struct Verdict {
  bool match = false;
  double confidence = 0.0;

  bool operator==(const Verdict&) const = default;
};

class Verifier {
 public:
  virtual ~Verifier() = default;
  virtual Verdict judge(const toy::ToyPrompt& prompt, const toy::Grid& grid) const = 0;
};

// Programmatic judge: parses the grid into colored components and checks every
// prompt constraint. Confidence is the fraction of constraints satisfied.
Verdict oracle_verify(const toy::ToyPrompt& prompt, const toy::Grid& grid);

class OracleVerifier final : public Verifier {
 public:
  Verdict judge(const toy::ToyPrompt& prompt, const toy::Grid& grid) const override {
    return oracle_verify(prompt, grid);
  }
};

struct Candidate {
  int id = 0;
  toy::ToyPrompt prompt;
  std::uint64_t seed = 0;
  toy::Grid grid;
  int steps = 0;
};

class ComparisonError : public Error {
 public:
  ComparisonError(int a, int b, const std::string& what)
      : Error("comparison of candidates " + std::to_string(a) + " and " + std::to_string(b) + " failed: " + what),
        id_a(a),
        id_b(b) {}
  int id_a;
  int id_b;
};

struct Decision {
  int winner;
  std::string reason;  // "only-a-yes", "only-b-yes", "higher-confidence", "tie-lower-id"
};

// Pairwise selection rule: a lone yes wins; otherwise higher confidence; exact tie
// goes to the lower id.
Decision decide(int id_a, const Verdict& a, int id_b, const Verdict& b);

// Judges both candidates and applies decide(); verifier exceptions become ComparisonError.
Decision compare(const Candidate& a, const Candidate& b, const Verifier& v);

struct BracketEntry {
  int pass = 0;   // which top-k extraction this comparison belongs to
  int round = 0;  // elimination round within the pass
  int a = 0;
  int b = 0;
  Verdict verdict_a;
  Verdict verdict_b;
  int winner = 0;
  std::string reason;

  bool operator==(const BracketEntry&) const = default;
};

nlohmann::json to_json(const BracketEntry& e);

struct TournamentResult {
  std::vector<int> winners;  // top-k ids in selection order
  std::vector<BracketEntry> bracket;
  std::vector<Candidate> candidates;
  std::vector<Verdict> verdicts;  // indexed by candidate position
};

// Single elimination in index order; an unpaired last candidate gets a bye.
// top > 1 repeats the bracket on the remaining candidates.
TournamentResult run_tournament(std::vector<Candidate> candidates, const Verifier& v, int top = 1);

// Writes the bracket as JSON lines, one comparison per line.
void write_bracket_jsonl(const TournamentResult& r, const std::string& path);

// Source of candidate images.
class CandidateGenerator {
 public:
  virtual ~CandidateGenerator() = default;
  virtual std::vector<toy::Grid> generate(const std::vector<toy::ToyPrompt>& prompts,
                                          const std::vector<std::uint64_t>& seeds, int steps) const = 0;
};

class ModelGenerator final : public CandidateGenerator {
 public:
  explicit ModelGenerator(const LinearDiT<float>& model, int max_batch = 256) : model_(model), max_batch_(max_batch) {}
  std::vector<toy::Grid> generate(const std::vector<toy::ToyPrompt>& prompts, const std::vector<std::uint64_t>& seeds,
                                  int steps) const override;

 private:
  const LinearDiT<float>& model_;
  int max_batch_;
};

// Renders a correct image with probability p(prompt), otherwise a deliberately
// wrong one (an object recolored). Deterministic per seed.
class SyntheticGenerator final : public CandidateGenerator {
 public:
  explicit SyntheticGenerator(double p) : p_(p) {}
  std::vector<toy::Grid> generate(const std::vector<toy::ToyPrompt>& prompts, const std::vector<std::uint64_t>& seeds,
                                  int steps) const override;

 private:
  double p_;
};

// Generates n candidates with seeds seed+0 .. seed+n-1 and runs the tournament.
TournamentResult select_best_of_n(const CandidateGenerator& gen, const toy::ToyPrompt& prompt, int n, int steps,
                                  const Verifier& v, std::uint64_t seed, int top = 1);

struct CoverageRow {
  int n = 0;
  double success = 0.0;    // fraction of (prompt, trial) whose winner passes the oracle
  double analytic = 0.0;   // mean over prompts of 1 - (1 - p_hat)^n
  double stderr_ = 0.0;    // binomial standard error of `success`
  int trials = 0;
};

struct CoverageOptions {
  std::vector<int> n_values{1, 2, 4, 8, 16};
  int trials_per_prompt = 1;
  int steps = 20;
  std::uint64_t seed = 0;
};

// Success rate of tournament selection versus n. Within a trial the candidate
// pools are nested (n candidates are the first n of the largest pool).
std::vector<CoverageRow> coverage_curve(const CandidateGenerator& gen, const std::vector<toy::ToyPrompt>& prompts,
                                        const Verifier& v, const CoverageOptions& opt);

}  // namespace lindit
