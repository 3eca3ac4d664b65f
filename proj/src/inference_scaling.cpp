#include "lindit/inference_scaling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "lindit/diffusion.hpp"

namespace lindit {

Verdict oracle_verify(const toy::ToyPrompt& prompt, const toy::Grid& grid) {
  prompt.validate();
  const auto objects = toy::detect_objects(grid);
  auto count_of = [&](const toy::ObjectSpec& spec) {
    return std::count_if(objects.begin(), objects.end(), [&](const toy::DetectedObject& o) {
      return o.color == spec.color && o.shape == spec.shape;
    });
  };
  std::vector<bool> checks;
  for (const auto& spec : prompt.objects) checks.push_back(count_of(spec) == spec.count);
  if (prompt.relation) {
    bool holds = false;
    for (const auto& a : objects) {
      if (a.color != prompt.objects[0].color || a.shape != prompt.objects[0].shape) continue;
      for (const auto& b : objects) {
        if (b.color != prompt.objects[1].color || b.shape != prompt.objects[1].shape) continue;
        holds = holds || (*prompt.relation == toy::Relation::LeftOf ? a.centroid_col < b.centroid_col
                                                                    : a.centroid_row < b.centroid_row);
      }
    }
    checks.push_back(holds);
  }
  const bool no_extra = std::all_of(objects.begin(), objects.end(), [&](const toy::DetectedObject& o) {
    return std::any_of(prompt.objects.begin(), prompt.objects.end(), [&](const toy::ObjectSpec& s) {
      return o.shape && o.color == s.color && *o.shape == s.shape;
    });
  });
  checks.push_back(no_extra);
  const auto satisfied = std::count(checks.begin(), checks.end(), true);
  return Verdict{satisfied == static_cast<long>(checks.size()),
                 static_cast<double>(satisfied) / static_cast<double>(checks.size())};
}

Decision decide(int id_a, const Verdict& a, int id_b, const Verdict& b) {
  if (a.match && !b.match) return {id_a, "only-a-yes"};
  if (b.match && !a.match) return {id_b, "only-b-yes"};
  if (a.confidence > b.confidence) return {id_a, "higher-confidence"};
  if (b.confidence > a.confidence) return {id_b, "higher-confidence"};
  return {std::min(id_a, id_b), "tie-lower-id"};
}

Decision compare(const Candidate& a, const Candidate& b, const Verifier& v) {
  if (!(a.prompt == b.prompt)) throw ComparisonError(a.id, b.id, "candidates answer different prompts");
  Verdict va, vb;
  try {
    va = v.judge(a.prompt, a.grid);
    vb = v.judge(b.prompt, b.grid);
  } catch (const std::exception& e) {
    throw ComparisonError(a.id, b.id, e.what());
  }
  return decide(a.id, va, b.id, vb);
}

nlohmann::json to_json(const BracketEntry& e) {
  return {{"pass", e.pass},
          {"round", e.round},
          {"a", e.a},
          {"b", e.b},
          {"verdict_a", {{"match", e.verdict_a.match}, {"confidence", e.verdict_a.confidence}}},
          {"verdict_b", {{"match", e.verdict_b.match}, {"confidence", e.verdict_b.confidence}}},
          {"winner", e.winner},
          {"reason", e.reason}};
}

TournamentResult run_tournament(std::vector<Candidate> candidates, const Verifier& v, int top) {
  if (candidates.empty()) throw InputError("tournament: no candidates");
  if (top < 1) throw InputError("tournament: top must be >= 1");
  TournamentResult res;
  res.verdicts.reserve(candidates.size());
  for (const auto& c : candidates) {
    try {
      res.verdicts.push_back(v.judge(c.prompt, c.grid));
    } catch (const std::exception& e) {
      throw ComparisonError(c.id, c.id, e.what());
    }
  }
  // Position of each id, for verdict lookup.
  auto verdict_of = [&](int pos) { return res.verdicts[pos]; };

  std::vector<int> remaining(candidates.size());
  for (std::size_t i = 0; i < remaining.size(); ++i) remaining[i] = static_cast<int>(i);
  const int passes = std::min<int>(top, static_cast<int>(candidates.size()));
  for (int pass = 0; pass < passes; ++pass) {
    std::vector<int> alive = remaining;
    int round = 0;
    while (alive.size() > 1) {
      std::vector<int> next;
      for (std::size_t i = 0; i + 1 < alive.size(); i += 2) {
        const int pa = alive[i], pb = alive[i + 1];
        const Candidate& a = candidates[pa];
        const Candidate& b = candidates[pb];
        const Decision d = decide(a.id, verdict_of(pa), b.id, verdict_of(pb));
        res.bracket.push_back({pass, round, a.id, b.id, verdict_of(pa), verdict_of(pb), d.winner, d.reason});
        next.push_back(d.winner == a.id ? pa : pb);
      }
      if (alive.size() % 2 == 1) next.push_back(alive.back());
      alive = std::move(next);
      ++round;
    }
    res.winners.push_back(candidates[alive.front()].id);
    remaining.erase(std::find(remaining.begin(), remaining.end(), alive.front()));
  }
  res.candidates = std::move(candidates);
  return res;
}

void write_bracket_jsonl(const TournamentResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write bracket log " + path);
  for (const auto& e : r.bracket) out << to_json(e).dump() << "\n";
}

std::vector<toy::Grid> ModelGenerator::generate(const std::vector<toy::ToyPrompt>& prompts,
                                                const std::vector<std::uint64_t>& seeds, int steps) const {
  if (prompts.size() != seeds.size()) throw InputError("generate: one seed per prompt required");
  std::vector<toy::Grid> out;
  out.reserve(prompts.size());
  for (std::size_t start = 0; start < prompts.size(); start += static_cast<std::size_t>(max_batch_)) {
    const std::size_t end = std::min(prompts.size(), start + static_cast<std::size_t>(max_batch_));
    SampleRequest req;
    req.steps = steps;
    for (std::size_t i = start; i < end; ++i) {
      req.prompts.push_back(prompts[i].tokens());
      req.seeds.push_back(seeds[i]);
    }
    const MatrixF grids = sample_batch(model_, req);
    for (Eigen::Index b = 0; b < grids.rows(); ++b) {
      out.push_back(Eigen::Map<const MatrixF>(grids.row(b).data(), toy::kGridH * toy::kGridW, toy::kChannels));
    }
  }
  return out;
}

std::vector<toy::Grid> SyntheticGenerator::generate(const std::vector<toy::ToyPrompt>& prompts,
                                                    const std::vector<std::uint64_t>& seeds, int) const {
  if (prompts.size() != seeds.size()) throw InputError("generate: one seed per prompt required");
  std::vector<toy::Grid> out;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Rng rng(derive_seed(seeds[i], {0x5e17}));
    const bool correct = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p_;
    toy::ToyPrompt drawn = prompts[i];
    if (!correct) {
      // Recolor the first object: breaks the count constraint and adds an extraneous object.
      auto& o = drawn.objects[0];
      o.color = static_cast<toy::Color>((static_cast<int>(o.color) + 1) % static_cast<int>(toy::kAllColors.size()));
      if (drawn.relation && drawn.objects[0] == drawn.objects[1]) {
        o.color = static_cast<toy::Color>((static_cast<int>(o.color) + 1) % static_cast<int>(toy::kAllColors.size()));
      }
    }
    out.push_back(toy::render(drawn, derive_seed(seeds[i], {0x4e4d})).grid);
  }
  return out;
}

TournamentResult select_best_of_n(const CandidateGenerator& gen, const toy::ToyPrompt& prompt, int n, int steps,
                                  const Verifier& v, std::uint64_t seed, int top) {
  if (n < 1) throw InputError("select_best_of_n: n must be >= 1");
  std::vector<toy::ToyPrompt> prompts(static_cast<std::size_t>(n), prompt);
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) seeds[i] = seed + static_cast<std::uint64_t>(i);
  auto grids = gen.generate(prompts, seeds, steps);
  std::vector<Candidate> cands;
  for (int i = 0; i < n; ++i) cands.push_back({i, prompt, seeds[i], std::move(grids[i]), steps});
  if (n == 1) {
    TournamentResult r;
    r.winners = {0};
    r.candidates = std::move(cands);
    return r;
  }
  return run_tournament(std::move(cands), v, top);
}

std::vector<CoverageRow> coverage_curve(const CandidateGenerator& gen, const std::vector<toy::ToyPrompt>& prompts,
                                        const Verifier& v, const CoverageOptions& opt) {
  if (prompts.empty()) throw InputError("coverage_curve: no prompts");
  if (opt.n_values.empty() || opt.trials_per_prompt < 1) throw InputError("coverage_curve: empty sweep");
  const int max_n = *std::max_element(opt.n_values.begin(), opt.n_values.end());
  if (max_n < 1) throw InputError("coverage_curve: n must be >= 1");

  // Generate every candidate up front so the model can batch across prompts.
  std::vector<toy::ToyPrompt> all_prompts;
  std::vector<std::uint64_t> all_seeds;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    for (int trial = 0; trial < opt.trials_per_prompt; ++trial) {
      const std::uint64_t base = derive_seed(opt.seed, {p, static_cast<std::uint64_t>(trial)});
      for (int i = 0; i < max_n; ++i) {
        all_prompts.push_back(prompts[p]);
        all_seeds.push_back(base + static_cast<std::uint64_t>(i));
      }
    }
  }
  const auto grids = gen.generate(all_prompts, all_seeds, opt.steps);

  std::vector<double> p_hat(prompts.size(), 0.0);
  std::vector<CoverageRow> rows;
  for (int n : opt.n_values) rows.push_back({n, 0.0, 0.0, 0.0, 0});
  std::size_t k = 0;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    int passes = 0;
    for (int trial = 0; trial < opt.trials_per_prompt; ++trial) {
      std::vector<Candidate> pool;
      for (int i = 0; i < max_n; ++i, ++k) {
        pool.push_back({i, prompts[p], all_seeds[k], grids[k], opt.steps});
        passes += oracle_verify(prompts[p], grids[k]).match ? 1 : 0;
      }
      for (auto& row : rows) {
        std::vector<Candidate> sub(pool.begin(), pool.begin() + row.n);
        const auto res = run_tournament(std::move(sub), v, 1);
        const int w = res.winners.front();
        row.success += oracle_verify(prompts[p], pool[w].grid).match ? 1.0 : 0.0;
        row.trials += 1;
      }
    }
    p_hat[p] = static_cast<double>(passes) / (static_cast<double>(max_n) * opt.trials_per_prompt);
  }
  for (auto& row : rows) {
    row.success /= row.trials;
    row.stderr_ = std::sqrt(std::max(row.success * (1.0 - row.success), 0.0) / row.trials);
    double a = 0.0;
    for (double ph : p_hat) a += 1.0 - std::pow(1.0 - ph, row.n);
    row.analytic = a / static_cast<double>(prompts.size());
  }
  return rows;
}

}  // namespace lindit
