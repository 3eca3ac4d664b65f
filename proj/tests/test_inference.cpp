#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lindit/inference_scaling.hpp"
#include "support/fixtures.hpp"

using namespace lindit;
using namespace lindit::testing;

namespace {

// Verdicts looked up by a candidate index stamped into cell (0, 0) of its grid.
class TableVerifier final : public Verifier {
 public:
  explicit TableVerifier(std::vector<Verdict> table) : table_(std::move(table)) {}
  Verdict judge(const toy::ToyPrompt&, const toy::Grid& grid) const override {
    const int i = static_cast<int>(grid(0, 0));
    if (i < 0 || i >= static_cast<int>(table_.size())) throw InputError("unknown candidate");
    return table_[i];
  }

 private:
  std::vector<Verdict> table_;
};

toy::ToyPrompt two_red_squares() { return toy::parse_prompt("two red squares"); }

std::vector<Candidate> stamped(int n) {
  std::vector<Candidate> c;
  for (int i = 0; i < n; ++i) {
    toy::Grid g = toy::blank_grid();
    g(0, 0) = static_cast<float>(i);
    c.push_back({i, two_red_squares(), static_cast<std::uint64_t>(i), g, 20});
  }
  return c;
}

}  // namespace

TEST_CASE("decide examples") {
  CHECK(decide(0, {true, 0.6}, 1, {false, 0.99}).winner == 0);
  CHECK(decide(0, {true, 0.6}, 1, {false, 0.99}).reason == "only-a-yes");
  CHECK(decide(0, {true, 0.7}, 1, {true, 0.9}).winner == 1);
  CHECK(decide(0, {false, 0.5}, 1, {false, 0.5}).winner == 0);
  CHECK(decide(4, {false, 0.5}, 2, {false, 0.5}).winner == 2);
  CHECK(decide(4, {false, 0.5}, 2, {false, 0.5}).reason == "tie-lower-id");
  CHECK(decide(3, {false, 0.1}, 5, {true, 0.0}).winner == 5);
}

TEST_CASE("decide is symmetric in argument order") {
  Rng rng(1);
  std::uniform_int_distribution<int> conf(0, 4);
  for (int k = 0; k < 2000; ++k) {
    const Verdict a{k % 2 == 0, conf(rng) / 4.0}, b{k % 3 == 0, conf(rng) / 4.0};
    CHECK(decide(1, a, 2, b).winner == decide(2, b, 1, a).winner);
  }
}

TEST_CASE("compare wraps verifier failures with both ids") {
  auto c = stamped(2);
  c[1].grid(0, 0) = 99.0f;
  const TableVerifier v({{true, 1.0}, {false, 0.0}});
  try {
    compare(c[0], c[1], v);
    FAIL("expected ComparisonError");
  } catch (const ComparisonError& e) {
    CHECK(e.id_a == 0);
    CHECK(e.id_b == 1);
  }
  c[1].prompt = toy::parse_prompt("a blue bar");
  CHECK_THROWS_AS(compare(c[0], c[1], v), ComparisonError);
}

TEST_CASE("exhaustive placements: a yes-candidate always wins") {
  Rng rng(2);
  std::uniform_int_distribution<int> conf(0, 3);
  for (int n = 1; n <= 8; ++n) {
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
      for (int rep = 0; rep < 3; ++rep) {
        std::vector<Verdict> table;
        for (int i = 0; i < n; ++i) table.push_back({((mask >> i) & 1u) != 0, conf(rng) / 3.0});
        const TableVerifier v(table);
        const auto r = run_tournament(stamped(n), v);
        REQUIRE(r.winners.size() == 1);
        CHECK(static_cast<int>(r.bracket.size()) == n - 1);
        const int w = r.winners[0];
        if (mask != 0) CHECK(table[w].match);
        if (std::popcount(mask) == 1) CHECK((1u << w) == mask);
        // Winner is the best under decide's total order.
        for (int i = 0; i < n; ++i) CHECK(decide(w, table[w], i, table[i]).winner == w);
      }
    }
  }
}

TEST_CASE("bracket structure and top-k") {
  const TableVerifier v({{false, 0.1}, {false, 0.2}, {true, 0.3}, {false, 0.4}, {true, 0.9}});
  const auto r = run_tournament(stamped(5), v, 3);
  CHECK(r.winners == std::vector<int>{4, 2, 3});
  CHECK(r.bracket.front().pass == 0);
  CHECK(r.bracket.front().a == 0);
  CHECK(r.bracket.front().b == 1);
  CHECK(std::count_if(r.bracket.begin(), r.bracket.end(), [](auto& e) { return e.pass == 0; }) == 4);
  CHECK(std::count_if(r.bracket.begin(), r.bracket.end(), [](auto& e) { return e.pass == 1; }) == 3);
  CHECK(r.bracket.size() == 4 + 3 + 2);
  CHECK_THROWS_AS(run_tournament({}, v), InputError);
  CHECK_THROWS_AS(run_tournament(stamped(2), v, 0), InputError);
}

TEST_CASE("select_best_of_n with a synthetic generator") {
  const SyntheticGenerator gen(0.3);
  const OracleVerifier oracle;
  const auto prompt = two_red_squares();
  const auto r8 = select_best_of_n(gen, prompt, 8, 20, oracle, 100);
  CHECK(r8.bracket.size() == 7);
  CHECK(r8.candidates.size() == 8);
  for (int i = 0; i < 8; ++i) CHECK(r8.candidates[i].seed == 100u + i);
  const bool any = std::any_of(r8.verdicts.begin(), r8.verdicts.end(), [](const Verdict& v) { return v.match; });
  CHECK(oracle_verify(prompt, r8.candidates[r8.winners[0]].grid).match == any);

  const auto r1 = select_best_of_n(gen, prompt, 1, 20, oracle, 5);
  CHECK(r1.winners == std::vector<int>{0});
  CHECK(r1.bracket.empty());
  CHECK_THROWS_AS(select_best_of_n(gen, prompt, 0, 20, oracle, 5), InputError);
}

TEST_CASE("bracket replay is bit-identical and serializes one line per comparison") {
  const SyntheticGenerator gen(0.4);
  const OracleVerifier oracle;
  const auto prompt = toy::parse_prompt("a red square left of a blue circle");
  const auto a = select_best_of_n(gen, prompt, 16, 20, oracle, 7);
  const auto b = select_best_of_n(gen, prompt, 16, 20, oracle, 7);
  CHECK(a.bracket == b.bracket);
  CHECK(a.winners == b.winners);
  for (std::size_t i = 0; i < a.candidates.size(); ++i) CHECK(bit_equal(a.candidates[i].grid, b.candidates[i].grid));

  const auto path = std::filesystem::temp_directory_path() / "lindit_bracket_test.jsonl";
  write_bracket_jsonl(a, path.string());
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("winner").get<int>() == a.bracket[lines].winner);
    ++lines;
  }
  CHECK(lines == 15);
  std::filesystem::remove(path);
}

TEST_CASE("model generator candidates regenerate deterministically") {
  const auto model = init_model<float>(small_config(2), 3);
  const ModelGenerator gen(model, 3);
  const auto prompt = two_red_squares();
  const std::vector<toy::ToyPrompt> prompts(5, prompt);
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto a = gen.generate(prompts, seeds, 5);
  const auto b = gen.generate(prompts, seeds, 5);
  REQUIRE(a.size() == 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].rows() == 64);
    CHECK(a[i].cols() == 3);
    CHECK(bit_equal(a[i], b[i]));
  }
  // Batching does not change a sample.
  const auto single = gen.generate({prompt}, {4}, 5);
  const auto two = gen.generate({prompt, prompt}, {9, 4}, 5);
  CHECK(bit_equal(two[1], a[3]));
  CHECK(bit_equal(single[0], a[3]));
}

TEST_CASE("coverage follows 1 - (1 - p)^n for a synthetic generator") {
  const OracleVerifier oracle;
  const std::vector<toy::ToyPrompt> prompts{two_red_squares()};
  CoverageOptions opt;
  opt.n_values = {1, 2, 4, 8};
  opt.trials_per_prompt = 400;
  opt.seed = 11;
  for (double p : {0.1, 0.5}) {
    const auto rows = coverage_curve(SyntheticGenerator(p), prompts, oracle, opt);
    REQUIRE(rows.size() == 4);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      const double expect = 1.0 - std::pow(1.0 - p, r.n);
      const double sigma = std::sqrt(expect * (1.0 - expect) / r.trials);
      CHECK(r.trials == 400);
      CHECK(std::abs(r.success - expect) <= 3.0 * sigma + 1e-12);
      if (i > 0) CHECK(r.success >= rows[i - 1].success);
    }
  }
  CHECK_THROWS_AS(coverage_curve(SyntheticGenerator(0.5), {}, oracle, opt), InputError);
}

TEST_CASE("coverage n=1 row equals single-sample success") {
  const OracleVerifier oracle;
  const std::vector<toy::ToyPrompt> prompts{two_red_squares(), toy::parse_prompt("a blue bar above a green circle")};
  CoverageOptions opt;
  opt.n_values = {1};
  opt.trials_per_prompt = 50;
  const auto rows = coverage_curve(SyntheticGenerator(0.3), prompts, oracle, opt);
  CHECK(rows[0].success == doctest::Approx(rows[0].analytic).epsilon(1e-12));
}

TEST_CASE("oracle verifier examples") {
  const auto prompt = two_red_squares();
  const auto good = toy::render(prompt, 1);
  CHECK(oracle_verify(prompt, good.grid) == Verdict{true, 1.0});

  const auto three = toy::render(toy::parse_prompt("three red squares"), 2);
  const auto v3 = oracle_verify(prompt, three.grid);
  CHECK_FALSE(v3.match);
  CHECK(v3.confidence < 1.0);

  const auto rel = toy::parse_prompt("a red square left of a blue circle");
  const auto sample = toy::render(rel, 3);
  CHECK(oracle_verify(rel, sample.grid).match);
  toy::Grid mirrored = toy::blank_grid();
  for (int r = 0; r < toy::kGridH; ++r) {
    for (int c = 0; c < toy::kGridW; ++c) mirrored.row(r * toy::kGridW + c) = sample.grid.row(r * toy::kGridW + (toy::kGridW - 1 - c));
  }
  const auto vm = oracle_verify(rel, mirrored);
  CHECK_FALSE(vm.match);
  CHECK(vm.confidence == doctest::Approx(0.75));

  CHECK(oracle_verify(prompt, toy::blank_grid()).confidence == doctest::Approx(1.0 / 2.0));
  CHECK_THROWS_AS(oracle_verify(toy::ToyPrompt{}, good.grid), InputError);
}
