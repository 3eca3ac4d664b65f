#include "lindit/toy_task.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <limits>
#include <random>
#include <sstream>

#include "lindit/rng.hpp"

namespace lindit::toy {

namespace {

// Token ids.
constexpr int kTokOne = 0;
constexpr int kTokRed = 3;
constexpr int kTokSquare = 7;
constexpr int kTokLeftOf = 10;

int color_token(Color c) { return kTokRed + static_cast<int>(c); }
int shape_token(Shape s) { return kTokSquare + static_cast<int>(s); }
int relation_token(Relation r) { return kTokLeftOf + static_cast<int>(r); }

const std::array<std::array<float, 3>, 5> kPalette{{
    {0.f, 0.f, 0.f},  // background
    {1.f, 0.f, 0.f},  // red
    {0.f, 1.f, 0.f},  // green
    {0.f, 0.f, 1.f},  // blue
    {1.f, 1.f, 0.f},  // yellow
}};

const char* kCountWords[] = {"one", "two", "three"};

std::string plural(Shape s) { return s == Shape::Bar ? "bars" : to_string(s) + "s"; }

bool relation_holds(Relation r, double row_a, double col_a, double row_b, double col_b) {
  return r == Relation::LeftOf ? col_a < col_b : row_a < row_b;
}

}  // namespace

std::string to_string(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
  }
  return "?";
}

std::string to_string(Shape s) {
  switch (s) {
    case Shape::Square: return "square";
    case Shape::Circle: return "circle";
    case Shape::Bar: return "bar";
  }
  return "?";
}

std::string to_string(Relation r) { return r == Relation::LeftOf ? "left of" : "above"; }

void ToyPrompt::validate() const {
  if (objects.empty()) throw InputError("prompt has no constraints");
  for (const auto& o : objects) {
    if (o.count < 1 || o.count > kMaxCount) throw InputError("object count must be in [1, 3]");
  }
  if (relation) {
    if (objects.size() != 2 || objects[0].count != 1 || objects[1].count != 1) {
      throw InputError("a relation prompt needs exactly two single objects");
    }
    if (objects[0].color == objects[1].color && objects[0].shape == objects[1].shape) {
      throw InputError("related objects must differ in color or shape");
    }
  } else if (objects.size() != 1) {
    throw InputError("a prompt without relation holds exactly one counted object");
  }
}

std::vector<int> ToyPrompt::tokens() const {
  validate();
  std::vector<int> t;
  auto push = [&](const ObjectSpec& o) {
    t.push_back(kTokOne + o.count - 1);
    t.push_back(color_token(o.color));
    t.push_back(shape_token(o.shape));
  };
  push(objects[0]);
  if (relation) {
    t.push_back(relation_token(*relation));
    push(objects[1]);
  }
  return t;
}

std::string ToyPrompt::text() const {
  validate();
  auto phrase = [](const ObjectSpec& o) {
    if (o.count == 1) return "a " + to_string(o.color) + " " + to_string(o.shape);
    return std::string(kCountWords[o.count - 1]) + " " + to_string(o.color) + " " + plural(o.shape);
  };
  std::string s = phrase(objects[0]);
  if (relation) s += " " + to_string(*relation) + " " + phrase(objects[1]);
  return s;
}

ToyPrompt prompt_from_tokens(const std::vector<int>& tokens) {
  auto object_at = [&](std::size_t i) {
    const int c = tokens[i], col = tokens[i + 1], sh = tokens[i + 2];
    if (c < 0 || c > 2 || col < 3 || col > 6 || sh < 7 || sh > 9) throw InputError("malformed prompt tokens");
    return ObjectSpec{c + 1, static_cast<Color>(col - kTokRed), static_cast<Shape>(sh - kTokSquare)};
  };
  ToyPrompt p;
  if (tokens.size() == 3) {
    p.objects.push_back(object_at(0));
  } else if (tokens.size() == 7 && (tokens[3] == 10 || tokens[3] == 11)) {
    p.objects.push_back(object_at(0));
    p.relation = static_cast<Relation>(tokens[3] - kTokLeftOf);
    p.objects.push_back(object_at(4));
  } else {
    throw InputError("malformed prompt tokens");
  }
  p.validate();
  return p;
}

ToyPrompt parse_prompt(const std::string& text) {
  std::vector<std::string> words;
  {
    std::istringstream is(text);
    std::string w;
    while (is >> w) {
      std::transform(w.begin(), w.end(), w.begin(), [](unsigned char ch) { return std::tolower(ch); });
      words.push_back(w);
    }
  }
  std::size_t pos = 0;
  auto fail = [&]() -> InputError { return InputError("cannot parse prompt: \"" + text + "\""); };
  auto next = [&]() -> const std::string& {
    if (pos >= words.size()) throw fail();
    return words[pos++];
  };
  auto parse_object = [&]() {
    ObjectSpec o;
    const std::string& c = next();
    if (c == "a" || c == "an" || c == "one") {
      o.count = 1;
    } else if (c == "two") {
      o.count = 2;
    } else if (c == "three") {
      o.count = 3;
    } else {
      throw fail();
    }
    const std::string& col = next();
    bool found = false;
    for (Color k : kAllColors) {
      if (col == to_string(k)) {
        o.color = k;
        found = true;
      }
    }
    if (!found) throw fail();
    const std::string& sh = next();
    found = false;
    for (Shape k : kAllShapes) {
      if (sh == to_string(k) || sh == plural(k)) {
        o.shape = k;
        found = true;
      }
    }
    if (!found) throw fail();
    return o;
  };
  ToyPrompt p;
  p.objects.push_back(parse_object());
  if (pos < words.size()) {
    const std::string& r = next();
    if (r == "left") {
      if (next() != "of") throw fail();
      p.relation = Relation::LeftOf;
    } else if (r == "above") {
      p.relation = Relation::Above;
    } else {
      throw fail();
    }
    p.objects.push_back(parse_object());
  }
  if (pos != words.size()) throw fail();
  try {
    p.validate();
  } catch (const InputError&) {
    throw fail();
  }
  return p;
}

Grid blank_grid() { return Grid::Zero(kGridH * kGridW, kChannels); }

void paint_cell(Grid& g, int row, int col, Color c) {
  const auto& rgb = kPalette[1 + static_cast<int>(c)];
  for (int ch = 0; ch < kChannels; ++ch) g(row * kGridW + col, ch) = rgb[ch];
}

const std::vector<std::pair<int, int>>& footprint(Shape s) {
  static const std::vector<std::pair<int, int>> square{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  static const std::vector<std::pair<int, int>> circle{{0, 1}, {1, 0}, {1, 1}, {1, 2}, {2, 1}};
  static const std::vector<std::pair<int, int>> bar{{0, 0}, {0, 1}, {0, 2}};
  switch (s) {
    case Shape::Square: return square;
    case Shape::Circle: return circle;
    case Shape::Bar: return bar;
  }
  return square;
}

void GrammarConfig::validate() const {
  if (counts.empty() || colors.empty() || shapes.empty()) throw ConfigError("grammar: empty production set");
  for (int c : counts) {
    if (c < 1 || c > kMaxCount) throw ConfigError("grammar: counts must be in [1, 3]");
  }
  if (relation_fraction < 0.0 || relation_fraction > 1.0) throw ConfigError("grammar: relation_fraction not in [0,1]");
  if (relation_fraction > 0.0 && relations.empty()) throw ConfigError("grammar: relation prompts need relations");
  if (relation_fraction > 0.0 && colors.size() * shapes.size() < 2) {
    throw ConfigError("grammar: relation prompts need two distinct objects");
  }
}

ToyPrompt sample_prompt(const GrammarConfig& grammar, std::uint64_t seed, Split split) {
  grammar.validate();
  Rng rng(derive_seed(seed, {0x9e11}));
  auto pick = [&](const auto& v) { return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)]; };
  for (int attempt = 0; attempt < 10000; ++attempt) {
    ToyPrompt p;
    const bool rel = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < grammar.relation_fraction;
    if (rel) {
      ObjectSpec a{1, pick(grammar.colors), pick(grammar.shapes)};
      ObjectSpec b{1, pick(grammar.colors), pick(grammar.shapes)};
      if (a.color == b.color && a.shape == b.shape) continue;
      p.objects = {a, b};
      p.relation = pick(grammar.relations);
    } else {
      p.objects = {ObjectSpec{pick(grammar.counts), pick(grammar.colors), pick(grammar.shapes)}};
    }
    if (split == Split::Train &&
        std::find(grammar.held_out.begin(), grammar.held_out.end(), p) != grammar.held_out.end()) {
      continue;
    }
    return p;
  }
  throw ConfigError("grammar: every production is held out");
}

RenderedSample render(const ToyPrompt& prompt, std::uint64_t seed) {
  prompt.validate();
  std::vector<std::pair<Color, Shape>> objects;
  for (const auto& o : prompt.objects) {
    for (int i = 0; i < o.count; ++i) objects.emplace_back(o.color, o.shape);
  }
  Rng rng(derive_seed(seed, {0x7e4d}));
  struct Placed {
    std::vector<std::pair<int, int>> cells;
    double row = 0, col = 0;
  };
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<Placed> placed;
    bool ok = true;
    for (const auto& [color, shape] : objects) {
      const auto& fp = footprint(shape);
      int fh = 0, fw = 0;
      for (auto [r, c] : fp) {
        fh = std::max(fh, r + 1);
        fw = std::max(fw, c + 1);
      }
      bool done = false;
      for (int tries = 0; tries < 50 && !done; ++tries) {
        const int r0 = kPlacementStride * std::uniform_int_distribution<int>(0, (kGridH - fh) / kPlacementStride)(rng);
        const int c0 = kPlacementStride * std::uniform_int_distribution<int>(0, (kGridW - fw) / kPlacementStride)(rng);
        Placed pl;
        for (auto [r, c] : fp) {
          pl.cells.emplace_back(r0 + r, c0 + c);
          pl.row += r0 + r;
          pl.col += c0 + c;
        }
        pl.row /= static_cast<double>(fp.size());
        pl.col /= static_cast<double>(fp.size());
        bool clash = false;
        for (const auto& other : placed) {
          for (auto [r, c] : pl.cells) {
            for (auto [r2, c2] : other.cells) {
              if (std::abs(r - r2) <= 1 && std::abs(c - c2) <= 1) clash = true;
            }
          }
        }
        if (!clash) {
          placed.push_back(std::move(pl));
          done = true;
        }
      }
      if (!done) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    if (prompt.relation &&
        !relation_holds(*prompt.relation, placed[0].row, placed[0].col, placed[1].row, placed[1].col)) {
      continue;
    }
    RenderedSample s{blank_grid(), prompt, seed};
    for (std::size_t i = 0; i < placed.size(); ++i) {
      for (auto [r, c] : placed[i].cells) paint_cell(s.grid, r, c, objects[i].first);
    }
    return s;
  }
  throw FeasibilityError("render: could not place objects for \"" + prompt.text() + "\"");
}

DiffusionBatch diffusion_batch_at(const std::vector<RenderedSample>& samples, const CosineSchedule& schedule,
                                  const std::vector<int>& t, std::uint64_t seed) {
  if (samples.empty()) throw InputError("diffusion_batch: no samples");
  if (t.size() != samples.size()) throw InputError("diffusion_batch: one timestep per sample required");
  const Eigen::Index batch = static_cast<Eigen::Index>(samples.size());
  const Eigen::Index width = kGridH * kGridW * kChannels;
  DiffusionBatch out;
  MatrixF grids(batch, width);
  for (Eigen::Index b = 0; b < batch; ++b) {
    grids.row(b) = Eigen::Map<const RowVector<float>>(samples[b].grid.data(), width);
  }
  out.x0 = to_diffusion_space(grids);
  Rng rng(derive_seed(seed, {0xe95}));
  out.eps = normal_matrix<float>(batch, width, 1.0, rng);
  out.t = t;
  out.x_t = add_noise(schedule, out.x0, out.eps, out.t);
  for (const auto& s : samples) out.cond.add(s.prompt.tokens(), 0.0);
  for (Eigen::Index b = 0; b < batch; ++b) out.cond.timesteps[b] = static_cast<double>(t[b]);
  return out;
}

DiffusionBatch diffusion_batch(const std::vector<RenderedSample>& samples, const CosineSchedule& schedule,
                               std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x7157}));
  std::uniform_int_distribution<int> td(0, schedule.timesteps() - 1);
  std::vector<int> t(samples.size());
  for (auto& v : t) v = td(rng);
  return diffusion_batch_at(samples, schedule, t, seed);
}

DiffusionBatch training_batch(const GrammarConfig& grammar, const CosineSchedule& schedule, int batch,
                              std::uint64_t seed, std::uint64_t step) {
  std::vector<RenderedSample> samples;
  samples.reserve(batch);
  for (int b = 0; b < batch; ++b) {
    const ToyPrompt p = sample_prompt(grammar, derive_seed(seed, {step, static_cast<std::uint64_t>(b), 1}), Split::Train);
    samples.push_back(render(p, derive_seed(seed, {step, static_cast<std::uint64_t>(b), 2})));
  }
  return diffusion_batch(samples, schedule, derive_seed(seed, {step, 3}));
}

std::vector<DetectedObject> detect_objects(const Grid& grid) {
  if (grid.rows() != kGridH * kGridW || grid.cols() != kChannels) {
    throw ShapeError("detect_objects: expected a 64x3 grid, got " + shape_string(grid));
  }
  std::array<int, kGridH * kGridW> label{};
  for (int i = 0; i < kGridH * kGridW; ++i) {
    int best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (int k = 0; k < static_cast<int>(kPalette.size()); ++k) {
      float d = 0.f;
      for (int ch = 0; ch < kChannels; ++ch) {
        const float diff = grid(i, ch) - kPalette[k][ch];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    label[i] = best;
  }
  std::vector<DetectedObject> out;
  std::array<bool, kGridH * kGridW> seen{};
  for (int start = 0; start < kGridH * kGridW; ++start) {
    if (label[start] == 0 || seen[start]) continue;
    std::vector<int> stack{start}, cells;
    seen[start] = true;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      cells.push_back(cur);
      const int r = cur / kGridW, c = cur % kGridW;
      const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& nb : nbr) {
        if (nb[0] < 0 || nb[0] >= kGridH || nb[1] < 0 || nb[1] >= kGridW) continue;
        const int idx = nb[0] * kGridW + nb[1];
        if (!seen[idx] && label[idx] == label[start]) {
          seen[idx] = true;
          stack.push_back(idx);
        }
      }
    }
    int rmin = kGridH, cmin = kGridW;
    double rs = 0, cs = 0;
    for (int cell : cells) {
      rmin = std::min(rmin, cell / kGridW);
      cmin = std::min(cmin, cell % kGridW);
      rs += cell / kGridW;
      cs += cell % kGridW;
    }
    std::vector<std::pair<int, int>> rel;
    for (int cell : cells) rel.emplace_back(cell / kGridW - rmin, cell % kGridW - cmin);
    std::sort(rel.begin(), rel.end());
    DetectedObject obj{static_cast<Color>(label[start] - 1), std::nullopt, rs / cells.size(), cs / cells.size(),
                       static_cast<int>(cells.size())};
    for (Shape s : kAllShapes) {
      auto fp = footprint(s);
      std::sort(fp.begin(), fp.end());
      if (fp == rel) obj.shape = s;
    }
    out.push_back(obj);
  }
  return out;
}

}  // namespace lindit::toy
