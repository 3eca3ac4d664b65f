#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lindit/diffusion.hpp"
#include "lindit/tensor.hpp"

namespace lindit::toy {

enum class Color { Red, Green, Blue, Yellow };
enum class Shape { Square, Circle, Bar };
enum class Relation { LeftOf, Above };

inline constexpr std::array kAllColors{Color::Red, Color::Green, Color::Blue, Color::Yellow};
inline constexpr std::array kAllShapes{Shape::Square, Shape::Circle, Shape::Bar};
inline constexpr std::array kAllRelations{Relation::LeftOf, Relation::Above};

inline constexpr int kGridH = 8;
inline constexpr int kGridW = 8;
inline constexpr int kChannels = 3;
inline constexpr int kMaxCount = 3;
// Objects are anchored at multiples of this stride.
inline constexpr int kPlacementStride = 2;

// Token vocabulary: counts one..three, four colors, three shapes, two relations.
inline constexpr int kVocabSize = 12;
inline constexpr int kMaxPromptTokens = 7;

std::string to_string(Color c);
std::string to_string(Shape s);
std::string to_string(Relation r);

struct ObjectSpec {
  int count = 1;
  Color color = Color::Red;
  Shape shape = Shape::Square;

  bool operator==(const ObjectSpec&) const = default;
};

// Either a single counted object ("two red squares") or a pair of single objects
// tied by a spatial relation ("a red square left of a blue circle").
struct ToyPrompt {
  std::vector<ObjectSpec> objects;
  std::optional<Relation> relation;

  bool operator==(const ToyPrompt&) const = default;

  void validate() const;
  std::vector<int> tokens() const;
  std::string text() const;
};

ToyPrompt parse_prompt(const std::string& text);
ToyPrompt prompt_from_tokens(const std::vector<int>& tokens);

// An 8x8 RGB image stored as (H*W) x 3, values in [0, 1].
using Grid = MatrixF;

Grid blank_grid();
void paint_cell(Grid& g, int row, int col, Color c);

// Cell offsets (row, col) of a shape's footprint relative to its top-left corner.
const std::vector<std::pair<int, int>>& footprint(Shape s);

struct GrammarConfig {
  std::vector<int> counts{1, 2};
  std::vector<Color> colors{kAllColors.begin(), kAllColors.end()};
  std::vector<Shape> shapes{kAllShapes.begin(), kAllShapes.end()};
  std::vector<Relation> relations{kAllRelations.begin(), kAllRelations.end()};
  // Probability of drawing a relation prompt; the rest are counted-object prompts.
  double relation_fraction = 0.5;
  // Combinations never drawn for the training split.
  std::vector<ToyPrompt> held_out;

  void validate() const;
};

enum class Split { Train, Any };

ToyPrompt sample_prompt(const GrammarConfig& grammar, std::uint64_t seed, Split split = Split::Any);

struct RenderedSample {
  Grid grid;
  ToyPrompt prompt;
  std::uint64_t seed = 0;
};

// Places the prompt's objects at non-touching random positions that satisfy its relation.
RenderedSample render(const ToyPrompt& prompt, std::uint64_t seed);

// Training batch in diffusion space: x_t, eps and x0 are (batch x 192).
struct DiffusionBatch : NoisedBatch {
  MatrixF x0;
};

DiffusionBatch diffusion_batch(const std::vector<RenderedSample>& samples, const CosineSchedule& schedule,
                               std::uint64_t seed);

// Same, but with caller-chosen timesteps.
DiffusionBatch diffusion_batch_at(const std::vector<RenderedSample>& samples, const CosineSchedule& schedule,
                                  const std::vector<int>& t, std::uint64_t seed);

// Draws `batch` training prompts, renders them and noises them; a pure function of (seed, step).
DiffusionBatch training_batch(const GrammarConfig& grammar, const CosineSchedule& schedule, int batch,
                              std::uint64_t seed, std::uint64_t step);

// ---------------------------------------------------------------------------
// Grid parsing shared with the verifier.

struct DetectedObject {
  Color color;
  std::optional<Shape> shape;  // nullopt: blob not matching any known footprint
  double centroid_row;
  double centroid_col;
  int cells;
};

// Classifies every cell to the nearest palette color (background black) and
// returns 4-connected same-color components.
std::vector<DetectedObject> detect_objects(const Grid& grid);

}  // namespace lindit::toy
