#pragma once

#include <string>
#include <vector>

#include "argen/image.hpp"
#include "argen/rng.hpp"

namespace argen {

constexpr int kImageSize = 64;
constexpr int kNumColors = 8;
constexpr int kNumShapes = 5;
constexpr int kNumSizes = 3;
constexpr int kNumRots = 3;
constexpr int kNumCells = 9;

struct Rgb {
    uint8_t r, g, b;
};

extern const Rgb kPalette[kNumColors];
extern const char* const kColorNames[kNumColors];
extern const Rgb kNeutralGray;
extern const char* const kShapeNames[kNumShapes];
extern const char* const kSizeNames[kNumSizes];
extern const int kRotations[kNumRots];
// Cell i = row-major 3x3 position; name is two words ("top left", ...).
extern const char* const kCellNames[kNumCells];

double size_radius(int size);
double cell_cx(int cell);
double cell_cy(int cell);

struct SceneObject {
    int shape = 0, color = 0, cell = 0, size = 0, rot_deg = 0;
    bool operator==(const SceneObject&) const = default;
};

struct Scene {
    int background = 0;
    std::vector<SceneObject> objects;  // kept sorted by cell
    bool operator==(const Scene&) const = default;
};

// Uniform over valid scenes: 1-3 objects, distinct cells, distinct
// (shape,color) pairs, object colors != background.
Scene gen_scene(Rng& rng);

using Mask = std::vector<uint8_t>;  // kImageSize*kImageSize, 0/1

struct SceneRender {
    Image image;
    std::vector<Mask> masks;  // one per object, pixel-exact, disjoint
};

SceneRender render_scene(const Scene& scene);

// Free-form placement used by recovery composites and detector templates.
struct FreeObject {
    int shape = 0;
    Rgb color{0, 0, 0};
    double cx = 0, cy = 0, radius = 0, rot_deg = 0;
};

void draw_object(Image& img, const FreeObject& obj, Mask* mask);

// "a {size} {color} {shape} at {cell} [and ...] on a {bg} background"
std::string caption(const Scene& scene);
// Inverts caption(); rotations (not captioned) come back as 0.
Scene parse_caption(const std::string& text);
std::string subject_label(int shape, int color);  // "the {color} {shape}"

// Compact reversible serialization for provenance records.
std::string scene_to_string(const Scene& scene);
Scene scene_from_string(const std::string& s);
uint64_t scene_id(const Scene& scene);

}  // namespace argen
