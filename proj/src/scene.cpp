#include "argen/scene.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "argen/error.hpp"

namespace argen {

const Rgb kPalette[kNumColors] = {
    {220, 40, 40},   // red
    {40, 180, 60},   // green
    {45, 90, 220},   // blue
    {235, 220, 50},  // yellow
    {220, 60, 200},  // magenta
    {60, 210, 220},  // cyan
    {240, 140, 40},  // orange
    {130, 60, 200},  // purple
};
const char* const kColorNames[kNumColors] = {"red",     "green", "blue",   "yellow",
                                             "magenta", "cyan",  "orange", "purple"};
const Rgb kNeutralGray = {128, 128, 128};
const char* const kShapeNames[kNumShapes] = {"circle", "square", "triangle", "ring", "cross"};
const char* const kSizeNames[kNumSizes] = {"small", "medium", "large"};
const int kRotations[kNumRots] = {0, 45, 90};
const char* const kCellNames[kNumCells] = {
    "top left",    "top center",    "top right",    "middle left",  "middle center",
    "middle right", "bottom left",  "bottom center", "bottom right"};

double size_radius(int size) {
    static const double r[kNumSizes] = {4.2, 6.4, 8.6};
    ARGEN_CHECK(size >= 0 && size < kNumSizes, IndexError, "bad size class");
    return r[size];
}

double cell_cx(int cell) { return (cell % 3 + 0.5) * double(kImageSize) / 3.0; }
double cell_cy(int cell) { return (cell / 3 + 0.5) * double(kImageSize) / 3.0; }

Scene gen_scene(Rng& rng) {
    Scene s;
    s.background = rng.rand_int(kNumColors);
    int n = 1 + rng.rand_int(3);
    std::vector<int> cells(kNumCells);
    for (int i = 0; i < kNumCells; ++i) cells[size_t(i)] = i;
    rng.shuffle(cells);
    for (int i = 0; i < n; ++i) {
        SceneObject o;
        o.cell = cells[size_t(i)];
        for (;;) {
            o.shape = rng.rand_int(kNumShapes);
            o.color = rng.rand_int(kNumColors);
            if (o.color == s.background) continue;
            bool dup = false;
            for (const auto& prev : s.objects)
                dup = dup || (prev.shape == o.shape && prev.color == o.color);
            if (!dup) break;
        }
        o.size = rng.rand_int(kNumSizes);
        o.rot_deg = kRotations[rng.rand_int(kNumRots)];
        s.objects.push_back(o);
    }
    std::sort(s.objects.begin(), s.objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
    return s;
}

namespace {

bool in_shape(int shape, double qx, double qy, double r) {
    switch (shape) {
        case 0:  // circle
            return qx * qx + qy * qy <= r * r;
        case 1:  // square
            return std::abs(qx) <= 0.82 * r && std::abs(qy) <= 0.82 * r;
        case 2: {  // triangle, apex up (negative y in image coords)
            double a0 = -M_PI / 2, a1 = M_PI / 6, a2 = 5 * M_PI / 6;
            double vx[3] = {r * std::cos(a0), r * std::cos(a1), r * std::cos(a2)};
            double vy[3] = {r * std::sin(a0), r * std::sin(a1), r * std::sin(a2)};
            for (int k = 0; k < 3; ++k) {
                int k2 = (k + 1) % 3;
                double ex = vx[k2] - vx[k], ey = vy[k2] - vy[k];
                double px = qx - vx[k], py = qy - vy[k];
                if (ex * py - ey * px < 0) return false;
            }
            return true;
        }
        case 3: {  // ring
            double d2 = qx * qx + qy * qy;
            double inner = 0.55 * r;
            return d2 <= r * r && d2 >= inner * inner;
        }
        case 4:  // cross
            return (std::abs(qx) <= 0.33 * r && std::abs(qy) <= r) ||
                   (std::abs(qy) <= 0.33 * r && std::abs(qx) <= r);
        default:
            throw IndexError("bad shape id");
    }
}

}  // namespace

void draw_object(Image& img, const FreeObject& obj, Mask* mask) {
    double rad = obj.radius;
    double th = obj.rot_deg * M_PI / 180.0;
    double c = std::cos(th), s = std::sin(th);
    int x0 = std::max(0, int(std::floor(obj.cx - rad - 2)));
    int x1 = std::min(img.w - 1, int(std::ceil(obj.cx + rad + 2)));
    int y0 = std::max(0, int(std::floor(obj.cy - rad - 2)));
    int y1 = std::min(img.h - 1, int(std::ceil(obj.cy + rad + 2)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double dx = (x + 0.5) - obj.cx;
            double dy = (y + 0.5) - obj.cy;
            double qx = c * dx + s * dy;
            double qy = -s * dx + c * dy;
            if (!in_shape(obj.shape, qx, qy, rad)) continue;
            img.set(x, y, obj.color.r, obj.color.g, obj.color.b);
            if (mask) (*mask)[size_t(y) * img.w + x] = 1;
        }
}

SceneRender render_scene(const Scene& scene) {
    SceneRender out;
    out.image = Image(kImageSize, kImageSize);
    const Rgb bg = kPalette[scene.background];
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) out.image.set(x, y, bg.r, bg.g, bg.b);
    for (const auto& o : scene.objects) {
        Mask m(size_t(kImageSize) * kImageSize, 0);
        FreeObject f{o.shape, kPalette[o.color], cell_cx(o.cell), cell_cy(o.cell),
                     size_radius(o.size), double(o.rot_deg)};
        draw_object(out.image, f, &m);
        out.masks.push_back(std::move(m));
    }
    return out;
}

std::string caption(const Scene& scene) {
    std::ostringstream os;
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (i) os << " and ";
        os << "a " << kSizeNames[o.size] << " " << kColorNames[o.color] << " "
           << kShapeNames[o.shape] << " at " << kCellNames[o.cell];
    }
    os << " on a " << kColorNames[scene.background] << " background";
    return os.str();
}

namespace {

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream is(text);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

int lookup(const char* const* names, int n, const std::string& w, const char* what) {
    for (int i = 0; i < n; ++i)
        if (w == names[i]) return i;
    throw DataError(std::string("caption parse: unknown ") + what + " '" + w + "'");
}

}  // namespace

Scene parse_caption(const std::string& text) {
    auto words = split_words(text);
    size_t i = 0;
    auto need = [&](const char* w) {
        ARGEN_CHECK(i < words.size() && words[i] == w, DataError,
                    std::string("caption parse: expected '") + w + "'");
        ++i;
    };
    auto next = [&]() -> const std::string& {
        ARGEN_CHECK(i < words.size(), DataError, "caption parse: truncated");
        return words[i++];
    };
    static const char* const rows[3] = {"top", "middle", "bottom"};
    static const char* const cols[3] = {"left", "center", "right"};
    Scene s;
    for (;;) {
        need("a");
        SceneObject o;
        o.size = lookup(kSizeNames, kNumSizes, next(), "size");
        o.color = lookup(kColorNames, kNumColors, next(), "color");
        o.shape = lookup(kShapeNames, kNumShapes, next(), "shape");
        need("at");
        int r = lookup(rows, 3, next(), "cell row");
        int c = lookup(cols, 3, next(), "cell column");
        o.cell = r * 3 + c;
        o.rot_deg = 0;
        s.objects.push_back(o);
        ARGEN_CHECK(i < words.size(), DataError, "caption parse: truncated after object");
        if (words[i] == "and") {
            ++i;
            continue;
        }
        break;
    }
    need("on");
    need("a");
    s.background = lookup(kColorNames, kNumColors, next(), "background color");
    need("background");
    ARGEN_CHECK(i == words.size(), DataError, "caption parse: trailing words");
    std::sort(s.objects.begin(), s.objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
    return s;
}

std::string subject_label(int shape, int color) {
    return std::string("the ") + kColorNames[color] + " " + kShapeNames[shape];
}

std::string scene_to_string(const Scene& scene) {
    std::ostringstream os;
    os << scene.background;
    for (const auto& o : scene.objects)
        os << ";" << o.shape << "," << o.color << "," << o.cell << "," << o.size << ","
           << o.rot_deg;
    return os.str();
}

Scene scene_from_string(const std::string& s) {
    Scene out;
    std::istringstream is(s);
    std::string part;
    ARGEN_CHECK(std::getline(is, part, ';'), DataError, "scene parse: empty");
    out.background = std::stoi(part);
    while (std::getline(is, part, ';')) {
        SceneObject o;
        if (std::sscanf(part.c_str(), "%d,%d,%d,%d,%d", &o.shape, &o.color, &o.cell, &o.size,
                        &o.rot_deg) != 5)
            throw DataError("scene parse: bad object '" + part + "'");
        out.objects.push_back(o);
    }
    return out;
}

uint64_t scene_id(const Scene& scene) {
    std::string s = scene_to_string(scene);
    return fnv1a64(s.data(), s.size());
}

}  // namespace argen
