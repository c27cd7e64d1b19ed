#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <unordered_set>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rged/image_io.hpp"
#include "rged/rng.hpp"
#include "rged/tensor.hpp"

namespace rged {

inline constexpr std::string_view kSynthVersion = "synth-v1";
inline constexpr std::size_t kCanvas = 64;
inline constexpr int kGrid = 4;
inline constexpr std::size_t kCell = kCanvas / kGrid;
inline constexpr double kBackground = 0.9;
inline constexpr std::size_t kMaxSceneObjects = 3;
inline constexpr std::size_t kMaxSceneAccessories = 2;

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow, purple, orange, cyan, black };
enum class SizeClass { small, medium, large };
enum class Accessory { none, crown, collar };

inline constexpr std::array kShapeNames{"circle", "square", "triangle"};
inline constexpr std::array kColorNames{"red", "green", "blue", "yellow", "purple", "orange", "cyan", "black"};
inline constexpr std::array kSizeNames{"small", "medium", "large"};
inline constexpr std::array kAccessoryNames{"none", "crown", "collar"};

inline constexpr int kShapeCount = 3, kColorCount = 8, kSizeCount = 3, kAccessoryCount = 3;

inline const char* name(ShapeKind v) { return kShapeNames[static_cast<int>(v)]; }
inline const char* name(Color v) { return kColorNames[static_cast<int>(v)]; }
inline const char* name(SizeClass v) { return kSizeNames[static_cast<int>(v)]; }
inline const char* name(Accessory v) { return kAccessoryNames[static_cast<int>(v)]; }

template <class Enum, std::size_t N>
std::optional<Enum> parse_enum(std::string_view word, const std::array<const char*, N>& names) {
    for (std::size_t i = 0; i < N; ++i)
        if (word == names[i]) return static_cast<Enum>(i);
    return std::nullopt;
}

struct SceneObject {
    ShapeKind shape = ShapeKind::circle;
    Color color = Color::red;
    SizeClass size = SizeClass::medium;
    int row = 0;
    int col = 0;
    Accessory accessory = Accessory::none;

    int cell_index() const { return row * kGrid + col; }
    friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

/// Objects on a 4x4 placement grid, kept sorted in raster order of cells.
struct SceneGraph {
    std::vector<SceneObject> objects;

    friend bool operator==(const SceneGraph&, const SceneGraph&) = default;

    void sort_raster() {
        std::sort(objects.begin(), objects.end(),
                  [](const SceneObject& a, const SceneObject& b) { return a.cell_index() < b.cell_index(); });
    }

    bool occupied(int cell) const {
        return std::any_of(objects.begin(), objects.end(), [cell](const SceneObject& o) { return o.cell_index() == cell; });
    }
};

struct ImageSample {
    std::uint64_t id = 0;
    SceneGraph scene;
    Tensor pixels;
};

// ---------------------------------------------------------------------------
// Geometry

inline std::array<std::uint8_t, 3> palette_rgb(Color c) {
    static constexpr std::array<std::array<std::uint8_t, 3>, 8> table{{
        {220, 40, 40},   // red
        {40, 170, 60},   // green
        {40, 70, 220},   // blue
        {240, 210, 40},  // yellow
        {140, 60, 180},  // purple
        {245, 140, 20},  // orange
        {30, 190, 200},  // cyan
        {30, 30, 30},    // black
    }};
    return table[static_cast<int>(c)];
}

inline constexpr std::array<std::uint8_t, 3> kCrownRgb{200, 160, 50};
inline constexpr std::array<std::uint8_t, 3> kCollarRgb{120, 70, 30};

inline std::size_t size_pixels(SizeClass s) {
    static constexpr std::array<std::size_t, 3> px{6, 8, 10};
    return px[static_cast<int>(s)];
}

struct Pixel {
    std::size_t y, x;
    std::array<std::uint8_t, 3> rgb;
};

/// Pixels covered by an object and its accessory, in absolute canvas
/// coordinates. The body sits 4 px below the cell top (room for a crown)
/// and a collar occupies the 2 rows under the body.
inline std::vector<Pixel> object_footprint(const SceneObject& o) {
    const std::size_t s = size_pixels(o.size);
    const std::size_t x0 = static_cast<std::size_t>(o.col) * kCell + (kCell - s) / 2;
    const std::size_t y0 = static_cast<std::size_t>(o.row) * kCell + 4;
    const auto rgb = palette_rgb(o.color);
    std::vector<Pixel> px;
    const double half = static_cast<double>(s) / 2.0;
    for (std::size_t r = 0; r < s; ++r) {
        for (std::size_t c = 0; c < s; ++c) {
            const double cy = static_cast<double>(r) + 0.5, cx = static_cast<double>(c) + 0.5;
            bool inside = false;
            switch (o.shape) {
            case ShapeKind::square:
                inside = true;
                break;
            case ShapeKind::circle:
                inside = (cx - half) * (cx - half) + (cy - half) * (cy - half) <= half * half;
                break;
            case ShapeKind::triangle: {
                const double hw = static_cast<double>(r + 1) / 2.0;
                inside = cx >= half - hw && cx <= half + hw;
                break;
            }
            }
            if (inside) px.push_back({y0 + r, x0 + c, rgb});
        }
    }
    if (o.accessory == Accessory::crown) {
        const std::size_t xc = x0 + (s - 6) / 2;
        static constexpr std::array<std::array<int, 6>, 3> crown{{{1, 0, 1, 1, 0, 1}, {1, 1, 1, 1, 1, 1}, {1, 1, 1, 1, 1, 1}}};
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 6; ++c)
                if (crown[r][c]) px.push_back({y0 - 3 + r, xc + c, kCrownRgb});
    } else if (o.accessory == Accessory::collar) {
        for (std::size_t r = 0; r < 2; ++r)
            for (std::size_t c = 0; c < s; ++c) px.push_back({y0 + s + r, x0 + c, kCollarRgb});
    }
    return px;
}

inline Tensor blank_canvas() { return Tensor(Shape{kCanvas, kCanvas, 3}, kBackground); }

/// Hard-edged rendering over the light-gray background.
inline Tensor rasterize(const SceneGraph& scene) {
    Tensor img = blank_canvas();
    auto d = img.mutable_data();
    for (const SceneObject& o : scene.objects) {
        for (const Pixel& p : object_footprint(o)) {
            for (std::size_t k = 0; k < 3; ++k) d[(p.y * kCanvas + p.x) * 3 + k] = p.rgb[k] / 255.0;
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Serialization: shape=circle;color=red;size=medium;cell=2,3;acc=none|...

inline std::string serialize_scene(const SceneGraph& scene) {
    std::string out;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (i) out += '|';
        out += std::string("shape=") + name(o.shape) + ";color=" + name(o.color) + ";size=" + name(o.size) +
               ";cell=" + std::to_string(o.row) + "," + std::to_string(o.col) + ";acc=" + name(o.accessory);
    }
    return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline bool valid_scene(const SceneGraph& scene, std::size_t max_objects = kMaxSceneObjects + 1) {
    if (scene.objects.size() > max_objects) return false;
    std::array<bool, kGrid * kGrid> used{};
    for (const auto& o : scene.objects) {
        if (o.row < 0 || o.row >= kGrid || o.col < 0 || o.col >= kGrid) return false;
        if (used[o.cell_index()]) return false;
        used[o.cell_index()] = true;
    }
    return std::is_sorted(scene.objects.begin(), scene.objects.end(),
                          [](const SceneObject& a, const SceneObject& b) { return a.cell_index() < b.cell_index(); });
}

inline SceneGraph parse_scene(std::string_view text) {
    SceneGraph scene;
    if (text.empty()) return scene;
    for (const std::string& obj_text : split(text, '|')) {
        SceneObject o;
        bool seen[5] = {};
        for (const std::string& field : split(obj_text, ';')) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) throw DataError("scene field without '=': " + field);
            const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
            auto need = [&](auto parsed, int slot) {
                if (!parsed) throw DataError("bad scene value '" + value + "' for " + key);
                seen[slot] = true;
                return *parsed;
            };
            if (key == "shape") {
                o.shape = need(parse_enum<ShapeKind>(value, kShapeNames), 0);
            } else if (key == "color") {
                o.color = need(parse_enum<Color>(value, kColorNames), 1);
            } else if (key == "size") {
                o.size = need(parse_enum<SizeClass>(value, kSizeNames), 2);
            } else if (key == "cell") {
                const auto rc = split(value, ',');
                if (rc.size() != 2 || rc[0].size() != 1 || rc[1].size() != 1 || !std::isdigit(rc[0][0]) ||
                    !std::isdigit(rc[1][0])) {
                    throw DataError("bad cell '" + value + "'");
                }
                o.row = rc[0][0] - '0';
                o.col = rc[1][0] - '0';
                seen[3] = true;
            } else if (key == "acc") {
                o.accessory = need(parse_enum<Accessory>(value, kAccessoryNames), 4);
            } else {
                throw DataError("unknown scene field '" + key + "'");
            }
        }
        for (bool s : seen)
            if (!s) throw DataError("scene object is missing a field: " + obj_text);
        scene.objects.push_back(o);
    }
    if (!valid_scene(scene)) throw DataError("scene violates grid constraints: " + std::string(text));
    return scene;
}

// ---------------------------------------------------------------------------
// Generation

inline SceneGraph random_scene(Rng& rng) {
    SceneGraph scene;
    const int n = 1 + rng.below(static_cast<int>(kMaxSceneObjects));
    std::array<int, kGrid * kGrid> cells{};
    for (int i = 0; i < kGrid * kGrid; ++i) cells[i] = i;
    rng.shuffle(cells.begin(), cells.end());
    std::size_t accessories = 0;
    for (int i = 0; i < n; ++i) {
        SceneObject o;
        o.row = cells[i] / kGrid;
        o.col = cells[i] % kGrid;
        o.shape = static_cast<ShapeKind>(rng.below(kShapeCount));
        o.color = static_cast<Color>(rng.below(kColorCount));
        o.size = static_cast<SizeClass>(rng.below(kSizeCount));
        o.accessory = static_cast<Accessory>(rng.below(kAccessoryCount));
        // Caps caption length: at most two accessory phrases per scene.
        if (o.accessory != Accessory::none && ++accessories > kMaxSceneAccessories) o.accessory = Accessory::none;
        scene.objects.push_back(o);
    }
    scene.sort_raster();
    return scene;
}

inline ImageSample make_sample(std::uint64_t id) {
    Rng rng(mix_seed(id, hash_tag(kSynthVersion)));
    ImageSample s;
    s.id = id;
    s.scene = random_scene(rng);
    s.pixels = rasterize(s.scene);
    return s;
}

/// Deterministic, duplicate-free corpus; a pure function of (count, seed)
/// and the generator version.
inline std::vector<ImageSample> generate_corpus(std::size_t count, std::uint64_t seed) {
    if (count == 0) throw ContractError("generate_corpus: count must be positive");
    std::vector<ImageSample> out;
    out.reserve(count);
    std::unordered_set<std::uint64_t> ids;
    for (std::uint64_t i = 0; out.size() < count; ++i) {
        const std::uint64_t id = mix_seed(mix_seed(seed, hash_tag(kSynthVersion)), i);
        if (!ids.insert(id).second) continue;
        out.push_back(make_sample(id));
    }
    return out;
}

inline std::string id_hex(std::uint64_t id) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id));
    return buf;
}

inline std::uint64_t parse_id_hex(const std::string& s) {
    if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos) {
        throw DataError("bad sample id '" + s + "'");
    }
    return std::stoull(s, nullptr, 16);
}

// ---------------------------------------------------------------------------
// Object-level edits

enum class EditOp { add, remove, change, give };
inline constexpr std::array kEditOpNames{"add", "remove", "change", "give"};
inline const char* name(EditOp v) { return kEditOpNames[static_cast<int>(v)]; }

/// One object-level change. For add, (color, shape) describe the new object
/// together with size and accessory; otherwise they identify the target.
struct SceneEdit {
    EditOp op = EditOp::remove;
    Color color = Color::red;
    ShapeKind shape = ShapeKind::circle;
    SizeClass size = SizeClass::medium;
    Accessory accessory = Accessory::none;
    Color new_color = Color::red;

    friend bool operator==(const SceneEdit& a, const SceneEdit& b) {
        if (a.op != b.op || a.color != b.color || a.shape != b.shape) return false;
        switch (a.op) {
        case EditOp::add:
            return a.size == b.size && a.accessory == b.accessory;
        case EditOp::remove:
            return true;
        case EditOp::change:
            return a.new_color == b.new_color;
        case EditOp::give:
            return a.accessory == b.accessory;
        }
        return false;
    }
};

/// Grammar productions:
///   add a <size> <color> <shape> [with a <accessory>]
///   remove the <color> <shape>
///   change the <color> <shape> to <color'>
///   give the <color> <shape> a <accessory>
inline std::string render_instruction(const SceneEdit& e) {
    const std::string target = std::string(name(e.color)) + " " + name(e.shape);
    switch (e.op) {
    case EditOp::add: {
        std::string s = std::string("add a ") + name(e.size) + " " + target;
        if (e.accessory != Accessory::none) s += std::string(" with a ") + name(e.accessory);
        return s;
    }
    case EditOp::remove:
        return "remove the " + target;
    case EditOp::change:
        return "change the " + target + " to " + name(e.new_color);
    case EditOp::give:
        return "give the " + target + " a " + name(e.accessory);
    }
    return {};
}

/// First object in raster order matching (color, shape).
inline std::optional<std::size_t> find_target(const SceneGraph& scene, Color color, ShapeKind shape) {
    for (std::size_t i = 0; i < scene.objects.size(); ++i)
        if (scene.objects[i].color == color && scene.objects[i].shape == shape) return i;
    return std::nullopt;
}

/// Free cells strictly after the last object in raster order. Adding there
/// keeps captions extended by appending in raster order.
inline std::vector<int> append_cells(const SceneGraph& scene) {
    const int last = scene.objects.empty() ? -1 : scene.objects.back().cell_index();
    std::vector<int> cells;
    for (int c = last + 1; c < kGrid * kGrid; ++c) cells.push_back(c);
    return cells;
}

/// Candidate cells for an added object: append cells when any exist,
/// otherwise every free cell.
inline std::vector<int> add_cells(const SceneGraph& scene) {
    auto cells = append_cells(scene);
    if (!cells.empty()) return cells;
    for (int c = 0; c < kGrid * kGrid; ++c)
        if (!scene.occupied(c)) cells.push_back(c);
    return cells;
}

inline bool edit_feasible(const SceneGraph& scene, const SceneEdit& e) {
    if (e.op == EditOp::add) return !add_cells(scene).empty();
    const auto idx = find_target(scene, e.color, e.shape);
    if (!idx) return false;
    const SceneObject& o = scene.objects[*idx];
    if (e.op == EditOp::change) return o.color != e.new_color;
    if (e.op == EditOp::give) return e.accessory != Accessory::none && o.accessory != e.accessory;
    return true;
}

/// Applies an edit. Added objects take one of add_cells(scene), chosen by
/// placement_seed.
inline SceneGraph apply_edit(const SceneGraph& scene, const SceneEdit& e, std::uint64_t placement_seed = 0) {
    SceneGraph out = scene;
    if (e.op == EditOp::add) {
        const auto cells = add_cells(scene);
        if (cells.empty()) throw InfeasibleEditError("add: no free grid cell");
        Rng rng(placement_seed);
        const int cell = cells[static_cast<std::size_t>(rng.below(static_cast<int>(cells.size())))];
        out.objects.push_back(SceneObject{e.shape, e.color, e.size, cell / kGrid, cell % kGrid, e.accessory});
        out.sort_raster();
        return out;
    }
    const auto idx = find_target(scene, e.color, e.shape);
    if (!idx) {
        throw InfeasibleEditError(std::string(name(e.op)) + ": no " + name(e.color) + " " + name(e.shape) + " in scene");
    }
    switch (e.op) {
    case EditOp::remove:
        out.objects.erase(out.objects.begin() + static_cast<std::ptrdiff_t>(*idx));
        break;
    case EditOp::change:
        if (scene.objects[*idx].color == e.new_color) throw InfeasibleEditError("change: object already has that color");
        out.objects[*idx].color = e.new_color;
        break;
    case EditOp::give:
        if (e.accessory == Accessory::none || scene.objects[*idx].accessory == e.accessory) {
            throw InfeasibleEditError("give: object already has that accessory");
        }
        out.objects[*idx].accessory = e.accessory;
        break;
    case EditOp::add:
        break;
    }
    return out;
}

/// Ground-truth edit used only for evaluation.
struct OracleEdit {
    std::string instruction;
    SceneEdit edit;
    SceneGraph edited_scene;
    BitMask mask;
    Tensor edited_pixels;
};

/// Pixels that differ between two renderings, dilated by one pixel
/// (3x3 neighbourhood).
inline BitMask diff_mask(const Tensor& a, const Tensor& b) {
    const std::size_t h = a.dim(0), w = a.dim(1);
    BitMask diff(h, w), out(h, w);
    for (std::size_t p = 0; p < h * w; ++p)
        for (std::size_t k = 0; k < 3; ++k)
            if (a[p * 3 + k] != b[p * 3 + k]) diff.bits[p] = 1;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (!diff(y, x)) continue;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                    if (yy >= 0 && xx >= 0 && yy < static_cast<long>(h) && xx < static_cast<long>(w)) {
                        out(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) = 1;
                    }
                }
        }
    return out;
}

inline OracleEdit make_oracle_edit(const ImageSample& sample, const SceneEdit& edit, std::uint64_t placement_seed = 0) {
    OracleEdit o;
    o.edit = edit;
    o.instruction = render_instruction(edit);
    o.edited_scene = apply_edit(sample.scene, edit, placement_seed);
    o.edited_pixels = rasterize(o.edited_scene);
    o.mask = diff_mask(sample.pixels, o.edited_pixels);
    return o;
}

/// Random feasible edit of the given kind.
inline SceneEdit random_edit(const SceneGraph& scene, EditOp op, Rng& rng) {
    SceneEdit e;
    e.op = op;
    if (op == EditOp::add) {
        if (add_cells(scene).empty()) throw InfeasibleEditError("add: no free grid cell");
        e.color = static_cast<Color>(rng.below(kColorCount));
        e.shape = static_cast<ShapeKind>(rng.below(kShapeCount));
        e.size = static_cast<SizeClass>(rng.below(kSizeCount));
        e.accessory = static_cast<Accessory>(rng.below(kAccessoryCount));
        return e;
    }
    if (scene.objects.empty()) throw InfeasibleEditError(std::string(name(op)) + ": scene has no objects");
    const SceneObject& t = scene.objects[static_cast<std::size_t>(rng.below(static_cast<int>(scene.objects.size())))];
    e.color = t.color;
    e.shape = t.shape;
    const SceneObject& resolved = scene.objects[*find_target(scene, t.color, t.shape)];
    if (op == EditOp::change) {
        e.new_color = static_cast<Color>((static_cast<int>(resolved.color) + 1 + rng.below(kColorCount - 1)) % kColorCount);
    } else if (op == EditOp::give) {
        std::vector<Accessory> options;
        for (Accessory a : {Accessory::crown, Accessory::collar})
            if (a != resolved.accessory) options.push_back(a);
        e.accessory = options[static_cast<std::size_t>(rng.below(static_cast<int>(options.size())))];
    }
    return e;
}

inline OracleEdit make_oracle_edit(const ImageSample& sample, EditOp op, std::uint64_t seed) {
    Rng rng(seed);
    const SceneEdit e = random_edit(sample.scene, op, rng);
    return make_oracle_edit(sample, e, rng.bits());
}

// ---------------------------------------------------------------------------
// Recognition: recovers a scene graph from pixels by matching every cell
// against all renderable objects (and the empty cell).

inline SceneGraph recognize_scene(const Tensor& pixels) {
    detail::require_rgb(pixels);
    if (pixels.dim(0) != kCanvas || pixels.dim(1) != kCanvas) throw DataError("recognize_scene expects a 64x64 image");
    struct Candidate {
        std::optional<SceneObject> object;
        std::vector<double> patch;
    };
    static const std::vector<Candidate> candidates = [] {
        std::vector<Candidate> out;
        auto render_cell = [](const std::optional<SceneObject>& o) {
            SceneGraph g;
            if (o) g.objects.push_back(*o);
            const Tensor img = rasterize(g);
            std::vector<double> patch(kCell * kCell * 3);
            for (std::size_t y = 0; y < kCell; ++y)
                for (std::size_t x = 0; x < kCell; ++x)
                    for (std::size_t k = 0; k < 3; ++k) patch[(y * kCell + x) * 3 + k] = img[(y * kCanvas + x) * 3 + k];
            return patch;
        };
        out.push_back({std::nullopt, render_cell(std::nullopt)});
        for (int s = 0; s < kShapeCount; ++s)
            for (int c = 0; c < kColorCount; ++c)
                for (int z = 0; z < kSizeCount; ++z)
                    for (int a = 0; a < kAccessoryCount; ++a) {
                        SceneObject o{static_cast<ShapeKind>(s), static_cast<Color>(c), static_cast<SizeClass>(z), 0, 0,
                                      static_cast<Accessory>(a)};
                        out.push_back({o, render_cell(o)});
                    }
        return out;
    }();

    SceneGraph scene;
    const auto px = pixels.data();
    for (int row = 0; row < kGrid; ++row) {
        for (int col = 0; col < kGrid; ++col) {
            double best = std::numeric_limits<double>::infinity();
            const Candidate* pick = nullptr;
            for (const Candidate& cand : candidates) {
                double err = 0.0;
                for (std::size_t y = 0; y < kCell && err < best; ++y) {
                    const std::size_t base = ((static_cast<std::size_t>(row) * kCell + y) * kCanvas +
                                              static_cast<std::size_t>(col) * kCell) * 3;
                    for (std::size_t i = 0; i < kCell * 3; ++i) err += std::abs(px[base + i] - cand.patch[y * kCell * 3 + i]);
                }
                if (err < best) {
                    best = err;
                    pick = &cand;
                }
            }
            if (pick->object) {
                SceneObject o = *pick->object;
                o.row = row;
                o.col = col;
                scene.objects.push_back(o);
            }
        }
    }
    return scene;
}

} // namespace rged
