#include "aimsim/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "aimsim/errors.hpp"
#include "aimsim/kinematics.hpp"

namespace aimsim {

namespace {

// ---------------------------------------------------------------------------
// Forward-mode dual numbers for the per-pixel local derivatives w.r.t. the
// (at most five) outline vertices of one part.

constexpr int kMaxPartVertices = 5;
constexpr int kSlots = 2 * kMaxPartVertices;

struct Dual {
    double v = 0.0;
    std::array<double, kSlots> d{};

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT: implicit by design of the scalar templates

    friend Dual operator+(const Dual& a, const Dual& b) {
        Dual r(a.v + b.v);
        for (int i = 0; i < kSlots; ++i) r.d[i] = a.d[i] + b.d[i];
        return r;
    }
    friend Dual operator-(const Dual& a, const Dual& b) {
        Dual r(a.v - b.v);
        for (int i = 0; i < kSlots; ++i) r.d[i] = a.d[i] - b.d[i];
        return r;
    }
    friend Dual operator*(const Dual& a, const Dual& b) {
        Dual r(a.v * b.v);
        for (int i = 0; i < kSlots; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
        return r;
    }
    friend Dual operator/(const Dual& a, const Dual& b) {
        Dual r(a.v / b.v);
        const double inv = 1.0 / b.v;
        for (int i = 0; i < kSlots; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) * inv;
        return r;
    }
};

inline double value(double x) { return x; }
inline double value(const Dual& x) { return x.v; }

inline double sqrt_(double x) { return std::sqrt(x); }
inline Dual sqrt_(const Dual& x) {
    Dual r(std::sqrt(x.v));
    const double k = 0.5 / r.v;
    for (int i = 0; i < kSlots; ++i) r.d[i] = k * x.d[i];
    return r;
}

inline double sigmoid_(double t) {
    return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}
inline Dual sigmoid_(const Dual& t) {
    Dual r(sigmoid_(t.v));
    const double k = r.v * (1.0 - r.v);
    for (int i = 0; i < kSlots; ++i) r.d[i] = k * t.d[i];
    return r;
}

// ---------------------------------------------------------------------------
// Texture sampling

template <class T>
void sample_bilinear(const Image& tex, const T& u_in, const T& v_in, T out[3]) {
    const int W = tex.width;
    const int H = tex.height;
    T u = u_in;
    T v = v_in;
    if (value(u) <= 0.0) u = T(0.0);
    if (value(u) >= W - 1) u = T(static_cast<double>(W - 1));
    if (value(v) <= 0.0) v = T(0.0);
    if (value(v) >= H - 1) v = T(static_cast<double>(H - 1));
    const int x0 = std::clamp(static_cast<int>(std::floor(value(u))), 0, std::max(W - 2, 0));
    const int y0 = std::clamp(static_cast<int>(std::floor(value(v))), 0, std::max(H - 2, 0));
    const int x1 = std::min(x0 + 1, W - 1);
    const int y1 = std::min(y0 + 1, H - 1);
    const T fx = u - T(static_cast<double>(x0));
    const T fy = v - T(static_cast<double>(y0));
    const T one(1.0);
    for (int c = 0; c < 3; ++c) {
        const double v00 = tex.at(y0, x0, c);
        const double v01 = tex.at(y0, x1, c);
        const double v10 = tex.at(y1, x0, c);
        const double v11 = tex.at(y1, x1, c);
        out[c] = (one - fy) * ((one - fx) * T(v00) + fx * T(v01)) + fy * ((one - fx) * T(v10) + fx * T(v11));
    }
}

Rgb sample_flat(const Image& tex, Vec2 uv) {
    double c[3];
    sample_bilinear<double>(tex, uv.x, uv.y, c);
    return {c[0], c[1], c[2]};
}

// ---------------------------------------------------------------------------
// Per-part shading

struct PartInfo {
    MeshPart part;
    Rgb flat;
    // bbox in the ego frame, grown by the soft margin
    double xmin, xmax, ymin, ymax;
};

template <class T>
struct PartSample {
    T alpha;
    T color[3];
};

// Soft coverage: product over edges of sigmoid(inside distance / softness).
template <class T>
T soft_coverage(const T* X, const T* Y, int n, double qx, double qy, double inv_s) {
    T alpha(1.0);
    for (int i = 0; i < n; ++i) {
        const int j = (i + 1) % n;
        const T ex = X[j] - X[i];
        const T ey = Y[j] - Y[i];
        const T len = sqrt_(ex * ex + ey * ey);
        const T dist = (ex * (T(qy) - Y[i]) - ey * (T(qx) - X[i])) / len;
        alpha = alpha * sigmoid_(dist * T(inv_s));
    }
    return alpha;
}

bool hard_inside(const double* X, const double* Y, int n, double qx, double qy) {
    for (int i = 0; i < n; ++i) {
        const int j = (i + 1) % n;
        const double c = (X[j] - X[i]) * (qy - Y[i]) - (Y[j] - Y[i]) * (qx - X[i]);
        if (c < 0.0) return false;
    }
    return true;
}

// Interpolated texture color at q using the triangle of the part that best
// contains q (largest minimum barycentric coordinate).
template <class T>
void textured_color(const Mesh& mesh, const MeshPart& part, const T* X, const T* Y, double qx, double qy, T out[3]) {
    int best = part.first_triangle;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int t = part.first_triangle; t < part.first_triangle + part.triangle_count; ++t) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        const int l0 = tri[0] - part.first_vertex, l1 = tri[1] - part.first_vertex, l2 = tri[2] - part.first_vertex;
        const double x0 = value(X[l0]), y0 = value(Y[l0]);
        const double d = (value(X[l1]) - x0) * (value(Y[l2]) - y0) - (value(Y[l1]) - y0) * (value(X[l2]) - x0);
        const double b1 = ((qx - x0) * (value(Y[l2]) - y0) - (qy - y0) * (value(X[l2]) - x0)) / d;
        const double b2 = ((value(X[l1]) - x0) * (qy - y0) - (value(Y[l1]) - y0) * (qx - x0)) / d;
        const double score = std::min({1.0 - b1 - b2, b1, b2});
        if (score > best_score) {
            best_score = score;
            best = t;
        }
    }
    const auto& tri = mesh.triangles[static_cast<std::size_t>(best)];
    const int l0 = tri[0] - part.first_vertex, l1 = tri[1] - part.first_vertex, l2 = tri[2] - part.first_vertex;
    const T ax = X[l1] - X[l0], ay = Y[l1] - Y[l0];
    const T bx = X[l2] - X[l0], by = Y[l2] - Y[l0];
    const T px = T(qx) - X[l0], py = T(qy) - Y[l0];
    const T d = ax * by - ay * bx;
    const T b1 = (px * by - py * bx) / d;
    const T b2 = (ax * py - ay * px) / d;
    const T b0 = T(1.0) - b1 - b2;
    const Vec2 u0 = mesh.uv[static_cast<std::size_t>(tri[0])];
    const Vec2 u1 = mesh.uv[static_cast<std::size_t>(tri[1])];
    const Vec2 u2 = mesh.uv[static_cast<std::size_t>(tri[2])];
    const T u = b0 * T(u0.x) + b1 * T(u1.x) + b2 * T(u2.x);
    const T v = b0 * T(u0.y) + b1 * T(u1.y) + b2 * T(u2.y);
    sample_bilinear<T>(*mesh.texture, u, v, out);
}

template <class T>
PartSample<T> shade_part(const Mesh& mesh, const PartInfo& info, const T* X, const T* Y, double qx, double qy,
                         double inv_s) {
    PartSample<T> s;
    s.alpha = soft_coverage<T>(X, Y, info.part.vertex_count, qx, qy, inv_s);
    if (info.part.textured) {
        textured_color<T>(mesh, info.part, X, Y, qx, qy, s.color);
    } else {
        s.color[0] = T(info.flat.r);
        s.color[1] = T(info.flat.g);
        s.color[2] = T(info.flat.b);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Atlas construction

struct Atlas {
    std::shared_ptr<const Image> image;
    std::vector<int> row_offsets;
};

bool same_texture(const std::shared_ptr<const Image>& a, const std::shared_ptr<const Image>& b) {
    return a == b || (a && b && *a == *b);
}

// Stacks textures vertically. Each texture is followed by a copy of its
// last row and preceded by a copy of its first row so that clamped bilinear
// lookups never bleed between neighbours; narrow textures are padded by
// repeating their last column.
Atlas build_atlas(const std::vector<std::shared_ptr<const Image>>& textures) {
    Atlas atlas;
    if (textures.size() == 1) {
        atlas.image = textures[0];
        atlas.row_offsets = {0};
        return atlas;
    }
    int width = 0;
    int height = 0;
    for (std::size_t i = 0; i < textures.size(); ++i) {
        width = std::max(width, textures[i]->width);
        height += textures[i]->height + (i > 0 ? 1 : 0) + (i + 1 < textures.size() ? 1 : 0);
    }
    auto img = std::make_shared<Image>(width, height);
    int row = 0;
    auto copy_row = [&](const Image& src, int src_row) {
        for (int x = 0; x < width; ++x) {
            const int sx = std::min(x, src.width - 1);
            for (int c = 0; c < 3; ++c) img->at(row, x, c) = src.at(src_row, sx, c);
        }
        ++row;
    };
    for (std::size_t i = 0; i < textures.size(); ++i) {
        const Image& t = *textures[i];
        if (i > 0) copy_row(t, 0);
        atlas.row_offsets.push_back(row);
        for (int r = 0; r < t.height; ++r) copy_row(t, r);
        if (i + 1 < textures.size()) copy_row(t, t.height - 1);
    }
    atlas.image = std::move(img);
    return atlas;
}

// Appends `src` parts matching `pred` to `dst`, shifting uv rows by `row_offset`.
template <class Pred>
void append_parts(Mesh& dst, const Mesh& src, double row_offset, Pred pred) {
    for (const auto& p : src.parts) {
        if (!pred(p)) continue;
        MeshPart q = p;
        q.first_vertex = static_cast<int>(dst.vertices.size());
        q.first_triangle = static_cast<int>(dst.triangles.size());
        for (int v = 0; v < p.vertex_count; ++v) {
            const auto idx = static_cast<std::size_t>(p.first_vertex + v);
            dst.vertices.push_back(src.vertices[idx]);
            dst.uv.push_back({src.uv[idx].x, src.uv[idx].y + row_offset});
        }
        for (int t = 0; t < p.triangle_count; ++t) {
            auto tri = src.triangles[static_cast<std::size_t>(p.first_triangle + t)];
            for (int& k : tri) k = k - p.first_vertex + q.first_vertex;
            dst.triangles.push_back(tri);
        }
        dst.parts.push_back(q);
    }
}

Mesh assemble(const Mesh& background, const Mesh& agents, const Mesh& lights, const Atlas& atlas,
              const std::vector<const Mesh*>& owners) {
    auto offset_of = [&](const Mesh& m) -> double {
        for (std::size_t i = 0; i < owners.size(); ++i)
            if (same_texture(owners[i]->texture, m.texture)) return atlas.row_offsets[i];
        return 0.0;
    };
    Mesh out;
    out.texture = atlas.image;
    auto all = [](const MeshPart&) { return true; };
    append_parts(out, background, offset_of(background), all);
    append_parts(out, lights, offset_of(lights), all);
    append_parts(out, agents, offset_of(agents), [](const MeshPart& p) { return p.role != PartRole::ego; });
    append_parts(out, agents, offset_of(agents), [](const MeshPart& p) { return p.role == PartRole::ego; });
    return out;
}

Vec2 swatch_uv(Swatch s) { return {static_cast<double>(static_cast<int>(s)), 0.0}; }

void add_fan_part(Mesh& mesh, PartRole role, std::span<const Vec2> outline, Vec2 uv, int source) {
    MeshPart p;
    p.role = role;
    p.first_vertex = static_cast<int>(mesh.vertices.size());
    p.vertex_count = static_cast<int>(outline.size());
    p.first_triangle = static_cast<int>(mesh.triangles.size());
    p.triangle_count = p.vertex_count - 2;
    p.source = source;
    for (Vec2 v : outline) {
        mesh.vertices.push_back(v);
        mesh.uv.push_back(uv);
    }
    for (int k = 1; k + 1 < p.vertex_count; ++k) {
        mesh.triangles.push_back({p.first_vertex, p.first_vertex + k, p.first_vertex + k + 1});
    }
    mesh.parts.push_back(p);
}

}  // namespace

// ---------------------------------------------------------------------------
// AimMap

double AimMap::meters_per_pixel() const {
    if (!image || image->width == 0) return 0.0;
    return norm(corners[1] - corners[0]) / image->width;
}

bool AimMap::contains(Vec2 p) const {
    for (int i = 0; i < 4; ++i) {
        const Vec2 a = corners[static_cast<std::size_t>(i)];
        const Vec2 b = corners[static_cast<std::size_t>((i + 1) % 4)];
        if (cross(b - a, p - a) > 1e-9) return false;  // clockwise: interior on the right
    }
    return true;
}

void AimMap::validate() const {
    if (!image || image->empty()) throw InvalidMap("AIM has no image");
    for (const Vec2& c : corners) {
        if (!std::isfinite(c.x) || !std::isfinite(c.y)) throw InvalidMap("AIM corner is not finite");
    }
    for (int i = 0; i < 4; ++i) {
        const Vec2 a = corners[static_cast<std::size_t>(i)];
        const Vec2 b = corners[static_cast<std::size_t>((i + 1) % 4)];
        const Vec2 c = corners[static_cast<std::size_t>((i + 2) % 4)];
        // Clockwise, strictly convex: every turn is to the right.
        if (!(cross(b - a, c - b) < 0.0)) {
            throw InvalidMap("AIM corners must be a convex quadrilateral in order top-left, top-right, "
                             "bottom-right, bottom-left");
        }
    }
    for (const auto& s : stop_lines) {
        if (!contains(s.a) || !contains(s.b)) {
            throw InvalidMap("stop line '" + s.light_id + "' lies outside the map");
        }
        if (norm(s.b - s.a) <= 0.0) throw InvalidMap("stop line '" + s.light_id + "' has zero length");
        if (!light_channels.empty() &&
            std::find(light_channels.begin(), light_channels.end(), s.light_id) == light_channels.end()) {
            throw InvalidMap("stop line '" + s.light_id + "' names an undeclared light channel");
        }
    }
}

const StopLine* AimMap::find_stop_line(const std::string& light_id) const {
    for (const auto& s : stop_lines)
        if (s.light_id == light_id) return &s;
    return nullptr;
}

std::shared_ptr<const Image> ColorTable::swatch_texture() const {
    auto img = std::make_shared<Image>(6, 1);
    const Rgb colors[6] = {vehicle, pedestrian, ego, red, yellow, green};
    for (int i = 0; i < 6; ++i) {
        img->at(0, i, 0) = colors[i].r;
        img->at(0, i, 1) = colors[i].g;
        img->at(0, i, 2) = colors[i].b;
    }
    return img;
}

// ---------------------------------------------------------------------------
// Mesh

void Mesh::validate() const {
    if (uv.size() != vertices.size()) throw ContractError("mesh: uv count differs from vertex count");
    for (const auto& t : triangles) {
        for (int k : t)
            if (k < 0 || k >= static_cast<int>(vertices.size())) throw ContractError("mesh: index out of range");
        const double area = cross(vertices[static_cast<std::size_t>(t[1])] - vertices[static_cast<std::size_t>(t[0])],
                                  vertices[static_cast<std::size_t>(t[2])] - vertices[static_cast<std::size_t>(t[0])]);
        if (!(std::abs(area) > 0.0)) throw ContractError("mesh: degenerate triangle");
    }
    for (const auto& p : parts) {
        if (p.vertex_count < 3 || p.vertex_count > kMaxPartVertices)
            throw ContractError("mesh: part must have 3 to 5 outline vertices");
        if (p.first_vertex + p.vertex_count > static_cast<int>(vertices.size()) ||
            p.first_triangle + p.triangle_count > static_cast<int>(triangles.size()))
            throw ContractError("mesh: part range out of bounds");
        for (int t = p.first_triangle; t < p.first_triangle + p.triangle_count; ++t)
            for (int k : triangles[static_cast<std::size_t>(t)])
                if (k < p.first_vertex || k >= p.first_vertex + p.vertex_count)
                    throw ContractError("mesh: triangle references a vertex outside its part");
    }
    if (!parts.empty() && !texture) throw ContractError("mesh: parts without a texture");
}

Mesh build_background_mesh(const AimMap& aim) {
    aim.validate();
    const double W = aim.image->width;
    const double H = aim.image->height;
    const auto& c = aim.corners;
    // Counterclockwise outline: top-left, bottom-left, bottom-right, top-right.
    Mesh mesh;
    mesh.texture = aim.image;
    const Vec2 outline[4] = {c[0], c[3], c[2], c[1]};
    add_fan_part(mesh, PartRole::background, outline, {}, -1);
    mesh.parts.back().textured = true;
    mesh.uv = {{-0.5, -0.5}, {-0.5, H - 0.5}, {W - 0.5, H - 0.5}, {W - 0.5, -0.5}};
    return mesh;
}

std::array<Vec2, 5> agent_outline(const AgentState& state, const AgentAttributes& attrs, double apex_fraction) {
    const auto box = oriented_box_corners(state, attrs);
    const double reach = 0.5 * attrs.length + apex_fraction * attrs.width;
    const Vec2 apex{state.x + std::cos(state.phi) * reach, state.y + std::sin(state.phi) * reach};
    return {box[0], box[1], box[2], box[3], apex};
}

Mesh build_agent_meshes(const Scene& scene, const ColorTable& colors, int ego_index, double apex_fraction) {
    Mesh mesh;
    if (scene.agents.empty()) return mesh;
    mesh.texture = colors.swatch_texture();
    for (std::size_t i = 0; i < scene.agents.size(); ++i) {
        const auto& a = scene.agents[i];
        const bool is_ego = static_cast<int>(i) == ego_index;
        const Swatch sw = is_ego ? Swatch::ego
                                 : (a.attrs.kind == AgentKind::vehicle ? Swatch::vehicle : Swatch::pedestrian);
        const auto outline = agent_outline(a.state, a.attrs, apex_fraction);
        add_fan_part(mesh, is_ego ? PartRole::ego : PartRole::agent, outline, swatch_uv(sw), static_cast<int>(i));
    }
    return mesh;
}

Mesh build_traffic_light_meshes(const std::vector<TrafficLightState>& lights, const AimMap& aim, double bar_width,
                                const ColorTable& colors) {
    Mesh mesh;
    for (const auto& light : lights) {
        const StopLine* line = aim.find_stop_line(light.light_id);
        if (line == nullptr) throw InvalidScenario("traffic light '" + light.light_id + "' has no stop line");
        if (light.color == LightColor::off) continue;
        const Vec2 dir = (1.0 / norm(line->b - line->a)) * (line->b - line->a);
        const Vec2 n = (0.5 * bar_width) * Vec2{-dir.y, dir.x};
        const Vec2 outline[4] = {line->a - n, line->b - n, line->b + n, line->a + n};
        const Swatch sw = light.color == LightColor::red      ? Swatch::red
                          : light.color == LightColor::yellow ? Swatch::yellow
                                                              : Swatch::green;
        const int source = static_cast<int>(line - aim.stop_lines.data());
        add_fan_part(mesh, PartRole::light, outline, swatch_uv(sw), source);
    }
    if (!mesh.parts.empty()) mesh.texture = colors.swatch_texture();
    return mesh;
}

Mesh merge_meshes(const Mesh& background, const Mesh& agents, const Mesh& lights) {
    std::vector<std::shared_ptr<const Image>> textures;
    std::vector<const Mesh*> owners;
    for (const Mesh* m : {&background, &lights, &agents}) {
        if (!m->texture || m->parts.empty()) continue;
        bool seen = false;
        for (const auto& t : textures) seen = seen || same_texture(t, m->texture);
        if (!seen) {
            textures.push_back(m->texture);
            owners.push_back(m);
        }
    }
    if (textures.empty()) return Mesh{};
    return assemble(background, agents, lights, build_atlas(textures), owners);
}

// ---------------------------------------------------------------------------
// Rendering

RenderParams RenderParams::for_kind(AgentKind kind) {
    RenderParams p;
    p.extent = kind == AgentKind::vehicle ? 80.0 : 40.0;
    return p;
}

void RenderParams::validate() const {
    if (resolution <= 0) throw ContractError("render: resolution must be positive");
    if (!(extent > 0.0)) throw ContractError("render: extent must be positive");
    if (!(softness >= 0.0)) throw ContractError("render: softness must be nonnegative");
    if (!(bar_width > 0.0)) throw ContractError("render: bar width must be positive");
}

Image Birdview::to_image() const {
    Image img(resolution, resolution);
    auto d = pixels.data();
    std::copy(d.begin(), d.end(), img.data.begin());
    return img;
}

ad::Tensor rasterize(const Mesh& mesh, const ad::Tensor& xs, const ad::Tensor& ys, const RenderParams& params) {
    params.validate();
    const int V = static_cast<int>(mesh.vertices.size());
    if (xs.numel() != V || ys.numel() != V) throw ContractError("rasterize: vertex tensors do not match the mesh");
    const int R = params.resolution;
    const double mpp = params.meters_per_pixel();
    const bool hard = params.softness == 0.0;
    const double inv_s = hard ? 0.0 : 1.0 / (params.softness * mpp);
    // sigmoid(-30) ~ 1e-13: beyond this margin coverage is treated as zero.
    const double margin = hard ? 0.0 : 30.0 * params.softness * mpp;

    auto xv = xs.data();
    auto yv = ys.data();
    std::vector<PartInfo> infos;
    infos.reserve(mesh.parts.size());
    for (const auto& p : mesh.parts) {
        PartInfo info{p, {}, 0, 0, 0, 0};
        if (!p.textured) info.flat = sample_flat(*mesh.texture, mesh.uv[static_cast<std::size_t>(p.first_vertex)]);
        info.xmin = info.ymin = std::numeric_limits<double>::infinity();
        info.xmax = info.ymax = -std::numeric_limits<double>::infinity();
        for (int v = p.first_vertex; v < p.first_vertex + p.vertex_count; ++v) {
            info.xmin = std::min(info.xmin, xv[v]);
            info.xmax = std::max(info.xmax, xv[v]);
            info.ymin = std::min(info.ymin, yv[v]);
            info.ymax = std::max(info.ymax, yv[v]);
        }
        info.xmin -= margin;
        info.xmax += margin;
        info.ymin -= margin;
        info.ymax += margin;
        infos.push_back(info);
    }

    auto pixel_center = [R, mpp](int row, int col) {
        return Vec2{(col + 0.5 - 0.5 * R) * mpp, (0.5 * R - row - 0.5) * mpp};
    };

    std::vector<double> out(static_cast<std::size_t>(R) * R * 3, 0.0);
    for (int row = 0; row < R; ++row) {
        for (int col = 0; col < R; ++col) {
            const Vec2 q = pixel_center(row, col);
            double C[3] = {0.0, 0.0, 0.0};
            for (const auto& info : infos) {
                if (q.x < info.xmin || q.x > info.xmax || q.y < info.ymin || q.y > info.ymax) continue;
                const double* X = &xv[static_cast<std::size_t>(info.part.first_vertex)];
                const double* Y = &yv[static_cast<std::size_t>(info.part.first_vertex)];
                if (hard) {
                    if (!hard_inside(X, Y, info.part.vertex_count, q.x, q.y)) continue;
                    double color[3] = {info.flat.r, info.flat.g, info.flat.b};
                    if (info.part.textured) textured_color<double>(mesh, info.part, X, Y, q.x, q.y, color);
                    for (int c = 0; c < 3; ++c) C[c] = color[c];
                    continue;
                }
                const auto s = shade_part<double>(mesh, info, X, Y, q.x, q.y, inv_s);
                for (int c = 0; c < 3; ++c) C[c] += s.alpha * (s.color[c] - C[c]);
            }
            double* px = &out[(static_cast<std::size_t>(row) * R + col) * 3];
            for (int c = 0; c < 3; ++c) px[c] = C[c];
        }
    }

    return ad::Tape::record(
        {R, R, 3}, std::move(out), {&xs, &ys},
        [mesh, xs, ys, infos = std::move(infos), R, inv_s, hard, pixel_center](std::span<const double> g,
                                                                               ad::GradSink& sink) {
            if (hard) return;  // hard rasterization carries no geometric gradient
            auto gx = sink(xs);
            auto gy = sink(ys);
            if (gx.empty() && gy.empty()) return;
            auto xv = xs.data();
            auto yv = ys.data();
            struct Entry {
                const PartInfo* info;
                PartSample<Dual> s;
                double before[3];
            };
            std::vector<Entry> stack;
            Dual X[kMaxPartVertices];
            Dual Y[kMaxPartVertices];
            for (int row = 0; row < R; ++row) {
                for (int col = 0; col < R; ++col) {
                    const double* go = &g[(static_cast<std::size_t>(row) * R + col) * 3];
                    if (go[0] == 0.0 && go[1] == 0.0 && go[2] == 0.0) continue;
                    const Vec2 q = pixel_center(row, col);
                    stack.clear();
                    double C[3] = {0.0, 0.0, 0.0};
                    for (const auto& info : infos) {
                        if (q.x < info.xmin || q.x > info.xmax || q.y < info.ymin || q.y > info.ymax) continue;
                        const int n = info.part.vertex_count;
                        for (int l = 0; l < n; ++l) {
                            const auto v = static_cast<std::size_t>(info.part.first_vertex + l);
                            X[l] = Dual(xv[v]);
                            X[l].d[2 * l] = 1.0;
                            Y[l] = Dual(yv[v]);
                            Y[l].d[2 * l + 1] = 1.0;
                        }
                        Entry e{&info, shade_part<Dual>(mesh, info, X, Y, q.x, q.y, inv_s), {C[0], C[1], C[2]}};
                        for (int c = 0; c < 3; ++c) C[c] += e.s.alpha.v * (e.s.color[c].v - C[c]);
                        stack.push_back(e);
                    }
                    double gC[3] = {go[0], go[1], go[2]};
                    for (auto it = stack.rbegin(); it != stack.rend(); ++it) {
                        const auto& s = it->s;
                        double d_alpha = 0.0;
                        for (int c = 0; c < 3; ++c) d_alpha += gC[c] * (s.color[c].v - it->before[c]);
                        const int first = it->info->part.first_vertex;
                        const int n = it->info->part.vertex_count;
                        for (int slot = 0; slot < 2 * n; ++slot) {
                            double acc = d_alpha * s.alpha.d[slot];
                            for (int c = 0; c < 3; ++c) acc += gC[c] * s.alpha.v * s.color[c].d[slot];
                            if (acc == 0.0) continue;
                            const auto v = static_cast<std::size_t>(first + slot / 2);
                            if (slot % 2 == 0) {
                                if (!gx.empty()) gx[v] += acc;
                            } else if (!gy.empty()) {
                                gy[v] += acc;
                            }
                        }
                        for (int c = 0; c < 3; ++c) gC[c] *= (1.0 - s.alpha.v);
                    }
                }
            }
        });
}

std::pair<ad::Tensor, ad::Tensor> world_to_ego(const ad::Tensor& xs, const ad::Tensor& ys, const ad::Tensor& ego_pose) {
    if (ego_pose.numel() < 3) throw ContractError("world_to_ego: ego pose needs (x, y, phi)");
    const ad::Tensor ex = ad::slice(ego_pose, 0, 1);
    const ad::Tensor ey = ad::slice(ego_pose, 1, 1);
    const ad::Tensor phi = ad::slice(ego_pose, 2, 1);
    const ad::Tensor c = ad::cos(phi);
    const ad::Tensor s = ad::sin(phi);
    const ad::Tensor dx = ad::sub(xs, ex);
    const ad::Tensor dy = ad::sub(ys, ey);
    return {ad::sub(ad::mul(dx, s), ad::mul(dy, c)), ad::add(ad::mul(dx, c), ad::mul(dy, s))};
}

Birdview render_ego_view(const Mesh& mesh, const AgentState& ego, const RenderParams& params, int ego_index) {
    std::vector<double> xs, ys;
    xs.reserve(mesh.vertices.size());
    ys.reserve(mesh.vertices.size());
    for (Vec2 v : mesh.vertices) {
        xs.push_back(v.x);
        ys.push_back(v.y);
    }
    auto [xe, ye] = world_to_ego(ad::Tensor::vector(std::move(xs)), ad::Tensor::vector(std::move(ys)),
                                 ad::Tensor::vector({ego.x, ego.y, ego.phi}));
    Birdview bv;
    bv.pixels = rasterize(mesh, xe, ye, params);
    bv.ego_index = ego_index;
    bv.resolution = params.resolution;
    bv.extent = params.extent;
    return bv;
}

std::vector<Birdview> render_batch(const std::vector<Scene>& scenes, const std::vector<int>& ego_indices,
                                   const AimMap& aim, const RenderParams& params) {
    if (scenes.size() != ego_indices.size()) throw ContractError("render_batch: scenes and ego indices differ in length");
    const Mesh background = build_background_mesh(aim);
    std::vector<Birdview> out;
    out.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const Scene& scene = scenes[i];
        const int ego = ego_indices[i];
        if (ego < 0 || ego >= static_cast<int>(scene.agents.size())) throw ContractError("render_batch: bad ego index");
        const Mesh agents = build_agent_meshes(scene, params.colors, ego, params.apex_fraction);
        const Mesh lights = params.draw_lights
                                ? build_traffic_light_meshes(scene.lights, aim, params.bar_width, params.colors)
                                : Mesh{};
        out.push_back(render_ego_view(merge_meshes(background, agents, lights),
                                      scene.agents[static_cast<std::size_t>(ego)].state, params, ego));
    }
    return out;
}

// ---------------------------------------------------------------------------
// SceneRenderer

SceneRenderer::SceneRenderer(AimMap aim, RenderParams params) : aim_(std::move(aim)), params_(std::move(params)) {
    params_.validate();
    background_ = build_background_mesh(aim_);
    swatches_ = params_.colors.swatch_texture();
    Atlas atlas = build_atlas({background_.texture, swatches_});
    atlas_ = atlas.image;
    swatch_row_ = atlas.row_offsets[1];
}

Mesh SceneRenderer::scene_mesh(const Scene& scene, int ego_index) const {
    Mesh agents = build_agent_meshes(scene, params_.colors, ego_index, params_.apex_fraction);
    Mesh lights = params_.draw_lights ? build_traffic_light_meshes(scene.lights, aim_, params_.bar_width, params_.colors)
                                      : Mesh{};
    agents.texture = swatches_;
    if (!lights.parts.empty()) lights.texture = swatches_;
    Atlas atlas{atlas_, {0, swatch_row_}};
    Mesh bg = background_;
    return assemble(bg, agents, lights, atlas, {&bg, &agents});
}

Birdview SceneRenderer::render(const Scene& scene, int ego_index) const {
    if (ego_index < 0 || ego_index >= static_cast<int>(scene.agents.size()))
        throw ContractError("SceneRenderer: bad ego index");
    return render_ego_view(scene_mesh(scene, ego_index), scene.agents[static_cast<std::size_t>(ego_index)].state,
                           params_, ego_index);
}

ad::Tensor SceneRenderer::render(std::span<const DiffAgent> agents, int ego_index,
                                 const std::vector<TrafficLightState>& lights) const {
    if (ego_index < 0 || ego_index >= static_cast<int>(agents.size()))
        throw ContractError("SceneRenderer: bad ego index");
    Scene scene;
    scene.lights = lights;
    for (std::size_t i = 0; i < agents.size(); ++i) {
        if (agents[i].state.numel() != 4) throw ContractError("SceneRenderer: agent state must be [4]");
        scene.agents.push_back({static_cast<int>(i), to_state(agents[i].state), agents[i].attrs});
    }
    const Mesh mesh = scene_mesh(scene, ego_index);

    std::vector<ad::Tensor> xs_parts, ys_parts;
    std::vector<double> static_x, static_y;
    auto flush_static = [&] {
        if (static_x.empty()) return;
        xs_parts.push_back(ad::Tensor::vector(std::move(static_x)));
        ys_parts.push_back(ad::Tensor::vector(std::move(static_y)));
        static_x.clear();
        static_y.clear();
    };
    for (const auto& part : mesh.parts) {
        if (part.role == PartRole::agent || part.role == PartRole::ego) {
            flush_static();
            const DiffAgent& a = agents[static_cast<std::size_t>(part.source)];
            const double hl = 0.5 * a.attrs.length;
            const double hw = 0.5 * a.attrs.width;
            const double reach = hl + params_.apex_fraction * a.attrs.width;
            const ad::Tensor along = ad::Tensor::vector({hl, -hl, -hl, hl, reach});
            const ad::Tensor across = ad::Tensor::vector({hw, hw, -hw, -hw, 0.0});
            const ad::Tensor phi = ad::slice(a.state, 2, 1);
            const ad::Tensor c = ad::cos(phi);
            const ad::Tensor s = ad::sin(phi);
            xs_parts.push_back(ad::add(ad::slice(a.state, 0, 1), ad::sub(ad::mul(c, along), ad::mul(s, across))));
            ys_parts.push_back(ad::add(ad::slice(a.state, 1, 1), ad::add(ad::mul(s, along), ad::mul(c, across))));
        } else {
            for (int v = part.first_vertex; v < part.first_vertex + part.vertex_count; ++v) {
                static_x.push_back(mesh.vertices[static_cast<std::size_t>(v)].x);
                static_y.push_back(mesh.vertices[static_cast<std::size_t>(v)].y);
            }
        }
    }
    flush_static();
    const ad::Tensor X = ad::concat(xs_parts);
    const ad::Tensor Y = ad::concat(ys_parts);
    auto [xe, ye] = world_to_ego(X, Y, agents[static_cast<std::size_t>(ego_index)].state);
    return rasterize(mesh, xe, ye, params_);
}

}  // namespace aimsim
