#pragma once

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aimsim/autodiff.hpp"
#include "aimsim/core_types.hpp"
#include "aimsim/image.hpp"

namespace aimsim {

struct StopLine {
    std::string light_id;
    Vec2 a;
    Vec2 b;
};

/// Aerial image-based map: a background texture plus the world coordinates
/// of its corners. Corners are listed in image order top-left, top-right,
/// bottom-right, bottom-left, which is clockwise in the y-up world frame.
struct AimMap {
    std::shared_ptr<const Image> image;
    std::array<Vec2, 4> corners;
    std::vector<StopLine> stop_lines;
    std::vector<std::string> light_channels;

    /// Average ground size of one texel along the top edge.
    double meters_per_pixel() const;
    /// Throws InvalidMap on degenerate or mis-wound corners, stop lines
    /// outside the map, or stop lines naming undeclared channels.
    void validate() const;
    const StopLine* find_stop_line(const std::string& light_id) const;
    bool contains(Vec2 p) const;
};

struct Rgb {
    double r = 0.0;
    double g = 0.0;
    double b = 0.0;
    friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct ColorTable {
    Rgb vehicle{0.15, 0.35, 1.0};
    Rgb pedestrian{1.0, 0.55, 0.1};
    Rgb ego{1.0, 1.0, 1.0};
    Rgb red{1.0, 0.0, 0.0};
    Rgb yellow{1.0, 0.9, 0.0};
    Rgb green{0.0, 0.85, 0.0};

    /// One texel per color, in the order above.
    std::shared_ptr<const Image> swatch_texture() const;
};

/// Texel column of each color in ColorTable::swatch_texture().
enum class Swatch : int { vehicle = 0, pedestrian, ego, red, yellow, green };

enum class PartRole : std::uint8_t { background, light, agent, ego };

/// A convex primitive of the mesh. Its outline is vertices
/// [first_vertex, first_vertex + vertex_count) in counterclockwise order,
/// fan-triangulated into triangle_count triangles.
struct MeshPart {
    PartRole role = PartRole::background;
    int first_vertex = 0;
    int vertex_count = 0;
    int first_triangle = 0;
    int triangle_count = 0;
    bool textured = false;  // false: flat color taken at the uv of the first vertex
    int source = -1;        // agent index within the scene, or stop-line index
};

/// 2D triangle mesh in world coordinates with texture coordinates into a
/// single texture. uv are texel coordinates (column, row) with texel centers
/// on the integer lattice.
struct Mesh {
    std::vector<Vec2> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<Vec2> uv;
    std::shared_ptr<const Image> texture;
    std::vector<MeshPart> parts;

    void validate() const;
};

struct RenderParams {
    int resolution = 128;
    double extent = 80.0;    // meters covered by one image side
    double softness = 0.5;   // edge temperature in pixels; 0 selects hard rasterization
    bool draw_lights = true;
    double bar_width = 1.0;  // traffic-light bar thickness, meters
    double apex_fraction = 0.5;  // direction-triangle height as a fraction of agent width
    ColorTable colors;

    static RenderParams for_kind(AgentKind kind);
    double meters_per_pixel() const { return extent / resolution; }
    void validate() const;
};

/// Ego-centered, ego-rotated render. pixels is [R, R, 3]; row 0 is the top.
struct Birdview {
    ad::Tensor pixels;
    int ego_index = -1;
    int resolution = 0;
    double extent = 0.0;

    Image to_image() const;
};

Mesh build_background_mesh(const AimMap& aim);
/// Box (two triangles) plus a direction triangle per agent. The agent at
/// ego_index is flagged as ego and colored with the ego color.
Mesh build_agent_meshes(const Scene& scene, const ColorTable& colors, int ego_index = -1, double apex_fraction = 0.5);
Mesh build_traffic_light_meshes(const std::vector<TrafficLightState>& lights, const AimMap& aim, double bar_width,
                                const ColorTable& colors);
/// Concatenates meshes into one texture atlas. Draw order: background,
/// lights, non-ego agents, ego.
Mesh merge_meshes(const Mesh& background, const Mesh& agents, const Mesh& lights);

/// Outline of an agent: the four box corners followed by the direction apex.
std::array<Vec2, 5> agent_outline(const AgentState& state, const AgentAttributes& attrs, double apex_fraction);

Birdview render_ego_view(const Mesh& mesh, const AgentState& ego, const RenderParams& params, int ego_index = -1);

/// Differentiable core: rasterizes `mesh` with vertex positions given by
/// (xs, ys) in the ego frame (meters), returning [R, R, 3].
ad::Tensor rasterize(const Mesh& mesh, const ad::Tensor& xs, const ad::Tensor& ys, const RenderParams& params);

/// World to ego frame on tensors; ego_pose holds at least (x, y, phi).
std::pair<ad::Tensor, ad::Tensor> world_to_ego(const ad::Tensor& xs, const ad::Tensor& ys, const ad::Tensor& ego_pose);

/// Renders one scene centered on scenes[i].agents[ego_indices[i]] for each i.
std::vector<Birdview> render_batch(const std::vector<Scene>& scenes, const std::vector<int>& ego_indices,
                                   const AimMap& aim, const RenderParams& params);

/// Agent whose state may live on a tape.
struct DiffAgent {
    ad::Tensor state;  // [4] = (x, y, phi, v)
    AgentAttributes attrs;
};

/// Caches the background mesh and merged texture for one map so that
/// per-step rendering only rebuilds agent and light geometry.
class SceneRenderer {
public:
    SceneRenderer(AimMap aim, RenderParams params);

    const AimMap& aim() const { return aim_; }
    const RenderParams& params() const { return params_; }

    /// Differentiable w.r.t. every agent state tensor.
    ad::Tensor render(std::span<const DiffAgent> agents, int ego_index,
                      const std::vector<TrafficLightState>& lights) const;
    Birdview render(const Scene& scene, int ego_index) const;

    /// Merged mesh for a scene, using the cached texture atlas.
    Mesh scene_mesh(const Scene& scene, int ego_index) const;

private:
    AimMap aim_;
    RenderParams params_;
    Mesh background_;
    std::shared_ptr<const Image> swatches_;
    std::shared_ptr<const Image> atlas_;
    int swatch_row_ = 0;
};

}  // namespace aimsim
