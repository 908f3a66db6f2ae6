#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

namespace aimsim {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
    friend Vec2 operator*(Vec2 a, double s) { return {s * a.x, s * a.y}; }
    friend bool operator==(Vec2 a, Vec2 b) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

/// Wraps an angle into (-pi, pi].
double normalize_angle(double phi);

/// Pose and speed of one agent at one timestep. Heading is measured
/// counterclockwise from the world +x axis and kept in (-pi, pi].
struct AgentState {
    double x = 0.0;
    double y = 0.0;
    double phi = 0.0;
    double v = 0.0;

    AgentState() = default;
    AgentState(double x_, double y_, double phi_, double v_)
        : x(x_), y(y_), phi(std::isfinite(phi_) ? normalize_angle(phi_) : phi_), v(v_) {}

    bool finite() const {
        return std::isfinite(x) && std::isfinite(y) && std::isfinite(phi) && std::isfinite(v);
    }
    Vec2 position() const { return {x, y}; }

    friend bool operator==(const AgentState&, const AgentState&) = default;
};

enum class AgentKind : std::uint8_t { vehicle, pedestrian };

std::string_view to_string(AgentKind kind);
AgentKind agent_kind_from_string(std::string_view name);

struct AgentAttributes {
    double length = 4.5;
    double width = 1.8;
    AgentKind kind = AgentKind::vehicle;

    bool valid() const { return length > 0.0 && width > 0.0 && std::isfinite(length) && std::isfinite(width); }
    friend bool operator==(const AgentAttributes&, const AgentAttributes&) = default;
};

/// Default extents per agent kind, used when a source does not provide them.
AgentAttributes default_attributes(AgentKind kind);

/// a1 is acceleration (m/s^2); a2 is steering angle (bicycle) or yaw rate (unicycle).
struct Action {
    double a1 = 0.0;
    double a2 = 0.0;
    friend bool operator==(const Action&, const Action&) = default;
};

enum class LightColor : std::uint8_t { red, yellow, green, off };

std::string_view to_string(LightColor color);
LightColor light_color_from_string(std::string_view name);

struct TrafficLightState {
    std::string light_id;
    LightColor color = LightColor::off;
    friend bool operator==(const TrafficLightState&, const TrafficLightState&) = default;
};

struct SceneAgent {
    int id = 0;
    AgentState state;
    AgentAttributes attrs;
};

/// Snapshot of every agent present at one timestep.
struct Scene {
    int timestep = 0;
    std::vector<SceneAgent> agents;
    std::vector<TrafficLightState> lights;
};

/// Four corners of the agent's footprint, counterclockwise, starting front-left.
std::array<Vec2, 4> oriented_box_corners(const AgentState& state, const AgentAttributes& attrs);

/// Ego frame: origin at the ego position, ego heading along +y.
Vec2 world_to_ego(Vec2 point, const AgentState& ego);
Vec2 ego_to_world(Vec2 point, const AgentState& ego);

double polygon_area(const std::vector<Vec2>& polygon);

}  // namespace aimsim
