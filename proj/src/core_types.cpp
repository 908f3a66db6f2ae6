#include "aimsim/core_types.hpp"

#include "aimsim/errors.hpp"

namespace aimsim {

double normalize_angle(double phi) {
    if (!std::isfinite(phi)) {
        throw InvalidInput("normalize_angle: non-finite angle");
    }
    double r = std::remainder(phi, kTwoPi);  // [-pi, pi]
    if (r <= -kPi) {
        r += kTwoPi;
    }
    return r;
}

std::string_view to_string(AgentKind kind) {
    return kind == AgentKind::vehicle ? "vehicle" : "pedestrian";
}

AgentKind agent_kind_from_string(std::string_view name) {
    if (name == "vehicle") return AgentKind::vehicle;
    if (name == "pedestrian") return AgentKind::pedestrian;
    throw InvalidInput("unknown agent kind '" + std::string(name) + "'");
}

AgentAttributes default_attributes(AgentKind kind) {
    if (kind == AgentKind::pedestrian) {
        return {0.6, 0.6, AgentKind::pedestrian};
    }
    return {4.5, 1.8, AgentKind::vehicle};
}

std::string_view to_string(LightColor color) {
    switch (color) {
        case LightColor::red: return "red";
        case LightColor::yellow: return "yellow";
        case LightColor::green: return "green";
        case LightColor::off: return "off";
    }
    return "off";
}

LightColor light_color_from_string(std::string_view name) {
    if (name == "red") return LightColor::red;
    if (name == "yellow") return LightColor::yellow;
    if (name == "green") return LightColor::green;
    if (name == "off") return LightColor::off;
    throw InvalidInput("unknown light color '" + std::string(name) + "'");
}

std::array<Vec2, 4> oriented_box_corners(const AgentState& state, const AgentAttributes& attrs) {
    if (!state.finite()) {
        throw InvalidInput("oriented_box_corners: non-finite state");
    }
    if (!attrs.valid()) {
        throw InvalidInput("oriented_box_corners: extents must be positive");
    }
    const double c = std::cos(state.phi);
    const double s = std::sin(state.phi);
    const double hl = 0.5 * attrs.length;
    const double hw = 0.5 * attrs.width;
    auto place = [&](double along, double across) {
        return Vec2{state.x + c * along - s * across, state.y + s * along + c * across};
    };
    return {place(hl, hw), place(-hl, hw), place(-hl, -hw), place(hl, -hw)};
}

Vec2 world_to_ego(Vec2 point, const AgentState& ego) {
    const double dx = point.x - ego.x;
    const double dy = point.y - ego.y;
    const double c = std::cos(ego.phi);
    const double s = std::sin(ego.phi);
    // rotation by (pi/2 - phi)
    return {s * dx - c * dy, c * dx + s * dy};
}

Vec2 ego_to_world(Vec2 point, const AgentState& ego) {
    const double c = std::cos(ego.phi);
    const double s = std::sin(ego.phi);
    return {ego.x + s * point.x + c * point.y, ego.y - c * point.x + s * point.y};
}

double polygon_area(const std::vector<Vec2>& polygon) {
    double twice = 0.0;
    for (std::size_t i = 0; i < polygon.size(); ++i) {
        twice += cross(polygon[i], polygon[(i + 1) % polygon.size()]);
    }
    return 0.5 * twice;
}

}  // namespace aimsim
