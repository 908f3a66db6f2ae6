#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "aimsim/core_types.hpp"

namespace aimsim {

/// K joint samples of N agents over T predicted steps, with the ground truth.
struct TrajectorySamples {
    std::vector<std::vector<std::vector<AgentState>>> samples;  // [K][N][T]
    std::vector<std::vector<AgentState>> ground_truth;          // [N][T]
    std::vector<AgentAttributes> attrs;                         // [N]

    int num_samples() const { return static_cast<int>(samples.size()); }
    int num_agents() const { return static_cast<int>(ground_truth.size()); }
    int horizon() const { return ground_truth.empty() ? 0 : static_cast<int>(ground_truth.front().size()); }
    /// Throws ContractError on inconsistent dimensions or T < 1.
    void validate() const;
};

/// Triangle soup covering the drivable surface, world frame.
struct DrivableMesh {
    std::vector<std::array<Vec2, 3>> triangles;

    void validate() const;
    /// Point-in-union test; points on a triangle edge count as inside.
    bool contains(Vec2 p) const;
};

enum class MinMode {
    per_agent,  // min over samples for each agent, then mean over agents
    joint,      // mean over agents for each sample, then min over samples
};

double min_ade(const TrajectorySamples& s, MinMode mode = MinMode::per_agent);
double min_fde(const TrajectorySamples& s, MinMode mode = MinMode::per_agent);
/// Mean over agents of the largest distance between two samples' final positions.
double mfd(const TrajectorySamples& s);
/// Fraction of (sample, agent, step) cells with a box corner off the mesh.
double offroad_rate(const TrajectorySamples& s, const DrivableMesh& mesh);

double oriented_iou(const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b);
double oriented_iou(const AgentState& a, const AgentAttributes& aa, const AgentState& b, const AgentAttributes& ba);
/// Fraction of (sample, agent, step) cells whose box overlaps another agent
/// of the same sample with IoU above `threshold`.
double collision_rate(const TrajectorySamples& s, double threshold = 0.0);

/// Fraction of (sample, agent) pairs that cross `stop_line` while `is_red`
/// holds at the crossing step. `is_red[t]` is indexed like the sample steps.
double stop_line_violation_rate(const TrajectorySamples& s, Vec2 line_a, Vec2 line_b, const std::vector<bool>& is_red);

struct MetricsReport {
    std::map<std::string, double> values;
    int num_samples = 0;
    int num_agents = 0;
    int horizon = 0;

    /// "name value" lines, sorted by name, then the counts.
    std::string to_text() const;
    std::string to_json() const;
};

/// minADE, minFDE, MFD, collision rate, and off-road rate when `mesh` is given.
MetricsReport evaluate_samples(const TrajectorySamples& s, const DrivableMesh* mesh, MinMode mode = MinMode::per_agent,
                               double collision_threshold = 0.0);

}  // namespace aimsim
