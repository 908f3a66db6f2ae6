#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aimsim/core_types.hpp"
#include "aimsim/metrics.hpp"
#include "aimsim/renderer.hpp"

namespace aimsim {

/// One agent's time series. states[t] is meaningful only where present[t].
struct Track {
    int id = 0;
    AgentAttributes attrs;
    std::vector<AgentState> states;
    std::vector<bool> present;

    bool present_throughout(int begin, int end) const;
};

struct Scenario {
    std::string location;
    std::string aim_ref;             // AIM manifest path, relative to the scenario file
    AgentKind kind = AgentKind::vehicle;  // the kind this recording is sampled for
    double rate_hz = 10.0;
    int start_step = 0;              // global step index of local step 0
    int num_steps = 0;
    std::vector<Track> tracks;
    std::vector<std::vector<TrafficLightState>> lights;  // [num_steps]

    double dt() const { return 1.0 / rate_hz; }
    /// Throws ContractError on inconsistent lengths, rate/kind mismatch,
    /// non-finite present states or duplicate ids.
    void validate() const;
    /// Agents present at step t, in track order.
    Scene scene_at(int t) const;
};

/// Sampling rate and default segment length per agent kind.
double default_rate_hz(AgentKind kind);
int default_segment_length(AgentKind kind);

void save_scenario(const Scenario& s, const std::filesystem::path& path);
Scenario load_scenario(const std::filesystem::path& path);

/// Manifest plus the image it points at (loaded).
AimMap load_aim_manifest(const std::filesystem::path& path);
/// Writes the manifest and the image next to it as `image_name`.
void save_aim_manifest(const AimMap& aim, const std::filesystem::path& path, const std::string& image_name);

DrivableMesh load_drivable_mesh(const std::filesystem::path& path);
void save_drivable_mesh(const DrivableMesh& mesh, const std::filesystem::path& path);

struct SegmentSpec {
    int length = 40;
    int stride = 40;
};

/// Windows [s, s + length) for s = 0, stride, ...; agents absent for the
/// whole window are dropped. Too-short scenarios give an empty list.
std::vector<Scenario> slice_segments(const Scenario& scenario, const SegmentSpec& spec);

struct SplitResult {
    std::vector<Scenario> train;
    std::vector<Scenario> val;
};

/// Segments each recording and assigns to validation every segment that
/// touches the last `val_fraction` of its location's recorded steps.
SplitResult temporal_split(const std::vector<Scenario>& recordings, const SegmentSpec& spec,
                           double val_fraction = 0.05);

enum class SyntheticKind { straight_road, signalized_intersection, crosswalk };
std::string to_string(SyntheticKind k);
SyntheticKind synthetic_kind_from_string(const std::string& s);

struct SyntheticParams {
    int num_steps = 400;       // recording length at the kind's rate
    double cruise_speed = 10.0;
    double speed_jitter = 1.5;  // per-vehicle cruise speed spread (uniform +/-)
    double spawn_rate = 0.25;   // expected new agents per second per entry lane
    double meters_per_pixel = 0.5;
    // signalized intersection
    double green_s = 8.0;
    double yellow_s = 2.0;
    double all_red_s = 2.0;
};

struct SyntheticWorld {
    Scenario scenario;
    AimMap aim;
    DrivableMesh drivable;
};

/// Procedural location with scripted traffic; deterministic per seed.
SyntheticWorld generate_synthetic(SyntheticKind kind, std::uint64_t seed, const SyntheticParams& params = {});

/// Writes <dir>/<stem>.scn, <stem>.aim, <stem>.png and <stem>.mesh.
void save_world(const SyntheticWorld& world, const std::filesystem::path& dir, const std::string& stem);

}  // namespace aimsim
