#pragma once

// Deterministic 2-D point-mass reach environment: the closed-loop testbed
// for quantized policies. Velocity follows the clipped action; position
// integrates by explicit Euler. Everything is a pure function of (seed,
// config).

#include "actbit/calibration.hpp"
#include "actbit/model.hpp"
#include "actbit/quant.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace actbit {

inline constexpr double kWorkspaceRadius = 1.0; // m
inline constexpr double kControllerGain = 2.0;  // a = k * (goal - position)

struct EnvConfig {
    double dt = 0.1;            // s
    int horizon = 32;           // steps
    double action_clip = 1.0;   // m/s
    double success_radius = 0.05; // m
    std::uint64_t init_seed = 0;
};

struct EnvState {
    Eigen::Vector2d position{0.0, 0.0};
    Eigen::Vector2d velocity{0.0, 0.0};
    Eigen::Vector2d goal{0.0, 0.0};
    int step = 0;
};

void validate(const EnvConfig& cfg);

// Position and goal uniform in the workspace disc, velocity zero.
EnvState initial_state(const EnvConfig& cfg, std::uint64_t episode_seed);

// Observation fed to the policy: [position, velocity, goal], length 6.
Vector observe(const EnvState& state);
inline constexpr int kObservationDim = 6;
inline constexpr int kActionDim = 2;

EnvState step(const EnvState& state, const Vector& action, const EnvConfig& cfg);

// Fixed 3-layer tanh network (vision -> backbone -> action_head). Hidden
// layers are seeded random features; the action head is the least-squares
// fit to the proportional controller on sampled workspace states. Throws
// if the fit residual exceeds 0.05 * gain * workspace radius.
PolicyModel reference_policy(const EnvConfig& cfg, std::uint64_t seed);

// Observations from n_traj full-precision closed-loop episodes.
CalibrationSet make_calibration(const EnvConfig& cfg, const PolicyModel& policy, int n_traj,
                                std::uint64_t seed);

struct RolloutReport {
    int episodes = 0;
    double success_rate = 0.0;          // quantized policy reaching the goal
    double teacher_forced_mse = 0.0;    // filled by the caller when available
    std::vector<double> step_deviation; // mean ||a_q - a_fp|| per step
    std::vector<double> cumulative_curve; // running sum of step_deviation
    double final_deviation_mean = 0.0;  // cumulative_curve.back()
    double final_distance_mean = 0.0;   // mean final distance to goal
    std::vector<double> episode_final_cumulative; // per-episode totals
};

// Rolls the quantized policy closed-loop; the full-precision action is
// recomputed at each visited state (lock-step on the perturbed
// trajectory). With divergence=true the full-precision policy instead
// evolves its own trajectory and actions are compared across the two.
RolloutReport rollout_pair(const EnvConfig& cfg, const PolicyModel& fp_policy,
                           const QuantizedModel& q_policy, int episodes, std::uint64_t seed,
                           bool divergence = false);

// Mean squared action deviation on shared observations (no feedback).
double teacher_forced_mse(const PolicyModel& fp_policy, const QuantizedModel& q_policy,
                          const CalibrationSet& calib);

// {"episodes", "success_rate", "teacher_forced_mse", "cumulative_curve",
// "final_deviation_mean"}
void save_report_json(const RolloutReport& report, const std::string& path);
// t,deviation,cumulative
void save_curve_csv(const RolloutReport& report, const std::string& path);

void save_env_config(const EnvConfig& cfg, const std::string& path);
EnvConfig load_env_config(const std::string& path);

} // namespace actbit
