#include "actbit/simenv.hpp"

#include "actbit/parallel.hpp"
#include "actbit/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace actbit {

namespace {

constexpr int kHidden = 20;
constexpr int kFitSamples = 2048;
constexpr double kRidgeLambda = 0.3;

Eigen::Vector2d clip_action(const Vector& action, double limit) {
    return {std::clamp(action[0], -limit, limit), std::clamp(action[1], -limit, limit)};
}

EnvState sample_initial(Rng& rng) {
    EnvState s;
    s.position = rng.in_disc(kWorkspaceRadius);
    s.goal = rng.in_disc(kWorkspaceRadius);
    s.velocity.setZero();
    s.step = 0;
    return s;
}

struct EpisodeStats {
    std::vector<double> deviation;
    double final_cumulative = 0.0;
    double final_distance = 0.0;
    bool success = false;
};

} // namespace

void validate(const EnvConfig& cfg) {
    if (!(cfg.dt > 0.0)) {
        throw std::invalid_argument("env: dt must be positive");
    }
    if (cfg.horizon < 1) {
        throw std::invalid_argument("env: horizon must be >= 1");
    }
    if (!(cfg.success_radius > 0.0)) {
        throw std::invalid_argument("env: success_radius must be positive");
    }
}

EnvState initial_state(const EnvConfig& cfg, std::uint64_t episode_seed) {
    validate(cfg);
    Rng rng(episode_seed);
    return sample_initial(rng);
}

Vector observe(const EnvState& state) {
    Vector obs(kObservationDim);
    obs << state.position[0], state.position[1], state.velocity[0], state.velocity[1],
        state.goal[0], state.goal[1];
    return obs;
}

EnvState step(const EnvState& state, const Vector& action, const EnvConfig& cfg) {
    if (action.size() != kActionDim) {
        throw std::invalid_argument("env step: action must have length 2");
    }
    EnvState next = state;
    next.velocity = clip_action(action, cfg.action_clip);
    next.position = state.position + cfg.dt * next.velocity;
    next.step = state.step + 1;
    return next;
}

PolicyModel reference_policy(const EnvConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    Rng rng(derive_seed(seed, "fixture"));

    // Random tanh features; input scaling keeps the units near the linear
    // regime so the fitted head can match the linear controller.
    Layer l0;
    l0.tag = ModuleTag::vision;
    l0.activation = Activation::tanh;
    l0.weight.resize(kHidden, kObservationDim);
    l0.bias.resize(kHidden);
    for (Index r = 0; r < l0.weight.rows(); ++r) {
        for (Index c = 0; c < l0.weight.cols(); ++c) {
            l0.weight(r, c) = rng.uniform(-0.3, 0.3);
        }
        l0.bias[r] = rng.uniform(-0.1, 0.1);
    }

    Layer l1;
    l1.tag = ModuleTag::backbone;
    l1.activation = Activation::tanh;
    l1.weight.resize(kHidden, kHidden);
    l1.bias.resize(kHidden);
    for (Index r = 0; r < l1.weight.rows(); ++r) {
        for (Index c = 0; c < l1.weight.cols(); ++c) {
            l1.weight(r, c) = rng.uniform(-0.3, 0.3);
        }
        l1.bias[r] = rng.uniform(-0.1, 0.1);
    }

    // Feature matrix with a trailing 1 column for the head bias.
    Matrix features(kFitSamples, kHidden + 1);
    Matrix targets(kFitSamples, kActionDim);
    for (int i = 0; i < kFitSamples; ++i) {
        Rng sample_rng(derive_seed(derive_seed(seed, "fixture-states"),
                                   static_cast<std::uint64_t>(i)));
        EnvState s = sample_initial(sample_rng);
        s.velocity = {sample_rng.uniform(-cfg.action_clip, cfg.action_clip),
                      sample_rng.uniform(-cfg.action_clip, cfg.action_clip)};
        const Vector obs = observe(s);
        Vector h = (l0.weight * obs + l0.bias).array().tanh().matrix();
        h = (l1.weight * h + l1.bias).array().tanh().matrix();
        features.row(i).head(kHidden) = h.transpose();
        features(i, kHidden) = 1.0;
        const Eigen::Vector2d a = kControllerGain * (s.goal - s.position);
        targets(i, 0) = a[0];
        targets(i, 1) = a[1];
    }
    // Ridge fit of the head (bias column unpenalized): redundant random
    // features share coefficients instead of collapsing onto a few rows,
    // keeping every output channel live.
    Matrix normal = features.transpose() * features;
    for (int i = 0; i < kHidden; ++i) {
        normal(i, i) += kRidgeLambda;
    }
    const Matrix solution = normal.ldlt().solve(features.transpose() * targets);

    Layer l2;
    l2.tag = ModuleTag::action_head;
    l2.activation = Activation::identity;
    l2.weight = solution.topRows(kHidden).transpose();
    l2.bias = solution.row(kHidden).transpose();

    const double residual_rms =
        std::sqrt((features * solution - targets).squaredNorm() / kFitSamples);
    const double bound = 0.05 * kControllerGain * kWorkspaceRadius;
    if (!(residual_rms <= bound)) {
        char msg[128];
        std::snprintf(msg, sizeof(msg), "reference_policy: fit residual RMS %.6g exceeds %.6g",
                      residual_rms, bound);
        throw std::runtime_error(msg);
    }

    return make_policy_model({std::move(l0), std::move(l1), std::move(l2)});
}

CalibrationSet make_calibration(const EnvConfig& cfg, const PolicyModel& policy, int n_traj,
                                std::uint64_t seed) {
    validate(cfg);
    if (n_traj < 1) {
        throw std::invalid_argument("make_calibration: n_traj must be >= 1");
    }
    const std::uint64_t stream = derive_seed(seed, "calib");
    CalibrationSet calib;
    calib.source_trajectories = n_traj;
    calib.seed = seed;
    calib.observations.reserve(static_cast<std::size_t>(n_traj) * cfg.horizon);
    for (int e = 0; e < n_traj; ++e) {
        EnvState state = initial_state(cfg, derive_seed(stream, static_cast<std::uint64_t>(e)));
        for (int t = 0; t < cfg.horizon; ++t) {
            Vector obs = observe(state);
            const Vector action = forward(policy, obs).action();
            calib.observations.push_back(std::move(obs));
            state = step(state, action, cfg);
        }
    }
    return calib;
}

RolloutReport rollout_pair(const EnvConfig& cfg, const PolicyModel& fp_policy,
                           const QuantizedModel& q_policy, int episodes, std::uint64_t seed,
                           bool divergence) {
    validate(cfg);
    if (episodes < 1) {
        throw std::invalid_argument("rollout_pair: episodes must be >= 1");
    }
    const std::uint64_t stream = derive_seed(seed, "rollout");
    std::vector<EpisodeStats> stats(static_cast<std::size_t>(episodes));
    parallel_for(static_cast<std::size_t>(episodes), [&](std::size_t e) {
        EpisodeStats& ep = stats[e];
        ep.deviation.resize(static_cast<std::size_t>(cfg.horizon));
        EnvState state_q = initial_state(cfg, derive_seed(stream, e));
        EnvState state_fp = state_q;
        double cumulative = 0.0;
        for (int t = 0; t < cfg.horizon; ++t) {
            const Vector a_q = quantized_action(q_policy, observe(state_q));
            const Vector a_fp =
                forward(fp_policy, observe(divergence ? state_fp : state_q)).action();
            ep.deviation[static_cast<std::size_t>(t)] = (a_q - a_fp).norm();
            cumulative += ep.deviation[static_cast<std::size_t>(t)];
            state_q = step(state_q, a_q, cfg);
            if (divergence) {
                state_fp = step(state_fp, a_fp, cfg);
            }
        }
        ep.final_cumulative = cumulative;
        ep.final_distance = (state_q.position - state_q.goal).norm();
        ep.success = ep.final_distance <= cfg.success_radius;
    });

    RolloutReport report;
    report.episodes = episodes;
    report.step_deviation.assign(static_cast<std::size_t>(cfg.horizon), 0.0);
    for (const EpisodeStats& ep : stats) {
        for (int t = 0; t < cfg.horizon; ++t) {
            report.step_deviation[static_cast<std::size_t>(t)] +=
                ep.deviation[static_cast<std::size_t>(t)];
        }
        report.success_rate += ep.success ? 1.0 : 0.0;
        report.final_distance_mean += ep.final_distance;
        report.episode_final_cumulative.push_back(ep.final_cumulative);
    }
    report.success_rate /= episodes;
    report.final_distance_mean /= episodes;
    report.cumulative_curve.resize(static_cast<std::size_t>(cfg.horizon));
    double running = 0.0;
    for (int t = 0; t < cfg.horizon; ++t) {
        report.step_deviation[static_cast<std::size_t>(t)] /= episodes;
        running += report.step_deviation[static_cast<std::size_t>(t)];
        report.cumulative_curve[static_cast<std::size_t>(t)] = running;
    }
    report.final_deviation_mean = report.cumulative_curve.back();
    return report;
}

double teacher_forced_mse(const PolicyModel& fp_policy, const QuantizedModel& q_policy,
                          const CalibrationSet& calib) {
    require_nonempty(calib, "teacher_forced_mse");
    std::vector<double> sq(calib.observations.size());
    parallel_for(calib.observations.size(), [&](std::size_t i) {
        const Vector& obs = calib.observations[i];
        sq[i] = (quantized_action(q_policy, obs) - forward(fp_policy, obs).action())
                    .squaredNorm();
    });
    double total = 0.0;
    for (double v : sq) {
        total += v;
    }
    return total / static_cast<double>(sq.size());
}

void save_report_json(const RolloutReport& report, const std::string& path) {
    nlohmann::json j;
    j["episodes"] = report.episodes;
    j["success_rate"] = report.success_rate;
    j["teacher_forced_mse"] = report.teacher_forced_mse;
    j["cumulative_curve"] = report.cumulative_curve;
    j["final_deviation_mean"] = report.final_deviation_mean;
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write report: " + path);
    }
    out << j.dump(2) << "\n";
}

void save_curve_csv(const RolloutReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write curve: " + path);
    }
    out << "t,deviation,cumulative\n";
    char line[96];
    for (std::size_t t = 0; t < report.cumulative_curve.size(); ++t) {
        std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g\n", t + 1, report.step_deviation[t],
                      report.cumulative_curve[t]);
        out << line;
    }
}

void save_env_config(const EnvConfig& cfg, const std::string& path) {
    nlohmann::json j;
    j["dt"] = cfg.dt;
    j["horizon"] = cfg.horizon;
    j["action_clip"] = cfg.action_clip;
    j["success_radius"] = cfg.success_radius;
    j["init_seed"] = cfg.init_seed;
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write env config: " + path);
    }
    out << j.dump(2) << "\n";
}

EnvConfig load_env_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open env config: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("env config " + path + ": " + e.what());
    }
    EnvConfig cfg;
    cfg.dt = j.at("dt").get<double>();
    cfg.horizon = j.at("horizon").get<int>();
    cfg.action_clip = j.at("action_clip").get<double>();
    cfg.success_radius = j.at("success_radius").get<double>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    validate(cfg);
    return cfg;
}

} // namespace actbit
