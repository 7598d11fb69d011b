// actbit: channel-wise mixed-precision quantization for small policy
// networks. Pipeline: fixture -> sensitivity -> allocate -> rollout, plus
// a verify command that re-runs the oracle checks.

#include "actbit/allocator.hpp"
#include "actbit/model.hpp"
#include "actbit/quant.hpp"
#include "actbit/rng.hpp"
#include "actbit/sensitivity.hpp"
#include "actbit/simenv.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace actbit;

namespace {

struct RunConfig {
    std::string model_path;
    std::string out_dir = "out";
    double budget = 8.0;
    int act_bits = 16;
    int calib_traj = 512;
    int horizon = 32;
    int episodes = 64;
    double refine = 0.25;
    double prune_cap = 0.10;
    double tau_abs = -1.0; // < 0: derive from the table
    double tau_rel = 1.0;
    std::uint64_t seed = 42;
    bool oracle = false;
    bool divergence = false;
    bool horizon_set = false;
};

EnvConfig resolve_env(const RunConfig& cfg) {
    EnvConfig env;
    const fs::path env_path = fs::path(cfg.out_dir) / "env.json";
    if (fs::exists(env_path)) {
        env = load_env_config(env_path.string());
    } else {
        env.init_seed = derive_seed(cfg.seed, "env-init");
    }
    if (cfg.horizon_set) {
        env.horizon = cfg.horizon;
    }
    return env;
}

PolicyModel resolve_model(const RunConfig& cfg) {
    std::string path = cfg.model_path;
    if (path.empty()) {
        path = (fs::path(cfg.out_dir) / "model.json").string();
    }
    return load_model(path);
}

std::vector<std::string> designated_tag_names(const PolicyModel& model,
                                              const std::vector<ChannelId>& designated) {
    std::set<std::string> names;
    for (const ChannelId& ch : designated) {
        names.insert(std::string(to_string(model.layers[static_cast<std::size_t>(ch.layer)].tag)));
    }
    return {names.begin(), names.end()};
}

BitAllocation allocation_from_bit_map(const PolicyModel& model, const BitMapFile& map) {
    BitAllocation alloc;
    for (const auto& e : map.assignments) {
        const ChannelId ch{e.layer, e.channel};
        validate_channel(model, ch);
        alloc.designated.push_back(ch);
        alloc.assignment[ch] = bitwidth_from_int(e.bits);
    }
    std::sort(alloc.designated.begin(), alloc.designated.end());
    if (alloc.designated.empty()) {
        throw std::runtime_error("bit map has no assignments");
    }
    alloc.budget = average_bits(alloc);
    return alloc;
}

int cmd_fixture(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    EnvConfig env;
    env.init_seed = derive_seed(cfg.seed, "env-init");
    if (cfg.horizon_set) {
        env.horizon = cfg.horizon;
    }
    const PolicyModel model = reference_policy(env, cfg.seed);
    save_model(model, (fs::path(cfg.out_dir) / "model.json").string());
    save_env_config(env, (fs::path(cfg.out_dir) / "env.json").string());
    std::cout << "fixture: model.json + env.json written to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_sensitivity(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    const PolicyModel model = resolve_model(cfg);
    const EnvConfig env = resolve_env(cfg);
    const CalibrationSet calib = make_calibration(env, model, cfg.calib_traj, cfg.seed);
    const std::vector<ChannelId> designated = default_designated_channels(model);
    if (designated.empty()) {
        throw std::runtime_error("model has no designated layers to quantize");
    }
    const SensitivityTable table = two_stage_scores(model, calib, designated, cfg.refine);
    table.save_csv((fs::path(cfg.out_dir) / "sensitivity.csv").string());
    std::cout << "sensitivity: " << designated.size() * kScoredBits.size() << " scores over "
              << designated.size() << " channels written to " << cfg.out_dir
              << "/sensitivity.csv\n";
    return 0;
}

int cmd_allocate(const RunConfig& cfg) {
    if (cfg.act_bits != 4 && cfg.act_bits != 8 && cfg.act_bits != 16) {
        throw std::runtime_error("--act-bits must be 4, 8 or 16");
    }
    if (!(cfg.budget > 0.0) || cfg.budget > 16.0) {
        throw std::runtime_error("--budget must be in (0, 16]");
    }
    const PolicyModel model = resolve_model(cfg);
    const SensitivityTable table =
        SensitivityTable::load_csv((fs::path(cfg.out_dir) / "sensitivity.csv").string());
    const std::vector<ChannelId> designated = table.channel_ids();
    std::optional<double> tau_abs;
    if (cfg.tau_abs >= 0.0) {
        tau_abs = cfg.tau_abs;
    }
    const PruneGuard guard =
        PruneGuard::from_table(table, designated, tau_abs, cfg.tau_rel, cfg.prune_cap);
    const GreedyResult result = greedy_allocate(table, designated, cfg.budget, guard);
    const BitAllocation& alloc = result.allocation;

    const BitMapFile map = make_bit_map(model, alloc, bitwidth_from_int(cfg.act_bits),
                                        designated_tag_names(model, designated));
    save_bit_map(map, (fs::path(cfg.out_dir) / "bitmap.json").string());

    std::map<int, int> histogram;
    for (BitWidth b : kAllBits) {
        histogram[to_int(b)] = 0;
    }
    for (const ChannelId& ch : alloc.designated) {
        ++histogram[to_int(alloc.assignment.at(ch))];
    }
    nlohmann::json summary;
    summary["avg_bits"] = average_bits(alloc);
    nlohmann::json jh;
    for (const auto& [bits, count] : histogram) {
        jh[std::to_string(bits)] = count;
    }
    summary["histogram"] = std::move(jh);
    summary["pruned_fraction"] =
        static_cast<double>(histogram[0]) / static_cast<double>(alloc.designated.size());
    summary["objective"] = allocation_objective(table, alloc);
    if (cfg.oracle) {
        const BitAllocation oracle = brute_force_allocate(table, designated, cfg.budget);
        const double oracle_obj = allocation_objective(table, oracle);
        summary["oracle_objective"] = oracle_obj;
        summary["gap"] = summary["objective"].get<double>() - oracle_obj;
    }
    {
        std::ofstream out(fs::path(cfg.out_dir) / "summary.json");
        if (!out) {
            throw std::runtime_error("cannot write summary.json");
        }
        out << summary.dump(2) << "\n";
    }
    std::cout << "allocate: avg_bits " << average_bits(alloc) << " (budget " << cfg.budget
              << "), histogram";
    for (const auto& [bits, count] : histogram) {
        std::cout << " " << bits << ":" << count;
    }
    std::cout << "\n";
    return 0;
}

int cmd_rollout(const RunConfig& cfg) {
    const PolicyModel model = resolve_model(cfg);
    const EnvConfig env = resolve_env(cfg);
    const BitMapFile map = load_bit_map((fs::path(cfg.out_dir) / "bitmap.json").string());
    const BitAllocation alloc = allocation_from_bit_map(model, map);
    const CalibrationSet calib = make_calibration(env, model, cfg.calib_traj, cfg.seed);
    const QuantizedModel qm =
        apply_allocation(model, alloc, bitwidth_from_int(map.activation_bits), calib);
    RolloutReport report = rollout_pair(env, model, qm, cfg.episodes, cfg.seed, cfg.divergence);
    report.teacher_forced_mse = teacher_forced_mse(model, qm, calib);
    save_report_json(report, (fs::path(cfg.out_dir) / "report.json").string());
    save_curve_csv(report, (fs::path(cfg.out_dir) / "curve.csv").string());
    std::printf("rollout: success_rate %.4f, final cumulative deviation %.6g, "
                "teacher-forced MSE %.6g\n",
                report.success_rate, report.final_deviation_mean, report.teacher_forced_mse);
    return 0;
}

// --- verify: self-contained oracle checks plus validation of any artifacts
// already present in the output directory.

bool check(const char* name, bool ok, const std::string& detail = "") {
    if (ok) {
        std::cout << "[PASS] " << name << "\n";
    } else {
        std::cout << "[FAIL] " << name << (detail.empty() ? "" : ": " + detail) << "\n";
    }
    return ok;
}

PolicyModel random_net(Rng& rng, int depth, int width, int in_dim, int out_dim) {
    std::vector<Layer> layers;
    int prev = in_dim;
    for (int l = 0; l < depth; ++l) {
        const bool last = l == depth - 1;
        Layer layer;
        layer.tag = last ? ModuleTag::action_head : ModuleTag::backbone;
        layer.activation = last ? Activation::identity
                                : (rng.uniform() < 0.5 ? Activation::tanh : Activation::relu);
        const int rows = last ? out_dim : width;
        layer.weight.resize(rows, prev);
        layer.bias.resize(rows);
        for (Index r = 0; r < layer.weight.rows(); ++r) {
            for (Index c = 0; c < layer.weight.cols(); ++c) {
                layer.weight(r, c) = rng.uniform(-0.8, 0.8);
            }
            layer.bias[r] = rng.uniform(-0.3, 0.3);
        }
        layers.push_back(std::move(layer));
        prev = rows;
    }
    return make_policy_model(std::move(layers));
}

bool verify_jacobian_fd(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "verify-jacobian"));
    for (int trial = 0; trial < 10; ++trial) {
        const int depth = 2 + static_cast<int>(rng.uniform() * 3.0);
        const PolicyModel net = random_net(rng, depth, 6, 4, 3);
        Vector obs(4);
        bool clear = false;
        while (!clear) {
            for (int i = 0; i < 4; ++i) {
                obs[i] = rng.uniform(-1.0, 1.0);
            }
            clear = true;
            const ForwardTrace trace = forward(net, obs);
            for (const Vector& pre : trace.pre) {
                if (pre.cwiseAbs().minCoeff() < 1e-3) {
                    clear = false;
                }
            }
        }
        for (const ChannelId& ch : channels(net)) {
            const Matrix analytic = action_jacobian_wrt_channel(net, obs, ch);
            const Matrix fd = fd_jacobian_wrt_channel(net, obs, ch, 1e-5);
            const double denom = std::max(analytic.norm(), 1e-12);
            if ((analytic - fd).norm() / denom > 1e-5 && (analytic - fd).norm() > 1e-8) {
                return false;
            }
        }
    }
    return true;
}

bool verify_quant_roundtrip(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "verify-quant"));
    for (BitWidth bit : kGridBits) {
        for (int trial = 0; trial < 100; ++trial) {
            Vector row(32);
            for (Index i = 0; i < row.size(); ++i) {
                row[i] = rng.normal();
            }
            const ChannelQuantParams params = channel_scale(row, bit);
            const QuantizedRow qr = quantize_channel(row, params);
            for (Index i = 0; i < row.size(); ++i) {
                if (std::abs(row[i] - qr.deq[i]) > params.scale / 2.0 + 1e-12) {
                    return false;
                }
            }
        }
    }
    return true;
}

bool verify_greedy_vs_bruteforce(std::uint64_t seed, std::string& detail) {
    Rng rng(derive_seed(seed, "verify-greedy"));
    for (int trial = 0; trial < 50; ++trial) {
        SensitivityTable table;
        std::vector<ChannelId> designated;
        for (int c = 0; c < 6; ++c) {
            const ChannelId ch{0, c};
            designated.push_back(ch);
            double s = 0.0;
            for (BitWidth bit : {BitWidth::b8, BitWidth::b4, BitWidth::b2, BitWidth::b0}) {
                s += rng.uniform(0.0, 1.0);
                table.set(ch, bit, s, ScoreMethod::exact_single_step);
            }
        }
        const GreedyResult greedy =
            greedy_allocate(table, designated, 8.0, PruneGuard::permissive());
        const BitAllocation oracle = brute_force_allocate(table, designated, 8.0);
        const double g = allocation_objective(table, greedy.allocation);
        const double o = allocation_objective(table, oracle);
        if (o > g + 1e-12) {
            detail = "oracle objective exceeds greedy";
            return false;
        }
        if (average_bits(greedy.allocation) > 8.0 + 1e-9) {
            detail = "greedy violated the budget";
            return false;
        }
    }
    return true;
}

bool verify_rank_consistency(const PolicyModel& model, const EnvConfig& env,
                             std::uint64_t seed, std::string& detail) {
    const CalibrationSet calib = make_calibration(env, model, 32, seed);
    const std::vector<ChannelId> designated = default_designated_channels(model);
    std::vector<double> proxy, exact;
    for (const ChannelId& ch : designated) {
        proxy.push_back(proxy_sensitivity(model, calib, ch, BitWidth::b4));
        exact.push_back(exact_single_step(model, calib, ch, BitWidth::b4));
    }
    const double s = spearman(proxy, exact);
    if (s < 0.8) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "spearman %.3f < 0.8", s);
        detail = buf;
        return false;
    }
    return true;
}

int cmd_verify(const RunConfig& cfg) {
    bool all_ok = true;
    std::string detail;

    try {
        all_ok &= check("jacobian_fd", verify_jacobian_fd(cfg.seed));
    } catch (const std::exception& e) {
        all_ok &= check("jacobian_fd", false, e.what());
    }
    try {
        all_ok &= check("quant_roundtrip", verify_quant_roundtrip(cfg.seed));
    } catch (const std::exception& e) {
        all_ok &= check("quant_roundtrip", false, e.what());
    }
    try {
        detail.clear();
        all_ok &= check("greedy_vs_bruteforce", verify_greedy_vs_bruteforce(cfg.seed, detail),
                        detail);
    } catch (const std::exception& e) {
        all_ok &= check("greedy_vs_bruteforce", false, e.what());
    }
    try {
        EnvConfig env = resolve_env(cfg);
        PolicyModel model = cfg.model_path.empty() &&
                                    !fs::exists(fs::path(cfg.out_dir) / "model.json")
                                ? reference_policy(env, cfg.seed)
                                : resolve_model(cfg);
        detail.clear();
        all_ok &= check("rank_consistency",
                        verify_rank_consistency(model, env, cfg.seed, detail), detail);
    } catch (const std::exception& e) {
        all_ok &= check("rank_consistency", false, e.what());
    }

    const fs::path csv_path = fs::path(cfg.out_dir) / "sensitivity.csv";
    if (fs::exists(csv_path)) {
        try {
            SensitivityTable::load_csv(csv_path.string());
            all_ok &= check("sensitivity_csv", true);
        } catch (const std::exception& e) {
            all_ok &= check("sensitivity_csv", false, e.what());
        }
    }
    const fs::path map_path = fs::path(cfg.out_dir) / "bitmap.json";
    if (fs::exists(map_path)) {
        try {
            const PolicyModel model = resolve_model(cfg);
            const BitAllocation alloc =
                allocation_from_bit_map(model, load_bit_map(map_path.string()));
            const double avg = average_bits(alloc);
            char buf[96];
            std::snprintf(buf, sizeof(buf), "average bits %.4f exceeds budget %.4f", avg,
                          cfg.budget);
            all_ok &= check("bitmap_budget", avg <= cfg.budget + 1e-9, buf);
        } catch (const std::exception& e) {
            all_ok &= check("bitmap_budget", false, e.what());
        }
    }

    return all_ok ? 0 : 1;
}

int run(int argc, char** argv) {
    CLI::App app{"actbit: channel-wise mixed-precision quantization toolkit"};
    app.require_subcommand(1);

    RunConfig cfg;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--model", cfg.model_path, "model JSON path (default <out>/model.json)");
        sub->add_option("--out", cfg.out_dir, "output directory")->capture_default_str();
        sub->add_option("--seed", cfg.seed, "base seed; all streams derive from it")
            ->capture_default_str();
        sub->add_option("--horizon", cfg.horizon, "episode horizon in steps")
            ->capture_default_str();
    };

    CLI::App* fixture = app.add_subcommand("fixture", "write the reference model + env config");
    add_common(fixture);

    CLI::App* sensitivity = app.add_subcommand("sensitivity", "score channel sensitivities");
    add_common(sensitivity);
    sensitivity->add_option("--calib-traj", cfg.calib_traj, "calibration trajectories")
        ->capture_default_str();
    sensitivity->add_option("--refine", cfg.refine, "fraction of channels scored exactly")
        ->capture_default_str();

    CLI::App* allocate = app.add_subcommand("allocate", "greedy bit allocation under a budget");
    add_common(allocate);
    allocate->add_option("--budget", cfg.budget, "average-bit budget in (0, 16]")
        ->capture_default_str();
    allocate->add_option("--act-bits", cfg.act_bits, "uniform activation bits {4,8,16}")
        ->capture_default_str();
    allocate->add_option("--prune-cap", cfg.prune_cap, "max pruned fraction")
        ->capture_default_str();
    allocate->add_option("--tau-abs", cfg.tau_abs,
                         "absolute prune threshold (negative: derive from table)");
    allocate->add_option("--tau-rel", cfg.tau_rel, "relative prune threshold")
        ->capture_default_str();
    allocate->add_flag("--oracle", cfg.oracle, "also run the brute-force oracle (<= 8 channels)");

    CLI::App* rollout = app.add_subcommand("rollout", "closed-loop evaluation of a bit map");
    add_common(rollout);
    rollout->add_option("--calib-traj", cfg.calib_traj, "calibration trajectories")
        ->capture_default_str();
    rollout->add_option("--episodes", cfg.episodes, "evaluation episodes")->capture_default_str();
    rollout->add_flag("--divergence", cfg.divergence,
                      "compare independently evolving trajectories instead of lock-step");

    CLI::App* verify = app.add_subcommand("verify", "run oracle checks and validate artifacts");
    add_common(verify);
    verify->add_option("--budget", cfg.budget, "budget for the bit-map check")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    for (CLI::App* sub : {fixture, sensitivity, allocate, rollout, verify}) {
        if (sub->parsed() && sub->count("--horizon") > 0) {
            cfg.horizon_set = true;
        }
    }

    try {
        if (fixture->parsed()) return cmd_fixture(cfg);
        if (sensitivity->parsed()) return cmd_sensitivity(cfg);
        if (allocate->parsed()) return cmd_allocate(cfg);
        if (rollout->parsed()) return cmd_rollout(cfg);
        if (verify->parsed()) return cmd_verify(cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
