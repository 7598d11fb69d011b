#include "actbit/sensitivity.hpp"

#include "actbit/parallel.hpp"
#include "actbit/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace actbit {

namespace {

std::vector<double> ranks_with_ties(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    return ranks;
}

} // namespace

std::string_view to_string(ScoreMethod m) {
    switch (m) {
        case ScoreMethod::exact_single_step: return "exact_single_step";
        case ScoreMethod::proxy: return "proxy";
        case ScoreMethod::cumulative: return "cumulative";
    }
    throw std::logic_error("unknown score method");
}

ScoreMethod score_method_from_string(std::string_view s) {
    if (s == "exact_single_step") return ScoreMethod::exact_single_step;
    if (s == "proxy") return ScoreMethod::proxy;
    if (s == "cumulative") return ScoreMethod::cumulative;
    throw std::invalid_argument("unknown score method: " + std::string(s));
}

std::size_t SensitivityTable::bit_slot(BitWidth bit) {
    switch (bit) {
        case BitWidth::b0: return 0;
        case BitWidth::b2: return 1;
        case BitWidth::b4: return 2;
        case BitWidth::b8: return 3;
        default: break;
    }
    throw std::invalid_argument("sensitivity table stores bits {0,2,4,8} only");
}

void SensitivityTable::set(ChannelId ch, BitWidth bit, double score, ScoreMethod method) {
    if (!(score >= 0.0)) {
        throw std::invalid_argument("sensitivity score must be >= 0");
    }
    rows_[ch][bit_slot(bit)] = Entry{score, method};
}

bool SensitivityTable::has(ChannelId ch, BitWidth bit) const {
    if (bit == BitWidth::b16) {
        return true;
    }
    const auto it = rows_.find(ch);
    return it != rows_.end() && it->second[bit_slot(bit)].has_value();
}

double SensitivityTable::score(ChannelId ch, BitWidth bit) const {
    if (bit == BitWidth::b16) {
        return 0.0; // passthrough
    }
    const auto it = rows_.find(ch);
    if (it == rows_.end() || !it->second[bit_slot(bit)]) {
        throw std::invalid_argument("sensitivity table: missing entry for channel (" +
                                    std::to_string(ch.layer) + "," + std::to_string(ch.channel) +
                                    ") at bit " + std::to_string(to_int(bit)));
    }
    return it->second[bit_slot(bit)]->score;
}

ScoreMethod SensitivityTable::method(ChannelId ch, BitWidth bit) const {
    const auto it = rows_.find(ch);
    if (it == rows_.end() || !it->second[bit_slot(bit)]) {
        throw std::invalid_argument("sensitivity table: missing entry");
    }
    return it->second[bit_slot(bit)]->method;
}

std::vector<ChannelId> SensitivityTable::channel_ids() const {
    std::vector<ChannelId> out;
    out.reserve(rows_.size());
    for (const auto& [ch, _] : rows_) {
        out.push_back(ch);
    }
    return out;
}

void SensitivityTable::save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write sensitivity table: " + path);
    }
    out << "layer,channel,bits,score,method\n";
    char line[128];
    for (const auto& [ch, slots] : rows_) {
        for (BitWidth bit : kScoredBits) {
            const auto& entry = slots[bit_slot(bit)];
            if (!entry) {
                continue;
            }
            std::snprintf(line, sizeof(line), "%d,%d,%d,%.17g,", ch.layer, ch.channel,
                          to_int(bit), entry->score);
            out << line << to_string(entry->method) << "\n";
        }
    }
}

SensitivityTable SensitivityTable::load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open sensitivity table: " + path);
    }
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& what) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
    };
    if (!std::getline(in, line)) {
        ++line_no;
        fail("empty file");
    }
    ++line_no;
    if (line != "layer,channel,bits,score,method") {
        fail("bad header");
    }
    SensitivityTable table;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        std::string field[5];
        for (int i = 0; i < 5; ++i) {
            if (!std::getline(ss, field[i], i == 4 ? '\n' : ',')) {
                fail("expected 5 fields");
            }
        }
        try {
            const ChannelId ch{std::stoi(field[0]), std::stoi(field[1])};
            const BitWidth bit = bitwidth_from_int(std::stoi(field[2]));
            const double score = std::stod(field[3]);
            table.set(ch, bit, score, score_method_from_string(field[4]));
        } catch (const std::exception& e) {
            fail(e.what());
        }
    }
    return table;
}

PolicyModel quantize_single_channel(const PolicyModel& model, ChannelId ch, BitWidth bit) {
    validate_channel(model, ch);
    PolicyModel out = model;
    Layer& layer = out.layers[static_cast<std::size_t>(ch.layer)];
    if (bit == BitWidth::b16) {
        return out;
    }
    if (bit == BitWidth::b0) {
        layer.weight.row(ch.channel).setZero();
        layer.bias[ch.channel] = 0.0;
        return out;
    }
    const ChannelQuantParams params = channel_scale(layer.weight.row(ch.channel).transpose(), bit);
    layer.weight.row(ch.channel) =
        quantize_channel(layer.weight.row(ch.channel).transpose(), params).deq.transpose();
    return out;
}

double exact_single_step(const PolicyModel& model, const CalibrationSet& calib, ChannelId ch,
                         BitWidth bit) {
    validate_channel(model, ch);
    require_nonempty(calib, "exact_single_step");
    if (bit == BitWidth::b16) {
        return 0.0;
    }
    const PolicyModel perturbed = quantize_single_channel(model, ch, bit);
    double total = 0.0;
    for (const Vector& obs : calib.observations) {
        total += (forward(perturbed, obs).action() - forward(model, obs).action()).squaredNorm();
    }
    return total / static_cast<double>(calib.observations.size());
}

double cumulative_sensitivity(const PolicyModel& model, const EnvConfig& env, ChannelId ch,
                              BitWidth bit, int horizon, int episodes) {
    validate(env);
    validate_channel(model, ch);
    if (horizon < 1) {
        throw std::invalid_argument("cumulative_sensitivity: horizon must be >= 1");
    }
    if (episodes < 1) {
        throw std::invalid_argument("cumulative_sensitivity: episodes must be >= 1");
    }
    if (bit == BitWidth::b16) {
        return 0.0;
    }
    const PolicyModel perturbed = quantize_single_channel(model, ch, bit);
    double total = 0.0;
    for (int e = 0; e < episodes; ++e) {
        EnvState state = initial_state(env, derive_seed(env.init_seed,
                                                        static_cast<std::uint64_t>(e)));
        for (int t = 0; t < horizon; ++t) {
            const Vector obs = observe(state);
            const Vector a_q = forward(perturbed, obs).action();
            const Vector a_fp = forward(model, obs).action();
            total += (a_q - a_fp).norm();
            state = step(state, a_q, env);
        }
    }
    return total / static_cast<double>(episodes);
}

double quant_noise_std(const ChannelQuantParams& params) {
    if (params.bit == BitWidth::b0 || params.bit == BitWidth::b16) {
        throw std::invalid_argument("quant_noise_std: undefined for bit " +
                                    std::to_string(to_int(params.bit)));
    }
    return params.scale / std::sqrt(12.0);
}

double proxy_sensitivity(const PolicyModel& model, const CalibrationSet& calib, ChannelId ch,
                         BitWidth bit) {
    validate_channel(model, ch);
    require_nonempty(calib, "proxy_sensitivity");
    if (bit == BitWidth::b0) {
        throw std::invalid_argument(
            "proxy_sensitivity: invalid for bit 0 (pruning error is not a small perturbation)");
    }
    if (bit == BitWidth::b16) {
        return 0.0;
    }
    const Layer& layer = model.layers[static_cast<std::size_t>(ch.layer)];
    const ChannelQuantParams params = channel_scale(layer.weight.row(ch.channel).transpose(), bit);
    const Vector row_error =
        quantize_channel(layer.weight.row(ch.channel).transpose(), params).deq -
        layer.weight.row(ch.channel).transpose();

    double sq_deviation = 0.0; // pre-activation deviation, second moment
    double sq_jacobian = 0.0;  // ||dA/dX_{l,c}||_F^2
    for (const Vector& obs : calib.observations) {
        const ForwardTrace trace = forward(model, obs);
        const Vector& layer_input =
            ch.layer == 0 ? obs : trace.post[static_cast<std::size_t>(ch.layer) - 1];
        const double delta = row_error.dot(layer_input);
        sq_deviation += delta * delta;

        Vector v = Vector::Zero(layer.weight.rows());
        v[ch.channel] = 1.0;
        for (std::size_t k = static_cast<std::size_t>(ch.layer) + 1; k < model.layers.size();
             ++k) {
            const Layer& down = model.layers[k];
            Vector u = down.weight * v;
            for (Index i = 0; i < u.size(); ++i) {
                double d = 1.0;
                if (down.activation == Activation::relu) {
                    d = trace.pre[k][i] > 0.0 ? 1.0 : 0.0;
                } else if (down.activation == Activation::tanh) {
                    const double t = std::tanh(trace.pre[k][i]);
                    d = 1.0 - t * t;
                }
                u[i] *= d;
            }
            v = std::move(u);
        }
        sq_jacobian += v.squaredNorm();
    }
    const double n = static_cast<double>(calib.observations.size());
    return (sq_deviation / n) * (sq_jacobian / n);
}

SensitivityTable two_stage_scores(const PolicyModel& model, const CalibrationSet& calib,
                                  const std::vector<ChannelId>& chans, double refine_fraction) {
    if (!(refine_fraction > 0.0) || refine_fraction > 1.0) {
        throw std::invalid_argument("two_stage_scores: refine_fraction must be in (0, 1]");
    }
    require_nonempty(calib, "two_stage_scores");

    struct Scores {
        double proxy[3];
        double exact0;
    };
    std::vector<Scores> screen(chans.size());
    parallel_for(chans.size(), [&](std::size_t i) {
        screen[i].proxy[0] = proxy_sensitivity(model, calib, chans[i], BitWidth::b2);
        screen[i].proxy[1] = proxy_sensitivity(model, calib, chans[i], BitWidth::b4);
        screen[i].proxy[2] = proxy_sensitivity(model, calib, chans[i], BitWidth::b8);
        screen[i].exact0 = exact_single_step(model, calib, chans[i], BitWidth::b0);
    });

    // Refinement targets: the most sensitive channels by the bit-2 proxy.
    std::vector<std::size_t> order(chans.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return screen[a].proxy[0] > screen[b].proxy[0];
    });
    const std::size_t refine_count = static_cast<std::size_t>(
        std::floor(refine_fraction * static_cast<double>(chans.size()) + 1e-12));
    std::vector<bool> refine(chans.size(), false);
    for (std::size_t i = 0; i < refine_count; ++i) {
        refine[order[i]] = true;
    }

    struct Refined {
        double exact[3];
    };
    std::vector<std::size_t> refine_idx;
    for (std::size_t i = 0; i < chans.size(); ++i) {
        if (refine[i]) {
            refine_idx.push_back(i);
        }
    }
    std::vector<Refined> refined(refine_idx.size());
    parallel_for(refine_idx.size(), [&](std::size_t k) {
        const ChannelId ch = chans[refine_idx[k]];
        refined[k].exact[0] = exact_single_step(model, calib, ch, BitWidth::b2);
        refined[k].exact[1] = exact_single_step(model, calib, ch, BitWidth::b4);
        refined[k].exact[2] = exact_single_step(model, calib, ch, BitWidth::b8);
    });

    SensitivityTable table;
    for (std::size_t i = 0; i < chans.size(); ++i) {
        table.set(chans[i], BitWidth::b0, screen[i].exact0, ScoreMethod::exact_single_step);
        table.set(chans[i], BitWidth::b2, screen[i].proxy[0], ScoreMethod::proxy);
        table.set(chans[i], BitWidth::b4, screen[i].proxy[1], ScoreMethod::proxy);
        table.set(chans[i], BitWidth::b8, screen[i].proxy[2], ScoreMethod::proxy);
    }
    for (std::size_t k = 0; k < refine_idx.size(); ++k) {
        const ChannelId ch = chans[refine_idx[k]];
        table.set(ch, BitWidth::b2, refined[k].exact[0], ScoreMethod::exact_single_step);
        table.set(ch, BitWidth::b4, refined[k].exact[1], ScoreMethod::exact_single_step);
        table.set(ch, BitWidth::b8, refined[k].exact[2], ScoreMethod::exact_single_step);
    }
    return table;
}

double rank_consistency(const SensitivityTable& single, const SensitivityTable& cumulative,
                        BitWidth bit) {
    std::vector<double> a, b;
    for (const ChannelId& ch : single.channel_ids()) {
        if (!cumulative.has(ch, bit)) {
            throw std::invalid_argument("rank_consistency: tables cover different channels");
        }
        a.push_back(single.score(ch, bit));
        b.push_back(cumulative.score(ch, bit));
    }
    return spearman(a, b);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("spearman: size mismatch");
    }
    if (a.size() < 3) {
        throw std::invalid_argument("spearman: needs at least 3 points");
    }
    const std::vector<double> ra = ranks_with_ties(a);
    const std::vector<double> rb = ranks_with_ties(b);
    const double n = static_cast<double>(a.size());
    double mean = (n + 1.0) / 2.0;
    double cov = 0.0, var_a = 0.0, var_b = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = ra[i] - mean;
        const double db = rb[i] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if (var_a == 0.0 || var_b == 0.0) {
        throw std::invalid_argument("spearman: constant ranking");
    }
    return cov / std::sqrt(var_a * var_b);
}

} // namespace actbit
