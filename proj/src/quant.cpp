#include "actbit/quant.hpp"

#include "actbit/allocator.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace actbit {

namespace {

// Ties round to even; mt19937-independent and platform-stable under the
// default FE_TONEAREST mode, which this library never changes.
double round_half_even(double x) {
    return std::nearbyint(x);
}

int grid_min(BitWidth b) { return -(1 << (to_int(b) - 1)); }
int grid_max(BitWidth b) { return (1 << (to_int(b) - 1)) - 1; }

void require_grid_bit(BitWidth bit, const char* what) {
    if (bit != BitWidth::b2 && bit != BitWidth::b4 && bit != BitWidth::b8) {
        throw std::invalid_argument(std::string(what) + ": params not applicable for bit " +
                                    std::to_string(to_int(bit)));
    }
}

} // namespace

BitWidth bitwidth_from_int(int v) {
    switch (v) {
        case 0: return BitWidth::b0;
        case 2: return BitWidth::b2;
        case 4: return BitWidth::b4;
        case 8: return BitWidth::b8;
        case 16: return BitWidth::b16;
        default: break;
    }
    throw std::invalid_argument("bit-width must be one of {0,2,4,8,16}, got " +
                                std::to_string(v));
}

ChannelQuantParams channel_scale(const Eigen::Ref<const Vector>& row, BitWidth bit) {
    require_grid_bit(bit, "channel_scale");
    const double max_abs = row.size() == 0 ? 0.0 : row.cwiseAbs().maxCoeff();
    ChannelQuantParams params;
    params.bit = bit;
    params.scale = max_abs > 0.0 ? max_abs / static_cast<double>(grid_max(bit)) : 1.0;
    params.zero_point = 0;
    return params;
}

QuantizedRow quantize_channel(const Eigen::Ref<const Vector>& row,
                              const ChannelQuantParams& params) {
    require_grid_bit(params.bit, "quantize_channel");
    if (!(params.scale > 0.0)) {
        throw std::invalid_argument("quantize_channel: scale must be positive");
    }
    const int lo = grid_min(params.bit);
    const int hi = grid_max(params.bit);
    QuantizedRow out;
    out.q.resize(row.size());
    out.deq.resize(row.size());
    for (Index i = 0; i < row.size(); ++i) {
        int q = static_cast<int>(round_half_even(row[i] / params.scale)) + params.zero_point;
        q = std::clamp(q, lo, hi);
        out.q[i] = q;
        out.deq[i] = (q - params.zero_point) * params.scale;
    }
    return out;
}

Vector fake_quantize_activation(const Eigen::Ref<const Vector>& x, double lo, double hi,
                                BitWidth bits) {
    if (lo > hi) {
        throw std::invalid_argument("fake_quantize_activation: lo > hi");
    }
    if (bits == BitWidth::b16) {
        return x;
    }
    if (bits == BitWidth::b0) {
        throw std::invalid_argument("fake_quantize_activation: 0-bit activations unsupported");
    }
    const int levels = (1 << to_int(bits)) - 1;
    const double scale = hi > lo ? (hi - lo) / static_cast<double>(levels) : 1.0;
    Vector out(x.size());
    for (Index i = 0; i < x.size(); ++i) {
        const double clamped = std::clamp(x[i], lo, hi);
        double q = round_half_even((clamped - lo) / scale);
        q = std::clamp(q, 0.0, static_cast<double>(levels));
        out[i] = lo + q * scale;
    }
    return out;
}

double percentile(std::vector<double> values, double p) {
    if (values.empty()) {
        throw std::invalid_argument("percentile: empty sample");
    }
    if (p < 0.0 || p > 100.0) {
        throw std::invalid_argument("percentile: p out of [0, 100]");
    }
    std::sort(values.begin(), values.end());
    const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<std::pair<double, double>> calibrate_activations(const PolicyModel& model,
                                                             const CalibrationSet& calib,
                                                             BitWidth bits, double percentile_p) {
    require_nonempty(calib, "calibrate_activations");
    if (bits != BitWidth::b4 && bits != BitWidth::b8 && bits != BitWidth::b16) {
        throw std::invalid_argument("calibrate_activations: activation bits must be 4, 8 or 16");
    }
    if (!(percentile_p > 0.0) || percentile_p > 100.0) {
        throw std::invalid_argument("calibrate_activations: percentile out of (0, 100]");
    }
    std::vector<std::vector<double>> samples(model.layers.size());
    for (const Vector& obs : calib.observations) {
        const ForwardTrace trace = forward(model, obs);
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            const Vector& h = trace.post[l];
            samples[l].insert(samples[l].end(), h.data(), h.data() + h.size());
        }
    }
    std::vector<std::pair<double, double>> ranges;
    ranges.reserve(samples.size());
    for (auto& s : samples) {
        const double hi = percentile(s, percentile_p);
        const double lo = percentile(std::move(s), 100.0 - percentile_p);
        ranges.emplace_back(lo, hi);
    }
    return ranges;
}

QuantizedModel apply_allocation(const PolicyModel& model, const BitAllocation& alloc,
                                BitWidth act_bits, const CalibrationSet& calib,
                                double act_percentile) {
    QuantizedModel qm;
    qm.base = model;
    qm.deq = model;
    qm.activation_bits = act_bits;
    for (const ChannelId& ch : alloc.designated) {
        validate_channel(model, ch);
        const auto it = alloc.assignment.find(ch);
        if (it == alloc.assignment.end()) {
            throw std::invalid_argument("apply_allocation: designated channel (" +
                                        std::to_string(ch.layer) + "," +
                                        std::to_string(ch.channel) + ") has no bit assignment");
        }
        const BitWidth bit = it->second;
        Layer& layer = qm.deq.layers[static_cast<std::size_t>(ch.layer)];
        ChannelQuantParams params;
        params.bit = bit;
        if (bit == BitWidth::b0) {
            layer.weight.row(ch.channel).setZero();
            layer.bias[ch.channel] = 0.0;
        } else if (bit != BitWidth::b16) {
            params = channel_scale(layer.weight.row(ch.channel).transpose(), bit);
            layer.weight.row(ch.channel) =
                quantize_channel(layer.weight.row(ch.channel).transpose(), params)
                    .deq.transpose();
        }
        qm.channel_params.emplace(ch, params);
    }
    if (alloc.assignment.size() != alloc.designated.size()) {
        throw std::invalid_argument("apply_allocation: assignment covers channels outside the "
                                    "designated set");
    }
    if (act_bits != BitWidth::b16) {
        qm.activation_ranges = calibrate_activations(model, calib, act_bits, act_percentile);
    }
    return qm;
}

Vector quantized_action(const QuantizedModel& qm, const Vector& obs) {
    if (qm.activation_bits == BitWidth::b16) {
        return forward(qm.deq, obs).action();
    }
    Vector x = obs;
    for (std::size_t l = 0; l < qm.deq.layers.size(); ++l) {
        const Layer& layer = qm.deq.layers[l];
        Vector z = matvec(layer.weight, x) + layer.bias;
        switch (layer.activation) {
            case Activation::identity: break;
            case Activation::relu: z = z.cwiseMax(0.0); break;
            case Activation::tanh: z = z.array().tanh().matrix(); break;
        }
        const auto& [lo, hi] = qm.activation_ranges[l];
        x = fake_quantize_activation(z, lo, hi, qm.activation_bits);
    }
    return x;
}

void save_bit_map(const BitMapFile& map, const std::string& path) {
    nlohmann::json j;
    j["activation_bits"] = map.activation_bits;
    j["designated_tags"] = map.designated_tags;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : map.assignments) {
        nlohmann::json je;
        je["layer"] = e.layer;
        je["channel"] = e.channel;
        je["bits"] = e.bits;
        je["scale"] = e.scale;
        je["zero_point"] = e.zero_point;
        entries.push_back(std::move(je));
    }
    j["assignments"] = std::move(entries);
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write bit map: " + path);
    }
    out << j.dump(2) << "\n";
}

BitMapFile load_bit_map(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open bit map: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("bit map " + path + ": " + e.what());
    }
    BitMapFile map;
    map.activation_bits = to_int(bitwidth_from_int(j.at("activation_bits").get<int>()));
    for (const auto& t : j.at("designated_tags")) {
        map.designated_tags.push_back(t.get<std::string>());
    }
    for (const auto& je : j.at("assignments")) {
        BitMapFile::Entry e;
        e.layer = je.at("layer").get<int>();
        e.channel = je.at("channel").get<int>();
        e.bits = to_int(bitwidth_from_int(je.at("bits").get<int>()));
        e.scale = je.at("scale").get<double>();
        e.zero_point = je.at("zero_point").get<int>();
        map.assignments.push_back(e);
    }
    return map;
}

BitMapFile make_bit_map(const PolicyModel& model, const BitAllocation& alloc, BitWidth act_bits,
                        const std::vector<std::string>& designated_tags) {
    BitMapFile map;
    map.activation_bits = to_int(act_bits);
    map.designated_tags = designated_tags;
    for (const ChannelId& ch : alloc.designated) {
        validate_channel(model, ch);
        const BitWidth bit = alloc.assignment.at(ch);
        BitMapFile::Entry e;
        e.layer = ch.layer;
        e.channel = ch.channel;
        e.bits = to_int(bit);
        if (bit != BitWidth::b0 && bit != BitWidth::b16) {
            const ChannelQuantParams params = channel_scale(
                model.layers[static_cast<std::size_t>(ch.layer)].weight.row(ch.channel)
                    .transpose(),
                bit);
            e.scale = params.scale;
            e.zero_point = params.zero_point;
        }
        map.assignments.push_back(e);
    }
    return map;
}

} // namespace actbit
