#pragma once

// Uniform affine quantizers. Weights are quantized per output channel with
// a symmetric scale (zero_point 0); bit 16 is a lossless passthrough and
// bit 0 prunes the channel (zero row, zero bias entry). Activations use a
// single model-wide bit-width with percentile-calibrated per-layer ranges.

#include "actbit/calibration.hpp"
#include "actbit/model.hpp"

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace actbit {

struct BitAllocation; // allocator.hpp

enum class BitWidth : int { b0 = 0, b2 = 2, b4 = 4, b8 = 8, b16 = 16 };

inline constexpr std::array<BitWidth, 5> kAllBits{BitWidth::b0, BitWidth::b2, BitWidth::b4,
                                                  BitWidth::b8, BitWidth::b16};
// Bits that carry a quantization grid.
inline constexpr std::array<BitWidth, 3> kGridBits{BitWidth::b2, BitWidth::b4, BitWidth::b8};
// Bits scored in a sensitivity table (16 is identically zero).
inline constexpr std::array<BitWidth, 4> kScoredBits{BitWidth::b0, BitWidth::b2, BitWidth::b4,
                                                     BitWidth::b8};

inline constexpr int to_int(BitWidth b) { return static_cast<int>(b); }
BitWidth bitwidth_from_int(int v);

inline constexpr double kDefaultActPercentile = 99.9;

struct ChannelQuantParams {
    BitWidth bit = BitWidth::b16;
    double scale = 1.0;  // > 0; ignored for bit 0/16
    int zero_point = 0;
};

struct QuantizedRow {
    Eigen::VectorXi q;
    Vector deq;
};

// Symmetric per-row params: scale = max|row| / (2^(b-1) - 1), zero_point 0.
// An all-zero row degenerates to scale 1.
ChannelQuantParams channel_scale(const Eigen::Ref<const Vector>& row, BitWidth bit);

// q = clamp(round_half_even(w / scale) + zero_point, -2^(b-1), 2^(b-1)-1),
// deq = (q - zero_point) * scale.
QuantizedRow quantize_channel(const Eigen::Ref<const Vector>& row,
                              const ChannelQuantParams& params);

// Asymmetric activation grid over [lo, hi] with 2^bits levels, anchored at
// lo so clamped inputs land exactly on the range endpoints. bits 16 is the
// identity.
Vector fake_quantize_activation(const Eigen::Ref<const Vector>& x, double lo, double hi,
                                BitWidth bits);

// Per-layer (lo, hi) = ((100-p)-th, p-th) percentiles of the post-activation
// values observed over the calibration set.
std::vector<std::pair<double, double>> calibrate_activations(const PolicyModel& model,
                                                             const CalibrationSet& calib,
                                                             BitWidth bits, double percentile);

// Linear-interpolation percentile (p in [0, 100]) of an unsorted sample.
double percentile(std::vector<double> values, double p);

struct QuantizedModel {
    PolicyModel base; // original full-precision model
    PolicyModel deq;  // dequantized weights (pruned rows zeroed)
    std::map<ChannelId, ChannelQuantParams> channel_params;
    BitWidth activation_bits = BitWidth::b16;
    std::vector<std::pair<double, double>> activation_ranges; // per layer; empty for 16-bit
};

// Quantizes every designated channel per the allocation; channels outside
// the allocation stay full precision. Activation ranges are calibrated on
// the full-precision model when act_bits != 16.
QuantizedModel apply_allocation(const PolicyModel& model, const BitAllocation& alloc,
                                BitWidth act_bits, const CalibrationSet& calib,
                                double act_percentile = kDefaultActPercentile);

// Forward pass with dequantized weights and fake-quantized activations.
Vector quantized_action(const QuantizedModel& qm, const Vector& obs);

// Bit-map file: {"activation_bits", "designated_tags", "assignments":
// [{"layer", "channel", "bits", "scale", "zero_point"}]}.
struct BitMapFile {
    int activation_bits = 16;
    std::vector<std::string> designated_tags;
    struct Entry {
        int layer = 0;
        int channel = 0;
        int bits = 16;
        double scale = 1.0;
        int zero_point = 0;
    };
    std::vector<Entry> assignments; // (layer, channel) ascending
};

void save_bit_map(const BitMapFile& map, const std::string& path);
BitMapFile load_bit_map(const std::string& path);

// Builds the serializable map for an allocation (scales recomputed from the
// model rows).
BitMapFile make_bit_map(const PolicyModel& model, const BitAllocation& alloc, BitWidth act_bits,
                        const std::vector<std::string>& designated_tags);

} // namespace actbit
