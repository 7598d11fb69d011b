#pragma once

// Action-space sensitivity scoring. A channel's score is the expected
// action deviation caused by quantizing that channel alone: squared
// single-step error over a calibration set, unsquared cumulative error
// over closed-loop episodes, or the first-order proxy
// sigma^2 * ||J||_F^2 where J is the Jacobian of the action with respect
// to the channel output.

#include "actbit/calibration.hpp"
#include "actbit/model.hpp"
#include "actbit/quant.hpp"
#include "actbit/simenv.hpp"

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace actbit {

enum class ScoreMethod { exact_single_step, proxy, cumulative };

std::string_view to_string(ScoreMethod m);
ScoreMethod score_method_from_string(std::string_view s);

class SensitivityTable {
  public:
    struct Entry {
        double score = 0.0;
        ScoreMethod method = ScoreMethod::exact_single_step;
    };

    void set(ChannelId ch, BitWidth bit, double score, ScoreMethod method);
    bool has(ChannelId ch, BitWidth bit) const;
    // Bit 16 scores 0 by definition; other bits must be present.
    double score(ChannelId ch, BitWidth bit) const;
    ScoreMethod method(ChannelId ch, BitWidth bit) const;
    std::vector<ChannelId> channel_ids() const;
    std::size_t size() const { return rows_.size(); }

    // CSV with header layer,channel,bits,score,method; 17 significant
    // digits; rows in (layer, channel, bits) ascending order.
    void save_csv(const std::string& path) const;
    static SensitivityTable load_csv(const std::string& path);

  private:
    static std::size_t bit_slot(BitWidth bit);
    std::map<ChannelId, std::array<std::optional<Entry>, 4>> rows_;
};

// Copy of the model with one channel quantized to `bit` (0 prunes the
// row and its bias entry, 16 is a no-op).
PolicyModel quantize_single_channel(const PolicyModel& model, ChannelId ch, BitWidth bit);

// Mean over the calibration set of ||A_quantized(x) - A(x)||^2 with only
// channel `ch` quantized to `bit`.
double exact_single_step(const PolicyModel& model, const CalibrationSet& calib, ChannelId ch,
                         BitWidth bit);

// Mean over episodes of sum_t ||A_quantized_t - A_t||, both policies
// evaluated lock-step on the perturbed policy's closed-loop trajectory.
double cumulative_sensitivity(const PolicyModel& model, const EnvConfig& env, ChannelId ch,
                              BitWidth bit, int horizon, int episodes = 16);

// Uniform-noise model over one quantization step: scale / sqrt(12).
double quant_noise_std(const ChannelQuantParams& params);

// sigma_out^2 * E[||J||_F^2]; sigma_out is the RMS over the calibration
// set of the channel's pre-activation deviation under weight quantization
// (the noise model takes the deviation as zero-mean). Invalid for bit 0:
// pruning is not a small perturbation.
double proxy_sensitivity(const PolicyModel& model, const CalibrationSet& calib, ChannelId ch,
                         BitWidth bit);

// Screen-then-refine: proxy scores everywhere, exact scores for bit 0 and
// for the top refine_fraction of channels ranked by the bit-2 proxy.
SensitivityTable two_stage_scores(const PolicyModel& model, const CalibrationSet& calib,
                                  const std::vector<ChannelId>& channels,
                                  double refine_fraction);

// Spearman rank correlation between two tables' scores at one bit-width.
double rank_consistency(const SensitivityTable& single, const SensitivityTable& cumulative,
                        BitWidth bit);

// Spearman rank correlation with average ranks on ties; needs >= 3 points.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

} // namespace actbit
