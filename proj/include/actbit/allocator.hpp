#pragma once

// Budgeted bit assignment. Channels start at 16 bits; a min-heap keyed by
// the sensitivity-to-bit ratio rho demotes the cheapest channel one
// adjacent stage at a time (16->8->4->2->0) until the average bit-width
// over the designated channels meets the budget. 2->0 demotions are gated
// by a dual-threshold prune guard and a hard cap on the pruned fraction.

#include "actbit/model.hpp"
#include "actbit/quant.hpp"
#include "actbit/sensitivity.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

namespace actbit {

struct BitAllocation {
    std::map<ChannelId, BitWidth> assignment;
    std::vector<ChannelId> designated; // sorted (layer, channel)
    double budget = 16.0;              // average-bit budget
};

struct DemotionCandidate {
    ChannelId channel;
    BitWidth from_bit = BitWidth::b16;
    BitWidth to_bit = BitWidth::b8;
    double rho = 0.0;
};

struct GreedyResult {
    BitAllocation allocation;
    std::vector<DemotionCandidate> demotion_log; // in application order
};

// Marginal error increase per bit saved: (s_lo - s_hi) / (b_hi - b_lo).
// Negative values are legal (lower precision may score better).
double rho(double s_lo, double s_hi, BitWidth b_hi, BitWidth b_lo);

// Mean assigned bits over the designated channels only.
double average_bits(const BitAllocation& alloc);

// Dual-threshold gate for 2->0 demotions: prune only if the full pruning
// error is tiny in absolute terms and the 2->0 error jump does not exceed
// tau_rel times the median jump. prune_cap bounds the pruned fraction.
class PruneGuard {
  public:
    // tau_abs defaults to 1e-4 * mean bit-2 score over the designated set.
    static PruneGuard from_table(const SensitivityTable& table,
                                 const std::vector<ChannelId>& designated,
                                 std::optional<double> tau_abs = std::nullopt,
                                 double tau_rel = 1.0, double prune_cap = 0.10);
    static PruneGuard permissive();

    bool allows(ChannelId ch, const SensitivityTable& table) const;
    double prune_cap() const { return prune_cap_; }
    double tau_abs() const { return tau_abs_; }
    double tau_rel() const { return tau_rel_; }

  private:
    double tau_abs_ = 0.0;
    double tau_rel_ = 1.0;
    double prune_cap_ = 0.10;
    double median_gap_ = 0.0; // median over designated of s(0) - s(2)
};

GreedyResult greedy_allocate(const SensitivityTable& table, std::vector<ChannelId> designated,
                             double budget, const PruneGuard& guard);

// Exhaustive 5^n search (n <= 8): the budget-feasible assignment with the
// smallest objective; ties prefer higher average bits, then the
// lexicographically higher bit vector in channel order.
BitAllocation brute_force_allocate(const SensitivityTable& table,
                                   std::vector<ChannelId> designated, double budget);

BitAllocation uniform_allocation(std::vector<ChannelId> designated, BitWidth bits);

// Sum of table scores at the assigned bits.
double allocation_objective(const SensitivityTable& table, const BitAllocation& alloc);

// Wall time in seconds of a greedy run over a synthetic random table.
double allocation_complexity_probe(int n_channels, double budget = 8.0,
                                   std::uint64_t seed = 20260810);

} // namespace actbit
