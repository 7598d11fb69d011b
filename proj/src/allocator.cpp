#include "actbit/allocator.hpp"

#include "actbit/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <queue>
#include <stdexcept>

namespace actbit {

namespace {

constexpr double kBudgetSlack = 1e-9;

BitWidth next_lower(BitWidth b) {
    switch (b) {
        case BitWidth::b16: return BitWidth::b8;
        case BitWidth::b8: return BitWidth::b4;
        case BitWidth::b4: return BitWidth::b2;
        case BitWidth::b2: return BitWidth::b0;
        default: break;
    }
    throw std::logic_error("no demotion below 0 bits");
}

struct HeapEntry {
    double rho = 0.0;
    ChannelId channel;
    BitWidth from_bit = BitWidth::b16;
    BitWidth to_bit = BitWidth::b8;
};

// Min-heap on rho; ties resolved by (layer, channel) ascending.
struct HeapOrder {
    bool operator()(const HeapEntry& a, const HeapEntry& b) const {
        if (a.rho != b.rho) {
            return a.rho > b.rho;
        }
        return b.channel < a.channel;
    }
};

void sort_unique(std::vector<ChannelId>& designated) {
    std::sort(designated.begin(), designated.end());
    designated.erase(std::unique(designated.begin(), designated.end()), designated.end());
}

} // namespace

double rho(double s_lo, double s_hi, BitWidth b_hi, BitWidth b_lo) {
    if (to_int(b_hi) <= to_int(b_lo)) {
        throw std::invalid_argument("rho: b_hi must exceed b_lo");
    }
    return (s_lo - s_hi) / static_cast<double>(to_int(b_hi) - to_int(b_lo));
}

double average_bits(const BitAllocation& alloc) {
    if (alloc.designated.empty()) {
        throw std::invalid_argument("average_bits: empty designated set");
    }
    long total = 0;
    for (const ChannelId& ch : alloc.designated) {
        total += to_int(alloc.assignment.at(ch));
    }
    return static_cast<double>(total) / static_cast<double>(alloc.designated.size());
}

PruneGuard PruneGuard::from_table(const SensitivityTable& table,
                                  const std::vector<ChannelId>& designated,
                                  std::optional<double> tau_abs, double tau_rel,
                                  double prune_cap) {
    if (designated.empty()) {
        throw std::invalid_argument("prune guard: empty designated set");
    }
    PruneGuard guard;
    guard.tau_rel_ = tau_rel;
    guard.prune_cap_ = prune_cap;
    std::vector<double> gaps;
    double mean_s2 = 0.0;
    gaps.reserve(designated.size());
    for (const ChannelId& ch : designated) {
        gaps.push_back(table.score(ch, BitWidth::b0) - table.score(ch, BitWidth::b2));
        mean_s2 += table.score(ch, BitWidth::b2);
    }
    mean_s2 /= static_cast<double>(designated.size());
    guard.tau_abs_ = tau_abs.value_or(1e-4 * mean_s2);
    std::sort(gaps.begin(), gaps.end());
    const std::size_t n = gaps.size();
    guard.median_gap_ = n % 2 == 1 ? gaps[n / 2] : 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]);
    return guard;
}

PruneGuard PruneGuard::permissive() {
    PruneGuard guard;
    guard.tau_abs_ = std::numeric_limits<double>::infinity();
    guard.tau_rel_ = std::numeric_limits<double>::infinity();
    guard.prune_cap_ = 1.0;
    guard.median_gap_ = 0.0;
    return guard;
}

bool PruneGuard::allows(ChannelId ch, const SensitivityTable& table) const {
    const double s0 = table.score(ch, BitWidth::b0);
    const double s2 = table.score(ch, BitWidth::b2);
    if (std::isinf(tau_abs_) && std::isinf(tau_rel_)) {
        return true;
    }
    return s0 <= tau_abs_ && (s0 - s2) <= tau_rel_ * median_gap_;
}

GreedyResult greedy_allocate(const SensitivityTable& table, std::vector<ChannelId> designated,
                             double budget, const PruneGuard& guard) {
    if (budget < 0.0 || budget > 16.0) {
        throw std::invalid_argument("greedy_allocate: budget must be in [0, 16]");
    }
    sort_unique(designated);
    if (designated.empty()) {
        throw std::invalid_argument("greedy_allocate: empty designated set");
    }

    GreedyResult result;
    result.allocation.designated = designated;
    result.allocation.budget = budget;
    auto& assignment = result.allocation.assignment;

    const double n = static_cast<double>(designated.size());
    const double target = budget * n;
    long total_bits = 0;

    std::priority_queue<HeapEntry, std::vector<HeapEntry>, HeapOrder> heap;
    for (const ChannelId& ch : designated) {
        assignment[ch] = BitWidth::b16;
        total_bits += 16;
        heap.push({rho(table.score(ch, BitWidth::b8), 0.0, BitWidth::b16, BitWidth::b8), ch,
                   BitWidth::b16, BitWidth::b8});
    }

    long pruned = 0;
    const double prune_limit = guard.prune_cap() * n + kBudgetSlack;
    while (static_cast<double>(total_bits) > target + kBudgetSlack) {
        if (heap.empty()) {
            throw std::runtime_error("greedy_allocate: budget unreachable under prune "
                                     "constraints");
        }
        const HeapEntry top = heap.top();
        heap.pop();
        if (assignment.at(top.channel) != top.from_bit) {
            continue; // stale candidate
        }
        if (top.to_bit == BitWidth::b0) {
            if (static_cast<double>(pruned + 1) > prune_limit ||
                !guard.allows(top.channel, table)) {
                continue; // channel stays at 2 bits
            }
            ++pruned;
        }
        assignment[top.channel] = top.to_bit;
        total_bits -= to_int(top.from_bit) - to_int(top.to_bit);
        result.demotion_log.push_back({top.channel, top.from_bit, top.to_bit, top.rho});
        if (top.to_bit != BitWidth::b0) {
            const BitWidth lower = next_lower(top.to_bit);
            heap.push({rho(table.score(top.channel, lower), table.score(top.channel, top.to_bit),
                           top.to_bit, lower),
                       top.channel, top.to_bit, lower});
        }
    }
    return result;
}

BitAllocation brute_force_allocate(const SensitivityTable& table,
                                   std::vector<ChannelId> designated, double budget) {
    sort_unique(designated);
    const std::size_t n = designated.size();
    if (n == 0) {
        throw std::invalid_argument("brute_force_allocate: empty designated set");
    }
    if (n > 8) {
        throw std::invalid_argument("brute_force_allocate: instance too large (> 8 channels)");
    }

    // Score lookup per channel in kAllBits order.
    std::vector<std::array<double, 5>> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t b = 0; b < kAllBits.size(); ++b) {
            scores[i][b] = table.score(designated[i], kAllBits[b]);
        }
    }

    const double target = budget * static_cast<double>(n) + kBudgetSlack;
    std::vector<std::size_t> choice(n, 0), best(n, 0);
    double best_objective = std::numeric_limits<double>::infinity();
    long best_bits = -1;
    bool found = false;

    while (true) {
        long bits = 0;
        double objective = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            bits += to_int(kAllBits[choice[i]]);
            objective += scores[i][choice[i]];
        }
        if (static_cast<double>(bits) <= target) {
            bool better = !found || objective < best_objective;
            if (!better && objective == best_objective) {
                // Prefer more bits, then the lexicographically higher vector.
                better = bits > best_bits || (bits == best_bits && choice > best);
            }
            if (better) {
                best = choice;
                best_objective = objective;
                best_bits = bits;
                found = true;
            }
        }
        // Odometer over 5^n assignments.
        std::size_t pos = 0;
        while (pos < n && ++choice[pos] == kAllBits.size()) {
            choice[pos] = 0;
            ++pos;
        }
        if (pos == n) {
            break;
        }
    }
    if (!found) {
        throw std::runtime_error("brute_force_allocate: no feasible assignment");
    }

    BitAllocation alloc;
    alloc.designated = designated;
    alloc.budget = budget;
    for (std::size_t i = 0; i < n; ++i) {
        alloc.assignment[designated[i]] = kAllBits[best[i]];
    }
    return alloc;
}

BitAllocation uniform_allocation(std::vector<ChannelId> designated, BitWidth bits) {
    sort_unique(designated);
    if (designated.empty()) {
        throw std::invalid_argument("uniform_allocation: empty designated set");
    }
    BitAllocation alloc;
    alloc.designated = designated;
    alloc.budget = static_cast<double>(to_int(bits));
    for (const ChannelId& ch : designated) {
        alloc.assignment[ch] = bits;
    }
    return alloc;
}

double allocation_objective(const SensitivityTable& table, const BitAllocation& alloc) {
    double total = 0.0;
    for (const ChannelId& ch : alloc.designated) {
        total += table.score(ch, alloc.assignment.at(ch));
    }
    return total;
}

double allocation_complexity_probe(int n_channels, double budget, std::uint64_t seed) {
    if (n_channels < 1) {
        throw std::invalid_argument("allocation_complexity_probe: n_channels must be >= 1");
    }
    Rng rng(seed);
    SensitivityTable table;
    std::vector<ChannelId> designated;
    designated.reserve(static_cast<std::size_t>(n_channels));
    for (int i = 0; i < n_channels; ++i) {
        const ChannelId ch{0, i};
        designated.push_back(ch);
        // Random decreasing curve: higher error at lower precision.
        const double base = rng.uniform(0.0, 1.0);
        table.set(ch, BitWidth::b8, base * rng.uniform(0.0, 0.1), ScoreMethod::proxy);
        table.set(ch, BitWidth::b4, base * rng.uniform(0.1, 0.5), ScoreMethod::proxy);
        table.set(ch, BitWidth::b2, base * rng.uniform(0.5, 2.0), ScoreMethod::proxy);
        table.set(ch, BitWidth::b0, base * rng.uniform(2.0, 8.0), ScoreMethod::exact_single_step);
    }
    const auto start = std::chrono::steady_clock::now();
    const GreedyResult result =
        greedy_allocate(table, std::move(designated), budget, PruneGuard::permissive());
    const auto stop = std::chrono::steady_clock::now();
    if (average_bits(result.allocation) > budget + kBudgetSlack) {
        throw std::logic_error("allocation_complexity_probe: budget violated");
    }
    return std::chrono::duration<double>(stop - start).count();
}

} // namespace actbit
