#pragma once

// Calibration set: observations collected from full-precision trajectories;
// the empirical domain for sensitivity expectations and activation ranges.

#include "actbit/tensor.hpp"

#include <cstdint>
#include <vector>

namespace actbit {

struct CalibrationSet {
    std::vector<Vector> observations;
    int source_trajectories = 0;
    std::uint64_t seed = 0;
};

inline void require_nonempty(const CalibrationSet& calib, const char* what) {
    if (calib.observations.empty()) {
        throw std::invalid_argument(std::string(what) + ": empty calibration set");
    }
}

} // namespace actbit
