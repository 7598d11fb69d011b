#pragma once

// Dense linear-algebra substrate shared by all modules. Matrices are
// row-major: row i of a weight matrix is output channel i.

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace actbit {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) {
        throw std::invalid_argument(std::string(what) + ": non-finite entries");
    }
}

inline void require_finite(const Vector& v, const char* what) {
    if (!v.allFinite()) {
        throw std::invalid_argument(std::string(what) + ": non-finite entries");
    }
}

inline Vector matvec(const Matrix& m, const Vector& x) {
    if (x.size() != m.cols()) {
        throw std::invalid_argument("matvec: incompatible shapes (" + std::to_string(m.rows()) +
                                    "x" + std::to_string(m.cols()) + ")*(" +
                                    std::to_string(x.size()) + ")");
    }
    return m * x;
}

inline double l2_norm(const Vector& x) {
    return x.norm();
}

inline double frobenius_norm_sq(const Matrix& m) {
    return m.squaredNorm();
}

} // namespace actbit
