#pragma once

// Central finite-difference oracle. It only evaluates the function on
// perturbed copies of the inputs and never looks at the tape.

#include "tavs/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace tavs::testing {

using ad::Matrix;

inline std::vector<Matrix> finite_difference(const std::function<double(const std::vector<Matrix> &)> &f,
                                             std::vector<Matrix> point, double eps = 1e-5) {
    std::vector<Matrix> grads;
    grads.reserve(point.size());
    for (auto &m : point) {
        Matrix g(m.rows(), m.cols());
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double saved = m.data()[i];
            m.data()[i] = saved + eps;
            const double up = f(point);
            m.data()[i] = saved - eps;
            const double down = f(point);
            m.data()[i] = saved;
            g.data()[i] = (up - down) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

/// Max-abs difference scaled by the larger max-abs magnitude of the two
/// tensors (floored so all-zero gradients compare absolutely).
inline double relative_error(const Matrix &analytic, const Matrix &numeric, double floor = 1e-8) {
    const double diff = (analytic - numeric).cwiseAbs().maxCoeff();
    const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), floor});
    return diff / scale;
}

inline std::vector<Matrix> values_of(std::span<const ad::Var> vars) {
    std::vector<Matrix> out;
    for (const auto &v : vars) {
        out.push_back(v.value());
    }
    return out;
}

inline std::vector<ad::Var> leaves_from(const std::vector<Matrix> &values) {
    std::vector<ad::Var> out;
    for (const auto &m : values) {
        out.emplace_back(m, true);
    }
    return out;
}

} // namespace tavs::testing
