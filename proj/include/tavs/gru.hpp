#pragma once

#include "tavs/autodiff.hpp"

#include <random>

namespace tavs::ad {

/// Gate weights of a single GRU layer. Each weight acts on [x; h].
struct GruParams {
    Var w_update; // hidden x (input + hidden)
    Var b_update; // hidden x 1
    Var w_reset;
    Var b_reset;
    Var w_candidate;
    Var b_candidate;

    Eigen::Index hidden_size() const { return w_update.rows(); }
    Eigen::Index input_size() const { return w_update.cols() - w_update.rows(); }
};

GruParams make_gru_zero(Eigen::Index input_size, Eigen::Index hidden_size, bool requires_grad = true);
GruParams make_gru_uniform(Eigen::Index input_size, Eigen::Index hidden_size, double scale, std::mt19937_64 &rng,
                           bool requires_grad = true);

/// z = σ(W_z[x;h] + b_z), r = σ(W_r[x;h] + b_r), c = tanh(W_h[x; r⊙h] + b_h),
/// h' = (1 - z)⊙h + z⊙c.
Var gru_cell(const GruParams &params, const Var &h_prev, const Var &x);

} // namespace tavs::ad
