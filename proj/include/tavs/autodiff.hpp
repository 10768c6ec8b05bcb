#pragma once

// Reverse-mode automatic differentiation over small dense matrices.
//
// Every primitive records its inputs and a backward rule written in terms of
// the same primitives, so a gradient computed with create_graph=true is itself
// a differentiable expression. That is what the second-order meta objective
// needs: the inner SGD step θ' = θ - α∇L(θ) stays on the graph and the outer
// gradient flows through ∇L.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tavs::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class AutodiffError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct GradOptions {
    bool create_graph = false;
    /// Defaults to create_graph when unset.
    std::optional<bool> retain_graph;
    /// Unreachable params get zero gradients instead of an error.
    bool allow_unused = false;
};

class Var;

namespace detail {

using BackwardFn =
    std::function<std::vector<Var>(const Var &self, std::span<const Var> inputs, const Var &grad)>;

struct Node {
    Matrix value;
    bool requires_grad = false;
    bool released = false;
    std::uint64_t seq = 0;
    std::vector<Var> inputs;
    BackwardFn backward;

    // Scratch state of the gradient pass in progress.
    std::uint64_t visit_epoch = 0;
    std::uint64_t needed_epoch = 0;
    std::unique_ptr<Var> grad;
};

/// True while a gradient pass needs the gradient flowing into this node.
bool grad_needed(const Var &v);

} // namespace detail

/// Handle to a node of the computation graph. Copies share the node.
class Var {
  public:
    Var() = default;
    /// Leaf from external data; rejects NaN/Inf.
    explicit Var(Matrix value, bool requires_grad = false);

    static Var scalar(double v, bool requires_grad = false);
    static Var vector(const Eigen::VectorXd &v, bool requires_grad = false);
    static Var zeros(Eigen::Index rows, Eigen::Index cols);

    bool defined() const { return node_ != nullptr; }
    const Matrix &value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    std::vector<Eigen::Index> shape() const { return {rows(), cols()}; }
    Eigen::Index size() const { return value().size(); }
    double item() const;
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool is_leaf() const { return node_ && !node_->backward && !node_->released; }

    /// Same value, cut from the graph.
    Var detach() const;
    /// Fresh leaf with the same value that requires grad.
    Var detach_requires_grad() const;

    const detail::Node *node() const { return node_.get(); }

    // Internal: used by primitive construction.
    static Var make_op(Matrix value, std::vector<Var> inputs, detail::BackwardFn backward);

  private:
    friend std::vector<Var> gradient(const Var &, std::span<const Var>, const GradOptions &);

    std::shared_ptr<detail::Node> node_;
};

/// RAII switch for graph recording. While disabled, primitives produce
/// constants and record nothing.
class GradMode {
  public:
    explicit GradMode(bool enabled);
    ~GradMode();
    GradMode(const GradMode &) = delete;
    GradMode &operator=(const GradMode &) = delete;

    static bool enabled();

  private:
    bool previous_;
};

/// dLoss/dParam for each param. Throws when loss is not 1x1, when a param does
/// not reach the loss (unless allow_unused), or when the graph was already
/// consumed by an earlier call without retain_graph.
std::vector<Var> gradient(const Var &loss, std::span<const Var> params, const GradOptions &options);
inline std::vector<Var> gradient(const Var &loss, std::span<const Var> params) {
    return gradient(loss, params, GradOptions{});
}

// Elementwise and linear primitives. Shapes must match exactly; there is no
// broadcasting except through the explicit broadcast helpers.
Var add(const Var &a, const Var &b);
Var sub(const Var &a, const Var &b);
Var neg(const Var &a);
Var scale(const Var &a, double factor);
Var add_scalar(const Var &a, double c);
Var cwise_product(const Var &a, const Var &b);
Var reciprocal(const Var &a);
Var exp(const Var &a);
Var log(const Var &a);
Var sigmoid(const Var &a);
Var tanh(const Var &a);
Var matmul(const Var &a, const Var &b);
/// op(a)·op(b) where op transposes when the flag is set.
Var matmul(const Var &a, const Var &b, bool transpose_a, bool transpose_b);
Var transpose(const Var &a);

/// Sum of all entries as 1x1.
Var sum(const Var &a);
/// 1x1 -> rows x cols.
Var broadcast(const Var &s, Eigen::Index rows, Eigen::Index cols);
/// r x c -> r x 1.
Var row_sum(const Var &a);
/// r x 1 -> r x c.
Var broadcast_cols(const Var &v, Eigen::Index cols);

enum class Axis { Rows, Cols };
/// Stack along rows (vertically) or columns (horizontally).
Var concat(std::span<const Var> parts, Axis axis);
Var slice(const Var &a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols);
/// Inverse of slice: place a into a zero rows x cols matrix at (row, col).
Var pad(const Var &a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols);
/// Row `index` of a as a column vector.
Var row(const Var &a, Eigen::Index index);

/// Row-wise softmax with max subtraction.
Var softmax_rows(const Var &x);
Var log_softmax_rows(const Var &x);
/// out(i) = a(i, index[i]) as r x 1.
Var pick(const Var &a, std::span<const int> index);
/// Inverse of pick: r x 1 scattered into r x cols zeros.
Var scatter(const Var &v, std::span<const int> index, Eigen::Index cols);

/// Sum over rows of -log softmax(logits)[row, target]. logits is steps x vocab.
Var cross_entropy(const Var &logits, std::span<const int> targets);

inline Var operator+(const Var &a, const Var &b) { return add(a, b); }
inline Var operator-(const Var &a, const Var &b) { return sub(a, b); }
inline Var operator-(const Var &a) { return neg(a); }
inline Var operator*(double c, const Var &a) { return scale(a, c); }
inline Var operator*(const Var &a, double c) { return scale(a, c); }

/// Global L2 norm over a list of values.
double global_norm(std::span<const Var> values);
bool all_finite(const Matrix &m);

} // namespace tavs::ad
