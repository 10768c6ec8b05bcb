#include "tavs/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace tavs::ad {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
std::atomic<std::uint64_t> g_next_epoch{1};
thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_epoch = 0;

class EpochScope {
  public:
    explicit EpochScope(std::uint64_t epoch) : previous_(t_epoch) { t_epoch = epoch; }
    ~EpochScope() { t_epoch = previous_; }
    EpochScope(const EpochScope &) = delete;
    EpochScope &operator=(const EpochScope &) = delete;

  private:
    std::uint64_t previous_;
};

void require_same_shape(const Var &a, const Var &b, const char *op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw AutodiffError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()));
    }
}

bool needs(std::span<const Var> inputs, std::size_t i) { return detail::grad_needed(inputs[i]); }

} // namespace

bool detail::grad_needed(const Var &v) {
    return v.requires_grad() && (t_epoch == 0 || v.node()->needed_epoch == t_epoch);
}

bool all_finite(const Matrix &m) { return m.allFinite(); }

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
    if (!value.allFinite()) {
        throw AutodiffError("tensor contains non-finite entries");
    }
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
}

Var Var::scalar(double v, bool requires_grad) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return Var(std::move(m), requires_grad);
}

Var Var::vector(const Eigen::VectorXd &v, bool requires_grad) { return Var(Matrix(v), requires_grad); }

Var Var::zeros(Eigen::Index rows, Eigen::Index cols) { return Var(Matrix::Zero(rows, cols)); }

const Matrix &Var::value() const {
    if (!node_) {
        throw AutodiffError("use of undefined Var");
    }
    return node_->value;
}

double Var::item() const {
    const auto &v = value();
    if (v.size() != 1) {
        throw AutodiffError("item() on non-scalar tensor");
    }
    return v(0, 0);
}

Var Var::detach() const {
    Var out;
    out.node_ = std::make_shared<detail::Node>();
    out.node_->value = value();
    out.node_->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    return out;
}

Var Var::detach_requires_grad() const {
    Var out = detach();
    out.node_->requires_grad = true;
    return out;
}

Var Var::make_op(Matrix value, std::vector<Var> inputs, detail::BackwardFn backward) {
    Var out;
    out.node_ = std::make_shared<detail::Node>();
    out.node_->value = std::move(value);
    out.node_->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    if (!GradMode::enabled()) {
        return out;
    }
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var &v) { return v.requires_grad(); });
    if (!any) {
        return out;
    }
    out.node_->requires_grad = true;
    out.node_->inputs = std::move(inputs);
    out.node_->backward = std::move(backward);
    return out;
}

GradMode::GradMode(bool enabled) : previous_(t_grad_enabled) { t_grad_enabled = enabled; }
GradMode::~GradMode() { t_grad_enabled = previous_; }
bool GradMode::enabled() { return t_grad_enabled; }

std::vector<Var> gradient(const Var &loss, std::span<const Var> params, const GradOptions &options) {
    if (!loss.defined() || loss.rows() != 1 || loss.cols() != 1) {
        throw AutodiffError("gradient: loss must be a 1x1 tensor");
    }
    const bool create_graph = options.create_graph;
    const bool retain = options.retain_graph.value_or(create_graph);
    const std::uint64_t epoch = g_next_epoch.fetch_add(1, std::memory_order_relaxed);

    // Iterative post-order DFS over requires_grad edges: inputs precede outputs.
    std::vector<std::shared_ptr<detail::Node>> order;
    if (loss.requires_grad()) {
        std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
        loss.node_->visit_epoch = epoch;
        stack.emplace_back(loss.node_, 0);
        while (!stack.empty()) {
            auto &[n, next] = stack.back();
            if (next == 0 && n->released) {
                throw AutodiffError("gradient: graph already consumed; pass retain_graph to backpropagate twice");
            }
            if (next < n->inputs.size()) {
                const auto &in = n->inputs[next++].node_;
                if (in->requires_grad && in->visit_epoch != epoch) {
                    in->visit_epoch = epoch;
                    stack.emplace_back(in, 0);
                }
                continue;
            }
            order.push_back(std::move(n));
            stack.pop_back();
        }
    }
    for (const Var &p : params) {
        if (!p.defined() || !p.requires_grad() || (p.node_->visit_epoch != epoch && !options.allow_unused)) {
            throw AutodiffError("gradient: parameter is not on the tape of this loss");
        }
        p.node_->needed_epoch = epoch;
    }
    // A node needs a gradient only if some parameter lies below it.
    for (const auto &n : order) {
        if (n->needed_epoch == epoch) {
            continue;
        }
        for (const Var &in : n->inputs) {
            if (in.node_->visit_epoch == epoch && in.node_->needed_epoch == epoch) {
                n->needed_epoch = epoch;
                break;
            }
        }
    }

    std::vector<Var> out;
    out.reserve(params.size());
    {
        GradMode mode(create_graph);
        EpochScope scope(epoch);
        if (!order.empty()) {
            order.back()->grad = std::make_unique<Var>(Var::make_op(Matrix::Ones(1, 1), {}, nullptr));
        }
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const auto &n = *it;
            if (!n->grad || !n->backward || n->needed_epoch != epoch) {
                continue;
            }
            Var self;
            self.node_ = n;
            std::vector<Var> in_grads = n->backward(self, n->inputs, *n->grad);
            for (std::size_t i = 0; i < n->inputs.size(); ++i) {
                detail::Node *in = n->inputs[i].node_.get();
                if (!in_grads[i].defined() || in->visit_epoch != epoch || in->needed_epoch != epoch) {
                    continue;
                }
                if (in->grad) {
                    *in->grad = add(*in->grad, in_grads[i]);
                } else {
                    in->grad = std::make_unique<Var>(std::move(in_grads[i]));
                }
            }
            if (std::find_if(params.begin(), params.end(), [&n](const Var &p) { return p.node() == n.get(); }) ==
                params.end()) {
                n->grad.reset();
            }
        }
        for (const Var &p : params) {
            auto &g = p.node_->grad;
            if (!g || p.node_->visit_epoch != epoch) {
                out.push_back(Var::zeros(p.rows(), p.cols()));
            } else {
                out.push_back(create_graph ? *g : g->detach());
            }
        }
        for (const auto &n : order) {
            n->grad.reset();
        }
    }

    if (!retain) {
        for (const auto &n : order) {
            if (n->backward) {
                n->backward = nullptr;
                n->released = true;
            }
        }
    }
    return out;
}

Var add(const Var &a, const Var &b) {
    require_same_shape(a, b, "add");
    return Var::make_op(a.value() + b.value(), {a, b},
                        [](const Var &, std::span<const Var>, const Var &g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var &a, const Var &b) {
    require_same_shape(a, b, "sub");
    return Var::make_op(a.value() - b.value(), {a, b}, [](const Var &, std::span<const Var> in, const Var &g) {
        return std::vector<Var>{g, needs(in, 1) ? neg(g) : Var{}};
    });
}

Var neg(const Var &a) {
    return Var::make_op(-a.value(), {a},
                        [](const Var &, std::span<const Var>, const Var &g) { return std::vector<Var>{neg(g)}; });
}

Var scale(const Var &a, double factor) {
    return Var::make_op(a.value() * factor, {a}, [factor](const Var &, std::span<const Var>, const Var &g) {
        return std::vector<Var>{scale(g, factor)};
    });
}

Var add_scalar(const Var &a, double c) {
    Matrix v = a.value().array() + c;
    return Var::make_op(std::move(v), {a},
                        [](const Var &, std::span<const Var>, const Var &g) { return std::vector<Var>{g}; });
}

Var cwise_product(const Var &a, const Var &b) {
    require_same_shape(a, b, "cwise_product");
    return Var::make_op(a.value().cwiseProduct(b.value()), {a, b},
                        [](const Var &, std::span<const Var> in, const Var &g) {
                            return std::vector<Var>{needs(in, 0) ? cwise_product(g, in[1]) : Var{},
                                                    needs(in, 1) ? cwise_product(g, in[0]) : Var{}};
                        });
}

Var reciprocal(const Var &a) {
    return Var::make_op(a.value().cwiseInverse(), {a}, [](const Var &self, std::span<const Var>, const Var &g) {
        return std::vector<Var>{neg(cwise_product(g, cwise_product(self, self)))};
    });
}

Var exp(const Var &a) {
    return Var::make_op(a.value().array().exp().matrix(), {a},
                        [](const Var &self, std::span<const Var>, const Var &g) {
                            return std::vector<Var>{cwise_product(g, self)};
                        });
}

Var log(const Var &a) {
    return Var::make_op(a.value().array().log().matrix(), {a}, [](const Var &, std::span<const Var> in, const Var &g) {
        return std::vector<Var>{cwise_product(g, reciprocal(in[0]))};
    });
}

Var sigmoid(const Var &a) {
    Matrix v = (1.0 + (-a.value().array()).exp()).inverse().matrix();
    return Var::make_op(std::move(v), {a}, [](const Var &self, std::span<const Var>, const Var &g) {
        return std::vector<Var>{cwise_product(g, cwise_product(self, add_scalar(neg(self), 1.0)))};
    });
}

Var tanh(const Var &a) {
    return Var::make_op(a.value().array().tanh().matrix(), {a},
                        [](const Var &self, std::span<const Var>, const Var &g) {
                            return std::vector<Var>{
                                cwise_product(g, add_scalar(neg(cwise_product(self, self)), 1.0))};
                        });
}

Var matmul(const Var &a, const Var &b) { return matmul(a, b, false, false); }

Var matmul(const Var &a, const Var &b, bool ta, bool tb) {
    const auto inner_a = ta ? a.rows() : a.cols();
    const auto inner_b = tb ? b.cols() : b.rows();
    if (inner_a != inner_b) {
        throw AutodiffError("matmul: inner dimensions differ (" + std::to_string(inner_a) + " vs " +
                            std::to_string(inner_b) + ")");
    }
    Matrix out;
    if (!ta && !tb) {
        out.noalias() = a.value() * b.value();
    } else if (!ta) {
        out.noalias() = a.value() * b.value().transpose();
    } else if (!tb) {
        out.noalias() = a.value().transpose() * b.value();
    } else {
        out.noalias() = a.value().transpose() * b.value().transpose();
    }
    return Var::make_op(std::move(out), {a, b}, [ta, tb](const Var &, std::span<const Var> in, const Var &g) {
        const Var &x = in[0];
        const Var &y = in[1];
        Var ga;
        Var gb;
        if (!ta && !tb) {
            ga = needs(in, 0) ? matmul(g, y, false, true) : Var{};
            gb = needs(in, 1) ? matmul(x, g, true, false) : Var{};
        } else if (!ta) {
            ga = needs(in, 0) ? matmul(g, y, false, false) : Var{};
            gb = needs(in, 1) ? matmul(g, x, true, false) : Var{};
        } else if (!tb) {
            ga = needs(in, 0) ? matmul(y, g, false, true) : Var{};
            gb = needs(in, 1) ? matmul(x, g, false, false) : Var{};
        } else {
            ga = needs(in, 0) ? matmul(y, g, true, true) : Var{};
            gb = needs(in, 1) ? matmul(g, x, true, true) : Var{};
        }
        return std::vector<Var>{ga, gb};
    });
}

Var transpose(const Var &a) {
    return Var::make_op(a.value().transpose(), {a}, [](const Var &, std::span<const Var>, const Var &g) {
        return std::vector<Var>{transpose(g)};
    });
}

Var sum(const Var &a) {
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    const auto r = a.rows();
    const auto c = a.cols();
    return Var::make_op(std::move(v), {a}, [r, c](const Var &, std::span<const Var>, const Var &g) {
        return std::vector<Var>{broadcast(g, r, c)};
    });
}

Var broadcast(const Var &s, Eigen::Index rows, Eigen::Index cols) {
    if (s.size() != 1) {
        throw AutodiffError("broadcast: expects a 1x1 tensor");
    }
    return Var::make_op(Matrix::Constant(rows, cols, s.value()(0, 0)), {s},
                        [](const Var &, std::span<const Var>, const Var &g) { return std::vector<Var>{sum(g)}; });
}

Var row_sum(const Var &a) {
    const auto c = a.cols();
    return Var::make_op(a.value().rowwise().sum(), {a}, [c](const Var &, std::span<const Var>, const Var &g) {
        return std::vector<Var>{broadcast_cols(g, c)};
    });
}

Var broadcast_cols(const Var &v, Eigen::Index cols) {
    if (v.cols() != 1) {
        throw AutodiffError("broadcast_cols: expects a column vector");
    }
    Matrix out = v.value().replicate(1, cols);
    return Var::make_op(std::move(out), {v},
                        [](const Var &, std::span<const Var>, const Var &g) { return std::vector<Var>{row_sum(g)}; });
}

Var concat(std::span<const Var> parts, Axis axis) {
    if (parts.empty()) {
        throw AutodiffError("concat: no inputs");
    }
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    for (const Var &p : parts) {
        if (axis == Axis::Rows) {
            if (p.cols() != parts[0].cols()) {
                throw AutodiffError("concat: column counts differ");
            }
            rows += p.rows();
            cols = p.cols();
        } else {
            if (p.rows() != parts[0].rows()) {
                throw AutodiffError("concat: row counts differ");
            }
            cols += p.cols();
            rows = p.rows();
        }
    }
    Matrix out(rows, cols);
    std::vector<Eigen::Index> offsets;
    offsets.reserve(parts.size());
    Eigen::Index offset = 0;
    for (const Var &p : parts) {
        offsets.push_back(offset);
        if (axis == Axis::Rows) {
            out.block(offset, 0, p.rows(), p.cols()) = p.value();
            offset += p.rows();
        } else {
            out.block(0, offset, p.rows(), p.cols()) = p.value();
            offset += p.cols();
        }
    }
    return Var::make_op(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                        [axis, offsets](const Var &, std::span<const Var> in, const Var &g) {
                            std::vector<Var> grads(in.size());
                            for (std::size_t i = 0; i < in.size(); ++i) {
                                if (!needs(in, i)) {
                                    continue;
                                }
                                grads[i] = axis == Axis::Rows
                                               ? slice(g, offsets[i], 0, in[i].rows(), in[i].cols())
                                               : slice(g, 0, offsets[i], in[i].rows(), in[i].cols());
                            }
                            return grads;
                        });
}

Var slice(const Var &a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
    if (row < 0 || col < 0 || row + rows > a.rows() || col + cols > a.cols()) {
        throw AutodiffError("slice: block out of range");
    }
    const auto r = a.rows();
    const auto c = a.cols();
    return Var::make_op(a.value().block(row, col, rows, cols), {a},
                        [=](const Var &, std::span<const Var>, const Var &g) {
                            return std::vector<Var>{pad(g, row, col, r, c)};
                        });
}

Var pad(const Var &a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
    if (row < 0 || col < 0 || row + a.rows() > rows || col + a.cols() > cols) {
        throw AutodiffError("pad: block out of range");
    }
    Matrix out = Matrix::Zero(rows, cols);
    out.block(row, col, a.rows(), a.cols()) = a.value();
    const auto r = a.rows();
    const auto c = a.cols();
    return Var::make_op(std::move(out), {a}, [=](const Var &, std::span<const Var>, const Var &g) {
        return std::vector<Var>{slice(g, row, col, r, c)};
    });
}

Var row(const Var &a, Eigen::Index index) {
    if (index < 0 || index >= a.rows()) {
        throw AutodiffError("row: index out of range");
    }
    const auto r = a.rows();
    const auto c = a.cols();
    return Var::make_op(a.value().row(index).transpose(), {a},
                        [=](const Var &, std::span<const Var>, const Var &g) {
                            return std::vector<Var>{pad(transpose(g), index, 0, r, c)};
                        });
}

Var softmax_rows(const Var &x) {
    const Matrix &v = x.value();
    Matrix out(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double m = v.row(i).maxCoeff();
        out.row(i) = (v.row(i).array() - m).exp().matrix();
        out.row(i) /= out.row(i).sum();
    }
    const auto c = v.cols();
    return Var::make_op(std::move(out), {x}, [c](const Var &self, std::span<const Var>, const Var &g) {
        Var inner = broadcast_cols(row_sum(cwise_product(g, self)), c);
        return std::vector<Var>{cwise_product(self, sub(g, inner))};
    });
}

Var log_softmax_rows(const Var &x) {
    const Matrix &v = x.value();
    Matrix out(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double m = v.row(i).maxCoeff();
        const double lse = m + std::log((v.row(i).array() - m).exp().sum());
        out.row(i) = (v.row(i).array() - lse).matrix();
    }
    const auto c = v.cols();
    return Var::make_op(std::move(out), {x}, [c](const Var &self, std::span<const Var>, const Var &g) {
        return std::vector<Var>{sub(g, cwise_product(exp(self), broadcast_cols(row_sum(g), c)))};
    });
}

Var pick(const Var &a, std::span<const int> index) {
    if (static_cast<Eigen::Index>(index.size()) != a.rows()) {
        throw AutodiffError("pick: one index per row required");
    }
    Matrix out(a.rows(), 1);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const int k = index[static_cast<std::size_t>(i)];
        if (k < 0 || k >= a.cols()) {
            throw AutodiffError("pick: index " + std::to_string(k) + " out of range");
        }
        out(i, 0) = a.value()(i, k);
    }
    std::vector<int> idx(index.begin(), index.end());
    const auto c = a.cols();
    return Var::make_op(std::move(out), {a}, [idx, c](const Var &, std::span<const Var>, const Var &g) {
        return std::vector<Var>{scatter(g, idx, c)};
    });
}

Var scatter(const Var &v, std::span<const int> index, Eigen::Index cols) {
    if (v.cols() != 1 || static_cast<Eigen::Index>(index.size()) != v.rows()) {
        throw AutodiffError("scatter: expects a column with one index per row");
    }
    Matrix out = Matrix::Zero(v.rows(), cols);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        out(i, index[static_cast<std::size_t>(i)]) = v.value()(i, 0);
    }
    std::vector<int> idx(index.begin(), index.end());
    return Var::make_op(std::move(out), {v}, [idx](const Var &, std::span<const Var>, const Var &g) {
        return std::vector<Var>{pick(g, idx)};
    });
}

Var cross_entropy(const Var &logits, std::span<const int> targets) {
    for (int t : targets) {
        if (t < 0 || t >= logits.cols()) {
            throw AutodiffError("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of size " +
                                std::to_string(logits.cols()));
        }
    }
    return neg(sum(pick(log_softmax_rows(logits), targets)));
}

double global_norm(std::span<const Var> values) {
    double sq = 0.0;
    for (const Var &v : values) {
        sq += v.value().squaredNorm();
    }
    return std::sqrt(sq);
}

} // namespace tavs::ad
