#include "flame/tape.hpp"

#include "flame/errors.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

namespace flame {

double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

Tape::NodeId Tape::push(Matrix v, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(v), Matrix(), std::move(back), false});
    return static_cast<NodeId>(nodes_.size()) - 1;
}

Tape::NodeId Tape::constant(Matrix v) { return push(std::move(v), nullptr); }

Tape::NodeId Tape::param(Matrix v) {
    const NodeId id = push(std::move(v), nullptr);
    nodes_[static_cast<std::size_t>(id)].is_param = true;
    return id;
}

const Matrix& Tape::grad(NodeId id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.grad;
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    const NodeId out = push(value(a) + value(b), nullptr);
    nodes_.back().back = [a, b, out](Tape& t) {
        t.grad_mut(a) += t.grad(out);
        t.grad_mut(b) += t.grad(out);
    };
    return out;
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
    const NodeId out = push(value(a) - value(b), nullptr);
    nodes_.back().back = [a, b, out](Tape& t) {
        t.grad_mut(a) += t.grad(out);
        t.grad_mut(b) -= t.grad(out);
    };
    return out;
}

Tape::NodeId Tape::scale(NodeId a, double s) {
    const NodeId out = push(value(a) * s, nullptr);
    nodes_.back().back = [a, s, out](Tape& t) { t.grad_mut(a) += t.grad(out) * s; };
    return out;
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
    const NodeId out = push(flame::matmul(value(a), value(b)), nullptr);
    nodes_.back().back = [a, b, out](Tape& t) {
        t.grad_mut(a) += flame::matmul(t.grad(out), flame::transpose(t.value(b)));
        t.grad_mut(b) += flame::matmul(flame::transpose(t.value(a)), t.grad(out));
    };
    return out;
}

Tape::NodeId Tape::transpose(NodeId a) {
    const NodeId out = push(flame::transpose(value(a)), nullptr);
    nodes_.back().back = [a, out](Tape& t) {
        t.grad_mut(a) += flame::transpose(t.grad(out));
    };
    return out;
}

Tape::NodeId Tape::hadamard(NodeId a, NodeId b) {
    const NodeId out = push(flame::hadamard(value(a), value(b)), nullptr);
    nodes_.back().back = [a, b, out](Tape& t) {
        t.grad_mut(a) += flame::hadamard(t.grad(out), t.value(b));
        t.grad_mut(b) += flame::hadamard(t.grad(out), t.value(a));
    };
    return out;
}

Tape::NodeId Tape::add_row_broadcast(NodeId a, NodeId b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (bv.rows() != 1 || bv.cols() != av.cols())
        throw precondition_error("add_row_broadcast: b must be 1 x cols(a)");
    Matrix out = av;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, b, id](Tape& t) {
        const Matrix& g = t.grad(id);
        t.grad_mut(a) += g;
        Matrix& gb = t.grad_mut(b);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
    };
    return id;
}

Tape::NodeId Tape::row_softmax(NodeId a) {
    const Matrix& av = value(a);
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
        double mx = av(i, 0);
        for (std::size_t j = 1; j < av.cols(); ++j) mx = std::max(mx, av(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < av.cols(); ++j) {
            out(i, j) = std::exp(av(i, j) - mx);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) /= sum;
    }
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, id](Tape& t) {
        const Matrix& y = t.value(id);
        const Matrix& g = t.grad(id);
        Matrix& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double dotgy = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) dotgy += g(i, j) * y(i, j);
            for (std::size_t j = 0; j < y.cols(); ++j)
                ga(i, j) += y(i, j) * (g(i, j) - dotgy);
        }
    };
    return id;
}

Tape::NodeId Tape::gelu(NodeId a) {
    Matrix out = value(a);
    for (double& v : out.raw()) v = gelu_value(v);
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, id](Tape& t) {
        const Matrix& x = t.value(a);
        const Matrix& g = t.grad(id);
        Matrix& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < x.size(); ++i)
            ga.raw()[i] += g.raw()[i] * gelu_grad(x.raw()[i]);
    };
    return id;
}

Tape::NodeId Tape::softplus(NodeId a) {
    Matrix out = value(a);
    for (double& v : out.raw()) v = stable_softplus(v);
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, id](Tape& t) {
        const Matrix& x = t.value(a);
        const Matrix& g = t.grad(id);
        Matrix& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < x.size(); ++i)
            ga.raw()[i] += g.raw()[i] * sigmoid(x.raw()[i]);
    };
    return id;
}

Tape::NodeId Tape::time_window(NodeId z, std::size_t kappa) {
    if (kappa % 2 == 0) throw precondition_error("time_window: kernel must be odd");
    const Matrix& zv = value(z);
    const std::size_t len = zv.rows(), d = zv.cols();
    const std::size_t half = kappa / 2;
    Matrix out(len, d * kappa);
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t j = 0; j < kappa; ++j) {
            const long long src = static_cast<long long>(t) + static_cast<long long>(j) -
                                  static_cast<long long>(half);
            if (src < 0 || src >= static_cast<long long>(len)) continue;
            for (std::size_t c = 0; c < d; ++c)
                out(t, j * d + c) = zv(static_cast<std::size_t>(src), c);
        }
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [z, id, kappa, len, d, half](Tape& t) {
        const Matrix& g = t.grad(id);
        Matrix& gz = t.grad_mut(z);
        for (std::size_t ti = 0; ti < len; ++ti)
            for (std::size_t j = 0; j < kappa; ++j) {
                const long long src = static_cast<long long>(ti) + static_cast<long long>(j) -
                                      static_cast<long long>(half);
                if (src < 0 || src >= static_cast<long long>(len)) continue;
                for (std::size_t c = 0; c < d; ++c)
                    gz(static_cast<std::size_t>(src), c) += g(ti, j * d + c);
            }
    };
    return id;
}

Tape::NodeId Tape::mean_rows(NodeId a) {
    const Matrix& av = value(a);
    if (av.rows() == 0) throw precondition_error("mean_rows: empty matrix");
    Matrix out(1, av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(0, j) += av(i, j);
    out *= 1.0 / static_cast<double>(av.rows());
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, id](Tape& t) {
        const Matrix& g = t.grad(id);
        Matrix& ga = t.grad_mut(a);
        const double inv = 1.0 / static_cast<double>(ga.rows());
        for (std::size_t i = 0; i < ga.rows(); ++i)
            for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j) * inv;
    };
    return id;
}

Tape::NodeId Tape::mean_all(NodeId a) {
    const Matrix& av = value(a);
    if (av.size() == 0) throw precondition_error("mean_all: empty matrix");
    double s = 0.0;
    for (double v : av.raw()) s += v;
    Matrix out(1, 1);
    out(0, 0) = s / static_cast<double>(av.size());
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, id](Tape& t) {
        Matrix& ga = t.grad_mut(a);
        const double g = t.grad(id)(0, 0) / static_cast<double>(ga.size());
        for (double& v : ga.raw()) v += g;
    };
    return id;
}

Tape::NodeId Tape::sum_all(NodeId a) {
    double s = 0.0;
    for (double v : value(a).raw()) s += v;
    Matrix out(1, 1);
    out(0, 0) = s;
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, id](Tape& t) {
        Matrix& ga = t.grad_mut(a);
        const double g = t.grad(id)(0, 0);
        for (double& v : ga.raw()) v += g;
    };
    return id;
}

Tape::NodeId Tape::gather_cols(NodeId a, std::vector<std::size_t> idx) {
    const Matrix& av = value(a);
    if (av.rows() != 1) throw precondition_error("gather_cols: expects a row vector");
    Matrix out(1, idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) out(0, k) = av(0, idx[k]);
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, id, idx = std::move(idx)](Tape& t) {
        const Matrix& g = t.grad(id);
        Matrix& ga = t.grad_mut(a);
        for (std::size_t k = 0; k < idx.size(); ++k) ga(0, idx[k]) += g(0, k);
    };
    return id;
}

Tape::NodeId Tape::scatter_cols(NodeId a, std::vector<std::size_t> idx, std::size_t n) {
    const Matrix& av = value(a);
    if (av.rows() != 1 || av.cols() != idx.size())
        throw precondition_error("scatter_cols: index/value length mismatch");
    Matrix out(1, n);
    for (std::size_t k = 0; k < idx.size(); ++k) out(0, idx[k]) = av(0, k);
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, id, idx = std::move(idx)](Tape& t) {
        const Matrix& g = t.grad(id);
        Matrix& ga = t.grad_mut(a);
        for (std::size_t k = 0; k < idx.size(); ++k) ga(0, k) += g(0, idx[k]);
    };
    return id;
}

Tape::NodeId Tape::scale_by(NodeId a, NodeId s) {
    if (value(s).rows() != 1 || value(s).cols() != 1)
        throw precondition_error("scale_by: scalar node must be 1x1");
    const NodeId out = push(value(a) * value(s)(0, 0), nullptr);
    nodes_.back().back = [a, s, out](Tape& t) {
        const double sv = t.value(s)(0, 0);
        t.grad_mut(a) += t.grad(out) * sv;
        t.grad_mut(s)(0, 0) += dot(t.grad(out), t.value(a));
    };
    return out;
}

Tape::NodeId Tape::div_by(NodeId a, NodeId s) {
    if (value(s).rows() != 1 || value(s).cols() != 1)
        throw precondition_error("div_by: scalar node must be 1x1");
    const double sv = value(s)(0, 0);
    const NodeId out = push(value(a) * (1.0 / sv), nullptr);
    nodes_.back().back = [a, s, out](Tape& t) {
        const double den = t.value(s)(0, 0);
        t.grad_mut(a) += t.grad(out) * (1.0 / den);
        t.grad_mut(s)(0, 0) -= dot(t.grad(out), t.value(out)) / den;
    };
    return out;
}

Tape::NodeId Tape::sub_broadcast(NodeId a, NodeId s) {
    if (value(s).rows() != 1 || value(s).cols() != 1)
        throw precondition_error("sub_broadcast: scalar node must be 1x1");
    Matrix out = value(a);
    const double sv = value(s)(0, 0);
    for (double& v : out.raw()) v -= sv;
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [a, s, id](Tape& t) {
        const Matrix& g = t.grad(id);
        t.grad_mut(a) += g;
        double sum = 0.0;
        for (double v : g.raw()) sum += v;
        t.grad_mut(s)(0, 0) -= sum;
    };
    return id;
}

Tape::NodeId Tape::sqrt_scalar(NodeId s) {
    if (value(s).rows() != 1 || value(s).cols() != 1)
        throw precondition_error("sqrt_scalar: scalar node must be 1x1");
    Matrix out(1, 1);
    out(0, 0) = std::sqrt(value(s)(0, 0));
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [s, id](Tape& t) {
        const double y = t.value(id)(0, 0);
        if (y > 0.0) t.grad_mut(s)(0, 0) += t.grad(id)(0, 0) * 0.5 / y;
    };
    return id;
}

Tape::NodeId Tape::softmax_xent(NodeId logits, std::size_t label) {
    const Matrix& lv = value(logits);
    if (lv.rows() != 1) throw precondition_error("softmax_xent: expects 1xC logits");
    if (label >= lv.cols()) throw precondition_error("softmax_xent: label out of range");
    double mx = lv(0, 0);
    for (std::size_t j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv(0, j));
    double lse = 0.0;
    for (std::size_t j = 0; j < lv.cols(); ++j) lse += std::exp(lv(0, j) - mx);
    lse = mx + std::log(lse);
    Matrix out(1, 1);
    out(0, 0) = lse - lv(0, label);
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [logits, id, label, lse](Tape& t) {
        const Matrix& lv2 = t.value(logits);
        Matrix& gl = t.grad_mut(logits);
        const double g = t.grad(id)(0, 0);
        for (std::size_t j = 0; j < lv2.cols(); ++j) {
            const double p = std::exp(lv2(0, j) - lse);
            gl(0, j) += g * (p - (j == label ? 1.0 : 0.0));
        }
    };
    return id;
}

Tape::NodeId Tape::bce_logits(NodeId logits, std::vector<double> targets) {
    const Matrix& lv = value(logits);
    if (lv.rows() != 1 || lv.cols() != targets.size())
        throw precondition_error("bce_logits: logits/targets length mismatch");
    double loss = 0.0;
    for (std::size_t j = 0; j < targets.size(); ++j) {
        const double x = lv(0, j);
        loss += std::max(x, 0.0) - x * targets[j] + std::log1p(std::exp(-std::fabs(x)));
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(targets.size());
    const NodeId id = push(std::move(out), nullptr);
    nodes_.back().back = [logits, id, targets = std::move(targets)](Tape& t) {
        const Matrix& lv2 = t.value(logits);
        Matrix& gl = t.grad_mut(logits);
        const double g = t.grad(id)(0, 0) / static_cast<double>(targets.size());
        for (std::size_t j = 0; j < targets.size(); ++j)
            gl(0, j) += g * (sigmoid(lv2(0, j)) - targets[j]);
    };
    return id;
}

void Tape::backward(NodeId loss) {
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1)
        throw contract_error("Tape::backward: loss must be a scalar node");
    if (ran_backward_) throw contract_error("Tape::backward: tape already consumed");
    ran_backward_ = true;
    for (Node& n : nodes_) n.grad = Matrix(n.value.rows(), n.value.cols());
    grad_mut(loss)(0, 0) = 1.0;
    for (NodeId i = loss; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.back) n.back(*this);
    }
}

} // namespace flame
