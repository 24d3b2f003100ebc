#pragma once

#include "flame/matrix.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace flame {

// Reverse-mode tape over Matrix-valued nodes. One training step owns one
// tape: record the forward graph, call backward(loss) once, read gradients
// off the parameter nodes. Scalars are 1x1 matrices.
class Tape {
public:
    using NodeId = int;

    NodeId constant(Matrix v);
    NodeId param(Matrix v);

    const Matrix& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    // Zero until backward() has run; unreachable parameters stay exactly zero.
    const Matrix& grad(NodeId id) const;
    std::size_t size() const { return nodes_.size(); }

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId scale(NodeId a, double s);
    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId hadamard(NodeId a, NodeId b);
    // a (LxP) + row vector b (1xP) added to every row.
    NodeId add_row_broadcast(NodeId a, NodeId b);
    NodeId row_softmax(NodeId a);
    NodeId gelu(NodeId a);
    NodeId softplus(NodeId a);
    // Unfold a length-L sequence (Lxd) into same-padded windows (L x d*kappa);
    // window column j*d+c holds channel c at time offset j - (kappa-1)/2.
    NodeId time_window(NodeId z, std::size_t kappa);
    NodeId mean_rows(NodeId a);  // 1 x cols
    NodeId mean_all(NodeId a);   // 1 x 1
    NodeId sum_all(NodeId a);    // 1 x 1
    NodeId gather_cols(NodeId a, std::vector<std::size_t> idx);
    NodeId scatter_cols(NodeId a, std::vector<std::size_t> idx, std::size_t n);
    // Elementwise combinations with a 1x1 scalar node.
    NodeId scale_by(NodeId a, NodeId s);
    NodeId div_by(NodeId a, NodeId s);
    NodeId sub_broadcast(NodeId a, NodeId s);
    NodeId sqrt_scalar(NodeId s);
    // Softmax cross-entropy of a 1xC logit row against an integer label.
    NodeId softmax_xent(NodeId logits, std::size_t label);
    // Mean binary cross-entropy of 1xC logits against {0,1} targets.
    NodeId bce_logits(NodeId logits, std::vector<double> targets);

    void backward(NodeId loss);

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void(Tape&)> back;
        bool is_param = false;
    };

    NodeId push(Matrix v, std::function<void(Tape&)> back);
    Matrix& grad_mut(NodeId id) { return nodes_[static_cast<std::size_t>(id)].grad; }

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

// Numerically stable scalar helpers shared by tape ops and metric code.
double stable_softplus(double x);
double sigmoid(double x);
double gelu_value(double x);
double gelu_grad(double x);

} // namespace flame
