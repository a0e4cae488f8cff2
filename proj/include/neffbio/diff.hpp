// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over dense row-major f64 matrices.
//
// A Graph is a tape: every operation appends a node holding its value, the
// ids of its parents and a closure that pushes the node's gradient back to
// them. Nodes are only ever appended, so the node order is a topological
// order and backward() walks it in reverse. Parameters live outside the
// graph (in a ParameterSet) so that one set of weights can be reused by many
// short-lived graphs; backward() accumulates leaf gradients into them.

#pragma once

#include "neffbio/errors.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace neffbio {

using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace diff {

enum class Op : std::uint8_t {
    Constant,
    Parameter,
    Add,
    Sub,
    Mul,
    MatMul,
    Linear,
    Broadcast,
    Concat,
    Slice,
    Sum,
    Mean,
    Max,
    Relu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Softmax,
    LayerNorm,
    Scale,
    Shift,
    Abs,
    Square,
    Sqrt,
    Reshape,
    Transpose,
    GatherRows,
    ScatterRows,
    Custom,
};

std::string_view op_name(Op op);

using NodeId = std::size_t;

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
};

// Owns trainable tensors. Addresses are stable for the lifetime of the set.
class ParameterSet {
public:
    Parameter& add(std::string name, Tensor init);
    Parameter& get(std::string_view name);
    const Parameter& get(std::string_view name) const;
    Parameter* find(std::string_view name);
    const Parameter* find(std::string_view name) const;

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    Parameter& operator[](std::size_t i) { return params_[i]; }
    const Parameter& operator[](std::size_t i) const { return params_[i]; }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();

private:
    std::deque<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

class Graph;

// Lightweight handle to a node. Copyable; only valid while its graph lives.
struct Var {
    Graph* graph = nullptr;
    NodeId id = 0;

    const Tensor& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, NodeId)>;

    Var constant(Tensor value);
    Var param(Parameter& p);

    // Appends a node with a caller-provided value and backward closure. The
    // closure is invoked only when the node has received a gradient and at
    // least one parent requires one.
    Var custom(Op tag, std::vector<NodeId> parents, Tensor value, BackwardFn backward);

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    // Gradient of the last backward() pass; zeros for nodes it did not reach.
    Tensor grad(NodeId id) const;
    // Mutable gradient buffer, allocated (zeroed) on first use.
    Tensor& grad_ref(NodeId id);
    // Adds `delta` into the gradient of `id`; assigns on first touch, which
    // saves zero-filling large buffers.
    template <class Expr>
    void accumulate(NodeId id, const Expr& delta) {
        Tensor& gr = nodes_[id].grad;
        if (gr.size() == 0) {
            gr.noalias() = delta;
        } else {
            gr.noalias() += delta;
        }
    }
    bool has_grad(NodeId id) const { return nodes_[id].grad.size() != 0; }
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    Op op(NodeId id) const { return nodes_[id].op; }
    const std::vector<NodeId>& parents(NodeId id) const { return nodes_[id].parents; }
    std::size_t size() const { return nodes_.size(); }

    // Populates d(seed * loss)/d(node) for every ancestor of a scalar loss and
    // adds the parameter-leaf gradients into Parameter::grad.
    void backward(Var loss, double seed = 1.0);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        Op op = Op::Constant;
        std::vector<NodeId> parents;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
};

// Elementwise with numpy-style broadcasting restricted to 2D: each operand
// dimension must either match or be 1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var matmul(Var a, Var b);
// x * W + b, with b a 1 x out row broadcast over rows.
Var linear(Var x, Var weight, Var bias);
Var broadcast(Var x, Eigen::Index rows, Eigen::Index cols);
enum class Axis { Rows, Cols };
// Axis::Cols places blocks side by side, Axis::Rows stacks them.
Var concat(std::span<const Var> parts, Axis axis);
Var slice(Var x, Eigen::Index row0, Eigen::Index nrows, Eigen::Index col0, Eigen::Index ncols);

Var sum(Var x);
Var mean(Var x);
Var max(Var x);
// Per-row reductions, producing rows x 1.
Var row_sum(Var x);
Var row_mean(Var x);
Var row_max(Var x);
// Per-column reductions, producing 1 x cols.
Var col_sum(Var x);
Var col_mean(Var x);

Var relu(Var x);
// log(1 + exp(beta * x)) / beta
Var softplus(Var x, double beta = 1.0);
Var sigmoid(Var x);
Var exp(Var x);
Var log(Var x);
Var sin(Var x);
Var cos(Var x);
Var abs(Var x);
Var square(Var x);
Var sqrt(Var x);
Var scale(Var x, double factor);
Var shift(Var x, double offset);
// Row-wise softmax.
Var softmax(Var x);

enum class NormAxis {
    PerRow,    // normalise each row over its columns (transformer layer norm)
    PerColumn  // normalise each column over the rows (per-channel over sites)
};
// gamma and beta are 1 x cols.
Var layer_norm(Var x, Var gamma, Var beta, NormAxis axis = NormAxis::PerRow, double eps = 1e-5);

Var reshape(Var x, Eigen::Index rows, Eigen::Index cols);
Var transpose(Var x);
Var gather_rows(Var x, std::span<const Eigen::Index> rows);
// Output has out_rows rows; row i of x is added into row index[i].
Var scatter_rows(Var x, std::span<const Eigen::Index> index, Eigen::Index out_rows);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace diff
}  // namespace neffbio
