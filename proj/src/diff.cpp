// Copyright Contributors to the neffbio project
// SPDX-License-Identifier: Apache-2.0

#include "neffbio/diff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace neffbio::diff {

namespace {

std::string shape_str(const Tensor& t) {
    std::ostringstream os;
    os << t.rows() << "x" << t.cols();
    return os.str();
}

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

Graph& graph_of(Var a, Var b) {
    if (a.graph == nullptr || a.graph != b.graph) {
        throw std::invalid_argument("operands belong to different graphs");
    }
    return *a.graph;
}

Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b, bool& ok) {
    if (a == b) return a;
    if (a == 1) return b;
    if (b == 1) return a;
    ok = false;
    return 0;
}

// Replicates t to rows x cols; t dims must be equal or 1.
Tensor expand(const Tensor& t, Eigen::Index rows, Eigen::Index cols) {
    if (t.rows() == rows && t.cols() == cols) return t;
    return t.replicate(rows / t.rows(), cols / t.cols());
}

// Sums g down to the shape of a broadcast operand.
Tensor reduce_to(const Tensor& g, Eigen::Index rows, Eigen::Index cols) {
    if (g.rows() == rows && g.cols() == cols) return g;
    if (rows == 1 && cols == 1) return Tensor::Constant(1, 1, g.sum());
    if (rows == 1) return g.colwise().sum();
    return g.rowwise().sum();
}

template <class Fwd, class Bwd>
Var unary(Var x, Op op, Fwd fwd, Bwd local_grad) {
    Graph& g = *x.graph;
    Tensor y = x.value().unaryExpr(fwd);
    const NodeId xi = x.id;
    return g.custom(op, {xi}, std::move(y), [xi, local_grad](Graph& gr, NodeId self) {
        const Tensor& xv = gr.value(xi);
        const Tensor& yv = gr.value(self);
        const Tensor& gy = gr.grad_ref(self);
        Tensor& gx = gr.grad_ref(xi);
        gx.array() += gy.array() * local_grad(xv.array(), yv.array());
    });
}

}  // namespace

std::string_view op_name(Op op) {
    switch (op) {
        case Op::Constant: return "constant";
        case Op::Parameter: return "parameter";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::MatMul: return "matmul";
        case Op::Linear: return "linear";
        case Op::Broadcast: return "broadcast";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Max: return "max";
        case Op::Relu: return "relu";
        case Op::Softplus: return "softplus";
        case Op::Sigmoid: return "sigmoid";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sin: return "sin";
        case Op::Cos: return "cos";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layer-norm";
        case Op::Scale: return "scale";
        case Op::Shift: return "shift";
        case Op::Abs: return "abs";
        case Op::Square: return "square";
        case Op::Sqrt: return "sqrt";
        case Op::Reshape: return "reshape";
        case Op::Transpose: return "transpose";
        case Op::GatherRows: return "gather-rows";
        case Op::ScatterRows: return "scatter-rows";
        case Op::Custom: return "custom";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(std::string name, Tensor init) {
    if (index_.count(name) != 0) {
        throw std::invalid_argument("duplicate parameter name: " + name);
    }
    index_.emplace(name, params_.size());
    Parameter& p = params_.emplace_back();
    p.name = std::move(name);
    p.grad = Tensor::Zero(init.rows(), init.cols());
    p.value = std::move(init);
    return p;
}

Parameter* ParameterSet::find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParameterSet::find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter& ParameterSet::get(std::string_view name) {
    Parameter* p = find(name);
    if (p == nullptr) throw std::out_of_range("unknown parameter: " + std::string(name));
    return *p;
}

const Parameter& ParameterSet::get(std::string_view name) const {
    const Parameter* p = find(name);
    if (p == nullptr) throw std::out_of_range("unknown parameter: " + std::string(name));
    return *p;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph->value(id); }

Var Graph::constant(Tensor value) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.op = Op::Constant;
    return Var{this, nodes_.size() - 1};
}

Var Graph::param(Parameter& p) {
    Node& n = nodes_.emplace_back();
    n.value = p.value;
    n.op = Op::Parameter;
    n.param = &p;
    n.requires_grad = true;
    return Var{this, nodes_.size() - 1};
}

Var Graph::custom(Op tag, std::vector<NodeId> parents, Tensor value, BackwardFn backward) {
    bool needs = false;
    for (NodeId p : parents) {
        if (p >= nodes_.size()) throw std::out_of_range("parent id beyond graph size");
        needs = needs || nodes_[p].requires_grad;
    }
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.op = tag;
    n.parents = std::move(parents);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    return Var{this, nodes_.size() - 1};
}

Tensor Graph::grad(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

Tensor& Graph::grad_ref(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Graph::backward(Var loss, double seed) {
    if (loss.graph != this) throw std::invalid_argument("backward: loss from another graph");
    const Tensor& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(lv));
    }
    for (Node& n : nodes_) n.grad.resize(0, 0);
    grad_ref(loss.id)(0, 0) = seed;
    for (NodeId i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.size() == 0 || !n.requires_grad || !n.backward) continue;
        n.backward(*this, i);
    }
    for (Node& n : nodes_) {
        if (n.param != nullptr && n.grad.size() != 0) n.param->grad += n.grad;
    }
}

// ---------------------------------------------------------------------------
// Binary elementwise

namespace {

enum class Binary { Add, Sub, Mul };

Var binary(Var a, Var b, Binary kind) {
    Graph& g = graph_of(a, b);
    const Op op = kind == Binary::Add ? Op::Add : kind == Binary::Sub ? Op::Sub : Op::Mul;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    bool ok = true;
    const Eigen::Index rows = broadcast_dim(av.rows(), bv.rows(), ok);
    const Eigen::Index cols = broadcast_dim(av.cols(), bv.cols(), ok);
    if (!ok) shape_error(op, av, bv);

    Tensor y;
    const bool same = av.rows() == bv.rows() && av.cols() == bv.cols();
    if (same) {
        switch (kind) {
            case Binary::Add: y = av + bv; break;
            case Binary::Sub: y = av - bv; break;
            case Binary::Mul: y = av.cwiseProduct(bv); break;
        }
    } else {
        const Tensor ae = expand(av, rows, cols);
        const Tensor be = expand(bv, rows, cols);
        switch (kind) {
            case Binary::Add: y = ae + be; break;
            case Binary::Sub: y = ae - be; break;
            case Binary::Mul: y = ae.cwiseProduct(be); break;
        }
    }
    const NodeId ai = a.id, bi = b.id;
    return g.custom(op, {ai, bi}, std::move(y), [ai, bi, kind](Graph& gr, NodeId self) {
        const Tensor& gy = gr.grad_ref(self);
        const Eigen::Index rows = gy.rows(), cols = gy.cols();
        const Tensor& av = gr.value(ai);
        const Tensor& bv = gr.value(bi);
        const bool same = av.rows() == rows && av.cols() == cols && bv.rows() == rows && bv.cols() == cols;
        if (same) {
            if (gr.requires_grad(ai)) {
                if (kind == Binary::Mul) {
                    gr.accumulate(ai, gy.cwiseProduct(bv));
                } else {
                    gr.accumulate(ai, gy);
                }
            }
            if (gr.requires_grad(bi)) {
                if (kind == Binary::Mul) {
                    gr.accumulate(bi, gy.cwiseProduct(av));
                } else if (kind == Binary::Add) {
                    gr.accumulate(bi, gy);
                } else {
                    gr.accumulate(bi, -gy);
                }
            }
            return;
        }
        if (gr.requires_grad(ai)) {
            Tensor& ga = gr.grad_ref(ai);
            if (kind == Binary::Mul) {
                ga += reduce_to(gy.cwiseProduct(expand(bv, rows, cols)), av.rows(), av.cols());
            } else {
                ga += reduce_to(gy, av.rows(), av.cols());
            }
        }
        if (gr.requires_grad(bi)) {
            Tensor& gb = gr.grad_ref(bi);
            if (kind == Binary::Mul) {
                gb += reduce_to(gy.cwiseProduct(expand(av, rows, cols)), bv.rows(), bv.cols());
            } else if (kind == Binary::Add) {
                gb += reduce_to(gy, bv.rows(), bv.cols());
            } else {
                gb -= reduce_to(gy, bv.rows(), bv.cols());
            }
        }
    });
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, Binary::Add); }
Var sub(Var a, Var b) { return binary(a, b, Binary::Sub); }
Var mul(Var a, Var b) { return binary(a, b, Binary::Mul); }

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    if (a.cols() != b.rows()) shape_error(Op::MatMul, a.value(), b.value());
    Tensor y = a.value() * b.value();
    const NodeId ai = a.id, bi = b.id;
    return g.custom(Op::MatMul, {ai, bi}, std::move(y), [ai, bi](Graph& gr, NodeId self) {
        const Tensor& gy = gr.grad_ref(self);
        if (gr.requires_grad(ai)) gr.accumulate(ai, gy * gr.value(bi).transpose());
        if (gr.requires_grad(bi)) gr.accumulate(bi, gr.value(ai).transpose() * gy);
    });
}

Var linear(Var x, Var weight, Var bias) {
    Graph& g = graph_of(x, weight);
    graph_of(x, bias);
    if (x.cols() != weight.rows()) shape_error(Op::Linear, x.value(), weight.value());
    if (bias.rows() != 1 || bias.cols() != weight.cols()) {
        shape_error(Op::Linear, weight.value(), bias.value());
    }
    Tensor y(x.rows(), weight.cols());
    y.noalias() = x.value() * weight.value();
    y.rowwise() += bias.value().row(0);
    const NodeId xi = x.id, wi = weight.id, bi = bias.id;
    return g.custom(Op::Linear, {xi, wi, bi}, std::move(y), [xi, wi, bi](Graph& gr, NodeId self) {
        const Tensor& gy = gr.grad_ref(self);
        if (gr.requires_grad(xi)) gr.accumulate(xi, gy * gr.value(wi).transpose());
        if (gr.requires_grad(wi)) gr.accumulate(wi, gr.value(xi).transpose() * gy);
        if (gr.requires_grad(bi)) gr.accumulate(bi, gy.colwise().sum());
    });
}

Var broadcast(Var x, Eigen::Index rows, Eigen::Index cols) {
    const Tensor& xv = x.value();
    const bool ok_rows = xv.rows() == rows || xv.rows() == 1;
    const bool ok_cols = xv.cols() == cols || xv.cols() == 1;
    if (!ok_rows || !ok_cols) shape_error(Op::Broadcast, xv, Tensor(rows, cols));
    Tensor y = expand(xv, rows, cols);
    const NodeId xi = x.id;
    return x.graph->custom(Op::Broadcast, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        const Tensor& xv = gr.value(xi);
        gr.grad_ref(xi) += reduce_to(gr.grad_ref(self), xv.rows(), xv.cols());
    });
}

Var concat(std::span<const Var> parts, Axis axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    Graph& g = *parts.front().graph;
    Eigen::Index rows = 0, cols = 0;
    std::vector<NodeId> ids;
    for (const Var& p : parts) {
        graph_of(parts.front(), p);
        const Tensor& v = p.value();
        if (axis == Axis::Cols) {
            if (v.rows() != parts.front().rows()) shape_error(Op::Concat, parts.front().value(), v);
            rows = v.rows();
            cols += v.cols();
        } else {
            if (v.cols() != parts.front().cols()) shape_error(Op::Concat, parts.front().value(), v);
            cols = v.cols();
            rows += v.rows();
        }
        ids.push_back(p.id);
    }
    Tensor y(rows, cols);
    Eigen::Index off = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        if (axis == Axis::Cols) {
            y.middleCols(off, v.cols()) = v;
            off += v.cols();
        } else {
            y.middleRows(off, v.rows()) = v;
            off += v.rows();
        }
    }
    return g.custom(Op::Concat, ids, std::move(y), [ids, axis](Graph& gr, NodeId self) {
        const Tensor& gy = gr.grad_ref(self);
        Eigen::Index off = 0;
        for (NodeId p : ids) {
            const Tensor& v = gr.value(p);
            const Eigen::Index extent = axis == Axis::Cols ? v.cols() : v.rows();
            if (gr.requires_grad(p)) {
                if (axis == Axis::Cols) {
                    gr.grad_ref(p) += gy.middleCols(off, extent);
                } else {
                    gr.grad_ref(p) += gy.middleRows(off, extent);
                }
            }
            off += extent;
        }
    });
}

Var slice(Var x, Eigen::Index row0, Eigen::Index nrows, Eigen::Index col0, Eigen::Index ncols) {
    const Tensor& xv = x.value();
    if (row0 < 0 || col0 < 0 || nrows < 0 || ncols < 0 || row0 + nrows > xv.rows() ||
        col0 + ncols > xv.cols()) {
        shape_error(Op::Slice, xv, Tensor(nrows, ncols));
    }
    Tensor y = xv.block(row0, col0, nrows, ncols);
    const NodeId xi = x.id;
    return x.graph->custom(Op::Slice, {xi}, std::move(y),
                           [xi, row0, nrows, col0, ncols](Graph& gr, NodeId self) {
                               gr.grad_ref(xi).block(row0, col0, nrows, ncols) +=
                                   gr.grad_ref(self);
                           });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var x) {
    Tensor y = Tensor::Constant(1, 1, x.value().sum());
    const NodeId xi = x.id;
    return x.graph->custom(Op::Sum, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        gr.grad_ref(xi).array() += gr.grad_ref(self)(0, 0);
    });
}

Var mean(Var x) {
    const double n = static_cast<double>(x.value().size());
    if (n == 0) throw ShapeError("mean: empty operand");
    Tensor y = Tensor::Constant(1, 1, x.value().sum() / n);
    const NodeId xi = x.id;
    return x.graph->custom(Op::Mean, {xi}, std::move(y), [xi, n](Graph& gr, NodeId self) {
        gr.grad_ref(xi).array() += gr.grad_ref(self)(0, 0) / n;
    });
}

Var max(Var x) {
    const Tensor& xv = x.value();
    if (xv.size() == 0) throw ShapeError("max: empty operand");
    Eigen::Index r = 0, c = 0;
    const double m = xv.maxCoeff(&r, &c);
    const NodeId xi = x.id;
    return x.graph->custom(Op::Max, {xi}, Tensor::Constant(1, 1, m), [xi, r, c](Graph& gr, NodeId self) {
        gr.grad_ref(xi)(r, c) += gr.grad_ref(self)(0, 0);
    });
}

Var row_sum(Var x) {
    Tensor y = x.value().rowwise().sum();
    const NodeId xi = x.id;
    return x.graph->custom(Op::Sum, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        Tensor& gx = gr.grad_ref(xi);
        gx.colwise() += gr.grad_ref(self).col(0);
    });
}

Var row_mean(Var x) {
    const double n = static_cast<double>(x.cols());
    if (n == 0) throw ShapeError("row_mean: empty operand");
    Tensor y = x.value().rowwise().sum() / n;
    const NodeId xi = x.id;
    return x.graph->custom(Op::Mean, {xi}, std::move(y), [xi, n](Graph& gr, NodeId self) {
        Tensor& gx = gr.grad_ref(xi);
        gx.colwise() += gr.grad_ref(self).col(0) / n;
    });
}

Var row_max(Var x) {
    const Tensor& xv = x.value();
    if (xv.cols() == 0) throw ShapeError("row_max: empty operand");
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(xv.rows()));
    Tensor y(xv.rows(), 1);
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        Eigen::Index c = 0;
        y(r, 0) = xv.row(r).maxCoeff(&c);
        arg[static_cast<std::size_t>(r)] = c;
    }
    const NodeId xi = x.id;
    return x.graph->custom(Op::Max, {xi}, std::move(y), [xi, arg](Graph& gr, NodeId self) {
        Tensor& gx = gr.grad_ref(xi);
        const Tensor& gy = gr.grad_ref(self);
        for (std::size_t r = 0; r < arg.size(); ++r) {
            gx(static_cast<Eigen::Index>(r), arg[r]) += gy(static_cast<Eigen::Index>(r), 0);
        }
    });
}

Var col_sum(Var x) {
    Tensor y = x.value().colwise().sum();
    const NodeId xi = x.id;
    return x.graph->custom(Op::Sum, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        Tensor& gx = gr.grad_ref(xi);
        gx.rowwise() += gr.grad_ref(self).row(0);
    });
}

Var col_mean(Var x) {
    const double n = static_cast<double>(x.rows());
    if (n == 0) throw ShapeError("col_mean: empty operand");
    Tensor y = x.value().colwise().sum() / n;
    const NodeId xi = x.id;
    return x.graph->custom(Op::Mean, {xi}, std::move(y), [xi, n](Graph& gr, NodeId self) {
        Tensor& gx = gr.grad_ref(xi);
        gx.rowwise() += gr.grad_ref(self).row(0) / n;
    });
}

// ---------------------------------------------------------------------------
// Elementwise unary

Var relu(Var x) {
    Tensor y = x.value().array().max(0.0).matrix();
    const NodeId xi = x.id;
    return x.graph->custom(Op::Relu, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        const Tensor& gy = gr.grad_ref(self);
        gr.accumulate(xi, (gr.value(xi).array() > 0.0).select(gy.array(), 0.0).matrix());
    });
}

// max(z, 0) + log(1 + exp(-|z|)), z = beta x. Written with exp/log rather
// than log1p because only the former vectorise; the absolute error stays
// at rounding level.
Var softplus(Var x, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("softplus: beta must be > 0");
    const auto z = beta * x.value().array();
    Tensor y = ((z.max(0.0) + (1.0 + (-z.abs()).exp()).log()) / beta).matrix();
    const NodeId xi = x.id;
    return x.graph->custom(Op::Softplus, {xi}, std::move(y), [xi, beta](Graph& gr, NodeId self) {
        const auto slope = 1.0 / (1.0 + (-beta * gr.value(xi).array()).exp());
        gr.accumulate(xi, (gr.grad_ref(self).array() * slope).matrix());
    });
}

Var sigmoid(Var x) {
    Tensor y = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
    const NodeId xi = x.id;
    return x.graph->custom(Op::Sigmoid, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        const auto yv = gr.value(self).array();
        gr.accumulate(xi, (gr.grad_ref(self).array() * yv * (1.0 - yv)).matrix());
    });
}

Var exp(Var x) {
    return unary(
        x, Op::Exp, [](double v) { return std::exp(v); },
        [](const auto&, const auto& yv) { return yv; });
}

Var log(Var x) {
    return unary(
        x, Op::Log, [](double v) { return std::log(v); },
        [](const auto& xv, const auto&) { return xv.inverse(); });
}

Var sin(Var x) {
    return unary(
        x, Op::Sin, [](double v) { return std::sin(v); },
        [](const auto& xv, const auto&) { return xv.cos(); });
}

Var cos(Var x) {
    return unary(
        x, Op::Cos, [](double v) { return std::cos(v); },
        [](const auto& xv, const auto&) { return -xv.sin(); });
}

Var abs(Var x) {
    return unary(
        x, Op::Abs, [](double v) { return std::abs(v); },
        [](const auto& xv, const auto&) { return xv.sign(); });
}

Var square(Var x) {
    return unary(
        x, Op::Square, [](double v) { return v * v; },
        [](const auto& xv, const auto&) { return 2.0 * xv; });
}

Var sqrt(Var x) {
    return unary(
        x, Op::Sqrt, [](double v) { return std::sqrt(v); },
        [](const auto&, const auto& yv) { return 0.5 * yv.inverse(); });
}

Var scale(Var x, double factor) {
    Tensor y = x.value() * factor;
    const NodeId xi = x.id;
    return x.graph->custom(Op::Scale, {xi}, std::move(y), [xi, factor](Graph& gr, NodeId self) {
        gr.grad_ref(xi) += factor * gr.grad_ref(self);
    });
}

Var shift(Var x, double offset) {
    Tensor y = x.value().array() + offset;
    const NodeId xi = x.id;
    return x.graph->custom(Op::Shift, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        gr.grad_ref(xi) += gr.grad_ref(self);
    });
}

Var softmax(Var x) {
    const Tensor& xv = x.value();
    Tensor y(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const double m = xv.row(r).maxCoeff();
        y.row(r) = (xv.row(r).array() - m).exp();
        y.row(r) /= y.row(r).sum();
    }
    const NodeId xi = x.id;
    return x.graph->custom(Op::Softmax, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        const Tensor& yv = gr.value(self);
        const Tensor& gy = gr.grad_ref(self);
        Tensor& gx = gr.grad_ref(xi);
        for (Eigen::Index r = 0; r < yv.rows(); ++r) {
            const double dot = yv.row(r).dot(gy.row(r));
            gx.row(r).array() += yv.row(r).array() * (gy.row(r).array() - dot);
        }
    });
}

Var layer_norm(Var x, Var gamma, Var beta, NormAxis axis, double eps) {
    Graph& g = graph_of(x, gamma);
    graph_of(x, beta);
    const Tensor& xv = x.value();
    if (gamma.rows() != 1 || gamma.cols() != xv.cols()) shape_error(Op::LayerNorm, xv, gamma.value());
    if (beta.rows() != 1 || beta.cols() != xv.cols()) shape_error(Op::LayerNorm, xv, beta.value());
    if (xv.size() == 0) throw ShapeError("layer-norm: empty operand");

    // Work on a view where normalisation always runs along rows of `z`.
    const bool per_row = axis == NormAxis::PerRow;
    Tensor xn(xv.rows(), xv.cols());
    Eigen::VectorXd inv_std;
    if (per_row) {
        inv_std.resize(xv.rows());
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const double mu = xv.row(r).mean();
            const double var = (xv.row(r).array() - mu).square().mean();
            inv_std(r) = 1.0 / std::sqrt(var + eps);
            xn.row(r) = (xv.row(r).array() - mu) * inv_std(r);
        }
    } else {
        inv_std.resize(xv.cols());
        for (Eigen::Index c = 0; c < xv.cols(); ++c) {
            const double mu = xv.col(c).mean();
            const double var = (xv.col(c).array() - mu).square().mean();
            inv_std(c) = 1.0 / std::sqrt(var + eps);
            xn.col(c) = (xv.col(c).array() - mu) * inv_std(c);
        }
    }
    Tensor y = xn;
    y.array().rowwise() *= gamma.value().row(0).array();
    y.rowwise() += beta.value().row(0);

    const NodeId xi = x.id, gi = gamma.id, bi = beta.id;
    return g.custom(Op::LayerNorm, {xi, gi, bi}, std::move(y),
                    [xi, gi, bi, per_row, xn = std::move(xn), inv_std = std::move(inv_std)](
                        Graph& gr, NodeId self) {
                        const Tensor& gy = gr.grad_ref(self);
                        if (gr.requires_grad(gi)) {
                            gr.grad_ref(gi) += gy.cwiseProduct(xn).colwise().sum();
                        }
                        if (gr.requires_grad(bi)) gr.grad_ref(bi) += gy.colwise().sum();
                        if (!gr.requires_grad(xi)) return;
                        Tensor gxn = gy;
                        gxn.array().rowwise() *= gr.value(gi).row(0).array();
                        Tensor& gx = gr.grad_ref(xi);
                        if (per_row) {
                            for (Eigen::Index r = 0; r < gxn.rows(); ++r) {
                                const double m1 = gxn.row(r).mean();
                                const double m2 = gxn.row(r).dot(xn.row(r)) /
                                                  static_cast<double>(gxn.cols());
                                gx.row(r).array() += inv_std(r) * (gxn.row(r).array() - m1 -
                                                                   xn.row(r).array() * m2);
                            }
                        } else {
                            for (Eigen::Index c = 0; c < gxn.cols(); ++c) {
                                const double m1 = gxn.col(c).mean();
                                const double m2 = gxn.col(c).dot(xn.col(c)) /
                                                  static_cast<double>(gxn.rows());
                                gx.col(c).array() += inv_std(c) * (gxn.col(c).array() - m1 -
                                                                   xn.col(c).array() * m2);
                            }
                        }
                    });
}

// ---------------------------------------------------------------------------
// Layout

Var reshape(Var x, Eigen::Index rows, Eigen::Index cols) {
    const Tensor& xv = x.value();
    if (rows * cols != xv.size()) shape_error(Op::Reshape, xv, Tensor(rows, cols));
    Tensor y = Eigen::Map<const Tensor>(xv.data(), rows, cols);
    const NodeId xi = x.id;
    return x.graph->custom(Op::Reshape, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        Tensor& gx = gr.grad_ref(xi);
        const Tensor& gy = gr.grad_ref(self);
        Eigen::Map<Tensor>(gx.data(), gy.rows(), gy.cols()) += gy;
    });
}

Var transpose(Var x) {
    Tensor y = x.value().transpose();
    const NodeId xi = x.id;
    return x.graph->custom(Op::Transpose, {xi}, std::move(y), [xi](Graph& gr, NodeId self) {
        gr.grad_ref(xi) += gr.grad_ref(self).transpose();
    });
}

Var gather_rows(Var x, std::span<const Eigen::Index> rows) {
    const Tensor& xv = x.value();
    Tensor y(static_cast<Eigen::Index>(rows.size()), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= xv.rows()) {
            throw ShapeError("gather-rows: index " + std::to_string(rows[i]) +
                             " out of range for " + shape_str(xv));
        }
        y.row(static_cast<Eigen::Index>(i)) = xv.row(rows[i]);
    }
    std::vector<Eigen::Index> idx(rows.begin(), rows.end());
    const NodeId xi = x.id;
    return x.graph->custom(Op::GatherRows, {xi}, std::move(y),
                           [xi, idx = std::move(idx)](Graph& gr, NodeId self) {
                               Tensor& gx = gr.grad_ref(xi);
                               const Tensor& gy = gr.grad_ref(self);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                   gx.row(idx[i]) += gy.row(static_cast<Eigen::Index>(i));
                               }
                           });
}

Var scatter_rows(Var x, std::span<const Eigen::Index> index, Eigen::Index out_rows) {
    const Tensor& xv = x.value();
    if (static_cast<Eigen::Index>(index.size()) != xv.rows()) {
        throw ShapeError("scatter-rows: " + std::to_string(index.size()) + " indices for " +
                         shape_str(xv));
    }
    Tensor y = Tensor::Zero(out_rows, xv.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= out_rows) {
            throw ShapeError("scatter-rows: index " + std::to_string(index[i]) + " out of range");
        }
        y.row(index[i]) += xv.row(static_cast<Eigen::Index>(i));
    }
    std::vector<Eigen::Index> idx(index.begin(), index.end());
    const NodeId xi = x.id;
    return x.graph->custom(Op::ScatterRows, {xi}, std::move(y),
                           [xi, idx = std::move(idx)](Graph& gr, NodeId self) {
                               Tensor& gx = gr.grad_ref(xi);
                               const Tensor& gy = gr.grad_ref(self);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                   gx.row(static_cast<Eigen::Index>(i)) += gy.row(idx[i]);
                               }
                           });
}

}  // namespace neffbio::diff
