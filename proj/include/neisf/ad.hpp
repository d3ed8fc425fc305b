#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D arrays.
//
// Every node on a Tape holds an Eigen array (rows x cols). Element-wise
// binary operations broadcast operands whose rows or columns equal 1.
// Nodes are appended in evaluation order, so a single reverse sweep over the
// node list is a valid topological order for the backward pass.

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace neisf::ad {

using Array = Eigen::ArrayXXd;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// A trainable tensor. Owned by the network that uses it; tapes only copy
/// its value into a leaf node and report gradients keyed by its address.
struct Parameter {
    std::string name;
    Array value;
};

using Gradients = std::unordered_map<const Parameter*, Array>;

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Array& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool defined() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Array value);
    Var constant(double value);
    /// Differentiable leaf.
    Var variable(Array value);
    Var parameter(const Parameter& p);

    /// Seeds d(root)/d(root) = 1 for a 1x1 root and sweeps backwards.
    void backward(const Var& root);

    /// Gradient of `v`; an all-zero array if nothing flowed into it.
    Array grad(const Var& v) const;

    /// Adds this tape's parameter gradients into `out`.
    void accumulate(Gradients& out) const;

    std::size_t size() const { return nodes_.size(); }

    // Operation authoring interface.
    Var push(Array value, bool needs_grad, BackwardFn fn);
    const Array& value(int id) const { return nodes_[id].value; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    const Array& grad_of(int id) const { return nodes_[id].grad; }
    void add_grad(int id, const Array& g);
    void add_grad(int id, Array&& g);

private:
    struct Node {
        Array value;
        Array grad;
        bool needs_grad = false;
        bool has_grad = false;
        BackwardFn backward;
    };
    std::deque<Node> nodes_;
    std::vector<std::pair<int, const Parameter*>> params_;
};

// Arithmetic (broadcasting over unit rows / columns).
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator+(const Var& a, double k);
Var operator+(double k, const Var& a);
Var operator-(const Var& a, double k);
Var operator-(double k, const Var& a);
Var operator*(const Var& a, double k);
Var operator*(double k, const Var& a);
Var operator/(const Var& a, double k);
Var operator/(double k, const Var& a);

// Element-wise functions.
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);
Var sin(const Var& x);
Var cos(const Var& x);
Var tanh(const Var& x);
Var abs(const Var& x);
Var sigmoid(const Var& x);
Var relu(const Var& x);
/// log(1 + exp(beta x)) / beta.
Var softplus(const Var& x, double beta = 1.0);
/// Derivative of softplus: sigmoid(beta x). Itself differentiable.
Var softplus_slope(const Var& x, double beta = 1.0);
Var clamp_min(const Var& x, double lo);
Var clamp_max(const Var& x, double hi);
/// mask ? a : b, all three of the same shape.
Var select(const Mask& mask, const Var& a, const Var& b);
Var detach(const Var& x);

// Reductions and reshaping.
Var sum(const Var& x);
Var mean(const Var& x);
/// Sum across columns: (R x C) -> (R x 1).
Var row_sum(const Var& x);
/// Each row repeated k times consecutively: (R x C) -> (R*k x C).
Var repeat_rows(const Var& x, Eigen::Index k);
/// Sum of consecutive groups of k rows: (R*k x C) -> (R x C).
Var sum_groups(const Var& x, Eigen::Index k);
/// Within each group of k rows, out[j] = sum_{i<j} x[i] (per column).
Var group_exclusive_cumsum(const Var& x, Eigen::Index k);
Var col(const Var& x, Eigen::Index j);
Var cols(const Var& x, Eigen::Index first, Eigen::Index count);
Var hcat(const std::vector<Var>& parts);

// Dense layers. W is (out x in), b is (1 x out).
Var linear(const Var& x, const Var& W, const Var& b);
Var matmul_t(const Var& x, const Var& W);

}  // namespace neisf::ad

namespace neisf {

// Scalar counterparts so the templated physics code also runs on doubles.
inline double clamp_min(double x, double lo) { return x > lo ? x : lo; }
inline double clamp_max(double x, double hi) { return x < hi ? x : hi; }
inline double square(double x) { return x * x; }

}  // namespace neisf
