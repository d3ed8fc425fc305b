#include "neisf/ad.hpp"

#include <cmath>
#include <stdexcept>

namespace neisf::ad {

namespace {

using Index = Eigen::Index;

Tape& tape_of(const Var& a)
{
    if (!a.defined())
        throw std::logic_error("ad: operation on an undefined Var");
    return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b)
{
    Tape& t = tape_of(a);
    if (&t != &tape_of(b))
        throw std::logic_error("ad: operands live on different tapes");
    return t;
}

Index broadcast_dim(Index a, Index b)
{
    if (a == b || b == 1)
        return a;
    if (a == 1)
        return b;
    throw std::invalid_argument("ad: incompatible shapes for broadcasting");
}

Array expand(const Array& x, Index rows, Index cols)
{
    if (x.rows() == rows && x.cols() == cols)
        return x;
    return x.replicate(rows / x.rows(), cols / x.cols());
}

Array reduce_to(Array g, Index rows, Index cols)
{
    if (g.rows() == rows && g.cols() == cols)
        return g;
    Array r = std::move(g);
    if (rows == 1 && r.rows() != 1)
        r = r.colwise().sum().eval();
    if (cols == 1 && r.cols() != 1)
        r = r.rowwise().sum().eval();
    return r;
}

template <class Fwd, class GradA, class GradB>
Var binary(const Var& a, const Var& b, Fwd fwd, GradA grad_a, GradB grad_b)
{
    Tape& t = tape_of(a, b);
    const Index rows = broadcast_dim(a.rows(), b.rows());
    const Index cols = broadcast_dim(a.cols(), b.cols());
    const int ia = a.id();
    const int ib = b.id();
    Array out;
    {
        const Array& va = t.value(ia);
        const Array& vb = t.value(ib);
        const bool fa = va.rows() == rows && va.cols() == cols;
        const bool fb = vb.rows() == rows && vb.cols() == cols;
        if (fa && fb)
            out = fwd(va, vb);
        else if (fa)
            out = fwd(va, expand(vb, rows, cols));
        else if (fb)
            out = fwd(expand(va, rows, cols), vb);
        else
            out = fwd(expand(va, rows, cols), expand(vb, rows, cols));
    }
    const bool ng = t.needs_grad(ia) || t.needs_grad(ib);
    return t.push(std::move(out), ng, [=](Tape& tp, int self) {
        const Array& g = tp.grad_of(self);
        const Array& va = tp.value(ia);
        const Array& vb = tp.value(ib);
        const bool need_a = tp.needs_grad(ia);
        const bool need_b = tp.needs_grad(ib);
        if (!need_a && !need_b)
            return;
        // Only broadcast operands are materialised at full size.
        Array ea_store, eb_store;
        const Array* ea = &va;
        const Array* eb = &vb;
        if (va.rows() != rows || va.cols() != cols) {
            ea_store = expand(va, rows, cols);
            ea = &ea_store;
        }
        if (vb.rows() != rows || vb.cols() != cols) {
            eb_store = expand(vb, rows, cols);
            eb = &eb_store;
        }
        if (need_a)
            tp.add_grad(ia, reduce_to(grad_a(g, *ea, *eb, tp.value(self)), va.rows(), va.cols()));
        if (need_b)
            tp.add_grad(ib, reduce_to(grad_b(g, *ea, *eb, tp.value(self)), vb.rows(), vb.cols()));
    });
}

/// Element-wise unary op; `dfdx(x, y)` returns the local derivative.
template <class Fwd, class Deriv>
Var unary(const Var& x, Fwd fwd, Deriv dfdx)
{
    Tape& t = tape_of(x);
    const int ix = x.id();
    Array out = fwd(t.value(ix));
    return t.push(std::move(out), t.needs_grad(ix), [=](Tape& tp, int self) {
        tp.add_grad(ix, Array(tp.grad_of(self) * dfdx(tp.value(ix), tp.value(self))));
    });
}

Array sigmoid_array(const Array& x)
{
    return x.unaryExpr([](double v) {
        if (v >= 0.0)
            return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
}

}  // namespace

const Array& Var::value() const
{
    if (!tape_)
        throw std::logic_error("ad: value() of an undefined Var");
    return tape_->value(id_);
}

Var Tape::push(Array value, bool needs_grad, BackwardFn fn)
{
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad)
        n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Array value) { return push(std::move(value), false, nullptr); }

Var Tape::constant(double value) { return constant(Array::Constant(1, 1, value)); }

Var Tape::variable(Array value) { return push(std::move(value), true, nullptr); }

Var Tape::parameter(const Parameter& p)
{
    Var v = push(p.value, true, nullptr);
    params_.emplace_back(v.id(), &p);
    return v;
}

void Tape::add_grad(int id, const Array& g)
{
    Node& n = nodes_[id];
    if (!n.needs_grad)
        return;
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
    } else {
        n.grad += g;
    }
}

void Tape::add_grad(int id, Array&& g)
{
    Node& n = nodes_[id];
    if (!n.needs_grad)
        return;
    if (!n.has_grad) {
        n.grad = std::move(g);
        n.has_grad = true;
    } else {
        n.grad += g;
    }
}

void Tape::backward(const Var& root)
{
    if (root.tape() != this)
        throw std::logic_error("ad: backward root belongs to another tape");
    if (root.rows() != 1 || root.cols() != 1)
        throw std::invalid_argument("ad: backward root must be a scalar");
    for (auto& n : nodes_) {
        n.has_grad = false;
        n.grad.resize(0, 0);
    }
    add_grad(root.id(), Array::Ones(1, 1));
    for (int i = root.id(); i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.has_grad && n.backward)
            n.backward(*this, i);
    }
}

Array Tape::grad(const Var& v) const
{
    const Node& n = nodes_[v.id()];
    if (!n.has_grad)
        return Array::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::accumulate(Gradients& out) const
{
    for (const auto& [id, p] : params_) {
        const Node& n = nodes_[id];
        if (!n.has_grad)
            continue;
        auto it = out.find(p);
        if (it == out.end())
            out.emplace(p, n.grad);
        else
            it->second += n.grad;
    }
}

// ---------------------------------------------------------------- arithmetic

Var operator+(const Var& a, const Var& b)
{
    return binary(
        a, b, [](const Array& x, const Array& y) { return Array(x + y); },
        [](const Array& g, const Array&, const Array&, const Array&) { return g; },
        [](const Array& g, const Array&, const Array&, const Array&) { return g; });
}

Var operator-(const Var& a, const Var& b)
{
    return binary(
        a, b, [](const Array& x, const Array& y) { return Array(x - y); },
        [](const Array& g, const Array&, const Array&, const Array&) { return g; },
        [](const Array& g, const Array&, const Array&, const Array&) { return Array(-g); });
}

Var operator*(const Var& a, const Var& b)
{
    return binary(
        a, b, [](const Array& x, const Array& y) { return Array(x * y); },
        [](const Array& g, const Array&, const Array& y, const Array&) { return Array(g * y); },
        [](const Array& g, const Array& x, const Array&, const Array&) { return Array(g * x); });
}

Var operator/(const Var& a, const Var& b)
{
    return binary(
        a, b, [](const Array& x, const Array& y) { return Array(x / y); },
        [](const Array& g, const Array&, const Array& y, const Array&) { return Array(g / y); },
        [](const Array& g, const Array&, const Array& y, const Array& out) {
            return Array(-g * out / y);
        });
}

Var operator-(const Var& a)
{
    return unary(
        a, [](const Array& x) { return Array(-x); },
        [](const Array& x, const Array&) { return Array::Constant(x.rows(), x.cols(), -1.0); });
}

Var operator+(const Var& a, double k)
{
    return unary(
        a, [k](const Array& x) { return Array(x + k); },
        [](const Array& x, const Array&) { return Array::Ones(x.rows(), x.cols()); });
}

Var operator+(double k, const Var& a) { return a + k; }

Var operator-(const Var& a, double k) { return a + (-k); }

Var operator-(double k, const Var& a)
{
    return unary(
        a, [k](const Array& x) { return Array(k - x); },
        [](const Array& x, const Array&) { return Array::Constant(x.rows(), x.cols(), -1.0); });
}

Var operator*(const Var& a, double k)
{
    return unary(
        a, [k](const Array& x) { return Array(x * k); },
        [k](const Array& x, const Array&) { return Array::Constant(x.rows(), x.cols(), k); });
}

Var operator*(double k, const Var& a) { return a * k; }

Var operator/(const Var& a, double k) { return a * (1.0 / k); }

Var operator/(double k, const Var& a)
{
    return unary(
        a, [k](const Array& x) { return Array(k / x); },
        [](const Array& x, const Array& y) { return Array(-y / x); });
}

// ----------------------------------------------------------------- functions

Var exp(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.exp()); },
        [](const Array&, const Array& y) { return y; });
}

Var log(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.log()); },
        [](const Array& v, const Array&) { return Array(v.inverse()); });
}

Var sqrt(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.sqrt()); },
        [](const Array&, const Array& y) { return Array(0.5 / y); });
}

Var square(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.square()); },
        [](const Array& v, const Array&) { return Array(2.0 * v); });
}

Var sin(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.sin()); },
        [](const Array& v, const Array&) { return Array(v.cos()); });
}

Var cos(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.cos()); },
        [](const Array& v, const Array&) { return Array(-v.sin()); });
}

Var tanh(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.tanh()); },
        [](const Array&, const Array& y) { return Array(1.0 - y.square()); });
}

Var abs(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.abs()); },
        [](const Array& v, const Array&) {
            return Array(v.unaryExpr([](double e) { return e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0); }));
        });
}

Var sigmoid(const Var& x)
{
    return unary(
        x, [](const Array& v) { return sigmoid_array(v); },
        [](const Array&, const Array& y) { return Array(y * (1.0 - y)); });
}

Var relu(const Var& x)
{
    return unary(
        x, [](const Array& v) { return Array(v.max(0.0)); },
        [](const Array& v, const Array&) { return Array((v > 0.0).cast<double>()); });
}

Var softplus(const Var& x, double beta)
{
    return unary(
        x,
        [beta](const Array& v) {
            return Array(v.unaryExpr([beta](double e) {
                const double z = beta * e;
                if (z > 30.0)
                    return e;
                return std::log1p(std::exp(z)) / beta;
            }));
        },
        [beta](const Array& v, const Array&) { return sigmoid_array(beta * v); });
}

Var softplus_slope(const Var& x, double beta)
{
    return unary(
        x, [beta](const Array& v) { return sigmoid_array(beta * v); },
        [beta](const Array&, const Array& y) { return Array(beta * y * (1.0 - y)); });
}

Var clamp_min(const Var& x, double lo)
{
    return unary(
        x, [lo](const Array& v) { return Array(v.max(lo)); },
        [lo](const Array& v, const Array&) { return Array((v > lo).cast<double>()); });
}

Var clamp_max(const Var& x, double hi)
{
    return unary(
        x, [hi](const Array& v) { return Array(v.min(hi)); },
        [hi](const Array& v, const Array&) { return Array((v < hi).cast<double>()); });
}

Var select(const Mask& mask, const Var& a, const Var& b)
{
    Tape& t = tape_of(a, b);
    if (a.rows() != mask.rows() || b.rows() != mask.rows() || a.cols() != mask.cols() ||
        b.cols() != mask.cols())
        throw std::invalid_argument("ad::select: shape mismatch");
    const int ia = a.id();
    const int ib = b.id();
    Array out = mask.select(t.value(ia), t.value(ib));
    return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                  [=](Tape& tp, int self) {
                      const Array& g = tp.grad_of(self);
                      tp.add_grad(ia, mask.select(g, 0.0));
                      tp.add_grad(ib, mask.select(0.0, g));
                  });
}

Var detach(const Var& x) { return tape_of(x).constant(x.value()); }

// --------------------------------------------------------------- reductions

Var sum(const Var& x)
{
    Tape& t = tape_of(x);
    const int ix = x.id();
    const Index r = x.rows();
    const Index c = x.cols();
    return t.push(Array::Constant(1, 1, x.value().sum()), t.needs_grad(ix),
                  [=](Tape& tp, int self) {
                      tp.add_grad(ix, Array::Constant(r, c, tp.grad_of(self)(0, 0)));
                  });
}

Var mean(const Var& x) { return sum(x) * (1.0 / static_cast<double>(x.value().size())); }

Var row_sum(const Var& x)
{
    Tape& t = tape_of(x);
    const int ix = x.id();
    const Index c = x.cols();
    return t.push(x.value().rowwise().sum(), t.needs_grad(ix), [=](Tape& tp, int self) {
        tp.add_grad(ix, tp.grad_of(self).replicate(1, c));
    });
}

namespace {

// Columns are contiguous, so a column of R*k rows is viewed as a k x R matrix.
Array repeat_rows_array(const Array& x, Index k)
{
    Array out(x.rows() * k, x.cols());
    for (Index c = 0; c < x.cols(); ++c)
        Eigen::Map<Eigen::MatrixXd>(out.col(c).data(), k, x.rows()) =
            x.col(c).matrix().transpose().replicate(k, 1);
    return out;
}

Array sum_groups_array(const Array& x, Index k)
{
    const Index groups = x.rows() / k;
    Array out(groups, x.cols());
    for (Index c = 0; c < x.cols(); ++c)
        out.col(c) =
            Eigen::Map<const Eigen::MatrixXd>(x.col(c).data(), k, groups).colwise().sum().transpose().array();
    return out;
}

}  // namespace

Var repeat_rows(const Var& x, Index k)
{
    Tape& t = tape_of(x);
    const int ix = x.id();
    return t.push(repeat_rows_array(x.value(), k), t.needs_grad(ix), [=](Tape& tp, int self) {
        tp.add_grad(ix, sum_groups_array(tp.grad_of(self), k));
    });
}

Var sum_groups(const Var& x, Index k)
{
    if (x.rows() % k != 0)
        throw std::invalid_argument("ad::sum_groups: rows not divisible by group size");
    Tape& t = tape_of(x);
    const int ix = x.id();
    return t.push(sum_groups_array(x.value(), k), t.needs_grad(ix), [=](Tape& tp, int self) {
        tp.add_grad(ix, repeat_rows_array(tp.grad_of(self), k));
    });
}

Var group_exclusive_cumsum(const Var& x, Index k)
{
    if (x.rows() % k != 0)
        throw std::invalid_argument("ad::group_exclusive_cumsum: rows not divisible by group size");
    Tape& t = tape_of(x);
    const int ix = x.id();
    const Array& v = x.value();
    const Index groups = v.rows() / k;
    Array out(v.rows(), v.cols());
    for (Index c = 0; c < v.cols(); ++c)
        for (Index g = 0; g < groups; ++g) {
            double acc = 0.0;
            for (Index j = 0; j < k; ++j) {
                out(g * k + j, c) = acc;
                acc += v(g * k + j, c);
            }
        }
    return t.push(std::move(out), t.needs_grad(ix), [=](Tape& tp, int self) {
        const Array& g = tp.grad_of(self);
        Array gx(g.rows(), g.cols());
        for (Index c = 0; c < g.cols(); ++c)
            for (Index grp = 0; grp < groups; ++grp) {
                double acc = 0.0;
                for (Index j = k - 1; j >= 0; --j) {
                    gx(grp * k + j, c) = acc;
                    acc += g(grp * k + j, c);
                }
            }
        tp.add_grad(ix, gx);
    });
}

Var col(const Var& x, Index j) { return cols(x, j, 1); }

Var cols(const Var& x, Index first, Index count)
{
    Tape& t = tape_of(x);
    if (first < 0 || first + count > x.cols())
        throw std::out_of_range("ad::cols: column range out of bounds");
    const int ix = x.id();
    const Index r = x.rows();
    const Index c = x.cols();
    return t.push(x.value().middleCols(first, count), t.needs_grad(ix),
                  [=](Tape& tp, int self) {
                      Array g = Array::Zero(r, c);
                      g.middleCols(first, count) = tp.grad_of(self);
                      tp.add_grad(ix, g);
                  });
}

Var hcat(const std::vector<Var>& parts)
{
    if (parts.empty())
        throw std::invalid_argument("ad::hcat: no parts");
    Tape& t = tape_of(parts.front());
    const Index r = parts.front().rows();
    Index total = 0;
    bool ng = false;
    std::vector<int> ids;
    std::vector<Index> widths;
    for (const Var& p : parts) {
        if (&tape_of(p) != &t || p.rows() != r)
            throw std::invalid_argument("ad::hcat: incompatible parts");
        total += p.cols();
        ng = ng || t.needs_grad(p.id());
        ids.push_back(p.id());
        widths.push_back(p.cols());
    }
    Array out(r, total);
    Index at = 0;
    for (const Var& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return t.push(std::move(out), ng, [ids, widths](Tape& tp, int self) {
        const Array& g = tp.grad_of(self);
        Index off = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (tp.needs_grad(ids[i]))
                tp.add_grad(ids[i], g.middleCols(off, widths[i]));
            off += widths[i];
        }
    });
}

// ------------------------------------------------------------------- layers

Var matmul_t(const Var& x, const Var& W)
{
    Tape& t = tape_of(x, W);
    if (x.cols() != W.cols())
        throw std::invalid_argument("ad::matmul_t: inner dimensions differ");
    const int ix = x.id();
    const int iw = W.id();
    Array out = (x.value().matrix() * W.value().matrix().transpose()).array();
    return t.push(std::move(out), t.needs_grad(ix) || t.needs_grad(iw),
                  [=](Tape& tp, int self) {
                      const auto g = tp.grad_of(self).matrix();
                      if (tp.needs_grad(ix))
                          tp.add_grad(ix, (g * tp.value(iw).matrix()).array());
                      if (tp.needs_grad(iw))
                          tp.add_grad(iw, (g.transpose() * tp.value(ix).matrix()).array());
                  });
}

Var linear(const Var& x, const Var& W, const Var& b)
{
    Tape& t = tape_of(x, W);
    if (&tape_of(b) != &t)
        throw std::logic_error("ad: operands live on different tapes");
    if (x.cols() != W.cols() || b.rows() != 1 || b.cols() != W.rows())
        throw std::invalid_argument("ad::linear: shape mismatch");
    const int ix = x.id();
    const int iw = W.id();
    const int ib = b.id();
    Array out = (x.value().matrix() * W.value().matrix().transpose()).array();
    out.rowwise() += b.value().row(0);
    const bool ng = t.needs_grad(ix) || t.needs_grad(iw) || t.needs_grad(ib);
    return t.push(std::move(out), ng, [=](Tape& tp, int self) {
        const auto g = tp.grad_of(self).matrix();
        if (tp.needs_grad(ix))
            tp.add_grad(ix, (g * tp.value(iw).matrix()).array());
        if (tp.needs_grad(iw))
            tp.add_grad(iw, (g.transpose() * tp.value(ix).matrix()).array());
        if (tp.needs_grad(ib))
            tp.add_grad(ib, g.colwise().sum().array());
    });
}

}  // namespace neisf::ad
