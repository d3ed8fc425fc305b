#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "doctest.h"
#include "neisf/ad.hpp"
#include "neisf/pbrdf_terms.hpp"

using namespace neisf::ad;

namespace {

using Fn = std::function<Var(Tape&, const std::vector<Var>&)>;

Array random_array(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo, double hi)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Array a(r, c);
    for (Eigen::Index i = 0; i < a.size(); ++i)
        a(i) = u(rng);
    return a;
}

double evaluate(const Fn& f, const std::vector<Array>& inputs)
{
    Tape t;
    std::vector<Var> vs;
    for (const Array& a : inputs)
        vs.push_back(t.constant(a));
    return sum(f(t, vs)).scalar();
}

// Central differences against the reverse sweep, on every input element.
void check_gradient(const Fn& f, std::vector<Array> inputs, double tol = 1e-6)
{
    Tape t;
    std::vector<Var> vs;
    for (const Array& a : inputs)
        vs.push_back(t.variable(a));
    t.backward(sum(f(t, vs)));
    const double h = 1e-6;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Array g = t.grad(vs[k]);
        REQUIRE(g.rows() == inputs[k].rows());
        REQUIRE(g.cols() == inputs[k].cols());
        for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
            const double keep = inputs[k](i);
            inputs[k](i) = keep + h;
            const double fp = evaluate(f, inputs);
            inputs[k](i) = keep - h;
            const double fm = evaluate(f, inputs);
            inputs[k](i) = keep;
            const double fd = (fp - fm) / (2 * h);
            CHECK(std::abs(fd - g(i)) <= tol * std::max(1.0, std::abs(fd)));
        }
    }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences")
{
    std::mt19937_64 rng(1);
    const Array x = random_array(rng, 3, 4, 0.2, 1.5);
    const Array y = random_array(rng, 3, 4, -1.0, 1.0);
    const std::vector<std::pair<const char*, Fn>> unary = {
        {"exp", [](Tape&, const std::vector<Var>& v) { return exp(v[0]); }},
        {"log", [](Tape&, const std::vector<Var>& v) { return log(v[0]); }},
        {"sqrt", [](Tape&, const std::vector<Var>& v) { return sqrt(v[0]); }},
        {"square", [](Tape&, const std::vector<Var>& v) { return square(v[0]); }},
        {"sin", [](Tape&, const std::vector<Var>& v) { return sin(v[0]); }},
        {"cos", [](Tape&, const std::vector<Var>& v) { return cos(v[0]); }},
        {"tanh", [](Tape&, const std::vector<Var>& v) { return tanh(v[0]); }},
        {"sigmoid", [](Tape&, const std::vector<Var>& v) { return sigmoid(v[0]); }},
        {"softplus", [](Tape&, const std::vector<Var>& v) { return softplus(v[0] - 1.0, 3.0); }},
        {"softplus_slope", [](Tape&, const std::vector<Var>& v) { return softplus_slope(v[0] - 1.0, 3.0); }},
        {"recip", [](Tape&, const std::vector<Var>& v) { return 2.0 / v[0]; }},
        {"neg", [](Tape&, const std::vector<Var>& v) { return -v[0] * 3.0 + 1.0; }},
    };
    for (const auto& [name, f] : unary) {
        CAPTURE(name);
        check_gradient(f, {x});
    }
    check_gradient([](Tape&, const std::vector<Var>& v) { return abs(v[0]); }, {y});
    check_gradient([](Tape&, const std::vector<Var>& v) { return relu(v[0]); }, {y});
    check_gradient([](Tape&, const std::vector<Var>& v) { return clamp_min(v[0], 0.1); }, {y});
    check_gradient([](Tape&, const std::vector<Var>& v) { return clamp_max(v[0], 0.1); }, {y});
}

TEST_CASE("binary ops broadcast and match finite differences")
{
    std::mt19937_64 rng(2);
    const Array a = random_array(rng, 4, 3, 0.5, 1.5);
    const Array row = random_array(rng, 1, 3, 0.5, 1.5);
    const Array column = random_array(rng, 4, 1, 0.5, 1.5);
    const Array one = random_array(rng, 1, 1, 0.5, 1.5);
    for (const Array& b : {a, row, column, one}) {
        check_gradient([](Tape&, const std::vector<Var>& v) { return v[0] + v[1]; }, {a, b});
        check_gradient([](Tape&, const std::vector<Var>& v) { return v[0] - v[1]; }, {a, b});
        check_gradient([](Tape&, const std::vector<Var>& v) { return v[0] * v[1]; }, {a, b});
        check_gradient([](Tape&, const std::vector<Var>& v) { return v[0] / v[1]; }, {a, b});
        check_gradient([](Tape&, const std::vector<Var>& v) { return v[1] / v[0]; }, {a, b});
    }
    Tape t;
    const Var s = t.constant(a) * t.constant(row);
    CHECK(s.rows() == 4);
    CHECK(s.cols() == 3);
    CHECK(s.value()(2, 1) == a(2, 1) * row(0, 1));
}

TEST_CASE("reductions and reshaping")
{
    std::mt19937_64 rng(3);
    const Array x = random_array(rng, 6, 3, -1.0, 1.0);
    const Array w = random_array(rng, 6, 3, -1.0, 1.0);
    auto weighted = [w](const Var& v) { return v * v.tape()->constant(w); };
    check_gradient([&](Tape&, const std::vector<Var>& v) { return weighted(v[0]) * mean(v[0]); }, {x});
    check_gradient([&](Tape&, const std::vector<Var>& v) { return square(row_sum(weighted(v[0]))); }, {x});
    check_gradient([&](Tape&, const std::vector<Var>& v) { return square(sum_groups(weighted(v[0]), 3)); }, {x});
    check_gradient([&](Tape&, const std::vector<Var>& v) {
        return square(group_exclusive_cumsum(weighted(v[0]), 3)); }, {x});
    check_gradient([&](Tape&, const std::vector<Var>& v) {
        return square(repeat_rows(v[0], 2)) * repeat_rows(v[0].tape()->constant(w), 2); }, {x});
    check_gradient([&](Tape&, const std::vector<Var>& v) {
        return square(col(weighted(v[0]), 1)) + cols(v[0], 1, 2) * 2.0; }, {x});
    check_gradient([&](Tape&, const std::vector<Var>& v) {
        return square(hcat({v[0], col(v[0], 0), weighted(v[0])})); }, {x});

    Tape t;
    const Var c = group_exclusive_cumsum(t.constant(Array::Ones(6, 1)), 3);
    CHECK(c.value()(0, 0) == 0.0);
    CHECK(c.value()(2, 0) == 2.0);
    CHECK(c.value()(3, 0) == 0.0);
    const Var g = sum_groups(t.constant(Array::Ones(6, 2)), 3);
    CHECK(g.rows() == 2);
    CHECK(g.value()(1, 1) == 3.0);
}

TEST_CASE("linear layers and select")
{
    std::mt19937_64 rng(4);
    const Array x = random_array(rng, 5, 3, -1.0, 1.0);
    const Array W = random_array(rng, 4, 3, -1.0, 1.0);
    const Array b = random_array(rng, 1, 4, -1.0, 1.0);
    check_gradient([](Tape&, const std::vector<Var>& v) { return tanh(linear(v[0], v[1], v[2])); }, {x, W, b});
    check_gradient([](Tape&, const std::vector<Var>& v) { return sin(matmul_t(v[0], v[1])); }, {x, W});

    Mask m(5, 3);
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m(i) = (i % 3) == 0;
    const Array y = random_array(rng, 5, 3, -1.0, 1.0);
    check_gradient([m](Tape&, const std::vector<Var>& v) { return select(m, exp(v[0]), v[1] * v[1]); }, {x, y});

    Tape t;
    const Var out = linear(t.constant(x), t.constant(W), t.constant(b));
    const Eigen::MatrixXd expected = (x.matrix() * W.matrix().transpose()).rowwise() + b.matrix().row(0);
    CHECK((out.value().matrix() - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("detach blocks gradients and parameters accumulate")
{
    Tape t;
    const Var x = t.variable(Array::Constant(2, 2, 3.0));
    t.backward(sum(x * detach(x)));
    CHECK((t.grad(x) - 3.0).abs().maxCoeff() == 0.0);

    Parameter p{"w", Array::Constant(1, 3, 2.0)};
    Gradients grads;
    for (int pass = 0; pass < 2; ++pass) {
        Tape tp;
        const Var w = tp.parameter(p);
        tp.backward(sum(square(w)));
        tp.accumulate(grads);
    }
    REQUIRE(grads.count(&p) == 1);
    CHECK((grads[&p] - 8.0).abs().maxCoeff() == 0.0);
}

TEST_CASE("second order through softplus_slope")
{
    // d/dx of sum(softplus'(x) * c) via the slope op equals the analytic second
    // derivative beta * s (1 - s) * c.
    std::mt19937_64 rng(5);
    const Array x = random_array(rng, 3, 2, -1.0, 1.0);
    Tape t;
    const Var v = t.variable(x);
    t.backward(sum(softplus_slope(v, 4.0) * 2.0));
    const Array s = 1.0 / (1.0 + (-4.0 * x).exp());
    CHECK((t.grad(v) - 2.0 * 4.0 * s * (1.0 - s)).abs().maxCoeff() < 1e-12);
}

TEST_CASE("templated physics terms agree between doubles and tape values")
{
    std::mt19937_64 rng(6);
    const Array c = random_array(rng, 8, 1, 0.05, 1.0);
    const Array r = random_array(rng, 8, 1, 0.05, 1.0);
    Tape t;
    const Var cv = t.constant(c);
    const Var rv = t.constant(r);
    const auto refl = neisf::fresnel_reflection_block(cv, 1.5);
    const auto tran = neisf::fresnel_transmission_block(cv, 1.5);
    const Var d = neisf::ggx_distribution(cv, rv);
    const Var g = neisf::smith_g1(cv, rv);
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
        const auto rb = neisf::fresnel_reflection_block(c(i), 1.5);
        const auto tb = neisf::fresnel_transmission_block(c(i), 1.5);
        CHECK(refl.a.value()(i) == doctest::Approx(rb.a).epsilon(1e-14));
        CHECK(refl.c.value()(i) == doctest::Approx(rb.c).epsilon(1e-14));
        CHECK(tran.b.value()(i) == doctest::Approx(tb.b).epsilon(1e-14));
        CHECK(d.value()(i) == doctest::Approx(neisf::ggx_distribution(c(i), r(i))).epsilon(1e-14));
        CHECK(g.value()(i) == doctest::Approx(neisf::smith_g1(c(i), r(i))).epsilon(1e-14));
    }
    check_gradient([](Tape&, const std::vector<Var>& v) {
        const auto f = neisf::fresnel_transmission_block(v[0], 1.5);
        return f.a + f.b * 2.0 + f.c * 3.0 + neisf::smith_g1(v[0], v[1]) * neisf::ggx_distribution(v[0], v[1]);
    }, {c, r}, 1e-5);
}
