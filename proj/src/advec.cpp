#include "neisf/advec.hpp"

namespace neisf::ad {

V3 v3_constant(Tape& tape, const Array& m)
{
    return {tape.constant(m.col(0)), tape.constant(m.col(1)), tape.constant(m.col(2))};
}

V3 v3_split(const Var& m) { return {col(m, 0), col(m, 1), col(m, 2)}; }

Array v3_value(const V3& v)
{
    Array out(v.x.rows(), 3);
    out.col(0) = v.x.value().col(0);
    out.col(1) = v.y.value().col(0);
    out.col(2) = v.z.value().col(0);
    return out;
}

Var dot(const V3& a, const V3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

V3 cross(const V3& a, const V3& b)
{
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

V3 operator+(const V3& a, const V3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
V3 operator-(const V3& a, const V3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
V3 operator*(const V3& a, const Var& k) { return {a.x * k, a.y * k, a.z * k}; }
V3 operator*(const V3& a, double k) { return {a.x * k, a.y * k, a.z * k}; }

V3 normalize(const V3& v, double eps2)
{
    const Var inv = 1.0 / sqrt(dot(v, v) + eps2);
    return v * inv;
}

V3 repeat_rows(const V3& v, Eigen::Index k)
{
    return {repeat_rows(v.x, k), repeat_rows(v.y, k), repeat_rows(v.z, k)};
}

V3 sum_groups(const V3& v, Eigen::Index k)
{
    return {sum_groups(v.x, k), sum_groups(v.y, k), sum_groups(v.z, k)};
}

}  // namespace neisf::ad
