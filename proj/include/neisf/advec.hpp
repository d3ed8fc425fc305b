#pragma once

// Batches of 3-vectors on an autodiff tape, one (rows x 1) Var per
// coordinate, plus the few vector operations the renderer needs.

#include "neisf/ad.hpp"

namespace neisf::ad {

struct V3 {
    Var x;
    Var y;
    Var z;
};

/// Columns 0..2 of a (rows x 3) array as constants.
V3 v3_constant(Tape& tape, const Array& m);
/// Columns 0..2 of a (rows x 3) Var.
V3 v3_split(const Var& m);
Array v3_value(const V3& v);

Var dot(const V3& a, const V3& b);
V3 cross(const V3& a, const V3& b);
V3 operator+(const V3& a, const V3& b);
V3 operator-(const V3& a, const V3& b);
V3 operator*(const V3& a, const Var& k);
V3 operator*(const V3& a, double k);
/// v / sqrt(|v|^2 + eps2); eps2 keeps degenerate vectors finite.
V3 normalize(const V3& v, double eps2 = 1e-24);
V3 repeat_rows(const V3& v, Eigen::Index k);
V3 sum_groups(const V3& v, Eigen::Index k);

}  // namespace neisf::ad
