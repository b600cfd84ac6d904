#pragma once

#include <vector>

#include "focalcomm/tape.hpp"
#include "focalcomm/tensor.hpp"

namespace focalcomm {

// Differentiable primitives. Every op is a pure function of its inputs; when a
// tape is active and any input is tracked, the op records itself for backward.
// Binary elementwise ops broadcast trailing axes (numpy rules).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

/// Strict 2-D matrix product a[m,k] x b[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Batched matrix product. a is [B..., m, k]; b is [B..., k, n] with the same
/// batch extents, or rank-2 [k, n] broadcast over all batches.
Tensor bmm(const Tensor& a, const Tensor& b);

/// x[..., in] * w[in, out] + bias[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);

/// Spatial shift of the two trailing axes with zero fill.
Tensor shift2d(const Tensor& x, int dy, int dx);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);
/// Max along an axis; gradient routes to the first maximal element.
Tensor max_axis(const Tensor& x, int axis);

Tensor softmax(const Tensor& x, int axis);

/// Softmax restricted to positions where `valid` (broadcast over trailing
/// axes) is nonzero; invalid positions are exactly 0 in the output. A slice
/// with no valid entry is rejected.
Tensor masked_softmax(const Tensor& x, const Tensor& valid, int axis);

/// Same-padded 2-D convolution. x is [Cin, H, W], w is [Cout, Cin, kh, kw],
/// bias is [Cout]. Output spatial extents are ceil(H/stride) x ceil(W/stride).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1);

/// Marks cells that equal the max of their kernel x kernel neighborhood
/// (same padding with -inf). Ties mark all tied maxima. Applied per leading
/// plane of an [K, H, W] tensor. Not differentiable: the output is a constant
/// binary mask.
Tensor max_pool_peaks(const Tensor& h, int kernel);

/// Gathers column vectors x[:, cell] for each flat cell index (row-major over
/// H x W) into an [M, C] tensor.
Tensor gather_cells(const Tensor& x, const std::vector<int>& cells);

/// Channel-wise max over rows of feats[V, C] that share a column index,
/// scattered into a dense [C, H, W] map; empty columns stay zero.
Tensor scatter_max_columns(const Tensor& feats, const std::vector<int>& columns, int height, int width);

}  // namespace focalcomm
