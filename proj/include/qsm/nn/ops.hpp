#pragma once

#include <vector>

#include "qsm/nn/tensor.hpp"

namespace qsm::nn {

// Weights use the (out, in, k, k, k) layout for convolutions and
// (in, out, 3, 3, 3) for the stride-2 transposed convolution, stored in Shape5
// as {n, c, d, h, w}. Biases are (channels, 1, 1, 1, 1).

/// Stride-1 convolution with odd cubic kernel, zero "same" padding.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int dilation = 1);

/// Transposed convolution, kernel 3, stride 2, padding 1, output padding 1:
/// doubles every spatial dim.
Tensor conv_transpose3d_x2(const Tensor& x, const Tensor& w, const Tensor& b);

/// 2x2x2 max pooling with stride 2; ties route to the first maximum.
Tensor max_pool2(const Tensor& x);

Tensor leaky_relu(const Tensor& x, double slope);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);

/// (N, 2C, ...) -> (N, C, ...): LeakyReLU(first half) * sigmoid(second half).
Tensor gated_activation(const Tensor& pre, double slope);

/// Per-(sample, channel) normalization over space followed by affine gamma/beta.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Concatenation along the leading (batch / out-channel) axis.
Tensor concat_rows(const Tensor& a, const Tensor& b);

/// Embedded-Gaussian attention: y_i = sum_j softmax_j(theta_i . phi_j) g_j,
/// with theta, phi, g of shape (N, C', d, h, w).
Tensor attention(const Tensor& theta, const Tensor& phi, const Tensor& g);

/// Row-stochastic attention matrix for sample n (S x S, row-major).
std::vector<double> attention_weights(const Tensor& theta, const Tensor& phi, std::size_t n);

/// Mean |pred - target| over voxels where mask > 0; subgradient 0 at ties.
Tensor l1_loss(const Tensor& pred, const Tensor& target, const Tensor& mask);

/// sum_i coeff_i x_i, a scalar probe used by gradient checks.
Tensor weighted_sum(const Tensor& x, std::vector<double> coeffs);

// ------------------------------------------------------------- composite layers

struct ConvParams {
  Tensor w, b;
};

struct GatedConvParams {
  ConvParams feat, gate;
};

/// LeakyReLU(conv(x; feat)) * sigmoid(conv(x; gate)), 3x3x3, same padding.
Tensor gated_conv3(const Tensor& x, const GatedConvParams& p, int dilation, double slope);

struct NonLocalParams {
  ConvParams theta, phi, g, out;  // 1x1x1 convolutions
};

/// out = W_z * attention(theta(x), phi(x), g(x)) + x. Throws memory_cap when
/// the spatial size exceeds max_positions.
Tensor nonlocal_block(const Tensor& x, const NonLocalParams& p, std::size_t max_positions = 4096);

}  // namespace qsm::nn
