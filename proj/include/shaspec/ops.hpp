#pragma once

#include <string_view>
#include <vector>

#include "shaspec/tape.hpp"

// Differentiable operations on tape variables. Unless stated otherwise all
// operands must live on the same tape, and row-wise operations follow the
// batch convention of Tensor::rows(): a rank-1 tensor is a single row,
// otherwise dim 0 indexes rows.
namespace shaspec::ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Elementwise a / b.
Var div(Var a, Var b);
Var scale(Var a, double factor);
/// Elementwise product with a constant tensor (dropout masks, weights).
Var mul_const(Var a, const Tensor& c);

/// [m x n] + bias[n] broadcast over rows.
Var add_row_bias(Var a, Var bias);
/// [B x C x H x W] + bias[C] broadcast over batch and space.
Var add_channel_bias(Var a, Var bias);

Var relu(Var a);
Var tanh(Var a);

Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

/// Concatenates [m x n_i] matrices along columns.
Var concat_cols(const std::vector<Var>& parts);
/// Concatenates [B x C_i x H x W] maps along channels.
Var concat_channels(const std::vector<Var>& parts);

/// Row-wise softmax with max subtraction.
Var softmax(Var z);
/// Softmax over dim 1 of a [B x K x H x W] map (per pixel).
Var softmax_channels(Var z);

/// Mean over rows of -sum_j target_j * log_softmax(logits)_j. `target` is
/// either one distribution broadcast to every row or one per row.
Var cross_entropy_soft(Var logits, const Tensor& target);

/// Mean over rows of sum_j p_j log(p_j / q_j), with q clamped below at 1e-12
/// and 0 log 0 := 0.
Var kl_div(Var p, Var q);

enum class PNorm { l1, l2, mse };
PNorm parse_pnorm(std::string_view name);
std::string_view pnorm_name(PNorm p);

/// Mean over rows of a per-row distance: l1 is the mean absolute difference,
/// l2 the Euclidean norm, mse the mean squared difference.
Var pnorm_distance(Var a, Var b, PNorm p);

/// 3x3 cross-correlation, stride 1, zero padding 1. Accepts x as
/// [C_in x H x W] or [B x C_in x H x W]; kernels are [C_out x C_in x 3 x 3].
Var conv2d(Var x, Var kernels);
/// Bias-free 1x1 channel mixing: [B x C_in x H x W] with weights [C_out x C_in].
Var channel_linear(Var x, Var weights);
/// 2x2 average pooling with stride 2 (H and W must be even).
Var avg_pool2(Var x);
/// Nearest-neighbour 2x upsampling.
Var upsample2(Var x);
/// [B x C x H x W] -> [B x C].
Var global_avg_pool(Var x);

}  // namespace shaspec::ops
