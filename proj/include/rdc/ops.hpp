#pragma once

#include "rdc/tape.hpp"

// Differentiable primitives. Binary ops require identical shapes; there is no
// broadcasting.
namespace rdc::ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var exp(Var a);
// Throws DomainError naming the first non-positive index.
Var log(Var a);
Var negate(Var a);
// Subgradient 0 at exactly 0.
Var relu(Var a);
Var sigmoid(Var a);

// Sum of all entries as a scalar of shape {1}.
Var sum(Var a);

// [m x k] * [k x n].
Var matmul(Var a, Var b);

// Same-size 3x3 convolution (zero padding 1, stride 1).
// input [Cin x H x W], kernel [Cout x Cin x 3 x 3], bias [Cout].
Var conv2d_3x3(Var input, Var kernel, Var bias);

Var downsample_avg2x(Var input);
Var upsample_nearest2x(Var input);

// Per-pixel log-softmax over the channel axis of [L x H x W].
Var channel_log_softmax(Var logits);

// Per-pixel division by the channel-vector norm (floored at `floor`).
Var normalize_channels(Var input, double floor = 1e-8);

}  // namespace rdc::ad
