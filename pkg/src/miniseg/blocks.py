"""Composite building blocks: AHSP, CB, DB, FFM and the single-branch variant.

Convolutions that feed a BatchNorm carry no bias; the attention conv in AHSP
is the only biased conv inside a block.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .layers import BatchNorm2d, Conv2d, Module, ModuleList, activation, depthwise, pointwise
from .tensor import ops
from .tensor.core import Tensor


class AHSP(Module):
    """Attentive hierarchical spatial pyramid.

    A pointwise conv shrinks ``in_channels`` to ``out_channels // K``; K
    depthwise 3x3 convs with dilation 1, 2, 4, ... and a 3x3 average pool run
    on the result; the branch outputs are prefix-summed, re-weighted by a
    K-channel spatial attention map (residually) and fused by a K-grouped
    pointwise conv followed by BN and PReLU.

    ``stride`` applies to the depthwise convs and the pool only.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        stride: int = 1,
        branches: int = 4,
        attention: bool = True,
        use_relu: bool = False,
    ):
        super().__init__()
        if out_channels % branches:
            raise ValueError(f"AHSP: out_channels={out_channels} not divisible by K={branches}")
        if stride not in (1, 2):
            raise ValueError(f"AHSP: stride must be 1 or 2, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.branches = branches
        self.stride = stride
        self.use_attention = attention
        width = out_channels // branches
        self.shrink = pointwise(in_channels, width, rng)
        self.pyramid = ModuleList(
            depthwise(width, rng, 3, stride, dilation=2**k) for k in range(branches)
        )
        if attention:
            self.attention = pointwise(out_channels, branches, rng, groups=branches, bias=True)
        self.fuse = pointwise(out_channels, out_channels, rng, groups=branches)
        self.bn = BatchNorm2d(out_channels)
        self.act = activation(out_channels, use_relu)

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        s = self.shrink(x)
        f0 = ops.avg_pool2d(s, self.stride)
        fs = [conv(s) for conv in self.pyramid]
        hier = []
        acc = f0
        for f in fs:
            acc = ops.add(acc, f)
            hier.append(acc)
        if self.use_attention:
            att = ops.sigmoid(self.attention(ops.concat_channels(hier)))
            weighted = [
                ops.add(h, ops.mul_broadcast(h, ops.slice_channels(att, k, k + 1)))
                for k, h in enumerate(hier)
            ]
        else:
            att = None
            weighted = hier
        out = self.act(self.bn(self.fuse(ops.concat_channels(weighted))))
        if trace is not None:
            trace.update(S=s, F0=f0, F=fs, F_dot=hier, A=att, F_ddot=weighted)
        return out


class SingleBranch(Module):
    """AHSP reduced to one dilation-1 depthwise branch: no pool, no
    hierarchy, no attention. The lone branch is widened back to
    ``out_channels`` by a dense pointwise conv."""

    def __init__(self, in_channels, out_channels, rng, stride=1, branches=4, use_relu=False):
        super().__init__()
        width = out_channels // branches
        self.shrink = pointwise(in_channels, width, rng)
        self.dsconv = depthwise(width, rng, 3, stride)
        self.fuse = pointwise(width, out_channels, rng)
        self.bn = BatchNorm2d(out_channels)
        self.act = activation(out_channels, use_relu)

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        return self.act(self.bn(self.fuse(self.dsconv(self.shrink(x)))))


class ConvBlock(Module):
    """3x3 vanilla conv, BN, PReLU."""

    def __init__(self, in_channels, out_channels, rng, stride=1, use_relu=False):
        super().__init__()
        spec = ops.ConvSpec(in_channels, out_channels, (3, 3), stride, 1)
        self.conv = Conv2d(spec, rng)
        self.bn = BatchNorm2d(out_channels)
        self.act = activation(out_channels, use_relu)

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        return self.act(self.bn(self.conv(x)))


class Downsampler(Module):
    """Pointwise conv, then a depthwise conv (5x5 by default) carrying the
    stride, BN, PReLU."""

    def __init__(self, in_channels, out_channels, rng, stride=1, kernel=5, use_relu=False):
        super().__init__()
        self.pw = pointwise(in_channels, out_channels, rng)
        self.dw = depthwise(out_channels, rng, kernel, stride)
        self.bn = BatchNorm2d(out_channels)
        self.act = activation(out_channels, use_relu)

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        return self.act(self.bn(self.dw(self.pw(x))))


class FeatureFusion(Module):
    def __init__(self, in_channels, out_channels, rng):
        super().__init__()
        self.pw = pointwise(in_channels, out_channels, rng)
        self.dw1 = depthwise(out_channels, rng, 3, 1, dilation=1)
        self.dw2 = depthwise(out_channels, rng, 3, 1, dilation=2)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        s = self.pw(x)
        return self.bn(ops.add(self.dw1(s), self.dw2(s)))
