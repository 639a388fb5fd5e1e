"""Parameter and FLOP accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..layers import Module
from ..tensor.core import Tensor, count_flops_ctx
from .network import MiniSeg

PAPER_PARAMS = 82_910
PARAM_BAND = (75_000, 91_000)
PAPER_FLOPS = 0.50e9
FLOP_BAND = (0.35e9, 0.65e9)

FLOP_CONVENTION = (
    "conv = 2 x MACs = 2 * out_elements * (C_in/groups) * k_h * k_w (bias adds not counted); "
    "batch_norm, activations, avg_pool, upsample, softmax = 2 per output element; "
    "add and mul = 1 per output element; concat/split = 0"
)


@dataclass
class ParamReport:
    total: int
    by_module: Dict[str, int]
    by_block: Dict[str, int] = field(default_factory=dict)

    @property
    def in_band(self) -> bool:
        return PARAM_BAND[0] <= self.total <= PARAM_BAND[1]


@dataclass
class FlopReport:
    total: int
    height: int
    width: int
    by_op: Dict[str, int]
    by_module: Dict[str, int]
    convention: str = FLOP_CONVENTION

    @property
    def in_band(self) -> bool:
        return FLOP_BAND[0] <= self.total <= FLOP_BAND[1]


def count_parameters(model: Module) -> ParamReport:
    """Learnable scalars only; BN running statistics are excluded."""
    by_module: Dict[str, int] = {}
    by_block: Dict[str, int] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        parts = name.split(".")
        by_module[parts[0]] = by_module.get(parts[0], 0) + p.size
        block = ".".join(parts[:3]) if len(parts) > 3 else ".".join(parts[:-1])
        by_block[block] = by_block.get(block, 0) + p.size
    return ParamReport(sum(by_module.values()), by_module, by_block)


def trace_flops(model: MiniSeg, height: int, width: int) -> FlopReport:
    """Count FLOPs by running an instrumented inference pass at (height, width)."""
    x = Tensor(np.zeros((1, 3, height, width), dtype=np.float32))
    with count_flops_ctx() as counter:
        model.forward(x, mode="infer")
    return FlopReport(counter.total, height, width, dict(counter.by_op), dict(counter.by_scope))


def count_flops(model: MiniSeg, height: int = 512, width: int = 512) -> FlopReport:
    """FLOPs of one inference pass on a ``height x width`` image.

    Every feature map has extent (H / 2^l) x (W / 2^l) for a fixed l, so each
    op's count is linear in H*W once H and W are multiples of 16. The trace
    therefore runs at 16x16 and is scaled exactly by H*W / 256.
    """
    if height % 16 or width % 16 or height <= 0 or width <= 0:
        raise ValueError(f"size {height}x{width} must be positive multiples of 16")
    base = trace_flops(model, 16, 16)
    factor = (height * width) // 256
    return FlopReport(
        base.total * factor,
        height,
        width,
        {k: v * factor for k, v in base.by_op.items()},
        {k: v * factor for k, v in base.by_module.items()},
    )
