"""The MiniSeg encoder-decoder.

Encoder: four stages, each holding a main path of N_i blocks (ConvBlock in
stage 1, AHSP afterwards) and a downsampler path of M_i DBs. The paths trade
features through nested skips; between stages their last outputs are
concatenated, fused by a pointwise conv and split back into one chunk per path.

Decoder: the 1/16 map is projected and normalized, then repeatedly upsampled
x2, passed through an FFM and merged with a projected encoder map of the same
scale. Each decoder level has a pointwise prediction head whose output is
upsampled to the input size.
"""

from __future__ import annotations

from typing import List, Optional, Union

import numpy as np

from ..blocks import AHSP, ConvBlock, Downsampler, FeatureFusion, SingleBranch
from ..layers import BatchNorm2d, Module, ModuleList, activation, pointwise
from ..tensor import ops
from ..tensor.core import Tensor, flop_scope, no_grad
from .config import MiniSegConfig


def skip_index(j: int, m: int) -> int:
    """1-based index of the downsampler output feeding main-path block ``j`` (j >= 2)."""
    return j - 1 if j - 1 <= m else m


class Stage(Module):
    def __init__(self, cfg: MiniSegConfig, index: int, in_channels: int, rng: np.random.Generator):
        super().__init__()
        c = cfg.channels[index]
        n = cfg.blocks[index]
        m = cfg.effective_downsamplers[index]
        relu = cfg.has("relu_activation")
        stride = 1 if (index == 3 and cfg.has("no_decoder")) else 2
        self.index = index
        self.stride = stride
        self.two_path = m > 0
        self.channel_split = self.two_path and index > 0 and not cfg.has("no_channel_split")

        if self.channel_split:
            # concat(E, Q) -> pointwise -> split into one chunk per path
            self.fuse = pointwise(2 * in_channels, 2 * in_channels, rng)

        def main_block(cin, s):
            if index == 0 and not cfg.has("cb_as_ahsp"):
                return ConvBlock(cin, c, rng, s, relu)
            if cfg.has("single_branch"):
                return SingleBranch(cin, c, rng, s, cfg.branches, relu)
            return AHSP(cin, c, rng, s, cfg.branches, not cfg.has("no_attention"), relu)

        self.e = ModuleList(main_block(in_channels if j == 0 else c, stride if j == 0 else 1) for j in range(n))
        dk = 3 if cfg.has("db_kernel_3") else 5
        self.q = ModuleList(
            Downsampler(in_channels if k == 0 else c, c, rng, stride if k == 0 else 1, dk, relu) for k in range(m)
        )

    def forward(self, e_prev: Tensor, q_prev: Optional[Tensor]):
        """Return (E_N, Q_M or None, all E outputs, all Q outputs)."""
        e_in = q_in = e_prev
        if self.index == 0:
            q_in = e_prev  # both paths start from the image
        elif self.channel_split:
            chunk_e, chunk_q = ops.split_channels(self.fuse(ops.concat_channels([e_prev, q_prev])), 2)
            e_in = ops.add(chunk_e, e_prev)
            q_in = ops.add(chunk_q, q_prev)
        elif self.two_path:
            e_in = q_in = ops.add(e_prev, q_prev)

        es = [self.e[0](e_in)]
        qs = [self.q[0](q_in)] if self.two_path else []
        m = len(self.q)
        for j in range(1, len(self.e)):
            if self.two_path:
                skip = qs[skip_index(j + 1, m) - 1]
                x = ops.add(es[j - 1], skip)
            else:
                x = es[j - 1]
            new_e = ops.add(self.e[j](x), es[j - 1])
            if self.two_path and j < m:
                qs.append(ops.add(self.q[j](ops.add(qs[j - 1], es[j - 1])), qs[j - 1]))
            es.append(new_e)
        return es[-1], (qs[-1] if qs else None), es, qs


class Decoder(Module):
    def __init__(self, cfg: MiniSegConfig, rng: np.random.Generator):
        super().__init__()
        ch = cfg.channels
        relu = cfg.has("relu_activation")
        self.top = pointwise(ch[3], ch[3], rng)
        self.top_bn = BatchNorm2d(ch[3])
        self.ffm = ModuleList()
        self.lateral = ModuleList()
        self.lateral_bn = ModuleList()
        self.act = ModuleList()
        for i in (2, 1, 0):
            if cfg.has("ffm_as_ahsp"):
                self.ffm.append(AHSP(ch[i + 1], ch[i], rng, 1, cfg.branches, True, relu))
            else:
                self.ffm.append(FeatureFusion(ch[i + 1], ch[i], rng))
            self.lateral.append(pointwise(ch[i], ch[i], rng))
            self.lateral_bn.append(BatchNorm2d(ch[i]))
            self.act.append(activation(ch[i], relu))

    def forward(self, encoded: List[Tensor]) -> List[Tensor]:
        """encoded[i] is the last main-path output of stage i+1; returns [D_1..D_4]."""
        d = self.top_bn(self.top(encoded[3]))
        ds = [d]
        for k, i in enumerate((2, 1, 0)):
            s2 = self.ffm[k](ops.upsample_bilinear(d, 2))
            lat = self.lateral_bn[k](self.lateral[k](encoded[i]))
            d = self.act[k](ops.add(s2, lat))
            ds.append(d)
        return ds[::-1]


class MiniSeg(Module):
    def __init__(self, cfg: MiniSegConfig, rng: np.random.Generator):
        super().__init__()
        self.config = cfg
        in_ch = 3
        for i in range(4):
            setattr(self, f"stage{i + 1}", Stage(cfg, i, in_ch, rng))
            in_ch = cfg.channels[i]
        if cfg.has("no_decoder"):
            self.heads = ModuleList([pointwise(cfg.channels[3], cfg.classes, rng, bias=True)])
        else:
            self.decoder = Decoder(cfg, rng)
            n_heads = 1 if cfg.has("no_deep_supervision") else 4
            self.heads = ModuleList(pointwise(cfg.channels[i], cfg.classes, rng, bias=True) for i in range(n_heads))

    @property
    def stages(self) -> List[Stage]:
        return [getattr(self, f"stage{i + 1}") for i in range(4)]

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ops.ShapeError(f"expected input of shape (N, 3, H, W), got {x.shape}")
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise ops.ShapeError(
                f"input extent {h}x{w} is not divisible by 16; pad the image "
                f"(e.g. to {-(-h // 16) * 16}x{-(-w // 16) * 16}) before the forward pass"
            )

    def _encode(self, x: Tensor, trace: Optional[dict]):
        e, q = x, None
        outs = []
        for i, stage in enumerate(self.stages):
            with flop_scope(f"stage{i + 1}"):
                e, q, es, qs = stage(e, q)
            outs.append(e)
            if trace is not None:
                trace.setdefault("E", []).append(es)
                trace.setdefault("Q", []).append(qs)
        return outs

    def logits(self, x: Tensor, trace: Optional[dict] = None) -> List[Tensor]:
        """Pre-softmax head outputs at input resolution, finest first."""
        if x.ndim == 3:
            x = Tensor(x.data[None], dtype=x.dtype)
        self.check_input(x)
        encoded = self._encode(x, trace)
        if self.config.has("no_decoder"):
            with flop_scope("heads"):
                return [ops.upsample_bilinear(self.heads[0](encoded[3]), 8)]
        with flop_scope("decoder"):
            ds = self.decoder(encoded)
        if trace is not None:
            trace["D"] = ds
        outs = []
        with flop_scope("heads"):
            for i, head in enumerate(self.heads):
                outs.append(ops.upsample_bilinear(head(ds[i]), 2 ** (i + 1)))
        return outs

    def forward(self, x: Tensor, mode: str = "infer", trace: Optional[dict] = None) -> Union[Tensor, List[Tensor]]:
        """``train``: BN in batch mode, returns every head's logits.
        ``infer``: running BN stats, no graph, returns softmax of the finest head."""
        if mode == "train":
            self.train(True)
            return self.logits(x, trace)
        if mode != "infer":
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        self.eval()
        with no_grad():
            p1 = self.logits(x, trace)[0]
            with flop_scope("heads"):
                return ops.softmax_channels(p1)


def build(cfg: Optional[MiniSegConfig] = None, seed: int = 0) -> MiniSeg:
    cfg = cfg or MiniSegConfig()
    cfg.validate()
    return MiniSeg(cfg, np.random.default_rng(seed))
