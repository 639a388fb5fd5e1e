from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import FrozenSet, Tuple

# Order fixes the bit positions in the checkpoint flag word.
ABLATIONS = (
    "single_branch",
    "no_attention",
    "no_two_path",
    "no_channel_split",
    "relu_activation",
    "no_decoder",
    "no_deep_supervision",
    "cb_as_ahsp",
    "db_kernel_3",
    "ffm_as_ahsp",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MiniSegConfig:
    channels: Tuple[int, ...] = (8, 24, 32, 64)
    blocks: Tuple[int, ...] = (3, 4, 9, 9)
    downsamplers: Tuple[int, ...] = (2, 2, 5, 4)
    branches: int = 4
    classes: int = 2
    flags: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "blocks", tuple(int(n) for n in self.blocks))
        object.__setattr__(self, "downsamplers", tuple(int(m) for m in self.downsamplers))
        object.__setattr__(self, "flags", frozenset(self.flags))
        self.validate()

    def validate(self) -> None:
        if not (len(self.channels) == len(self.blocks) == len(self.downsamplers) == 4):
            raise ConfigError("channels, blocks and downsamplers need exactly 4 stages")
        unknown = self.flags - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flag(s): {sorted(unknown)}; known: {', '.join(ABLATIONS)}")
        if self.branches <= 0 or self.classes < 2:
            raise ConfigError("branches must be positive and classes >= 2")
        for i, (c, n, m) in enumerate(zip(self.channels, self.blocks, self.downsamplers), 1):
            if c <= 0 or n <= 0 or m <= 0:
                raise ConfigError(f"stage {i}: channel, block and downsampler counts must be positive")
            if c % self.branches:
                raise ConfigError(f"stage {i}: C={c} not divisible by K={self.branches}")
            if m >= n:
                raise ConfigError(f"stage {i}: downsampler count M={m} must be smaller than block count N={n}")

    def has(self, flag: str) -> bool:
        return flag in self.flags

    def with_flags(self, *flags: str) -> "MiniSegConfig":
        return replace(self, flags=self.flags | frozenset(flags))

    @property
    def two_path(self) -> bool:
        return not self.has("no_two_path")

    @property
    def effective_downsamplers(self) -> Tuple[int, ...]:
        return self.downsamplers if self.two_path else (0, 0, 0, 0)

    @property
    def output_stride(self) -> int:
        return 8 if self.has("no_decoder") else 16

    def flag_bits(self) -> int:
        return sum(1 << i for i, name in enumerate(ABLATIONS) if name in self.flags)

    @classmethod
    def from_flag_bits(cls, bits: int, **kwargs) -> "MiniSegConfig":
        unknown = bits >> len(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation bits 0x{bits:x}")
        flags = frozenset(name for i, name in enumerate(ABLATIONS) if bits & (1 << i))
        return cls(flags=flags, **kwargs)
