"""Model variants, run configuration and seed derivation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .control import DETERMINISTIC, PROBABILISTIC
from .decision import DEFAULT_GRID_N, DEFAULT_MC_SAMPLES, SMALLEST_ABS
from .errors import UnsupportedStrategyError
from .perception import LATENT_NOISE, MCD, MEAN_ONLY

MI_MODE = "mi_mode"
DE_MEAN = "de_mean"
STRATEGIES = (MI_MODE, DE_MEAN)

NOISE_LOW = (1.0, 2.0)
NOISE_HIGH = (1.5, 3.0)


@dataclass(frozen=True)
class VariantConfig:
    id: str
    perception_mode: str
    M: int
    policy_kind: str
    N: int

    @property
    def cps(self):
        return self.M * self.N


VARIANTS = {
    "m0": VariantConfig("m0", MCD, 32, PROBABILISTIC, 5),
    "m1": VariantConfig("m1", LATENT_NOISE, 32, PROBABILISTIC, 5),
    "m2": VariantConfig("m2", LATENT_NOISE, 1, PROBABILISTIC, 5),
    "m3": VariantConfig("m3", LATENT_NOISE, 32, DETERMINISTIC, 1),
    "m4": VariantConfig("m4", MEAN_ONLY, 1, PROBABILISTIC, 1),
}

# (variant, strategy) cells of the results table
TABLE_CELLS = [("m0", MI_MODE), ("m0", DE_MEAN), ("m1", DE_MEAN),
               ("m2", DE_MEAN), ("m3", DE_MEAN), ("m4", DE_MEAN)]


def get_variant(vid) -> VariantConfig:
    if isinstance(vid, VariantConfig):
        return vid
    try:
        return VARIANTS[vid.lower()]
    except KeyError:
        raise ValueError(f"unknown variant {vid!r}; choose one of {sorted(VARIANTS)}") from None


def check_compatible(variant, strategy):
    variant = get_variant(variant)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose one of {STRATEGIES}")
    if strategy == MI_MODE and variant.policy_kind != PROBABILISTIC:
        raise UnsupportedStrategyError(
            f"{variant.id} uses a deterministic policy; mi_mode needs probabilistic members "
            "(deterministic models are evaluated with de_mean only)")
    return variant


def derive_seed(*keys) -> int:
    """Child seed from a root seed and integer/string keys.

    Strings are mapped to their UTF-8 bytes as an integer, so the rule is
    stable across processes (no reliance on ``hash``).
    """
    ints = [k if isinstance(k, int) else int.from_bytes(str(k).encode(), "little") for k in keys]
    words = []
    for k in ints:
        k = int(k)
        while True:
            words.append(k & 0xFFFFFFFF)
            k >>= 32
            if not k:
                break
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class RunConfig:
    seed: int = 0
    grn: float = NOISE_LOW[0]
    ghn: float = NOISE_LOW[1]
    n_tracks: int = 6
    trials: int = 2
    mc_samples: int = DEFAULT_MC_SAMPLES
    grid_n: int = DEFAULT_GRID_N
    mode_rule: str = SMALLEST_ABS
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_tracks < 1 or self.trials < 1:
            raise ValueError("n_tracks and trials must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.grid_n < 64:
            raise ValueError("grid_n must be >= 64")
        if self.grn < 0 or self.ghn < 0:
            raise ValueError("noise levels must be non-negative")

    def to_dict(self):
        return asdict(self)
