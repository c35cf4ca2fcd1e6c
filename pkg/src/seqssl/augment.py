"""Feature masking in the SpecAugment style: up to `f_max` contiguous
frequency bands zeroed `m_f` times, up to `t_max` contiguous frames zeroed
`m_t` times.  Mask width is drawn first (uniform over 0..max, clamped to the
dimension), then the start position uniform over valid offsets; masks may
overlap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# reference parameterization at 80 feature bands: strong masking for training
# inputs, frequency-only weak masking for pseudo-label generation
_PRESETS_AT_80 = {
    "strong": (35, 50, 1, 2),
    "weak": (5, 0, 1, 0),
    "none": (0, 0, 0, 0),
}


@dataclass(frozen=True)
class AugmentPolicy:
    f_max: int = 0   # max contiguous frequency bands per mask
    t_max: int = 0   # max contiguous frames per mask
    m_f: int = 0     # frequency mask count
    m_t: int = 0     # time mask count

    def __post_init__(self):
        if min(self.f_max, self.t_max, self.m_f, self.m_t) < 0:
            raise ValueError("augment policy fields must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.m_f * self.f_max == 0 and self.m_t * self.t_max == 0


def preset(name: str, feature_dim: int) -> AugmentPolicy:
    """Named policy with mask widths scaled by feature_dim/80 (rounded, at
    least 1 whenever the unscaled width is nonzero).  Mask counts are kept."""
    if name not in _PRESETS_AT_80:
        raise ValueError(f"unknown augment preset {name!r} (choose from {sorted(_PRESETS_AT_80)})")
    f_max, t_max, m_f, m_t = _PRESETS_AT_80[name]

    def scaled(v):
        if v == 0:
            return 0
        return max(1, round(v * feature_dim / 80))

    return AugmentPolicy(f_max=scaled(f_max), t_max=scaled(t_max), m_f=m_f, m_t=m_t)


def spec_augment(x: np.ndarray, policy: AugmentPolicy,
                 rng: np.random.Generator) -> np.ndarray:
    """Apply the masking policy to a T x F feature matrix (time on axis 0).

    Returns a new array of the same shape where every cell is either the
    original value or exactly 0.  Deterministic given the rng state.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("spec_augment: empty feature matrix")
    out = x.copy()
    T, F = out.shape
    for _ in range(policy.m_f):
        width = int(rng.integers(0, min(policy.f_max, F) + 1))
        start = int(rng.integers(0, F - width + 1))
        out[:, start:start + width] = 0.0
    for _ in range(policy.m_t):
        width = int(rng.integers(0, min(policy.t_max, T) + 1))
        start = int(rng.integers(0, T - width + 1))
        out[start:start + width, :] = 0.0
    return out
