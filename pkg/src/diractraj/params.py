"""Physical parameters shared by every module."""
from dataclasses import dataclass, asdict

import numpy as np


@dataclass(frozen=True)
class PhysicalParams:
    """Mass, reduced Planck constant and speed of light (natural units by default)."""

    m: float = 1.0
    hbar: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        for name in ("m", "hbar", "c"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be finite and strictly positive, got {val!r}")

    @property
    def omega(self):
        """Angular drift rate 2 m c^2 / hbar."""
        return 2.0 * self.m * self.c**2 / self.hbar

    @property
    def rest_energy(self):
        return self.m * self.c**2

    def to_dict(self):
        return asdict(self)


DEFAULT_PARAMS = PhysicalParams()
