from dataclasses import dataclass, replace
from typing import Iterable, Optional, Tuple

import torch

from odmrsim.core.exceptions import DimensionMismatch, InputError
from odmrsim.core.spin_algebra import RDTYPE, device


@dataclass(frozen=True)
class Spectrum:
    """
    CW-ODMR spectrum: contrast sampled on an ascending frequency grid (MHz).

    ``delta_deg`` is the applied phase difference and ``b0`` the static field
    (mT) the spectrum was computed or measured at, when known.
    """

    freqs: torch.Tensor
    contrasts: torch.Tensor
    delta_deg: Optional[float] = None
    b0: Optional[float] = None

    def __post_init__(self):
        freqs = torch.as_tensor(self.freqs, dtype=RDTYPE, device=device).flatten()
        contrasts = torch.as_tensor(self.contrasts, dtype=RDTYPE, device=device).flatten()
        if freqs.numel() != contrasts.numel():
            raise DimensionMismatch(
                f"Spectrum has {freqs.numel()} frequencies but {contrasts.numel()} contrasts."
            )
        if freqs.numel() > 1 and not bool((freqs[1:] > freqs[:-1]).all()):
            raise InputError("Spectrum frequencies must be strictly ascending.")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "contrasts", contrasts)

    def __len__(self) -> int:
        return self.freqs.numel()

    def with_contrasts(self, contrasts: torch.Tensor) -> "Spectrum":
        return replace(self, contrasts=contrasts)

    def masked(self, bands: Iterable[Tuple[float, float]]) -> "Spectrum":
        """
        Drop the samples inside any closed band [lo, hi] (MHz).
        """
        keep = torch.ones_like(self.freqs, dtype=torch.bool)
        for lo, hi in bands:
            keep &= ~((self.freqs >= lo) & (self.freqs <= hi))
        return replace(self, freqs=self.freqs[keep], contrasts=self.contrasts[keep])
