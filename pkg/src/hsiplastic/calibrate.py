"""Dark-frame subtraction and white-reference normalisation to reflectance."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from hsiplastic.cube_io import CalibrationState, SpectralCube

# counts; denominators at or below this make a pixel invalid
DENOMINATOR_EPS = 1e-6
PTFE_REFLECTIVITY = 0.95


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DarkFrame:
    """Mean dark signal, either per band ``(B,)`` or per pixel ``(B, H, W)``."""

    signal: np.ndarray

    def __post_init__(self) -> None:
        sig = np.asarray(self.signal, dtype=np.float64)
        if sig.ndim not in (1, 3):
            raise CalibrationError(f"dark signal must be (B,) or (B, H, W), got shape {sig.shape}")
        if not np.all(np.isfinite(sig)):
            raise CalibrationError("dark signal contains non-finite values")
        if sig.size and sig.min() < 0:
            raise CalibrationError("dark signal must be non-negative")
        object.__setattr__(self, "signal", sig)

    @property
    def bands(self) -> int:
        return self.signal.shape[0]

    @property
    def per_band(self) -> bool:
        return self.signal.ndim == 1

    def band(self, b: int) -> np.ndarray | float:
        return self.signal[b] if not self.per_band else float(self.signal[b])

    def check_matches(self, cube: SpectralCube) -> None:
        if self.per_band:
            if self.bands != cube.bands:
                raise CalibrationError(f"dark has {self.bands} bands, cube has {cube.bands}")
        elif self.signal.shape != cube.data.shape:
            raise CalibrationError(
                f"dark frame shape {self.signal.shape} does not match cube {cube.data.shape}"
            )


@dataclass(frozen=True, eq=False)
class ReferenceSpectrum:
    """Raw white-panel signal per band and the panel's certified reflectivity."""

    reference: np.ndarray
    panel_reflectivity: float = PTFE_REFLECTIVITY

    def __post_init__(self) -> None:
        ref = np.asarray(self.reference, dtype=np.float64).ravel()
        if not np.all(np.isfinite(ref)):
            raise CalibrationError("reference spectrum contains non-finite values")
        if not 0.0 < self.panel_reflectivity <= 1.0:
            raise CalibrationError(f"panel reflectivity must be in (0, 1], got {self.panel_reflectivity}")
        object.__setattr__(self, "reference", ref)


def estimate_dark(frames: Sequence[SpectralCube]) -> DarkFrame:
    """Per-element mean of covered-lens raw frames."""
    if len(frames) == 0:
        raise CalibrationError("at least one dark frame is required")
    shape = frames[0].data.shape
    acc = np.zeros(shape, dtype=np.float64)
    for f in frames:
        if f.state is not CalibrationState.RAW:
            raise CalibrationError("dark frames must be raw counts")
        if f.data.shape != shape:
            raise CalibrationError(f"dark frame shape {f.data.shape} differs from {shape}")
        acc += f.data
    return DarkFrame(acc / len(frames))


def extract_reference(
    cube: SpectralCube,
    panel_region: tuple[int, int, int, int],
    dark: DarkFrame,
    panel_reflectivity: float = PTFE_REFLECTIVITY,
) -> ReferenceSpectrum:
    """Estimate the white-reference signal from a panel rectangle.

    ``panel_region`` is ``(row0, col0, row1, col1)`` with exclusive upper
    bounds. The returned reference is scaled so that panel pixels calibrate to
    ``panel_reflectivity`` rather than to one.
    """
    if not 0.0 < panel_reflectivity <= 1.0:
        raise CalibrationError(f"panel reflectivity must be in (0, 1], got {panel_reflectivity}")
    r0, c0, r1, c1 = (int(v) for v in panel_region)
    if not (0 <= r0 < r1 <= cube.height and 0 <= c0 < c1 <= cube.width):
        raise CalibrationError(f"panel region {panel_region} outside {cube.height}x{cube.width} cube")
    dark.check_matches(cube)
    panel = cube.data[:, r0:r1, c0:c1].astype(np.float64)
    if dark.per_band:
        dark_panel = dark.signal[:, None, None]
    else:
        dark_panel = dark.signal[:, r0:r1, c0:c1]
    excess = (panel - dark_panel).mean(axis=(1, 2))
    if np.any(excess <= 0):
        bad = np.flatnonzero(excess <= 0).tolist()
        raise CalibrationError(f"panel is not brighter than the dark signal in bands {bad}")
    dark_mean = np.broadcast_to(dark_panel, panel.shape).mean(axis=(1, 2))
    return ReferenceSpectrum(dark_mean + excess / panel_reflectivity, panel_reflectivity)


def reflectance(
    cube: SpectralCube,
    dark: DarkFrame,
    reference: ReferenceSpectrum,
    eps: float = DENOMINATOR_EPS,
) -> tuple[SpectralCube, np.ndarray]:
    """Apply ``(signal - dark) / (reference - dark)`` band by band, clamped to [0, 1].

    Returns the reflectance cube and an ``(H, W)`` boolean validity mask. A
    pixel is invalid when any band's denominator is ``<= eps``; all of its
    bands are then zeroed.
    """
    if cube.state is not CalibrationState.RAW:
        raise CalibrationError("cube is already calibrated to reflectance")
    dark.check_matches(cube)
    if reference.reference.size != cube.bands:
        raise CalibrationError(f"reference has {reference.reference.size} bands, cube has {cube.bands}")

    out = np.empty(cube.data.shape, dtype=np.float32)
    valid = np.ones((cube.height, cube.width), dtype=bool)
    for b in range(cube.bands):
        d = dark.band(b)
        denom = reference.reference[b] - np.asarray(d, dtype=np.float64)
        denom = np.broadcast_to(denom, valid.shape)
        ok = denom > eps
        valid &= ok
        num = cube.data[b].astype(np.float64) - d
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(ok, num / np.where(ok, denom, 1.0), 0.0)
        np.clip(r, 0.0, 1.0, out=r)
        out[b] = r
    out[:, ~valid] = 0.0
    return cube.replace(data=out, state=CalibrationState.REFLECTANCE), valid
