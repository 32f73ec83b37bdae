"""Synthetic reflectance scenes standing in for the ten lab scenarios.

Every material is a smooth continuum times a product of Gaussian absorption
dips. Objects are ellipses of one material on a background; objects lying in
water are linearly mixed with a water spectrum (submergence), and turbid
scenes scale that mixing weight down further. RGB frames are derived from the
cube by averaging the two bands closest to each nominal channel center.

Two presets are provided:

``riverine``
    Plastics carry exactly one of two SWIR dips (near 1210 nm or 1660 nm);
    non-plastic materials carry both or neither. The classes are therefore
    not linearly separable, while visible colours are drawn from shared
    ranges so RGB carries little class signal.
``simple``
    One plastic and one background sharing a continuum; only the plastic has
    the 1210 nm dip.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from hsiplastic.cube_io import (
    IGNORE,
    NON_PLASTIC,
    PLASTIC,
    RGB_WAVELENGTHS_NM,
    SCENARIO_ROLES,
    CalibrationState,
    LabelMask,
    RGBImage,
    SceneManifest,
    SpectralCube,
    save_cube,
    save_manifest,
    save_mask,
    save_rgb,
)

DEFAULT_BANDS = 33
DEFAULT_RANGE_NM = (450.0, 1700.0)
DIP_A_NM = 1210.0
DIP_B_NM = 1660.0


class SynthError(ValueError):
    pass


def default_wavelengths(bands: int = DEFAULT_BANDS, lo: float = DEFAULT_RANGE_NM[0],
                        hi: float = DEFAULT_RANGE_NM[1]) -> np.ndarray:
    return np.linspace(lo, hi, bands)


@dataclass(frozen=True)
class Dip:
    center_nm: float
    width_nm: float
    depth: float


@dataclass(frozen=True)
class Material:
    """Spectral family; each object instance draws its own level, slope and colour."""

    name: str
    plastic: bool
    level: tuple[float, float] = (0.25, 0.6)
    slope: tuple[float, float] = (-0.15, 0.15)
    color_nm: tuple[float, float] = (450.0, 650.0)
    color_amp: tuple[float, float] = (0.0, 0.25)
    dips: tuple[Dip, ...] = ()
    depth_jitter: float = 0.15

    def spectrum(self, wl: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        level = rng.uniform(*self.level)
        slope = rng.uniform(*self.slope)
        cc = rng.uniform(*self.color_nm)
        ca = rng.uniform(*self.color_amp)
        x = (wl - 1000.0) / 1000.0
        s = level * (1.0 + slope * x) + ca * np.exp(-0.5 * ((wl - cc) / 60.0) ** 2)
        for d in self.dips:
            depth = d.depth * (1.0 + rng.uniform(-self.depth_jitter, self.depth_jitter))
            s = s * (1.0 - depth * np.exp(-0.5 * ((wl - d.center_nm) / d.width_nm) ** 2))
        return np.clip(s, 0.0, 1.0)


def _dip(center: float, depth: float = 0.5, width: float = 35.0) -> Dip:
    return Dip(center, width, depth)


MATERIALS: dict[str, Material] = {
    m.name: m
    for m in [
        # plastics: exactly one diagnostic dip
        Material("PP", True, dips=(_dip(DIP_A_NM),)),
        Material("HDPE", True, dips=(_dip(DIP_A_NM),)),
        Material("LDPE", True, dips=(_dip(DIP_A_NM),)),
        Material("PET", True, dips=(_dip(DIP_B_NM),)),
        Material("PC", True, dips=(_dip(DIP_B_NM),)),
        Material("ABS", True, dips=(_dip(DIP_B_NM),)),
        # non-plastics: both dips or neither
        Material("vegetation", False, color_nm=(520.0, 580.0), dips=(_dip(DIP_A_NM), _dip(DIP_B_NM))),
        Material("wood", False, color_nm=(580.0, 650.0), dips=(_dip(DIP_A_NM), _dip(DIP_B_NM))),
        Material("cardboard", False, color_nm=(580.0, 650.0), dips=(_dip(DIP_A_NM), _dip(DIP_B_NM))),
        Material("newsprint", False, color_amp=(0.0, 0.1), dips=(_dip(DIP_A_NM), _dip(DIP_B_NM))),
        Material("glass", False),
        Material("aluminium", False, color_amp=(0.0, 0.1)),
        # backgrounds
        Material("black_pe", False, level=(0.03, 0.06), slope=(0.0, 0.0), color_amp=(0.0, 0.0)),
        Material("sand", False, level=(0.3, 0.5), color_nm=(580.0, 640.0), color_amp=(0.05, 0.15),
                 dips=(_dip(DIP_A_NM), _dip(DIP_B_NM))),
        Material("silt", False, level=(0.3, 0.5), color_nm=(560.0, 640.0), color_amp=(0.05, 0.15)),
        # simple preset
        Material("flat_background", False, level=(0.4, 0.4), slope=(0.0, 0.0), color_nm=(550.0, 550.0),
                 color_amp=(0.1, 0.1), depth_jitter=0.0),
        Material("flat_plastic", True, level=(0.4, 0.4), slope=(0.0, 0.0), color_nm=(550.0, 550.0),
                 color_amp=(0.1, 0.1), dips=(_dip(DIP_A_NM, depth=0.5),), depth_jitter=0.0),
    ]
}

PLASTIC_SAMPLES = ("PP", "HDPE", "LDPE", "PET", "PC", "ABS")
NON_PLASTIC_WASTE = ("cardboard", "newsprint", "glass", "aluminium")
VEGETATION = ("vegetation", "wood")


def water_spectrum(wl: np.ndarray, turbid: bool = False) -> np.ndarray:
    """Clear water is dark beyond the visible; suspended sediment brightens and browns it."""
    if turbid:
        return 0.10 * np.exp(-np.maximum(wl - 550.0, 0.0) / 350.0) + 0.02
    return 0.06 * np.exp(-np.maximum(wl - 450.0, 0.0) / 250.0) + 0.01


@dataclass
class SceneRecipe:
    scenario_id: int
    composition: list[str]
    background_label: str
    background: str = "black_pe"
    objects: list[str] = field(default_factory=list)
    n_objects: int = 12
    # large patches of a second background material laid before the objects
    patches: str | None = None
    n_patches: int = 3
    # fraction of the frame (right-hand side) covered by water
    water_fraction: float = 0.0
    # submergence weight range for objects in water (1 = fully visible)
    submerged: tuple[float, float] = (0.6, 1.0)
    # background seen through water, e.g. riverbed sand
    background_under_water: bool = False
    background_visibility: float = 0.8
    turbid: bool = False


def riverine_recipes() -> list[SceneRecipe]:
    # plastics listed twice so roughly half the objects are plastic
    plastic_waste = list(PLASTIC_SAMPLES) * 2
    waste = plastic_waste + list(NON_PLASTIC_WASTE)
    bed = dict(background="sand", patches="silt", water_fraction=1.0, background_under_water=True)
    return [
        SceneRecipe(1, ["Native Vegetation"], "Black PE", "black_pe", list(VEGETATION)),
        SceneRecipe(2, ["Plastic Samples"], "Black PE", "black_pe", list(PLASTIC_SAMPLES)),
        SceneRecipe(3, ["Plastic Samples"], "Black PE, Water", "black_pe", list(PLASTIC_SAMPLES),
                    water_fraction=0.5),
        SceneRecipe(4, ["Plastic Samples"], "Riverbed Sand", "sand", list(PLASTIC_SAMPLES), patches="silt"),
        SceneRecipe(5, ["Plastic Waste"], "Black PE", "black_pe", waste),
        SceneRecipe(6, ["Plastic Waste"], "Riverbed Sand", "sand", plastic_waste + list(VEGETATION),
                    patches="silt", water_fraction=0.5, background_under_water=True),
        SceneRecipe(7, ["Plastic Waste", "Non-plastic Waste"], "Settled Riverbed", objects=waste, **bed),
        SceneRecipe(8, ["Plastic Waste", "Non-plastic Waste"], "Turbid Riverbed", objects=waste, turbid=True,
                    **bed),
        SceneRecipe(9, ["Plastic Waste", "Non-plastic Waste", "Native Vegetation"], "Settled Riverbed",
                    objects=waste + list(VEGETATION), **bed),
        SceneRecipe(10, ["Plastic Waste", "Non-plastic Waste", "Native Vegetation"], "Turbid Riverbed",
                    objects=waste + list(VEGETATION), turbid=True, **bed),
    ]


def simple_recipes() -> list[SceneRecipe]:
    return [
        SceneRecipe(i, ["Plastic Samples"], "Flat", "flat_background", ["flat_plastic"], n_objects=4)
        for i in range(1, 11)
    ]


PRESETS = {"riverine": riverine_recipes, "simple": simple_recipes}


@dataclass
class SynthParams:
    height: int = 96
    width: int = 128
    noise_sigma: float = 0.02
    # multiplies the visibility of everything under water in turbid scenes
    turbid_attenuation: float = 0.85
    preset: str = "riverine"
    scenarios: list[int] = field(default_factory=lambda: list(range(1, 11)))
    bands: int = DEFAULT_BANDS
    wavelength_range_nm: tuple[float, float] = DEFAULT_RANGE_NM
    n_objects: int | None = None

    def __post_init__(self) -> None:
        if self.height < 4 or self.width < 4:
            raise SynthError("scene must be at least 4x4 pixels")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be non-negative")
        if not 0 < self.turbid_attenuation <= 1:
            raise SynthError("turbid_attenuation must be in (0, 1]")
        if self.preset not in PRESETS:
            raise SynthError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.bands < 3:
            raise SynthError("need at least 3 bands")
        bad = [s for s in self.scenarios if s not in SCENARIO_ROLES]
        if bad or not self.scenarios:
            raise SynthError(f"scenario ids must be in 1..10, got {self.scenarios}")
        self.wavelength_range_nm = tuple(self.wavelength_range_nm)  # type: ignore[assignment]

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> SynthParams:
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SynthError(f"unknown synthetic-scene options {sorted(unknown)}")
        return cls(**d)

    def wavelengths(self) -> np.ndarray:
        return default_wavelengths(self.bands, *self.wavelength_range_nm)

    def recipes(self) -> list[SceneRecipe]:
        by_id = {r.scenario_id: r for r in PRESETS[self.preset]()}
        out = []
        for s in self.scenarios:
            r = by_id[s]
            if self.n_objects is not None:
                r.n_objects = self.n_objects
            out.append(r)
        return out


def render_rgb(cube: SpectralCube, per_channel: int = 2) -> RGBImage:
    """Average the ``per_channel`` bands nearest each nominal R, G, B center."""
    wl = cube.wavelengths
    chans = []
    for center in RGB_WAVELENGTHS_NM:
        nearest = np.argsort(np.abs(wl - center), kind="stable")[:per_channel]
        chans.append(cube.data[np.sort(nearest)].mean(axis=0))
    return RGBImage(np.clip(np.stack(chans, axis=-1), 0.0, 1.0))


def _ellipse(h: int, w: int, rng: np.random.Generator, x_range: tuple[float, float],
             size: tuple[float, float] = (0.06, 0.16)) -> np.ndarray:
    cy = rng.uniform(0.1, 0.9) * h
    cx = rng.uniform(*x_range) * w
    ry = rng.uniform(*size) * h
    rx = rng.uniform(*size) * w
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def generate_scene(recipe: SceneRecipe, params: SynthParams, seed: int) -> tuple[SpectralCube, RGBImage, LabelMask]:
    """Build one reflectance cube, its RGB rendering and the ground-truth mask."""
    if not recipe.objects:
        raise SynthError(f"scenario {recipe.scenario_id} has no object materials")
    rng = np.random.default_rng([seed, recipe.scenario_id])
    wl = params.wavelengths()
    h, w = params.height, params.width
    water = water_spectrum(wl, recipe.turbid)
    att = params.turbid_attenuation if recipe.turbid else 1.0

    # visibility: weight of the material spectrum against the water spectrum
    in_water = np.zeros((h, w), dtype=bool)
    if recipe.water_fraction > 0:
        in_water[:, int(round((1.0 - recipe.water_fraction) * w)):] = True

    bg = MATERIALS[recipe.background]
    cube = np.empty((h, w, wl.size), dtype=np.float64)
    cube[:] = bg.spectrum(wl, rng)
    if recipe.background_under_water:
        vis = recipe.background_visibility * att
        cube[in_water] = vis * cube[in_water] + (1.0 - vis) * water
    else:
        cube[in_water] = water
    if recipe.patches is not None:
        pm = MATERIALS[recipe.patches]
        for _ in range(recipe.n_patches):
            region = _ellipse(h, w, rng, (0.0, 1.0), size=(0.2, 0.4))
            spec = pm.spectrum(wl, rng)
            if recipe.background_under_water:
                vis = recipe.background_visibility * att
                wet = region & in_water
                cube[wet] = vis * spec + (1.0 - vis) * water
            cube[region & ~in_water] = spec
    labels = np.full((h, w), NON_PLASTIC, dtype=np.uint8)

    for _ in range(recipe.n_objects):
        mat = MATERIALS[recipe.objects[rng.integers(len(recipe.objects))]]
        region = _ellipse(h, w, rng, (0.05, 0.95))
        spec = mat.spectrum(wl, rng)
        vis = rng.uniform(*recipe.submerged) * att
        wet = region & in_water
        dry = region & ~in_water
        cube[dry] = spec
        cube[wet] = vis * spec + (1.0 - vis) * water
        labels[region] = PLASTIC if mat.plastic else NON_PLASTIC

    if params.noise_sigma > 0:
        cube += rng.normal(0.0, params.noise_sigma, size=cube.shape)
    np.clip(cube, 0.0, 1.0, out=cube)
    sc = SpectralCube.from_hwb(cube.astype(np.float32), wl, state=CalibrationState.REFLECTANCE)
    return sc, render_rgb(sc), LabelMask(labels)


def scene_stem(scenario_id: int) -> str:
    return f"scene_{scenario_id:02d}"


def synth_gen(params: SynthParams, seed: int, out_dir: str | Path) -> list[Path]:
    """Write cube, RGB, mask and manifest files for each requested scenario.

    Returns the manifest paths in scenario order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifests = []
    for recipe in params.recipes():
        cube, rgb, mask = generate_scene(recipe, params, seed)
        stem = scene_stem(recipe.scenario_id)
        save_cube(cube, out / f"{stem}.rcube")
        save_rgb(rgb, out / f"{stem}_rgb.rcube")
        save_mask(mask, out / f"{stem}_mask.pgm")
        m = SceneManifest(
            scenario_id=recipe.scenario_id,
            composition=list(recipe.composition),
            background=recipe.background_label,
            role=SCENARIO_ROLES[recipe.scenario_id],
            cube=f"{stem}.rcube",
            rgb=f"{stem}_rgb.rcube",
            mask=f"{stem}_mask.pgm",
            extra={"synthetic": {"seed": int(seed), "preset": params.preset, "turbid": recipe.turbid}},
        )
        path = out / f"{stem}.json"
        save_manifest(m, path)
        manifests.append(path)
    with open(out / "synth_params.json", "w") as fh:
        json.dump({"seed": int(seed), **asdict(params)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifests


def single_band_accuracy(values: np.ndarray, labels: np.ndarray) -> float:
    """Best accuracy of any one-threshold rule (either polarity) on one feature."""
    v = np.asarray(values, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    keep = y != IGNORE
    v, y = v[keep], y[keep].astype(np.int64)
    order = np.argsort(v, kind="mergesort")
    v, y = v[order], y[order]
    n = y.size
    # rule "predict 1 iff value > v[k]" for every cut position k (k = -1 means all ones)
    pos_above = np.r_[y.sum(), y.sum() - np.cumsum(y)]
    neg_below = np.r_[0, np.cumsum(1 - y)]
    # only cut between distinct values
    valid = np.r_[True, v[1:] != v[:-1], True]
    correct = pos_above + neg_below
    best = max(correct[valid].max(), (n - correct)[valid].max())
    return float(best / n)
