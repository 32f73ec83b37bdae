"""Raster types and on-disk formats for datacubes, RGB frames, masks and manifests.

Cubes are stored in the ``.rcube`` format: a five-line ASCII header followed by
little-endian float32 samples in band-sequential order::

    RCUBE 1
    H W B
    <B wavelength centers in nm>
    STATE raw|reflectance
    INTEGRATION_MS <x>|-
    <H*W*B float32 payload>

Masks are 8-bit binary PGM (P5) files and manifests are single JSON documents.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = "RCUBE 1"
NON_PLASTIC = 0
PLASTIC = 1
IGNORE = 255
LABEL_CODES = (NON_PLASTIC, PLASTIC, IGNORE)

# RGB frames reuse the cube format with these nominal band centers.
RGB_WAVELENGTHS_NM = (620.0, 540.0, 470.0)

# Scenario -> role assignment of the ten acquisition scenarios.
SCENARIO_ROLES = {i: ("Train" if i <= 6 else "Test") for i in range(1, 11)}

_PAYLOAD_DTYPE = np.dtype("<f4")


class CubeFormatError(ValueError):
    """Raised when a raster file or in-memory raster violates the format."""


class PayloadLengthError(CubeFormatError):
    pass


class NonFiniteError(CubeFormatError):
    pass


class CalibrationState(str, enum.Enum):
    RAW = "raw"
    REFLECTANCE = "reflectance"


def _readonly(a: np.ndarray) -> np.ndarray:
    # a read-only view leaves the caller's array writable
    v = a.view()
    v.setflags(write=False)
    return v


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """A hyperspectral datacube held in band-sequential ``(bands, height, width)`` order.

    ``data[b, r, c]`` is band ``b`` at pixel ``(r, c)``, which is exactly the
    on-disk layout: ``data.ravel()[b*H*W + r*W + c]``.
    """

    data: np.ndarray
    wavelengths: np.ndarray
    state: CalibrationState = CalibrationState.RAW
    integration_time_ms: float | None = None

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise CubeFormatError(f"cube data must be 3-D (bands, height, width), got shape {data.shape}")
        wl = np.array(self.wavelengths, dtype=np.float64).ravel()
        if wl.size != data.shape[0]:
            raise CubeFormatError(f"{wl.size} wavelengths for {data.shape[0]} bands")
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise CubeFormatError("wavelength centers must be strictly increasing")
        if wl.size and (wl.min() < 300.0 or wl.max() > 2500.0):
            raise CubeFormatError("wavelength centers must lie in [300, 2500] nm")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("cube contains non-finite values")
        state = CalibrationState(self.state)
        if state is CalibrationState.REFLECTANCE and data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise CubeFormatError("reflectance cube values must lie in [0, 1]")
        it = self.integration_time_ms
        if it is not None:
            it = float(it)
            if not math.isfinite(it):
                raise CubeFormatError("integration time must be finite")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "wavelengths", _readonly(wl))
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "integration_time_ms", it)

    @classmethod
    def from_hwb(cls, hwb: np.ndarray, wavelengths, **kwargs) -> SpectralCube:
        """Build a cube from a pixel-interleaved ``(height, width, bands)`` array."""
        return cls(np.moveaxis(np.asarray(hwb), -1, 0), wavelengths, **kwargs)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        """(height, width, bands)"""
        return self.height, self.width, self.bands

    def pixel(self, row: int, col: int) -> np.ndarray:
        return self.data[:, row, col]

    def pixels(self) -> np.ndarray:
        """All pixel spectra as an ``(H*W, B)`` matrix in row-major scan order."""
        return self.data.reshape(self.bands, -1).T

    def replace(self, **changes: Any) -> SpectralCube:
        fields = dict(
            data=self.data,
            wavelengths=self.wavelengths,
            state=self.state,
            integration_time_ms=self.integration_time_ms,
        )
        fields.update(changes)
        return SpectralCube(**fields)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return (
            self.state is other.state
            and self.integration_time_ms == other.integration_time_ms
            and np.array_equal(self.wavelengths, other.wavelengths)
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class RGBImage:
    """Pixel-interleaved ``(height, width, 3)`` float32 image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise CubeFormatError(f"RGB data must have shape (H, W, 3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("RGB image contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise CubeFormatError("RGB values must lie in [0, 1]")
        object.__setattr__(self, "data", _readonly(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_cube(self) -> SpectralCube:
        # Cube grid must increase, so channels are stored blue, green, red.
        order = np.argsort(RGB_WAVELENGTHS_NM)
        return SpectralCube.from_hwb(
            self.data[:, :, order],
            np.asarray(RGB_WAVELENGTHS_NM)[order],
            state=CalibrationState.REFLECTANCE,
        )

    @classmethod
    def from_cube(cls, cube: SpectralCube) -> RGBImage:
        if cube.bands != 3:
            raise CubeFormatError(f"RGB cube must have 3 bands, got {cube.bands}")
        hwb = np.moveaxis(cube.data, 0, -1)
        order = np.argsort(cube.wavelengths)[::-1]  # longest wavelength is red
        return cls(hwb[:, :, order])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RGBImage):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-pixel labels: 0 non-plastic, 1 plastic, 255 ignore."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise CubeFormatError(f"label mask must be 2-D, got shape {lab.shape}")
        if lab.dtype != np.uint8:
            if lab.size and (lab.min() < 0 or lab.max() > 255 or not np.all(lab == np.round(lab))):
                raise CubeFormatError("label values must be 8-bit integers")
            lab = lab.astype(np.uint8)
        lab = np.ascontiguousarray(lab)
        bad = ~np.isin(lab, LABEL_CODES)
        if bad.any():
            raise CubeFormatError(f"label mask contains codes outside {LABEL_CODES}: {np.unique(lab[bad])[:5]}")
        object.__setattr__(self, "labels", _readonly(lab))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    def with_ignore(self, invalid: np.ndarray) -> LabelMask:
        """Return a copy with every pixel flagged in ``invalid`` set to the ignore code."""
        lab = self.labels.copy()
        lab[np.asarray(invalid, dtype=bool)] = IGNORE
        return LabelMask(lab)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    __hash__ = None  # type: ignore[assignment]


@dataclass
class SceneManifest:
    """One acquisition scenario and the files that hold it.

    Paths are kept as written in the JSON document; :meth:`resolve` anchors
    relative paths at the manifest's own directory.
    """

    scenario_id: int
    composition: list[str]
    background: str
    role: str
    cube: str
    rgb: str
    mask: str
    extra: dict[str, Any] = field(default_factory=dict)
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.role not in ("Train", "Test"):
            raise CubeFormatError(f"role must be 'Train' or 'Test', got {self.role!r}")
        expected = SCENARIO_ROLES.get(int(self.scenario_id))
        if expected is None:
            raise CubeFormatError(f"scenario_id must be in 1..10, got {self.scenario_id}")
        if self.role != expected:
            raise CubeFormatError(f"scenario {self.scenario_id} is a {expected} scenario, manifest says {self.role}")

    def resolve(self, name: str) -> Path:
        p = Path(getattr(self, name) if name in ("cube", "rgb", "mask") else name)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def to_dict(self) -> dict[str, Any]:
        d = {
            "scenario_id": int(self.scenario_id),
            "composition": list(self.composition),
            "background": self.background,
            "role": self.role,
            "cube": self.cube,
            "rgb": self.rgb,
            "mask": self.mask,
        }
        d.update(self.extra)
        return d


# --------------------------------------------------------------------------
# cube files


def _format_float(x: float) -> str:
    return repr(float(x))


def save_cube(cube: SpectralCube, path: str | Path) -> None:
    path = Path(path)
    it = "-" if cube.integration_time_ms is None else _format_float(cube.integration_time_ms)
    header = "\n".join(
        [
            MAGIC,
            f"{cube.height} {cube.width} {cube.bands}",
            " ".join(_format_float(w) for w in cube.wavelengths),
            f"STATE {cube.state.value}",
            f"INTEGRATION_MS {it}",
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(cube.data.astype(_PAYLOAD_DTYPE, copy=False).tobytes(order="C"))


def header_size(height: int, width: int, wavelengths, state: CalibrationState | str = "raw",
                integration_time_ms: float | None = None) -> int:
    """Number of header bytes ``save_cube`` writes for a cube with these properties."""
    it = "-" if integration_time_ms is None else _format_float(integration_time_ms)
    lines = [
        MAGIC,
        f"{height} {width} {len(wavelengths)}",
        " ".join(_format_float(w) for w in wavelengths),
        f"STATE {CalibrationState(state).value}",
        f"INTEGRATION_MS {it}",
    ]
    return len("\n".join(lines).encode("ascii")) + 1


def load_cube(path: str | Path) -> SpectralCube:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = []
    pos = 0
    for _ in range(5):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CubeFormatError(f"{path}: truncated header")
        lines.append(raw[pos:nl])
        pos = nl + 1
    try:
        text = [ln.decode("ascii") for ln in lines]
    except UnicodeDecodeError as exc:
        raise CubeFormatError(f"{path}: header is not ASCII") from exc
    if text[0] != MAGIC:
        raise CubeFormatError(f"{path}: bad magic/version {text[0]!r}")
    try:
        h, w, b = (int(t) for t in text[1].split())
    except ValueError as exc:
        raise CubeFormatError(f"{path}: bad dimension line {text[1]!r}") from exc
    if h < 0 or w < 0 or b < 1:
        raise CubeFormatError(f"{path}: invalid dimensions {h}x{w}x{b}")
    try:
        wl = [float(t) for t in text[2].split()]
    except ValueError as exc:
        raise CubeFormatError(f"{path}: bad wavelength line") from exc
    if len(wl) != b:
        raise CubeFormatError(f"{path}: header declares {b} bands but lists {len(wl)} wavelengths")
    key, _, state = text[3].partition(" ")
    if key != "STATE" or state not in ("raw", "reflectance"):
        raise CubeFormatError(f"{path}: bad state line {text[3]!r}")
    key, _, value = text[4].partition(" ")
    if key != "INTEGRATION_MS" or not value:
        raise CubeFormatError(f"{path}: bad integration line {text[4]!r}")
    try:
        it = None if value == "-" else float(value)
    except ValueError as exc:
        raise CubeFormatError(f"{path}: bad integration time {value!r}") from exc

    expected = h * w * b * _PAYLOAD_DTYPE.itemsize
    payload = raw[pos:]
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{path}: payload is {len(payload)} bytes, header {h}x{w}x{b} requires {expected}"
        )
    data = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(b, h, w)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    return SpectralCube(data.astype(np.float32), wl, state=CalibrationState(state), integration_time_ms=it)


def save_rgb(rgb: RGBImage, path: str | Path) -> None:
    save_cube(rgb.to_cube(), path)


def load_rgb(path: str | Path) -> RGBImage:
    return RGBImage.from_cube(load_cube(path))


# --------------------------------------------------------------------------
# masks (binary PGM)


def save_mask(mask: LabelMask, path: str | Path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + mask.labels.tobytes())


def _pgm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CubeFormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def load_mask(path: str | Path) -> LabelMask:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = _pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise CubeFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CubeFormatError(f"{path}: bad PGM header") from exc
    if maxval != 255:
        raise CubeFormatError(f"{path}: mask maxval must be 255, got {maxval}")
    body = raw[pos:]
    if len(body) != w * h:
        raise PayloadLengthError(f"{path}: PGM raster is {len(body)} bytes, expected {w * h}")
    return LabelMask(np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy())


# --------------------------------------------------------------------------
# manifests

_MANIFEST_KEYS = ("scenario_id", "composition", "background", "role", "cube", "rgb", "mask")


def manifest_from_dict(d: dict[str, Any], base_dir: Path | None = None) -> SceneManifest:
    missing = [k for k in _MANIFEST_KEYS if k not in d]
    if missing:
        raise CubeFormatError(f"manifest is missing keys {missing}")
    extra = {k: v for k, v in d.items() if k not in _MANIFEST_KEYS}
    composition = d["composition"]
    if isinstance(composition, str):
        composition = [composition]
    return SceneManifest(
        scenario_id=int(d["scenario_id"]),
        composition=[str(c) for c in composition],
        background=str(d["background"]),
        role=str(d["role"]),
        cube=str(d["cube"]),
        rgb=str(d["rgb"]),
        mask=str(d["mask"]),
        extra=extra,
        base_dir=base_dir,
    )


def load_manifest(path: str | Path) -> SceneManifest:
    path = Path(path)
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CubeFormatError(f"{path}: invalid JSON: {exc}") from exc
    return manifest_from_dict(d, base_dir=path.parent)


def save_manifest(manifest: SceneManifest, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------


def flatten_pixels(cube: SpectralCube, mask: LabelMask) -> tuple[np.ndarray, np.ndarray]:
    """Select the non-ignored pixels of ``cube`` as an ``(N, B)`` feature matrix.

    Rows follow row-major scan order; labels are the matching 0/1 codes.
    """
    if mask.shape != (cube.height, cube.width):
        raise CubeFormatError(
            f"mask is {mask.shape[0]}x{mask.shape[1]} but cube is {cube.height}x{cube.width}"
        )
    keep = (mask.labels != IGNORE).ravel()
    features = cube.pixels()[keep]
    labels = mask.labels.ravel()[keep].astype(np.int64)
    return np.ascontiguousarray(features), labels
