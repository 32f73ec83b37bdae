"""Homography estimation (normalised DLT) and bilinear inverse warping."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hsiplastic.cube_io import RGBImage, SpectralCube

DET_TOL = 1e-12
# ratio of the two smallest singular values' neighbour to the largest; below
# this the DLT nullspace is not one-dimensional
CONDITION_TOL = 1e-8
# preimages this close outside the input grid still count as inside
EDGE_TOL = 1e-9


class RegistrationError(ValueError):
    pass


class DegenerateConfigurationError(RegistrationError):
    pass


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map from cube pixel coordinates ``(x, y)`` to RGB pixel coordinates."""

    m: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise RegistrationError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise RegistrationError("homography has non-finite entries")
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        else:
            m = m / np.linalg.norm(m)
        if abs(np.linalg.det(m)) <= DET_TOL:
            raise RegistrationError("homography is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> Homography:
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> Homography:
        sy = sx if sy is None else sy
        return cls(np.diag([sx, sy, 1.0]))

    def inverse(self) -> Homography:
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: Homography) -> Homography:
        """``(a @ b)`` applies ``b`` first, then ``a``."""
        return Homography(self.m @ other.m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.m.T
        return hom[:, :2] / hom[:, 2:3]

    def to_list(self) -> list[list[float]]:
        return self.m.tolist()


@dataclass(frozen=True)
class Correspondence:
    src: tuple[float, float]
    dst: tuple[float, float]

    def __post_init__(self) -> None:
        if not all(np.isfinite(v) for v in (*self.src, *self.dst)):
            raise RegistrationError("correspondence coordinates must be finite")


def _as_arrays(points: Iterable[Correspondence] | tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(points, tuple) and len(points) == 2 and isinstance(points[0], np.ndarray):
        src, dst = points
    else:
        pts = list(points)
        src = np.array([p.src for p in pts], dtype=np.float64).reshape(-1, 2)
        dst = np.array([p.dst for p in pts], dtype=np.float64).reshape(-1, 2)
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise RegistrationError("source and destination points must both be (N, 2)")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise RegistrationError("correspondence coordinates must be finite")
    return src, dst


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d <= 0 or not np.isfinite(d):
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def reprojection_rms(h: Homography, src: np.ndarray, dst: np.ndarray) -> float:
    err = h.apply(src) - dst
    return float(np.sqrt((err**2).sum(axis=1).mean()))


def estimate_homography(points) -> tuple[Homography, float]:
    """Fit a homography to four or more correspondences.

    ``points`` is a sequence of :class:`Correspondence` or a ``(src, dst)``
    pair of ``(N, 2)`` arrays. Returns the homography and its reprojection
    RMS in destination pixels.
    """
    src, dst = _as_arrays(points)
    n = len(src)
    if n < 4:
        raise RegistrationError(f"need at least 4 correspondences, got {n}")
    t_src = _normalizer(src)
    t_dst = _normalizer(dst)
    ps = np.column_stack([src, np.ones(n)]) @ t_src.T
    pd = np.column_stack([dst, np.ones(n)]) @ t_dst.T

    x, y = ps[:, 0], ps[:, 1]
    u, v = pd[:, 0], pd[:, 1]
    zero = np.zeros(n)
    one = np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.column_stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u])
    a[1::2] = np.column_stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v])

    _, sv, vt = np.linalg.svd(a)
    if sv[7] / sv[0] < CONDITION_TOL:
        raise DegenerateConfigurationError(
            "correspondences do not determine a unique homography (collinear or coincident points)"
        )
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.solve(t_dst, hn @ t_src)
    try:
        h = Homography(m)
    except RegistrationError as exc:
        raise DegenerateConfigurationError(str(exc)) from exc
    return h, reprojection_rms(h, src, dst)


# --------------------------------------------------------------------------
# warping


def _warp_rows(src: np.ndarray, minv: np.ndarray, rows: range, out_w: int,
               out: np.ndarray, valid: np.ndarray) -> None:
    bands, in_h, in_w = src.shape
    xs = np.arange(out_w, dtype=np.float64)
    for r in rows:
        px = minv[0, 0] * xs + minv[0, 1] * r + minv[0, 2]
        py = minv[1, 0] * xs + minv[1, 1] * r + minv[1, 2]
        pw = minv[2, 0] * xs + minv[2, 1] * r + minv[2, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            sx = px / pw
            sy = py / pw
        ok = (
            (pw > 0)
            & (sx >= -EDGE_TOL) & (sx <= in_w - 1 + EDGE_TOL)
            & (sy >= -EDGE_TOL) & (sy <= in_h - 1 + EDGE_TOL)
        )
        valid[r] = ok
        if not ok.any():
            out[:, r, :] = 0.0
            continue
        cols = np.flatnonzero(ok)
        sx = np.clip(sx[cols], 0.0, in_w - 1)
        sy = np.clip(sy[cols], 0.0, in_h - 1)
        x0 = np.minimum(np.floor(sx).astype(np.intp), max(in_w - 2, 0))
        y0 = np.minimum(np.floor(sy).astype(np.intp), max(in_h - 2, 0))
        fx = sx - x0
        fy = sy - y0
        x1 = np.minimum(x0 + 1, in_w - 1)
        y1 = np.minimum(y0 + 1, in_h - 1)
        v00 = src[:, y0, x0]
        v01 = src[:, y0, x1]
        v10 = src[:, y1, x0]
        v11 = src[:, y1, x1]
        # weighted form: exact when a weight is 0 or 1, so integer shifts copy values
        top = v00 * (1.0 - fx) + v01 * fx
        bot = v10 * (1.0 - fx) + v11 * fx
        row = np.zeros((bands, out_w), dtype=out.dtype)
        row[:, cols] = top * (1.0 - fy) + bot * fy
        out[:, r, :] = row


def warp_array(src: np.ndarray, h: Homography, out_height: int, out_width: int,
               workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Warp a ``(bands, H, W)`` array; ``h`` maps input coordinates to output coordinates."""
    src = np.asarray(src)
    if src.ndim != 3:
        raise RegistrationError("warp input must be (bands, H, W)")
    if out_height < 1 or out_width < 1:
        raise RegistrationError("output dimensions must be positive")
    minv = np.linalg.inv(h.m)
    dtype = src.dtype if np.issubdtype(src.dtype, np.floating) else np.float64
    work = src.astype(np.float64) if dtype == np.float64 else src
    out = np.empty((src.shape[0], out_height, out_width), dtype=dtype)
    valid = np.empty((out_height, out_width), dtype=bool)
    workers = max(1, int(workers))
    if workers == 1:
        _warp_rows(work, minv, range(out_height), out_width, out, valid)
    else:
        bounds = np.linspace(0, out_height, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_warp_rows, work, minv, range(lo, hi), out_width, out, valid)
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            for f in futures:
                f.result()
    return out, valid


def warp_to(raster: SpectralCube | RGBImage, h: Homography, out_height: int, out_width: int,
            workers: int = 1) -> tuple[SpectralCube | RGBImage, np.ndarray]:
    """Resample ``raster`` onto an ``out_height x out_width`` grid by inverse mapping.

    Output pixels whose preimage lies outside the input grid are zero and
    flagged ``False`` in the returned validity mask.
    """
    if isinstance(raster, RGBImage):
        out, valid = warp_array(np.moveaxis(raster.data, -1, 0), h, out_height, out_width, workers)
        return RGBImage(np.clip(np.moveaxis(out, 0, -1), 0.0, 1.0)), valid
    if isinstance(raster, SpectralCube):
        out, valid = warp_array(raster.data, h, out_height, out_width, workers)
        return raster.replace(data=out), valid
    raise TypeError(f"cannot warp {type(raster).__name__}")


def register_cube_to_rgb(cube: SpectralCube, rgb: RGBImage, h: Homography,
                         workers: int = 1) -> tuple[SpectralCube, np.ndarray]:
    """Bring ``cube`` onto the RGB pixel grid; returns the fused cube and its validity mask."""
    return warp_to(cube, h, rgb.height, rgb.width, workers)


# --------------------------------------------------------------------------
# JSON files


def load_correspondences(path: str | Path) -> list[Correspondence]:
    with open(path) as fh:
        items = json.load(fh)
    if not isinstance(items, list):
        raise RegistrationError(f"{path}: expected a JSON array of correspondences")
    try:
        return [Correspondence(tuple(map(float, it["src"])), tuple(map(float, it["dst"]))) for it in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise RegistrationError(f"{path}: malformed correspondence entry: {exc}") from exc


def save_correspondences(points: Sequence[Correspondence], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump([{"src": list(p.src), "dst": list(p.dst)} for p in points], fh, indent=2)
        fh.write("\n")


def save_homography(h: Homography, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(h.to_list(), fh)
        fh.write("\n")


def load_homography(path: str | Path) -> Homography:
    with open(path) as fh:
        m = json.load(fh)
    try:
        arr = np.array(m, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise RegistrationError(f"{path}: homography must be a 3x3 numeric array") from exc
    return Homography(arr)
