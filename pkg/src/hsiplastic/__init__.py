"""Per-pixel macroplastic detection on snapshot hyperspectral datacubes."""

from hsiplastic.cube_io import (
    CalibrationState,
    LabelMask,
    RGBImage,
    SceneManifest,
    SpectralCube,
    flatten_pixels,
    load_cube,
    load_manifest,
    load_mask,
    load_rgb,
    save_cube,
    save_manifest,
    save_mask,
    save_rgb,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationState",
    "LabelMask",
    "RGBImage",
    "SceneManifest",
    "SpectralCube",
    "flatten_pixels",
    "load_cube",
    "load_manifest",
    "load_mask",
    "load_rgb",
    "save_cube",
    "save_manifest",
    "save_mask",
    "save_rgb",
]
