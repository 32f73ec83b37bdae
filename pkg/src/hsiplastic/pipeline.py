"""Experiment orchestration: scene loading, split protocol, train, eval, render, bench."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from hsiplastic import plotting
from hsiplastic.calibrate import estimate_dark, extract_reference, reflectance
from hsiplastic.classify import (
    Dataset,
    LinearModel,
    MLPModel,
    Model,
    ModelKind,
    TrainConfig,
    default_threshold,
    fit,
    load_model,
    predict_scores,
    save_model,
)
from hsiplastic.cube_io import (
    IGNORE,
    CalibrationState,
    CubeFormatError,
    LabelMask,
    SceneManifest,
    SpectralCube,
    flatten_pixels,
    load_cube,
    load_manifest,
    load_mask,
    load_rgb,
    save_mask,
)
from hsiplastic.metrics import (
    Averaging,
    ConfusionCounts,
    MetricsReport,
    classification_metrics,
    confusion,
    roc_auc,
    roc_curve,
    save_report,
)
from hsiplastic.register import load_homography, register_cube_to_rgb

log = logging.getLogger(__name__)

CPU_BUDGET_MS = 4000.0
FULL_CUBE_SHAPE = (1052, 1588, 33)


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


# --------------------------------------------------------------------------
# configuration


def _hex_rgb(color: str | Sequence[int]) -> tuple[int, int, int]:
    if isinstance(color, str):
        c = color.lstrip("#")
        if len(c) != 6:
            raise ConfigError(f"colour {color!r} is not #RRGGBB")
        return int(c[0:2], 16), int(c[2:4], 16), int(c[4:6], 16)
    r, g, b = (int(v) for v in color)
    return r, g, b


@dataclass(frozen=True)
class RenderPalette:
    tp: tuple[int, int, int] = _hex_rgb("#C9A0DC")  # light purple
    tn: tuple[int, int, int] = _hex_rgb("#4B0082")  # dark purple
    fp: tuple[int, int, int] = _hex_rgb("#FFF3A0")  # light yellow
    fn: tuple[int, int, int] = _hex_rgb("#D4B400")  # dark yellow
    ignore: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self) -> None:
        if len({self.tp, self.tn, self.fp, self.fn}) != 4:
            raise ConfigError("palette colours for tp, tn, fp, fn must be distinct")

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> RenderPalette:
        d = d or {}
        unknown = set(d) - {"tp", "tn", "fp", "fn", "ignore"}
        if unknown:
            raise ConfigError(f"unknown palette keys {sorted(unknown)}")
        return cls(**{k: _hex_rgb(v) for k, v in d.items()})

    def legend(self) -> dict[str, tuple[int, int, int]]:
        return {
            "correct detection": self.tp,
            "correct non-detection": self.tn,
            "false detection": self.fp,
            "missed detection": self.fn,
        }


@dataclass
class ExperimentConfig:
    train_manifests: list[Path] = field(default_factory=list)
    test_manifests: list[Path] = field(default_factory=list)
    modality: str = "HSI"
    model: ModelKind = ModelKind.MLP
    train: TrainConfig = field(default_factory=TrainConfig)
    split_seed: int = 0
    averaging: Averaging = Averaging.WEIGHTED
    out_dir: Path = Path("out")
    palette: RenderPalette = field(default_factory=RenderPalette)

    def __post_init__(self) -> None:
        if self.modality not in ("HSI", "RGB"):
            raise ConfigError(f"modality must be HSI or RGB, got {self.modality!r}")

    @property
    def tag(self) -> str:
        return f"{self.model.value}_{self.modality.lower()}"

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
        known = {"train_manifests", "test_manifests", "manifest_dir", "modality", "model", "train",
                 "split_seed", "averaging", "out_dir", "palette"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment options {sorted(unknown)}")

        def resolve(p: str | Path) -> Path:
            p = Path(p)
            return p if p.is_absolute() or base_dir is None else base_dir / p

        train = [resolve(p) for p in d.get("train_manifests", [])]
        test = [resolve(p) for p in d.get("test_manifests", [])]
        if "manifest_dir" in d:
            # role assignment is read from each manifest
            for p in sorted(resolve(d["manifest_dir"]).glob("scene_*.json")):
                (train if load_manifest(p).role == "Train" else test).append(p)
        try:
            return cls(
                train_manifests=train,
                test_manifests=test,
                modality=str(d.get("modality", "HSI")).upper(),
                model=ModelKind(d.get("model", "mlp")),
                train=TrainConfig.from_dict(d.get("train")),
                split_seed=int(d.get("split_seed", 0)),
                averaging=Averaging(d.get("averaging", "weighted")),
                out_dir=resolve(d.get("out_dir", "out")),
                palette=RenderPalette.from_dict(d.get("palette")),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def read_json(path: str | Path) -> dict[str, Any]:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return d


def write_json(obj: Any, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# --------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    manifest: SceneManifest
    raster: SpectralCube
    truth: LabelMask

    @property
    def name(self) -> str:
        return f"scene_{self.manifest.scenario_id:02d}"


def _manifest(path: Path, role: str | None) -> SceneManifest:
    try:
        m = load_manifest(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"manifest not found: {path}") from exc
    except CubeFormatError as exc:
        raise ConfigError(str(exc)) from exc
    if role is not None and m.role != role:
        raise ConfigError(f"{path}: scenario {m.scenario_id} is a {m.role} scene, expected {role}")
    return m


def _calibrate_from_manifest(m: SceneManifest, cube: SpectralCube) -> tuple[SpectralCube, np.ndarray]:
    cal = m.extra.get("calibration")
    if not cal:
        raise ConfigError(f"scenario {m.scenario_id}: raw cube without a 'calibration' entry")
    try:
        darks = [load_cube(m.resolve(p)) for p in cal["dark"]]
        dark = estimate_dark(darks)
        ref_cube = load_cube(m.resolve(cal["reference"])) if "reference" in cal else cube
        ref = extract_reference(ref_cube, tuple(cal["panel_region"]), dark, cal.get("panel_reflectivity", 0.95))
    except KeyError as exc:
        raise ConfigError(f"scenario {m.scenario_id}: calibration entry lacks {exc}") from exc
    return reflectance(cube, dark, ref)


def load_scene(path: Path, modality: str, role: str | None = None, workers: int = 1) -> Scene:
    """Load one scenario as a reflectance raster of the requested modality plus its truth mask.

    Raw cubes are calibrated using the manifest's ``calibration`` entry and
    cubes with a ``homography`` entry are warped onto the RGB grid; pixels
    invalidated by either step become ignore pixels in the returned mask.
    """
    m = _manifest(path, role)
    truth = load_mask(m.resolve("mask"))
    if modality == "RGB":
        raster = load_rgb(m.resolve("rgb")).to_cube()
    else:
        raster = load_cube(m.resolve("cube"))
        invalid = np.zeros((raster.height, raster.width), dtype=bool)
        if raster.state is CalibrationState.RAW:
            raster, valid = _calibrate_from_manifest(m, raster)
            invalid = ~valid
        if "homography" in m.extra:
            h = load_homography(m.resolve(m.extra["homography"]))
            rgb = load_rgb(m.resolve("rgb"))
            # warp validity alongside the data so calibration holes follow the pixels
            holes = SpectralCube(invalid[None].astype(np.float32), [500.0], state=CalibrationState.REFLECTANCE)
            raster, valid = register_cube_to_rgb(raster, rgb, h, workers)
            warped_holes, _ = register_cube_to_rgb(holes, rgb, h, workers)
            invalid = ~valid | (warped_holes.data[0] > 0)
        if invalid.any():
            if truth.shape != invalid.shape:
                raise ConfigError(f"scenario {m.scenario_id}: mask does not match registered cube")
            truth = truth.with_ignore(invalid)
    if truth.shape != (raster.height, raster.width):
        raise ConfigError(
            f"scenario {m.scenario_id}: mask {truth.shape} does not match {modality} raster "
            f"{(raster.height, raster.width)}"
        )
    return Scene(m, raster, truth)


def pooled_dataset(scenes: Sequence[Scene]) -> Dataset:
    bands = {s.raster.bands for s in scenes}
    if len(bands) != 1:
        raise ConfigError(f"scenes disagree on band count: {sorted(bands)}")
    feats, labels = zip(*(flatten_pixels(s.raster, s.truth) for s in scenes))
    return Dataset(np.concatenate(feats), np.concatenate(labels))


# --------------------------------------------------------------------------
# split protocol


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded half/half split, then keep half of the training half.

    Returns sorted ``(train, discarded, validation)`` index arrays that
    partition ``range(n)``.
    """
    if n < 4:
        raise ValueError(f"need at least 4 pixels to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    candidate = perm[: n // 2]
    val = perm[n // 2:]
    sub = rng.permutation(candidate.size)
    train = candidate[sub[: candidate.size // 2]]
    discarded = candidate[sub[candidate.size // 2:]]
    return np.sort(train), np.sort(discarded), np.sort(val)


def split_train_val(data: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    train, _, val = split_indices(len(data), seed)
    return data.subset(train), data.subset(val)


# --------------------------------------------------------------------------
# train / eval


def report_for(model: Model, data: Dataset, averaging: Averaging, workers: int = 1) -> tuple[MetricsReport, np.ndarray]:
    scores = predict_scores(model, data.features, workers=workers)
    pred = (scores > default_threshold(model)).astype(np.uint8)
    rep = classification_metrics(confusion(pred, data.labels.astype(np.uint8)), averaging)
    rep.auc = _safe_auc(scores, data.labels, rep)
    return rep, scores


def _safe_auc(scores: np.ndarray, labels: np.ndarray, rep: MetricsReport) -> float | None:
    if labels.size and labels.min() != labels.max():
        return roc_auc(scores, labels)
    rep.undefined = sorted({*rep.undefined, "auc"})
    return None


@dataclass
class TrainResult:
    model: Model
    model_path: Path
    report: MetricsReport
    report_path: Path
    n_train: int
    n_val: int


def run_train(cfg: ExperimentConfig, workers: int = 1) -> TrainResult:
    if not cfg.train_manifests:
        raise ConfigError("no Train scenes configured")
    scenes = [load_scene(p, cfg.modality, role="Train", workers=workers) for p in cfg.train_manifests]
    data = pooled_dataset(scenes)
    try:
        train, val = split_train_val(data, cfg.split_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    log.info("training %s on %d pixels (%d validation)", cfg.tag, len(train), len(val))
    if cfg.model is ModelKind.MLP:
        init: Model = MLPModel.initialize(train.bands, np.random.default_rng([cfg.train.seed, 1]))
    else:
        init = LinearModel.zeros(train.bands, cfg.model)
    model, hist = fit(init, train, cfg.train, validation=val)
    report, _ = report_for(model, val, cfg.averaging, workers)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    model_path = cfg.out_dir / f"model_{cfg.tag}.json"
    save_model(model, model_path, seed=cfg.train.seed)
    report_path = cfg.out_dir / f"val_report_{cfg.tag}.json"
    save_report(
        report,
        report_path,
        model=cfg.model.value,
        modality=cfg.modality,
        split="validation",
        n_train=len(train),
        n_validation=len(val),
        epochs_run=len(hist.train_loss),
        best_epoch=hist.best_epoch,
    )
    return TrainResult(model, model_path, report, report_path, len(train), len(val))


def render_map(pred: LabelMask, truth: LabelMask, palette: RenderPalette | None = None) -> np.ndarray:
    """``(H, W, 3)`` uint8 outcome map; colour depends only on (pred, truth) at each pixel."""
    palette = palette or RenderPalette()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    p, t = pred.labels, truth.labels
    img = np.empty((*p.shape, 3), dtype=np.uint8)
    img[:] = palette.ignore
    img[(p == 1) & (t == 1)] = palette.tp
    img[(p == 0) & (t == 0)] = palette.tn
    img[(p == 1) & (t == 0)] = palette.fp
    img[(p == 0) & (t == 1)] = palette.fn
    return img


def save_ppm(img: np.ndarray, path: str | Path) -> Path:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def load_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: maxval must be 255")
    body = raw[-w * h * 3:]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


@dataclass
class EvalResult:
    scene_reports: dict[str, MetricsReport]
    pooled: MetricsReport
    scene_mean: dict[str, float | None]
    paths: list[Path]


def _scene_mean(reports: Sequence[MetricsReport]) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for k in ("accuracy", "precision", "recall", "f1", "auc"):
        vals = [getattr(r, k) for r in reports if getattr(r, k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def run_eval(model_path: str | Path, test_manifests: Sequence[Path], out_dir: str | Path,
             modality: str = "HSI", averaging: Averaging | str = Averaging.WEIGHTED,
             palette: RenderPalette | None = None, workers: int = 1, figures: bool = True) -> EvalResult:
    """Score every test scene, write per-scene and pooled reports, outcome maps and predicted masks."""
    if not test_manifests:
        raise ConfigError("no Test scenes configured")
    averaging = Averaging(averaging)
    palette = palette or RenderPalette()
    model = load_model(model_path)
    kind = model.kind.value
    tag = f"{kind}_{modality.lower()}"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    paths: list[Path] = []
    reports: dict[str, MetricsReport] = {}
    pooled_counts = ConfusionCounts()
    all_scores, all_labels = [], []
    maps = []
    csv_rows = []
    threshold = default_threshold(model)
    for mp in test_manifests:
        scene = load_scene(Path(mp), modality, role="Test", workers=workers)
        if scene.raster.bands != model.input_width:
            raise ConfigError(
                f"{scene.name}: {modality} raster has {scene.raster.bands} bands, model expects {model.input_width}"
            )
        feats, labels = flatten_pixels(scene.raster, scene.truth)
        scores = predict_scores(model, feats, workers=workers)
        keep = scene.truth.labels != IGNORE
        pred_labels = np.full(scene.truth.shape, IGNORE, dtype=np.uint8)
        pred_labels[keep] = (scores > threshold).astype(np.uint8)
        pred = LabelMask(pred_labels)

        counts = confusion(pred, scene.truth)
        rep = classification_metrics(counts, averaging)
        rep.auc = _safe_auc(scores, labels, rep)
        reports[scene.name] = rep
        pooled_counts = pooled_counts + counts
        all_scores.append(scores)
        all_labels.append(labels)

        rep_path = out / f"eval_{tag}_{scene.name}.json"
        save_report(rep, rep_path, model=kind, modality=modality, split="test", scene=scene.name)
        paths.append(rep_path)
        save_mask(pred, out / f"pred_{tag}_{scene.name}.pgm")
        paths.append(out / f"pred_{tag}_{scene.name}.pgm")
        img = render_map(pred, scene.truth, palette)
        paths.append(save_ppm(img, out / f"map_{tag}_{scene.name}.ppm"))
        maps.append((f"scenario {scene.manifest.scenario_id}", img))
        csv_rows.append([scene.name, *_csv_metrics(rep)])

    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    pooled = classification_metrics(pooled_counts, averaging)
    pooled.auc = _safe_auc(scores, labels, pooled)
    mean = _scene_mean(list(reports.values()))
    pooled_path = out / f"eval_{tag}_pooled.json"
    save_report(pooled, pooled_path, model=kind, modality=modality, split="test", scene="pooled",
                scene_mean=mean, scenes=sorted(reports))
    paths.append(pooled_path)
    csv_rows.append(["pooled", *_csv_metrics(pooled)])

    csv_path = out / f"metrics_{tag}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "accuracy", "precision", "recall", "f1", "auc", "tp", "fp", "tn", "fn"])
        w.writerows(csv_rows)
    paths.append(csv_path)

    if figures:
        paths.append(plotting.plot_detection_maps(maps, palette.legend(), out / f"maps_{tag}.png"))
        if pooled.auc is not None:
            fpr, tpr = roc_curve(scores, labels)
            paths.append(plotting.plot_roc({f"{kind.upper()} / {modality}": (fpr, tpr, pooled.auc)},
                                           out / f"roc_{tag}.png"))
    return EvalResult(reports, pooled, mean, paths)


def _csv_metrics(rep: MetricsReport) -> list[str]:
    def f(v: float | None) -> str:
        return "" if v is None else f"{v:.6f}"

    c = rep.counts
    return [f(rep.accuracy), f(rep.precision), f(rep.recall), f(rep.f1), f(rep.auc), c.tp, c.fp, c.tn, c.fn]


def run_render(pairs: Sequence[tuple[str, Path, Path]], out_dir: str | Path,
               palette: RenderPalette | None = None, figure_name: str = "maps.png") -> list[Path]:
    """Render ``(name, predicted mask, truth mask)`` triples to PPM maps and one PNG panel."""
    palette = palette or RenderPalette()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, maps = [], []
    for name, pred_path, truth_path in pairs:
        img = render_map(load_mask(pred_path), load_mask(truth_path), palette)
        paths.append(save_ppm(img, out / f"map_{name}.ppm"))
        maps.append((name, img))
    paths.append(plotting.plot_detection_maps(maps, palette.legend(), out / figure_name))
    return paths


# --------------------------------------------------------------------------
# latency benchmark


def random_reflectance_cube(height: int = FULL_CUBE_SHAPE[0], width: int = FULL_CUBE_SHAPE[1],
                            bands: int = FULL_CUBE_SHAPE[2], seed: int = 0) -> SpectralCube:
    rng = np.random.default_rng(seed)
    data = rng.random((bands, height, width), dtype=np.float32)
    return SpectralCube(data, np.linspace(660.0, 1700.0, bands), state=CalibrationState.REFLECTANCE)


def bench(model: Model, cube: SpectralCube, repetitions: int = 5, workers: int = 1) -> dict[str, Any]:
    """Time full-cube inference; file I/O is outside the timed region."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if cube.bands != model.input_width:
        raise ConfigError(f"cube has {cube.bands} bands, model expects {model.input_width}")
    pixels = cube.pixels()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        predict_scores(model, pixels, workers=workers)
        samples.append((time.perf_counter() - t0) * 1000.0)
    median = statistics.median(samples)
    n = cube.height * cube.width
    return {
        "model": model.kind.value,
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "workers": int(workers),
        "repetitions": repetitions,
        "samples_ms": samples,
        "median_ms": median,
        "pixels_per_second": n / (median / 1000.0) if median > 0 else float("inf"),
        "budget_ms": CPU_BUDGET_MS,
        "within_budget": median <= CPU_BUDGET_MS,
    }
