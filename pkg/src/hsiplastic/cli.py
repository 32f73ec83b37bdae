"""Command-line entry point: ``hsiplastic <command> CONFIG [--seed N] [--out-dir DIR] [--workers K]``.

Exit status is 0 on success, 2 for configuration errors and 1 for runtime
failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np

from hsiplastic import plotting
from hsiplastic.calibrate import CalibrationError, estimate_dark, extract_reference, reflectance
from hsiplastic.classify import TrainingError, load_model
from hsiplastic.cube_io import IGNORE, LabelMask, load_cube, load_manifest, load_mask, load_rgb, save_cube, save_mask
from hsiplastic.pipeline import (
    ConfigError,
    ExperimentConfig,
    RenderPalette,
    bench,
    random_reflectance_cube,
    read_json,
    run_eval,
    run_render,
    run_train,
    write_json,
)
from hsiplastic.register import (
    estimate_homography,
    load_correspondences,
    load_homography,
    register_cube_to_rgb,
    save_homography,
)
from hsiplastic.synth import SynthError, SynthParams, synth_gen

log = logging.getLogger("hsiplastic")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _path(cfg_dir: Path, p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else cfg_dir / p


def _out_dir(args: argparse.Namespace, cfg: dict[str, Any], cfg_dir: Path) -> Path:
    if args.out_dir is not None:
        out = Path(args.out_dir)
    else:
        out = _path(cfg_dir, cfg.get("out_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"config is missing {missing}")


# keys the CLI reads on top of an experiment config
CLI_ONLY_KEYS = ("model_file", "eval_dir")


def _experiment(args: argparse.Namespace, cfg: dict[str, Any], cfg_dir: Path) -> ExperimentConfig:
    d = {k: v for k, v in cfg.items() if k not in CLI_ONLY_KEYS}
    exp = ExperimentConfig.from_dict(d, base_dir=cfg_dir)
    exp.out_dir = _out_dir(args, cfg, cfg_dir)
    if args.seed is not None:
        exp.split_seed = args.seed
        exp.train.seed = args.seed
    return exp


def _model_file(exp: ExperimentConfig, cfg: dict[str, Any], cfg_dir: Path) -> Path:
    if "model_file" in cfg:
        return _path(cfg_dir, cfg["model_file"])
    return exp.out_dir / f"model_{exp.tag}.json"


# --------------------------------------------------------------------------
# commands


def cmd_synth_gen(args, cfg, cfg_dir) -> list[Path]:
    out = _out_dir(args, cfg, cfg_dir)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    params = SynthParams.from_dict({k: v for k, v in cfg.items() if k not in ("seed", "out_dir")})
    manifests = synth_gen(params, seed, out)
    # class-mean spectra of the training scenes, for a quick look at the generated signatures
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    wl = None
    for mp in manifests:
        m = load_manifest(mp)
        if m.role != "Train":
            continue
        cube = load_cube(m.resolve("cube"))
        mask = load_mask(m.resolve("mask")).labels.ravel()
        wl = cube.wavelengths
        px = cube.pixels()
        for code, name in ((1, "plastic"), (0, "non-plastic")):
            sel = px[mask == code]
            if len(sel):
                sums[name] = sums.get(name, 0) + sel.sum(axis=0, dtype=np.float64)
                counts[name] = counts.get(name, 0) + len(sel)
    if wl is not None and sums:
        plotting.plot_mean_spectra(wl, {k: sums[k] / counts[k] for k in sums}, out / "mean_spectra.png")
    for p in manifests:
        print(p)
    return manifests


def cmd_train(args, cfg, cfg_dir):
    exp = _experiment(args, cfg, cfg_dir)
    res = run_train(exp, workers=args.workers)
    r = res.report
    print(f"model: {res.model_path}")
    print(f"validation ({res.n_val} px, trained on {res.n_train} px): acc={r.accuracy:.4f} "
          f"precision={r.precision:.4f} recall={r.recall:.4f} f1={r.f1:.4f} auc={_fmt(r.auc)}")
    return res


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def cmd_eval(args, cfg, cfg_dir):
    exp = _experiment(args, cfg, cfg_dir)
    model_path = _model_file(exp, cfg, cfg_dir)
    if not model_path.exists():
        raise ConfigError(f"model file not found: {model_path}")
    res = run_eval(model_path, exp.test_manifests, exp.out_dir, exp.modality, exp.averaging, exp.palette,
                   workers=args.workers)
    for name, r in sorted(res.scene_reports.items()):
        print(f"{name}: acc={r.accuracy:.4f} f1={r.f1:.4f} auc={_fmt(r.auc)}")
    p = res.pooled
    print(f"pooled: acc={p.accuracy:.4f} precision={p.precision:.4f} recall={p.recall:.4f} "
          f"f1={p.f1:.4f} auc={_fmt(p.auc)}")
    return res


def cmd_render(args, cfg, cfg_dir):
    out = _out_dir(args, cfg, cfg_dir)
    if "pairs" in cfg:
        try:
            pairs = [(str(p["name"]), _path(cfg_dir, p["pred"]), _path(cfg_dir, p["truth"])) for p in cfg["pairs"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"each render pair needs name, pred and truth: {exc}") from exc
        palette = RenderPalette.from_dict(cfg.get("palette"))
        figure = "maps.png"
    else:
        exp = _experiment(args, cfg, cfg_dir)
        # predicted masks come from the eval run, which wrote to the config's own out_dir
        eval_dir = _path(cfg_dir, cfg.get("eval_dir", cfg.get("out_dir", "out")))
        pairs = []
        for mp in exp.test_manifests:
            m = load_manifest(mp)
            name = f"scene_{m.scenario_id:02d}"
            pred = eval_dir / f"pred_{exp.tag}_{name}.pgm"
            if not pred.exists():
                raise ConfigError(f"no predicted mask {pred}; run eval first")
            pairs.append((f"{exp.tag}_{name}", pred, m.resolve("mask")))
        palette = exp.palette
        figure = f"maps_{exp.tag}.png"
    paths = run_render(pairs, out, palette, figure)
    for p in paths:
        print(p)
    return paths


def cmd_bench(args, cfg, cfg_dir):
    out = _out_dir(args, cfg, cfg_dir)
    if "model_file" in cfg:
        model_path = _path(cfg_dir, cfg["model_file"])
    else:
        exp = _experiment(args, cfg, cfg_dir)
        model_path = _model_file(exp, cfg, cfg_dir)
    if not model_path.exists():
        raise ConfigError(f"model file not found: {model_path}")
    model = load_model(model_path)
    if "cube" in cfg:
        cube = load_cube(_path(cfg_dir, cfg["cube"]))
    else:
        h, w = int(cfg.get("height", 1052)), int(cfg.get("width", 1588))
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        cube = random_reflectance_cube(h, w, model.input_width, seed=seed)
    report = bench(model, cube, repetitions=int(cfg.get("repetitions", 5)), workers=args.workers)
    report["model_file"] = str(model_path)
    tag = f"{model.kind.value}_w{args.workers}"
    write_json(report, out / f"bench_{tag}.json")
    plotting.plot_latency(report["samples_ms"], report["budget_ms"], out / f"bench_{tag}.png")
    print(f"median {report['median_ms']:.1f} ms over {report['repetitions']} runs "
          f"({report['pixels_per_second']:.3g} px/s, {report['workers']} worker(s)); "
          f"budget {report['budget_ms']:.0f} ms: {'ok' if report['within_budget'] else 'EXCEEDED'}")
    return report


def cmd_calibrate(args, cfg, cfg_dir):
    _require(cfg, "cube", "dark", "panel_region")
    out = _out_dir(args, cfg, cfg_dir)
    cube = load_cube(_path(cfg_dir, cfg["cube"]))
    darks = [load_cube(_path(cfg_dir, p)) for p in cfg["dark"]]
    dark = estimate_dark(darks)
    ref_cube = load_cube(_path(cfg_dir, cfg["reference"])) if "reference" in cfg else cube
    ref = extract_reference(ref_cube, tuple(cfg["panel_region"]), dark, float(cfg.get("panel_reflectivity", 0.95)))
    refl, valid = reflectance(cube, dark, ref)
    stem = cfg.get("name", "calibrated")
    save_cube(refl, out / f"{stem}.rcube")
    save_mask(LabelMask(np.where(valid, 0, IGNORE).astype(np.uint8)), out / f"{stem}_validity.pgm")
    print(f"{out / f'{stem}.rcube'}: {int((~valid).sum())} invalid pixel(s)")
    return refl, valid


def cmd_register(args, cfg, cfg_dir):
    _require(cfg, "cube", "rgb")
    if "homography" not in cfg and "correspondences" not in cfg:
        raise ConfigError("register needs either 'homography' or 'correspondences'")
    out = _out_dir(args, cfg, cfg_dir)
    cube = load_cube(_path(cfg_dir, cfg["cube"]))
    rgb = load_rgb(_path(cfg_dir, cfg["rgb"]))
    info: dict[str, Any] = {}
    if "homography" in cfg:
        h = load_homography(_path(cfg_dir, cfg["homography"]))
    else:
        h, rms = estimate_homography(load_correspondences(_path(cfg_dir, cfg["correspondences"])))
        info["reprojection_rms_px"] = rms
    save_homography(h, out / "homography.json")
    warped, valid = register_cube_to_rgb(cube, rgb, h, workers=args.workers)
    stem = cfg.get("name", "registered")
    save_cube(warped, out / f"{stem}.rcube")
    save_mask(LabelMask(np.where(valid, 0, IGNORE).astype(np.uint8)), out / f"{stem}_validity.pgm")
    info.update(height=warped.height, width=warped.width, bands=warped.bands, invalid_pixels=int((~valid).sum()))
    write_json(info, out / f"{stem}.json")
    print(f"{out / f'{stem}.rcube'}: {warped.height}x{warped.width}x{warped.bands}")
    return warped, valid


COMMANDS = {
    "synth-gen": (cmd_synth_gen, "generate synthetic scenes (cube, RGB, mask, manifest)"),
    "train": (cmd_train, "train a model on Train scenes with the half/half split"),
    "eval": (cmd_eval, "evaluate a model on Test scenes; writes reports, masks and maps"),
    "render": (cmd_render, "render four-colour outcome maps from predicted and truth masks"),
    "bench": (cmd_bench, "time full-cube inference"),
    "calibrate": (cmd_calibrate, "convert a raw cube to reflectance"),
    "register": (cmd_register, "warp a cube onto an RGB frame with a homography"),
}

# errors caused by the configuration rather than by the data or the run
CONFIG_ERRORS = (ConfigError, SynthError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsiplastic", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", type=Path, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", type=Path, default=None)
        p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    func, _ = COMMANDS[args.command]
    try:
        cfg = read_json(args.config)
        func(args, cfg, args.config.resolve().parent)
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
