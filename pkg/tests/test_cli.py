import json

import numpy as np
import pytest

from hsiplastic.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, main
from hsiplastic.cube_io import CalibrationState, SpectralCube, load_cube, load_mask, save_cube
from hsiplastic.register import Correspondence, load_homography, save_correspondences


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write(d / "synth.json", {"height": 20, "width": 24, "scenarios": [1, 2, 7, 8]})
    assert main(["synth-gen", str(cfg), "--seed", "1", "--out-dir", str(d / "scenes")]) == EXIT_OK
    write(d / "exp.json", {"manifest_dir": "scenes", "model": "logistic", "out_dir": "out",
                           "train": {"epochs": 2, "batch_size": 128}})
    return d


def test_parser_has_all_commands():
    parser = build_parser()
    for cmd in ("synth-gen", "train", "eval", "render", "bench", "calibrate", "register"):
        args = parser.parse_args([cmd, "c.json", "--seed", "3", "--out-dir", "o", "--workers", "2"])
        assert (args.seed, args.workers, str(args.out_dir)) == (3, 2, "o")


def test_synth_gen_outputs(workdir):
    names = {p.name for p in (workdir / "scenes").iterdir()}
    assert {"scene_01.json", "scene_08_mask.pgm", "synth_params.json", "mean_spectra.png"} <= names
    assert json.loads((workdir / "scenes" / "synth_params.json").read_text())["seed"] == 1


def test_train_eval_render(workdir, capsys):
    exp = str(workdir / "exp.json")
    assert main(["train", exp]) == EXIT_OK
    assert main(["eval", exp]) == EXIT_OK
    assert main(["render", exp, "--out-dir", str(workdir / "maps")]) == EXIT_OK
    out = workdir / "out"
    assert (out / "model_logistic_hsi.json").exists()
    assert (out / "val_report_logistic_hsi.json").exists()
    assert (out / "eval_logistic_hsi_pooled.json").exists()
    assert (workdir / "maps" / "map_logistic_hsi_scene_07.ppm").read_bytes() == \
        (out / "map_logistic_hsi_scene_07.ppm").read_bytes()
    assert "pooled:" in capsys.readouterr().out


def test_seed_flag_overrides_split(workdir):
    exp = str(workdir / "exp.json")
    assert main(["train", exp, "--seed", "5", "--out-dir", str(workdir / "s5")]) == EXIT_OK
    model = json.loads((workdir / "s5" / "model_logistic_hsi.json").read_text())
    assert model["seed"] == 5


def test_bench_command(workdir):
    exp = str(workdir / "exp.json")
    assert main(["train", exp]) == EXIT_OK
    cfg = write(workdir / "bench.json", {"model_file": "out/model_logistic_hsi.json", "height": 30,
                                         "width": 40, "repetitions": 5})
    assert main(["bench", str(cfg), "--out-dir", str(workdir / "bench"), "--workers", "2"]) == EXIT_OK
    rep = json.loads((workdir / "bench" / "bench_logistic_w2.json").read_text())
    assert rep["workers"] == 2 and len(rep["samples_ms"]) == 5 and rep["height"] == 30
    assert (workdir / "bench" / "bench_logistic_w2.png").exists()


def test_calibrate_command(tmp_path):
    wl = [700.0, 900.0]
    dark = np.full((2, 4, 5), 10.0, np.float32)
    sig = dark + 0.95 * 100.0
    sig[:, 2:, :] = dark[:, 2:, :] + 50.0
    save_cube(SpectralCube(sig, wl, state=CalibrationState.RAW), tmp_path / "raw.rcube")
    save_cube(SpectralCube(dark, wl, state=CalibrationState.RAW), tmp_path / "dark.rcube")
    cfg = write(tmp_path / "cal.json", {"cube": "raw.rcube", "dark": ["dark.rcube"], "panel_region": [0, 0, 2, 5]})
    assert main(["calibrate", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_OK
    out = load_cube(tmp_path / "o" / "calibrated.rcube")
    np.testing.assert_allclose(out.data[:, :2], 0.95, atol=1e-6)
    np.testing.assert_allclose(out.data[:, 2:], 0.5, atol=1e-6)
    assert np.all(load_mask(tmp_path / "o" / "calibrated_validity.pgm").labels == 0)


def test_register_command(tmp_path, rng):
    wl = [700.0, 900.0]
    save_cube(SpectralCube(rng.random((2, 6, 8)).astype(np.float32), wl, state="reflectance"), tmp_path / "c.rcube")
    save_cube(SpectralCube(np.zeros((3, 12, 16), np.float32), [470.0, 540.0, 620.0], state="reflectance"),
              tmp_path / "rgb.rcube")
    pts = [Correspondence((x, y), (2 * x, 2 * y)) for x, y in [(0, 0), (7, 0), (7, 5), (0, 5), (3, 2)]]
    save_correspondences(pts, tmp_path / "pts.json")
    cfg = write(tmp_path / "reg.json", {"cube": "c.rcube", "rgb": "rgb.rcube", "correspondences": "pts.json"})
    assert main(["register", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_OK
    h = load_homography(tmp_path / "o" / "homography.json")
    np.testing.assert_allclose(h.m, np.diag([2.0, 2.0, 1.0]), atol=1e-9)
    assert load_cube(tmp_path / "o" / "registered.rcube").shape == (12, 16, 2)
    info = json.loads((tmp_path / "o" / "registered.json").read_text())
    assert info["reprojection_rms_px"] < 1e-9


@pytest.mark.parametrize("cmd,cfg", [
    ("train", {"model": "forest"}),
    ("train", {}),
    ("synth-gen", {"height": 1}),
    ("eval", {"test_manifests": [], "model_file": "nope.json"}),
    ("register", {"cube": "c", "rgb": "r"}),
    ("calibrate", {"cube": "c"}),
])
def test_configuration_errors_exit_2(tmp_path, cmd, cfg, capsys):
    path = write(tmp_path / "bad.json", cfg)
    assert main([cmd, str(path)]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_or_malformed_config_exit_2(tmp_path):
    assert main(["train", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert main(["bench", str(tmp_path / "bad.json"), "--workers", "0"]) == EXIT_CONFIG


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "x.json"])
    assert exc.value.code == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    (tmp_path / "raw.rcube").write_bytes(b"RCUBE 1\n1 1 1\n700\nSTATE raw\nINTEGRATION_MS -\n\0\0")
    cfg = write(tmp_path / "cal.json", {"cube": "raw.rcube", "dark": ["raw.rcube"], "panel_region": [0, 0, 1, 1]})
    assert main(["calibrate", str(cfg)]) == EXIT_RUNTIME
    assert "PayloadLengthError" in capsys.readouterr().err


def test_unusable_panel_is_runtime_failure(tmp_path):
    wl = [700.0]
    save_cube(SpectralCube(np.full((1, 2, 2), 5.0, np.float32), wl), tmp_path / "raw.rcube")
    save_cube(SpectralCube(np.full((1, 2, 2), 9.0, np.float32), wl), tmp_path / "dark.rcube")
    cfg = write(tmp_path / "cal.json", {"cube": "raw.rcube", "dark": ["dark.rcube"], "panel_region": [0, 0, 1, 1]})
    assert main(["calibrate", str(cfg)]) == EXIT_RUNTIME
