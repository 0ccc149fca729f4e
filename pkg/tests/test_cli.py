import shutil
import subprocess
import sys

import numpy as np
import pytest
from conftest import EXPORTS, run_cli, tie_points
from scipy import ndimage

from tunnelscan.config import PipelineConfig, grid_frame
from tunnelscan.errors import ConfigError
from tunnelscan.surface import load_grid

# ----------------------------------------------------------------------------- config


def test_config_defaults_and_paths(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nimages = pics\nseed = 3\ncache = no\ngrid_axis = 1,0,0\ngrid_origin = 0,0,0\n")
    cfg = PipelineConfig.from_file(f, {"clahe_clip": "3.5"})
    assert cfg.path("images") == tmp_path / "pics"
    assert (cfg.seed, cfg.cache, cfg.clahe_clip, cfg.stereo_window) == (3, False, 3.5, 15)
    origin, frame = grid_frame(cfg)
    assert np.allclose(frame.T @ frame, np.eye(3))
    assert np.array_equal(frame[:, 0], [1.0, 0.0, 0.0])


def test_config_text_round_trip(tmp_path):
    cfg = PipelineConfig(seed=9, grid_origin=(1.0, 2.0, 3.0), grid_axis=(0.0, 1.0, 0.0), dense=False)
    again = PipelineConfig.from_text(cfg.to_text())
    assert again == cfg


@pytest.mark.parametrize("text", [
    "stereo_window = 14",
    "match_ratio = 1.5",
    "workers = 0",
    "seed = x",
    "cache = maybe",
    "no_such_key = 1",
    "grid_origin = 1,2",
    "grid_origin = 0,0,0",
    "target_min_distance = 12",
    "just a line",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        PipelineConfig.from_text(text)


# ----------------------------------------------------------------------------- exit codes


def test_usage_errors_exit_64():
    assert run_cli().code == 64
    assert run_cli("frobnicate").code == 64
    assert run_cli("run").code == 64
    assert run_cli("run", "x.txt", "--set", "novalue").code == 64


def test_console_entry_point_usage():
    proc = subprocess.run([sys.executable, "-m", "tunnelscan", "compare"], capture_output=True, text=True)
    assert proc.returncode == 64
    assert "usage" in proc.stderr


def test_missing_config_is_config_error(tmp_path):
    assert run_cli("run", tmp_path / "absent.txt").code == 2


def test_bad_override_is_config_error(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("")
    assert run_cli("run", f, "--set", "stereo_window=4").code == 2


def test_missing_inputs_exit_3_with_report(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("images = nowhere\n")
    (tmp_path / "calibration.txt").write_text("")
    res = run_cli("run", f)
    assert res.code == 3
    report = (tmp_path / "output" / "report.txt").read_text()
    assert "exit_status 3" in report and "failed_stage setup" in report


def test_compare_missing_grid_exit_3(tmp_path):
    assert run_cli("compare", tmp_path / "a", tmp_path / "b").code == 3


# ----------------------------------------------------------------------------- default dataset


def test_report_contents(first_run):
    rep = first_run.report
    assert first_run.result.stdout == rep
    for stage in ("prep", "features", "local_bundle", "targets", "georef", "global_bundle", "dense", "surface",
                  "export"):
        assert any(ln.startswith(stage + " ") for ln in rep.splitlines()), stage
    assert "local bundle rms px" in rep and "global bundle rms px" in rep
    assert "targets localized: 4" in rep
    assert rep.count(" -> T") == 4
    assert "p95_abs_mm" in rep
    assert len(tie_points(rep)) == 12
    for f in EXPORTS:
        assert (first_run.output / f).is_file(), f


def _holes(valid: np.ndarray) -> list[tuple[int, int]]:
    """Azimuth and axial span (bins) of each enclosed gap, with azimuth wrapping."""
    n = valid.shape[0]
    lab, count = ndimage.label(~np.vstack([valid, valid]))
    spans = []
    for sl in ndimage.find_objects(lab):
        az, ax = sl
        # keep each gap once, and skip gaps open to either axial end of the grid
        if az.start >= n or ax.start == 0 or ax.stop == valid.shape[1]:
            continue
        spans.append((az.stop - az.start, ax.stop - ax.start))
    return spans


def test_model_extent_and_holes(first_run):
    model = load_grid(first_run.output / "model")
    cols = np.flatnonzero(model.valid.any(axis=0))
    extent = (cols[-1] - cols[0] + 1) * model.axial_bin
    spans = _holes(model.valid)
    worst = max((max(s) for s in spans), default=0)
    assert extent >= 4.0 - 1e-9
    assert worst <= 2, f"{sum(max(s) > 2 for s in spans)} gaps wider than 2 bins, widest {worst}"


def test_cached_rerun_reuses_every_stage(first_run, tmp_path, default_dataset):
    out = tmp_path / "copy"
    shutil.copytree(first_run.output, out)
    res = run_cli("run", default_dataset.config, "--set", f"output={out}")
    assert res.code == 0
    table = (out / "report.txt").read_text().split("stage                seconds  status\n")[1].split("\n\n")[0]
    statuses = {ln.split()[0]: ln.split()[2] for ln in table.splitlines()}
    assert statuses.pop("export") == "ok"
    assert len(statuses) == 8 and set(statuses.values()) == {"cached"}, statuses
    for f in EXPORTS:
        assert (out / f).read_bytes() == (first_run.output / f).read_bytes(), f


def test_compare_subcommand(first_run, default_dataset, tmp_path):
    res = run_cli("compare", first_run.output / "model", default_dataset.root / "truth" / "ground_truth",
                  "--raster", tmp_path / "dev.png")
    assert res.code == 0
    assert res.stdout == (first_run.output / "deviation.txt").read_text()
    assert (tmp_path / "dev.png").is_file()
    same = run_cli("compare", first_run.output / "model", first_run.output / "model")
    assert "max_abs_mm 0.000" in same.stdout


def test_too_few_targets_falls_back_to_local_frame(default_dataset, tmp_path):
    # the targets sit about 5 m away, so a 3 m distance limit hides all of them
    res = run_cli("run", default_dataset.config, "--set", f"output={tmp_path}", "--set", "target_max_distance=3",
                  "--set", "dense=false")
    rep = (tmp_path / "report.txt").read_text()
    assert res.code == 4
    assert "frame local" in rep
    assert "3 needed; results stay in the local frame" in rep
    assert "failed_stage" not in rep


def test_failing_stage_is_reported(default_dataset, tmp_path):
    data = tmp_path / "one_tripod"
    shutil.copytree(default_dataset.root, data, ignore=shutil.ignore_patterns("output", "t1_*"))
    res = run_cli("run", data / "config.txt", "--no-cache")
    rep = (data / "output" / "report.txt").read_text()
    assert res.code not in (0, 1, 4)
    assert f"exit_status {res.code}" in rep
    failed = [ln.split()[1] for ln in rep.splitlines() if ln.startswith("failed_stage")]
    assert failed and failed[0] in rep.split("stage                seconds  status")[1]
