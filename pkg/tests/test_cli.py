import shutil

import numpy as np
import pytest

from confusion import analysis
from confusion.cli import RunError, cmd_analyze, cmd_pipeline, cmd_sweep, main, spearman_epoch_ttf
from confusion.config import parse_config
from confusion.maze import load_dataset
from confusion.search import read_history
from confusion.world_model import save_checkpoint

TINY = """
trajectories = 4
traj_len = 20
d_z = 2
hidden = 8
epochs = 2
batch = 16
checkpoints = 1, 2
iterations = 7
samples = 4
horizon = 5
lr_start = 1e-2
lr_end = 1e-3
snapshot_interval = 3
search_seeds = 2
require_order = false
bins = 10
density_episodes = 5
density_steps = 5
snapshot_rollouts = 2
oracle_problems = 3
oracle_iterations = 2000
oracle_resolution = 2001
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return parse_config(TINY)


@pytest.fixture(scope="module")
def run(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("run")
    cmd_pipeline(tiny_cfg, out)
    return out


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_layout(run, tiny_cfg):
    assert (run / "config.txt").read_text().startswith(f"# config {tiny_cfg.hash()}\n")
    data = load_dataset(run / "data" / "dataset.mzds")
    assert data.shape == (80, 10)
    assert analysis.read_json(run / "data" / "dataset.json")["count"] == 80
    ckpts = sorted((run / "train").glob("ckpt_*.wmck"))
    assert [p.name for p in ckpts] == ["ckpt_e0001.wmck", "ckpt_e0002.wmck"]
    assert len(list((run / "train").glob("ckpt_*.json"))) == len(ckpts)
    for e in (1, 2):
        for s in (0, 1):
            cell = run / "sweep" / f"e{e:04d}_s{s}"
            # floor(iterations / interval) snapshots
            assert sorted(p.name for p in cell.glob("snap_*.wmck")) == ["snap_00003.wmck", "snap_00006.wmck"]
            assert len(read_history(cell / "history.csv")) == 7
            assert (cell / "history.csv").read_text().startswith(f"# config {tiny_cfg.hash()}\n")


def test_sweep_summary(run):
    rows = analysis.read_summary(run / "sweep" / "summary.csv")
    assert [(r["epoch"], r["seed"]) for r in rows] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert "spearman_rho" in rows[0]
    sweep = analysis.read_json(run / "sweep" / "sweep.json")
    assert set(sweep["k_best_mean"]) == {"1", "2"}


def test_analysis_outputs(run):
    report = analysis.read_json(run / "analysis" / "analysis.json")
    assert set(report["epochs"]) == {"1", "2"}
    assert report["epochs"]["1"]["snapshot_iterations"] == [0, 3, 6]
    rgb, comments = analysis.read_ppm(run / "analysis" / "density_ref_e0001.ppm")
    assert rgb.shape == (10, 10, 3) and comments[0].startswith("config ")
    assert (run / "analysis" / "traj_e0002_i00000.ppm").exists()


def test_pipeline_is_byte_reproducible(run, tiny_cfg, tmp_path):
    cmd_pipeline(tiny_cfg, tmp_path)
    assert _files(run) == _files(tmp_path)


def test_analyze_is_idempotent(run, tiny_cfg, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(run, out)
    before = _files(out)
    cmd_analyze(tiny_cfg, out)
    assert _files(out) == before


def test_sweep_resumes(run, tiny_cfg, tmp_path, monkeypatch):
    out = tmp_path / "copy"
    shutil.copytree(run, out)
    shutil.rmtree(out / "sweep" / "e0002_s1")
    import confusion.cli as cli

    calls = []
    real = cli.cmd_search
    monkeypatch.setattr(cli, "cmd_search", lambda cfg, o, e, s: calls.append((e, s)) or real(cfg, o, e, s))
    cmd_sweep(tiny_cfg, out)
    assert calls == [(2, 1)]
    assert _files(out)["sweep/summary.csv"] == _files(run)["sweep/summary.csv"]


def test_analyze_requires_snapshots(run, tiny_cfg, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(run, out)
    for p in (out / "sweep" / "e0001_s0").glob("snap_*.wmck"):
        p.unlink()
    with pytest.raises(RunError, match="no snapshots"):
        cmd_analyze(tiny_cfg, out)


def test_hash_mismatch_is_refused(run, tiny_cfg, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(run, out)
    with pytest.raises(RunError, match="config"):
        cmd_analyze(tiny_cfg.with_overrides(seed=99), out)


def test_main_collect_and_bad_dataset(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    out = tmp_path / "r"
    assert main(["collect", "--config", str(cfg), "--out", str(out)]) == 0
    a = (out / "data" / "dataset.mzds").read_bytes()
    assert main(["collect", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "data" / "dataset.mzds").read_bytes() == a
    bad = tmp_path / "bad.mzds"
    bad.write_bytes(b"JUNK" + a[4:])
    assert main(["train", "--config", str(cfg), "--out", str(out), "--dataset", str(bad)]) == 1
    assert "magic" in capsys.readouterr().err


def test_main_config_errors(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("colour = red\n")
    assert main(["show-config", "--config", str(cfg)]) == 2
    assert main(["show-config", "--set", "seed=x"]) == 2
    assert main(["show-config", "--config", str(tmp_path / "missing.txt")]) == 2
    capsys.readouterr()
    assert main(["show-config", "--preset", "desk", "--seed", "3"]) == 0
    text = capsys.readouterr().out
    assert "seed = 3\n" in text and "d_z = 16\n" in text


def test_main_order_error(tmp_path, free_space, capsys):
    ck = tmp_path / "fs.wmck"
    save_checkpoint(ck, free_space)
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY.replace("require_order = false", "require_order = true").replace("horizon = 5", "horizon = 20")
                   .replace("samples = 4", "samples = 16"))
    code = main(["search", "--config", str(cfg), "--out", str(tmp_path / "r"), "--epoch", "1",
                 "--checkpoint", str(ck)])
    assert code == 1 and "not ordered" in capsys.readouterr().err


def test_main_oracle(tmp_path):
    assert main(["oracle", "--set", "oracle_problems=3", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "oracle" / "report.csv").read_text().splitlines()) == 2 + 4
    # far too few iterations to reach the optimum
    assert main(["oracle", "--set", "oracle_problems=3", "--set", "oracle_iterations=3", "--out", str(tmp_path)]) == 1


def test_missing_checkpoint(tmp_path, tiny_cfg):
    with pytest.raises(RunError, match="missing checkpoint"):
        cmd_sweep(tiny_cfg, tmp_path)


def test_spearman_censoring():
    rows = [{"epoch": e, "time_to_first_feasible": t} for e, t in ((1, 5), (2, 10), (3, None))]
    assert spearman_epoch_ttf(rows, 100) == pytest.approx(1.0)
    assert np.isnan(spearman_epoch_ttf(rows[:1], 100))
