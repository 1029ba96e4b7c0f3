import math

import numpy as np
import pytest

from confusion.analysis import (
    DIVERGING,
    DensityGrid,
    emit_heatmap,
    emit_trajectory_image,
    histogram_positions,
    localization_stats,
    log_density_ratio,
    read_json,
    read_ppm,
    read_summary,
    reaches_goal,
    summary_row,
    trajectory_snapshots,
    visitation_density,
    wall_band_mask,
    write_json,
    write_summary,
)
from confusion.maze import original_maze
from confusion.policies import build_policy_pair
from confusion.world_model import WorldModelParams

MAZE = original_maze()


@pytest.fixture(scope="module")
def tiny():
    return WorldModelParams.init(2, np.random.default_rng(0), hidden=8)


def test_histogram_examples():
    g = histogram_positions([[2.5, 2.5]] * 3 + [[0.05, 4.99]], bins=5)
    assert g.bins[2, 2] == pytest.approx(0.75) and g.bins[0, 4] == pytest.approx(0.25)
    assert g.bins.sum() == pytest.approx(1.0) and g.total == 4
    # the top edge and out-of-range points land in edge bins
    edge = histogram_positions([[5.0, 5.0], [-1.0, 7.0]], bins=5)
    assert edge.bins[4, 4] == 0.5 and edge.bins[0, 4] == 0.5


def test_log_ratio():
    a = DensityGrid(np.array([[0.5, 0.5], [0.0, 0.0]]), 2)
    b = DensityGrid(np.array([[0.5, 0.0], [0.5, 0.0]]), 2)
    r = log_density_ratio(a, b, floor=1e-6)
    assert r[0, 0] == 0.0 and r[1, 1] == 0.0
    assert r[1, 0] == pytest.approx(math.log(0.5 / 1e-6), rel=1e-5) and r[0, 1] < 0
    with pytest.raises(ValueError):
        log_density_ratio(a, DensityGrid(np.zeros((3, 3)), 1))


def test_identical_models_give_zero_ratio(tiny):
    ref = visitation_density(tiny, episodes=20, steps=10, rng=np.random.default_rng(4), bins=10)
    same = visitation_density(tiny, tiny.subset("dyn"), episodes=20, steps=10, rng=np.random.default_rng(4), bins=10)
    assert np.array_equal(ref.bins, same.bins) and ref.total == 200
    assert not log_density_ratio(ref, same).any()


def test_wall_band_mask():
    m = wall_band_mask(MAZE, 5)
    assert m.sum() == 2 and m[1, 2] and m[2, 2]
    fine = wall_band_mask(MAZE, 50)
    assert fine.sum() == 200 and fine[15, 25] and not fine[0, 0]


def test_localization_stats():
    r = np.zeros((5, 5))
    r[1, 2] = 0.7
    r[0, 0] = 3.0
    st = localization_stats(r, MAZE)
    assert st["frac_small"] == pytest.approx(23 / 25) and st["band_max"] == 0.7 and st["max"] == 3.0


def test_trajectory_snapshots(tiny):
    star, sub = build_policy_pair()
    psi = tiny.subset("dyn")
    b = trajectory_snapshots(tiny, [(100, psi), (200, None)], star, sub, 4, np.random.default_rng(0), n=3)
    assert [x["iteration"] for x in b] == [0, 100]
    assert b[0]["pi_star"].shape == (3, 5, 2) and b[0]["pi_sub"].shape == (3, 5, 2)


def test_reaches_goal():
    traj = np.array([[[1.5, 1.5], [1.5, 3.4]], [[1.5, 1.5], [3.5, 3.5]]])
    assert reaches_goal(traj, MAZE).tolist() == [True, False]


def test_heatmap_colors(tmp_path):
    g = np.zeros((4, 4))
    g[0, 3] = 2.0  # x = 0, high y: top-left pixel
    g[3, 0] = -2.0  # bottom-right
    emit_heatmap(g, tmp_path / "h.ppm", comment="config abc")
    rgb, comments = read_ppm(tmp_path / "h.ppm")
    assert comments == ["config abc"] and rgb.shape == (4, 4, 3)
    assert tuple(rgb[0, 0]) == tuple(DIVERGING[255]) == (33, 102, 172)
    assert tuple(rgb[3, 3]) == tuple(DIVERGING[0]) == (178, 24, 43)
    assert tuple(rgb[1, 1]) == (255, 255, 255)
    emit_heatmap(np.abs(g), tmp_path / "s.ppm", kind="sequential")
    with pytest.raises(ValueError):
        emit_heatmap(np.full((2, 2), np.nan), tmp_path / "n.ppm")
    with pytest.raises(ValueError):
        emit_heatmap(g, tmp_path / "x.ppm", kind="rainbow")


def test_heatmap_is_deterministic(tmp_path):
    g = np.random.default_rng(0).normal(size=(50, 50))
    emit_heatmap(g, tmp_path / "a.ppm")
    emit_heatmap(g, tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_trajectory_image(tmp_path):
    bundle = {"iteration": 0, "pi_star": np.array([[[1.5, 1.5], [3.5, 1.5]]]),
              "pi_sub": np.array([[[1.5, 1.5], [1.5, 3.5]]])}
    emit_trajectory_image(bundle, tmp_path / "t.ppm", MAZE, scale=10)
    rgb, _ = read_ppm(tmp_path / "t.ppm")
    assert rgb.shape == (50, 50, 3)
    assert tuple(rgb[0, 0]) == (170, 170, 170)  # border wall
    assert tuple(rgb[49 - 15, 25]) == (30, 60, 200)  # along the bottom corridor
    assert tuple(rgb[49 - 25, 15]) == (200, 30, 30)  # through the blocked cell


def test_summary_roundtrip(tmp_path):
    rows = [{"epoch": 80, "seed": 0, "k_best": 1.5, "time_to_first_feasible": 12, "best_iteration": 40,
             "final_lambda": 0.2},
            {"epoch": 40, "seed": 0, "k_best": math.inf, "time_to_first_feasible": None, "best_iteration": None,
             "final_lambda": 3.0}]
    write_summary(rows, tmp_path / "s.csv", "config abc")
    text = (tmp_path / "s.csv").read_text().splitlines()
    assert text[0] == "# config abc" and text[2].startswith("40,0,inf,,,")
    back = read_summary(tmp_path / "s.csv")
    assert [r["epoch"] for r in back] == [40, 80] and back[0]["time_to_first_feasible"] is None
    assert summary_row(1, 0, [], math.inf, None)["time_to_first_feasible"] is None


def test_json_nonfinite(tmp_path):
    write_json(tmp_path / "a.json", {"b": math.inf, "a": np.float64(1.5), "c": [np.int64(2)]})
    assert (tmp_path / "a.json").read_text().index('"a"') < (tmp_path / "a.json").read_text().index('"b"')
    assert read_json(tmp_path / "a.json") == {"a": 1.5, "b": None, "c": [2]}
