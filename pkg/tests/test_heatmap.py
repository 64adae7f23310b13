import os

import numpy as np
import pytest

from flowgrain.data import ImageRecord, read_ppm
from flowgrain.errors import WindowTooLargeError
from flowgrain.flows import FlowConfig, FlowModel
from flowgrain.heatmap import (
    HeatmapGrid,
    bin_images,
    compute_scale,
    export_report,
    grid_shape,
    image_stats,
    render_overlay,
    scale_values,
    sweep_loglik,
    upsample_nearest,
)
from flowgrain.projection import fit_basis
from flowgrain.training import TrainConfig, TrainedFlow, TrainHistory


def tiny_scorer(crop=6, k=8, seed=0):
    """Identity-free random scorer over crop vectors of length crop^2*3."""
    rng = np.random.default_rng(seed)
    d = crop * crop * 3
    basis = fit_basis(rng.normal(size=(4 * k, d)), k)
    cfg = FlowConfig(kind="maf", input_dim=k, n_flows=2, hidden_width=8,
                     use_batchnorm=True)
    model = FlowModel(cfg, rng)
    for p in model.parameters().values():
        p.data[...] = rng.normal(scale=0.2, size=p.data.shape)
    tc = TrainConfig(crop_size=crop, svd_components=k)
    return TrainedFlow(model=model, basis=basis, train_config=tc,
                       history=TrainHistory())


def random_image(h, w, seed=1, rec_id="img"):
    rng = np.random.default_rng(seed)
    return ImageRecord(id=rec_id,
                       pixels=rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
                       source="t", split="test")


# ---------------------------------------------------------------------------
# geometry


def test_grid_shape_full_resolution_constants():
    # full-coverage convention at the full-scale geometry
    assert grid_shape(460, 640, 46, 8) == (52, 75)
    assert 52 * 75 == 3900
    # an alternative 70 x 51 lattice would hold 3570 cells for the same
    # geometry; that convention is not derivable from the floor rule
    assert 70 * 51 == 3570
    assert grid_shape(460, 640, 46, 8) != (70, 51)


def test_grid_shape_window_equals_image():
    assert grid_shape(46, 46, 46, 8) == (1, 1)


def test_grid_shape_window_too_large():
    with pytest.raises(WindowTooLargeError):
        grid_shape(40, 100, 46, 8)


def test_sweep_single_cell():
    scorer = tiny_scorer(crop=6)
    image = random_image(6, 6)
    grid = sweep_loglik(scorer, image, stride=8)
    assert grid.values.shape == (1, 1)


def test_sweep_matches_standalone_scoring_bitwise():
    scorer = tiny_scorer(crop=6)
    image = random_image(30, 41, seed=2)
    grid = sweep_loglik(scorer, image, stride=5)
    r, c = 2, 3
    crop = image.pixels[r * 5 : r * 5 + 6, c * 5 : c * 5 + 6, :]
    standalone = scorer.score_crops(crop.astype(float).reshape(1, -1))[0]
    assert grid.values[r, c] == standalone  # bit-identical


def test_sweep_worker_count_independent():
    scorer = tiny_scorer(crop=6)
    image = random_image(25, 37, seed=3)
    g1 = sweep_loglik(scorer, image, stride=4, workers=1)
    g3 = sweep_loglik(scorer, image, stride=4, workers=3)
    assert g1.values.tobytes() == g3.values.tobytes()


def test_sweep_env_var_workers(monkeypatch):
    scorer = tiny_scorer(crop=6)
    image = random_image(20, 20, seed=4)
    monkeypatch.setenv("FLOWGRAIN_THREADS", "2")
    g2 = sweep_loglik(scorer, image, stride=4)
    monkeypatch.setenv("FLOWGRAIN_THREADS", "1")
    g1 = sweep_loglik(scorer, image, stride=4)
    assert g1.values.tobytes() == g2.values.tobytes()


# ---------------------------------------------------------------------------
# statistics


def test_stats_constant_grid():
    grid = HeatmapGrid("x", 6, 8, np.full((3, 4), 7.5))
    st = image_stats(grid)
    assert st.p5 == st.p25 == st.p50 == st.p75 == st.p95 == 7.5
    assert st.bin_key == 7.5
    assert st.cells == 12


def test_stats_linear_interpolation_convention():
    # independent oracle: sort and interpolate by hand
    vals = np.arange(1.0, 101.0)
    rng = np.random.default_rng(5)
    grid = HeatmapGrid("x", 6, 8, rng.permutation(vals).reshape(10, 10))
    st = image_stats(grid)

    def interp(p):
        pos = (len(vals) - 1) * p / 100.0
        lo = int(np.floor(pos))
        return vals[lo] + (pos - lo) * (vals[min(lo + 1, len(vals) - 1)] - vals[lo])

    assert abs(st.p25 - 25.75) < 1e-12 and abs(st.p25 - interp(25)) < 1e-12
    assert abs(st.p50 - 50.5) < 1e-12 and abs(st.p50 - interp(50)) < 1e-12
    assert abs(st.bin_key - 38.125) < 1e-12
    assert st.p5 <= st.p25 <= st.p50 <= st.p75 <= st.p95


def test_stats_cell_count_full_geometry():
    grid = HeatmapGrid("x", 46, 8, np.zeros((52, 75)))
    assert image_stats(grid).cells == 3900


def test_scaling_preserves_order():
    rng = np.random.default_rng(6)
    vals = rng.normal(size=300) * 40 - 100
    scaled = scale_values(vals, np.percentile(vals, 1), np.percentile(vals, 99))
    assert np.array_equal(np.argsort(vals), np.argsort(scaled))


# ---------------------------------------------------------------------------
# binning


def stats_with_keys(keys):
    return [ImageQualityStats_like(f"img{i:02d}", key) for i, key in enumerate(keys)]


def ImageQualityStats_like(image_id, key):
    from flowgrain.heatmap import ImageQualityStats

    return ImageQualityStats(image_id=image_id, p5=key, p25=key, p50=key,
                             p75=key, p95=key, bin_key=key, cells=1)


def test_bin_single_image():
    stats = stats_with_keys([42.0])
    report = bin_images(stats, lo=0.0, hi=100.0, width=10.0)
    assert list(report.members) == [4]  # scaled key 42 -> bin 4
    assert report.representatives[4] == "img00"


def test_bin_three_distinct():
    stats = stats_with_keys([5.0, 15.0, 25.0])
    report = bin_images(stats, lo=0.0, hi=100.0, width=10.0)
    assert sorted(report.members) == [0, 1, 2]
    assert all(len(v) == 1 for v in report.members.values())


def test_bin_representative_tiebreak():
    # two images equidistant from the midpoint: lexicographic id wins
    stats = stats_with_keys([4.0, 6.0])
    report = bin_images(stats, lo=0.0, hi=100.0, width=10.0)
    assert report.representatives[0] == "img00"


def test_bins_partition():
    rng = np.random.default_rng(7)
    stats = stats_with_keys(list(rng.uniform(-50, 150, 40)))
    report = bin_images(stats, lo=0.0, hi=100.0, width=10.0)
    all_ids = sorted(i for ids in report.members.values() for i in ids)
    assert all_ids == sorted(st.image_id for st in stats)
    for idx, ids in report.members.items():
        assert report.representatives[idx] in ids


# ---------------------------------------------------------------------------
# rendering


def test_overlay_constant_grid_uniform(tmp_path):
    image = ImageRecord("img", np.full((24, 24, 3), 180, dtype=np.uint8), "t", "x")
    grid = HeatmapGrid("img", 6, 6, np.full((4, 4), -3.0))
    out, comp = render_overlay(image, grid, tmp_path / "o.ppm", lo=-3.0, hi=-3.0)
    rendered = read_ppm(out)
    # one blended color over the whole frame
    assert len(np.unique(rendered.reshape(-1, 3), axis=0)) == 1
    assert not np.array_equal(rendered, image.pixels)
    assert os.path.exists(comp)
    assert read_ppm(comp).shape == (24, 48, 3)


def test_overlay_minimal_cell_darkest_at_footprint(tmp_path):
    image = ImageRecord("img", np.full((40, 40, 3), 200, dtype=np.uint8), "t", "x")
    vals = np.zeros((5, 5))
    vals[2, 3] = -50.0  # one minimal cell
    grid = HeatmapGrid("img", 8, 8, vals)
    out, _ = render_overlay(image, grid, tmp_path / "o.ppm", lo=-50.0, hi=0.0)
    rendered = read_ppm(out).astype(int)
    redness = rendered[..., 0] - rendered[..., 2]
    darkness = 255 - rendered.sum(axis=2) // 3
    score = redness + darkness
    peak = np.unravel_index(np.argmax(score), score.shape)
    r0, c0 = grid.cell_origin(2, 3)
    assert r0 <= peak[0] < r0 + 8 and c0 <= peak[1] < c0 + 8


def test_overlay_alpha_zero_identity(tmp_path):
    image = random_image(20, 20, seed=9)
    grid = HeatmapGrid("img", 5, 5, np.linspace(-10, 0, 16).reshape(4, 4))
    out, comp = render_overlay(image, grid, tmp_path / "o.ppm", lo=-10.0,
                               hi=0.0, alpha=0.0)
    assert np.array_equal(read_ppm(out), image.pixels)


def test_upsample_nearest_geometry():
    vals = np.arange(6.0).reshape(2, 3)
    grid = HeatmapGrid("img", 4, 4, vals)
    big = upsample_nearest(grid, 8, 12)
    # pixel at a window center must carry that cell's value
    assert big[1, 1] == vals[0, 0]
    assert big[5, 9] == vals[1, 2]


# ---------------------------------------------------------------------------
# report export


def test_export_report_deterministic(tmp_path):
    rng = np.random.default_rng(10)
    stats = stats_with_keys(list(rng.uniform(0, 100, 7)))
    report = bin_images(stats, lo=0.0, hi=100.0)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    export_report(stats, report, p1)
    export_report(stats, report, p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "image_id,P5,P25,P50,P75,P95,bin_key,bin_index,cells"
    assert len(lines) == 1 + len(stats)


def test_export_report_single_image(tmp_path):
    stats = stats_with_keys([50.0])
    report = bin_images(stats, lo=0.0, hi=100.0)
    path = export_report(stats, report, tmp_path / "r.csv")
    lines = open(path).read().splitlines()
    assert len(lines) == 2
    assert lines[1].split(",")[0] == "img00"
    assert len(lines[1].split(",")) == 9
