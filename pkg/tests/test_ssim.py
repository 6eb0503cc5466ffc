import numpy as np
import pytest
from hypothesis import given, strategies as st

from fractoseg.errors import EmptyImage, EmptySelection, MissingScore
from fractoseg.ssim import (
    SsimConfig,
    SsimMatrix,
    dataset_stats,
    per_image_ssim,
    save_heatmap,
    ssim,
    ssim_matrix,
    ssim_quality_report,
)

RAW = SsimConfig(working_size=None)


def reference_ssim(x, y, win=11, k1=0.01, k2=0.03, L=255.0, a=1.0, b=1.0, g=1.0):
    """Window-by-window evaluation with explicit per-window moments."""
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    c3 = c2 / 2
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            wx, wy = x[i:i + win, j:j + win], y[i:i + win, j:j + win]
            mx, my = wx.mean(), wy.mean()
            sx, sy = wx.std(), wy.std()
            sxy = ((wx - mx) * (wy - my)).mean()
            lum = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
            con = (2 * sx * sy + c2) / (sx ** 2 + sy ** 2 + c2)
            st_ = (sxy + c3) / (sx * sy + c3)
            vals.append(np.sign(lum) * abs(lum) ** a * np.sign(con) * abs(con) ** b * np.sign(st_) * abs(st_) ** g)
    return float(np.mean(vals))


def test_constant_images_against_scalar_oracle():
    x, y = np.full((16, 16), 50.0), np.full((16, 16), 200.0)
    c1 = (0.01 * 255) ** 2
    expected = (2 * 50 * 200 + c1) / (50 ** 2 + 200 ** 2 + c1)  # contrast and structure are 1
    assert ssim(x, y, RAW) == pytest.approx(expected, abs=1e-12)
    assert reference_ssim(x, y) == pytest.approx(expected, abs=1e-12)


def test_self_similarity_and_symmetry(rng):
    x = rng.integers(0, 256, (40, 48, 3)).astype(np.uint8)
    y = rng.integers(0, 256, (40, 48, 3)).astype(np.uint8)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-6)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


@given(st.integers(0, 2**31), st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(0.5, 2.0))
def test_matches_windowed_reference(seed, a, b, g):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 255, (24, 26))
    x = base
    y = np.clip(base * rng.uniform(0.3, 1.2) + rng.normal(0, 30, base.shape), 0, 255)
    cfg = SsimConfig(alpha=a, beta=b, gamma=g, working_size=None)
    assert ssim(x, y, cfg) == pytest.approx(reference_ssim(x, y, a=a, b=b, g=g), abs=1e-9)


def test_ssim_bounds_and_errors(rng):
    x = rng.integers(0, 256, (32, 32)).astype(np.uint8)
    assert -1 <= ssim(x, 255 - x, RAW) <= 1
    with pytest.raises(EmptyImage):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), RAW)
    with pytest.raises(ValueError):
        SsimConfig(window=4)


def test_matrix_identical_images_and_loop(rng):
    img = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
    m = ssim_matrix([img, img.copy()])
    assert np.allclose(m.values, 1.0, atol=1e-9)
    imgs = [rng.integers(0, 256, (60 + 4 * k, 70, 3)).astype(np.uint8) for k in range(3)]
    m = ssim_matrix(imgs, workers=2)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert m.values[i, j] == ssim(imgs[i], imgs[j])


def test_matrix_counts_unique_pairs(monkeypatch, rng):
    import fractoseg.ssim as mod

    calls = []
    real = mod._ssim_prepared
    monkeypatch.setattr(mod, "_ssim_prepared", lambda a, b, c: calls.append(1) or real(a, b, c))
    imgs = [rng.integers(0, 256, (32, 32, 3)).astype(np.uint8) for _ in range(5)]
    ssim_matrix(imgs, SsimConfig(working_size=(32, 32)))
    assert len(calls) == 10


def test_dataset_stats_arithmetic():
    v = np.array([[1, 0.2, 0.4], [0.2, 1, 0.6], [0.4, 0.6, 1]])
    s = dataset_stats(SsimMatrix(["a", "b", "c"], v), "all_pairs")
    assert s.mu == pytest.approx(0.4, abs=1e-15) and s.n == 3
    assert s.sigma == pytest.approx(np.std([0.2, 0.4, 0.6]), abs=1e-15)
    first = dataset_stats(SsimMatrix(["a", "b", "c"], v), "vs_first")
    assert first.mu == pytest.approx(0.3)
    half = np.full((4, 4), 0.5)
    np.fill_diagonal(half, 1)
    s = dataset_stats(SsimMatrix(list("abcd"), half))
    assert (s.mu, s.sigma) == (0.5, 0.0)
    with pytest.raises(EmptySelection):
        dataset_stats(SsimMatrix(["a", "b", "c"], v), subset=["a"])


def test_matrix_csv_round_trip(tmp_path):
    v = np.array([[1, 0.25], [0.25, 1]])
    m = SsimMatrix(["x", "y"], v)
    m.to_csv(tmp_path / "m.csv")
    back = SsimMatrix.from_csv(tmp_path / "m.csv")
    assert back.ids == ["x", "y"] and np.array_equal(back.values, v)
    save_heatmap(m, tmp_path / "h.png")
    assert (tmp_path / "h.png").exists()


def test_quality_report():
    v = np.array([[1, 0.2, 0.8, 0.5], [0.2, 1, 0.3, 0.1], [0.8, 0.3, 1, 0.6], [0.5, 0.1, 0.6, 1]])
    m = SsimMatrix(list("abcd"), v)
    with pytest.raises(MissingScore):
        ssim_quality_report(m, {})
    with pytest.raises(MissingScore):
        ssim_quality_report(m, {"a": 0.9})
    rep = ssim_quality_report(m, dict.fromkeys("abcd", 0.8))
    assert rep["miou_box"]["iqr"] == 0.0 and rep["miou_box"]["q1"] == rep["miou_box"]["q3"]
    assert rep["miou_spread_smaller"]
    assert per_image_ssim(m)["b"] == pytest.approx(0.2)
