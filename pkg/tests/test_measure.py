import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fractoseg.data import BRITTLE, EROSION_NOTCH, FATIGUE_PRECRACK, SIDE_GROOVE
from fractoseg.errors import EmptyInput, FrontNotFound, NoCrackPixels
from fractoseg.measure import (
    SpecimenGeometry,
    area_average_a0,
    five_point_a0,
    front_depths,
    measurement_stats,
    net_thickness_px,
    plot_measurements,
)
from fractoseg.synth import SynthSpec, layout


def _bands(notch=50, pre=30, width=100, groove=6, pad=10):
    h = pad + notch + pre + 40
    w = width + 2 * groove + 2 * pad
    m = np.zeros((h, w), np.uint8)
    m[pad:, pad:pad + groove] = SIDE_GROOVE
    m[pad:, pad + groove + width:pad + 2 * groove + width] = SIDE_GROOVE
    c0 = pad + groove
    m[pad:, c0:c0 + width] = BRITTLE
    m[pad:pad + notch, c0:c0 + width] = EROSION_NOTCH
    m[pad + notch:pad + notch + pre, c0:c0 + width] = FATIGUE_PRECRACK
    return m


def test_constructed_rectangles_exact():
    m = _bands()
    assert net_thickness_px(m) == 100
    res = area_average_a0(m, scale=0.05)
    assert res.a0_px == 80.0 and res.a0 == 80 * 0.05 and res.unit == "mm"
    assert res.crack_pixel_counts == {"erosion_notch": 5000, "fatigue_precrack": 3000}
    assert area_average_a0(m).unit == "px"


def test_notch_only_and_empty():
    m = _bands()
    m[m == FATIGUE_PRECRACK] = BRITTLE
    assert area_average_a0(m).a0_px == 50.0
    with pytest.raises(NoCrackPixels):
        area_average_a0(np.zeros((20, 20), np.uint8))


def test_geometry_net_thickness_overrides_mask():
    m = _bands()
    res = area_average_a0(m, SpecimenGeometry(B=8.0, B_N=5.0), scale=0.05)
    assert res.B_N_px == 100.0 and res.a0 == pytest.approx(4.0, abs=1e-12)
    with pytest.raises(ValueError):
        SpecimenGeometry(B=4.0, B_N=5.0)


@pytest.mark.parametrize("orientation", ["flip", "transpose"])
def test_orientation_invariance(orientation):
    m = _bands()
    ref = area_average_a0(m).a0_px
    if orientation == "flip":
        assert area_average_a0(m[::-1]).a0_px == ref
        assert five_point_a0(m[::-1]) == five_point_a0(m)
    else:
        assert area_average_a0(m.T, SpecimenGeometry(orientation="cols")).a0_px == ref


def test_flat_front_5pa():
    m = _bands(notch=40, pre=25)
    assert front_depths(m) == [65] * 5
    assert five_point_a0(m, scale=0.1) == pytest.approx(6.5)
    with pytest.raises(FrontNotFound):
        five_point_a0(np.where(m == FATIGUE_PRECRACK, BRITTLE, m).astype(np.uint8))


def test_sine_front_5pa_closed_form():
    spec = SynthSpec(size=(200, 200), notch=40, precrack=30, curvature=8.0, front_shape="sine", ductile=10,
                     side_groove=10, box=(10, 20, 180, 160))
    m, _ = layout(spec)
    net = 160 - 20
    stations = [math.floor(f * net) for f in (1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6)]
    depths = [40 + math.floor(30 + 8 * math.sin(2 * math.pi * (c + 0.5) / net) + 0.5) for c in stations]
    assert front_depths(m) == depths
    assert five_point_a0(m) == pytest.approx(np.mean(depths))


def test_aa_and_5pa_agree_on_thumbnail_fronts():
    for curv in (2.0, 5.0, 9.0):
        spec = SynthSpec(size=(220, 220), notch=45, precrack=30, curvature=curv, front_shape="thumbnail",
                         side_groove=12, box=(10, 20, 200, 180))
        m, _ = layout(spec)
        aa = area_average_a0(m).a0_px
        assert abs(five_point_a0(m) - aa) / aa < 0.02


@given(st.integers(10, 40), st.integers(3, 30), st.floats(0, 12), st.sampled_from(["flat", "thumbnail", "chevron", "sine"]),
       st.integers(0, 12))
def test_aa_recovers_true_a0(notch, pre, curv, shape, groove):
    if shape == "flat":
        curv = 0.0
    if shape == "sine":
        curv = min(curv, pre - 0.5)
    spec = SynthSpec(size=(160, 160), notch=notch, precrack=pre, curvature=curv, front_shape=shape,
                     side_groove=0 if shape == "chevron" else groove, ductile=5, box=(5, 10, 150, 140))
    m, true_px = layout(spec)
    res = area_average_a0(m)
    if curv == 0:
        assert res.a0_px == true_px
    else:
        assert abs(res.a0_px - true_px) <= 0.5


def test_stats_examples():
    s = measurement_stats([(20.0, 19.8)])
    assert s.delta_mean == pytest.approx(-0.2) and s.delta_mean_rel == pytest.approx(-1.0)
    s = measurement_stats([(5.0, 5.0), (6.0, 6.0)])
    assert (s.delta_mean, s.sigma, s.mean_abs_rel, s.outliers) == (0.0, 0.0, 0.0, [])
    with pytest.raises(EmptyInput):
        measurement_stats([(1.0, 1.0)], ids=["a"], exclude=["a"])


def test_stats_recompute_from_raw():
    rng = np.random.default_rng(0)
    ref = rng.uniform(10, 25, 30)
    meas = ref * (1 + rng.normal(0, 0.01, 30))
    other = ref * (1 + rng.normal(0, 0.01, 30))
    ids = [f"s{i}" for i in range(30)]
    s = measurement_stats(list(zip(ref, meas)), ids, other=other)
    d = [m - r for r, m in zip(ref, meas)]
    mu = sum(d) / len(d)
    sigma = math.sqrt(sum((x - mu) ** 2 for x in d) / (len(d) - 1))
    assert abs(s.delta_mean - mu) < 1e-9 and abs(s.sigma - sigma) < 1e-9
    assert abs(s.mu_d - sum(m - o for m, o in zip(meas, other)) / 30) < 1e-9
    assert set(s.outliers) == {i for i, r, m in zip(ids, ref, meas) if abs((m - r) / r) > 0.01}
    dropped = measurement_stats(list(zip(ref, meas)), ids, exclude=["s25"])
    assert dropped.n == 29 and "s25" not in dropped.ids
    keep = [k for k in range(30) if k != 25]
    assert abs(dropped.delta_mean - np.mean([d[k] for k in keep])) < 1e-12


def test_plot(tmp_path):
    rows = [{"reference": 10.0, "a0_aa": 10.05}, {"reference": 12.0, "a0_aa": 11.9}]
    plot_measurements(rows, tmp_path / "p.png")
    assert (tmp_path / "p.png").exists()
