
import numpy as np
import pytest

from hivmob import prevalence as pv
from hivmob import synthgen as sg
from hivmob.model import DEFAULT_WINDOW, SurveyCluster

from conftest import line_hierarchy
from oracles import brute_surface


def random_clusters(rng, n, extent=60.0):
    out = []
    for _ in range(n):
        t = int(rng.integers(5, 80))
        out.append(SurveyCluster(float(rng.uniform(0, extent)), float(rng.uniform(0, extent)), t,
                                 int(rng.integers(0, t + 1))))
    return out


def test_self_sufficient_cluster_gets_floor():
    cfg = pv.KernelConfig(n_min=100, grid_step=5.0)
    bw = pv.adaptive_bandwidth([SurveyCluster(0, 0, 150, 3)], cfg)
    assert bw.h.tolist() == [5.0] and not bw.degenerate


def test_two_clusters_reach_each_other():
    cfg = pv.KernelConfig(n_min=500)
    cl = [SurveyCluster(0, 0, 250, 1), SurveyCluster(10, 0, 250, 2)]
    assert pv.adaptive_bandwidth(cl, cfg).h.tolist() == [10.0, 10.0]


def test_colocated_clusters_get_floor():
    cl = [SurveyCluster(3, 3, 300, 1)] * 3
    assert pv.adaptive_bandwidth(cl, pv.KernelConfig()).h.tolist() == [5.0] * 3


def test_degenerate_fallback():
    cl = [SurveyCluster(0, 0, 10, 1), SurveyCluster(30, 40, 10, 1)]
    bw = pv.adaptive_bandwidth(cl, pv.KernelConfig(n_min=500))
    assert bw.degenerate and bw.h.tolist() == [50.0, 50.0]
    with pytest.raises(ValueError):
        pv.adaptive_bandwidth([], pv.KernelConfig())


def test_single_cluster_surface_is_flat():
    c = SurveyCluster(20, 20, 40, 7)
    cfg = pv.KernelConfig(n_min=10)
    f = pv.estimate_surface([c], pv.adaptive_bandwidth([c], cfg), cfg, (0, 0, 40, 40))
    assert f.defined.any()
    assert np.allclose(f.prevalence[f.defined], 7 / 40, rtol=1e-14, atol=0)


def test_equidistant_point_averages():
    cl = [SurveyCluster(0, 0, 100, 0), SurveyCluster(10, 0, 100, 10)]
    cfg = pv.KernelConfig(n_min=10, grid_step=10.0)
    bw = pv.Bandwidths(np.array([8.0, 8.0]), False)
    f = pv.estimate_surface(cl, bw, cfg, (0, -5, 10, 5))  # one cell centred at (5, 0)
    assert f.prevalence.shape == (1, 1)
    assert f.prevalence[0, 0] == pytest.approx(0.05, rel=1e-14)


def test_far_points_are_undefined():
    c = SurveyCluster(0, 0, 40, 4)
    cfg = pv.KernelConfig(n_min=10)
    f = pv.estimate_surface([c], pv.adaptive_bandwidth([c], cfg), cfg, (0, 0, 200, 5))
    assert f.defined[0, 0] and not f.defined[0, -1]
    assert np.isnan(f.prevalence[0, -1])
    assert "nan\t0" in f.to_tsv()


def test_brute_force_oracle(rng):
    for trial in range(5):
        cl = random_clusters(rng, int(rng.integers(1, 21)))
        cfg = pv.KernelConfig(n_min=int(rng.integers(20, 300)), grid_step=2.0)
        bw = pv.adaptive_bandwidth(cl, cfg)
        f = pv.estimate_surface(cl, bw, cfg, (0, 0, 60, 60))
        assert f.prevalence.shape == (30, 30)
        ws, wt, wp = brute_surface(cl, bw.h, f.xs, f.ys, cfg.truncate)
        for got, want in ((f.kernel_sum, ws), (f.weighted_tested, wt), (f.weighted_positive, wp)):
            assert np.allclose(got, want, rtol=1e-12, atol=0)


def test_ratio_bounds(rng):
    cl = random_clusters(rng, 15)
    cfg = pv.KernelConfig(n_min=150, grid_step=3.0)
    f = pv.estimate_surface(cl, pv.adaptive_bandwidth(cl, cfg), cfg, (0, 0, 60, 60))
    p = np.array([c.prevalence for c in cl])
    vals = f.prevalence[f.defined]
    assert (vals >= p.min() - 1e-15).all() and (vals <= p.max() + 1e-15).all()


def test_translation_invariance(rng):
    cl = random_clusters(rng, 12)
    shift = (137.0, -58.0)
    moved = [SurveyCluster(c.x + shift[0], c.y + shift[1], c.n_tested, c.n_positive) for c in cl]
    cfg = pv.KernelConfig(n_min=120, grid_step=4.0)
    a = pv.estimate_surface(cl, pv.adaptive_bandwidth(cl, cfg), cfg, (0, 0, 60, 60))
    b = pv.estimate_surface(moved, pv.adaptive_bandwidth(moved, cfg), cfg,
                            (shift[0], shift[1], 60 + shift[0], 60 + shift[1]))
    assert np.array_equal(a.defined, b.defined)
    assert np.allclose(a.prevalence[a.defined], b.prevalence[b.defined], rtol=1e-9, atol=0)


def test_bandwidth_monotone_in_n_min(rng):
    cl = random_clusters(rng, 20)
    prev = None
    for n_min in (1, 10, 50, 100, 400, 800, 5000):
        h = pv.adaptive_bandwidth(cl, pv.KernelConfig(n_min=n_min)).h
        if prev is not None:
            assert (h >= prev).all()
        prev = h


def test_quality_grades(tiny):
    cl = [SurveyCluster(5, 5, 250, 3), SurveyCluster(15, 5, 60, 1)]
    assert pv.quality_indicator(cl, tiny) == {1: "good", 2: "moderate", 3: "uncertain"}
    assert pv.quality_indicator(cl, tiny, good=300, moderate=10) == {1: "moderate", 2: "moderate",
                                                                     3: "uncertain"}


def test_uniform_surface_gives_uniform_departments():
    h = line_hierarchy(3)
    cl = [SurveyCluster(x, 5.0, 100, 4) for x in (2.0, 8.0, 15.0, 25.0)]
    cfg = pv.KernelConfig(n_min=50, grid_step=2.0)
    f = pv.estimate_surface(cl, pv.adaptive_bandwidth(cl, cfg), cfg, h.bbox())
    est = pv.department_prevalence(f, h)
    assert [e.prevalence for e in est] == pytest.approx([0.04] * 3, rel=1e-12)


def test_department_without_defined_cells():
    h = line_hierarchy(3, spacing=40.0)
    cl = [SurveyCluster(20, 20, 600, 30)]
    cfg = pv.KernelConfig(n_min=500, grid_step=5.0)
    f = pv.estimate_surface(cl, pv.adaptive_bandwidth(cl, cfg), cfg, h.bbox())
    est = {e.department: e for e in pv.department_prevalence(f, h)}
    assert est[3].quality == "uncertain" and est[3].prevalence == pytest.approx(0.05)


def test_dense_survey_recovers_planted(world, plan):
    truth = sg.plant_prevalence_range(world, plan, DEFAULT_WINDOW, "act.weekend.h01", 0.01, 0.06)
    cl = sg.generate_survey(world, truth, 80, 500)
    cfg = pv.KernelConfig()
    f = pv.estimate_surface(cl, pv.adaptive_bandwidth(cl, cfg), cfg, world.hierarchy.bbox())
    est = np.array([e.prevalence for e in pv.department_prevalence(f, world.hierarchy)])
    assert np.abs(est - truth.prevalence).max() <= 0.005


def test_region_aggregate(tiny):
    from hivmob.model import HivEstimate
    est = [HivEstimate(1, 0.02, "good"), HivEstimate(2, 0.04, "good"), HivEstimate(3, 0.06, "good")]
    pops = {1: 1.0, 2: 3.0, 3: 1.0}
    r = pv.region_prevalence(est, tiny, pops)
    assert r == {1: pytest.approx(0.04), 2: pytest.approx(0.04)}


def test_estimates_tsv_round_trip(tiny):
    from hivmob.model import HivEstimate
    est = [HivEstimate(1, 0.0123, "good"), HivEstimate(2, 1 / 3, "uncertain")]
    assert pv.estimates_from_tsv(pv.estimates_to_tsv(est)) == est
    doc = pv.choropleth(est, tiny)
    ring = doc["features"][0]["geometry"]["coordinates"][0]
    assert ring[0] == ring[-1]
