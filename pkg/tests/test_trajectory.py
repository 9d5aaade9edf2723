import numpy as np
import pytest

from tcclab.cache import CachePolicy, SimilarityDistortion
from tcclab.denoiser import DenoiserConfig, ModuleKind, SiteId, build_denoiser
from tcclab.schedule import build_schedule
from tcclab.trajectory import (CalibrationWindow, HistoryMode, PackMismatchError, SiteFilter, TrajectoryHistory,
                               advance_full, calibrated_advance, calibration_sites, estimate_priors,
                               estimate_priors_oneshot, make_samples, probe_advance, run_calibrated_inference,
                               run_full)

CFG = DenoiserConfig(d_model=8, n_layers=2, n_tokens=4, n_heads=2, d_mlp=16, n_conditions=2)
DEN = build_denoiser(CFG)
SCHED = build_schedule(n_steps=8)
FORA = CachePolicy.module_interval(2)
WINDOW = CalibrationWindow(7, 3)
SAMPLES = make_samples([0, 1], 3, 100)


def same(xs, ys):
    return len(xs) == len(ys) and all(x.tobytes() == y.tobytes() for x, y in zip(xs, ys))


def test_make_samples():
    s = make_samples([1, 0], 2, 5)
    assert [(x.seed, x.condition_id) for x in s] == [(5, 1), (6, 1), (7, 0), (8, 0)]


def test_window():
    w = CalibrationWindow(19, 12)
    assert w.contains(19) and w.contains(12) and not w.contains(11)
    assert str(w) == "19-12" and str(CalibrationWindow.empty()) == "none"
    assert not CalibrationWindow.empty().contains(0)
    with pytest.raises(ValueError):
        CalibrationWindow(20, 12).validate(20)
    with pytest.raises(ValueError):
        CalibrationWindow(3, 5).validate(20)


def test_calibration_sites_respect_filter():
    sites = calibration_sites(FORA, DEN, SCHED, WINDOW, SiteFilter(layers=(1,), modules=(ModuleKind.MLP,)))
    assert sites == [SiteId(k, 1, ModuleKind.MLP) for k in (6, 4)]


def test_probe_does_not_mutate():
    est = estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW)
    hist = TrajectoryHistory.start(SAMPLES, DEN, SCHED, HistoryMode.CORRECTED)
    for k in SCHED.step_indices():
        before = hist.serialize()
        probe_advance(hist, FORA, est.pack, DEN, SCHED, DEN.sites(k))
        assert hist.serialize() == before
        calibrated_advance(hist, FORA, est.pack, DEN, SCHED)


def test_probe_tap_at_reused_site_is_cache_value():
    hist = TrajectoryHistory.start(SAMPLES, DEN, SCHED, HistoryMode.CORRECTED)
    fresh = calibrated_advance(hist, FORA, None, DEN, SCHED, DEN.sites(7))
    probe = probe_advance(hist, FORA, None, DEN, SCHED, DEN.sites(6))
    for site in DEN.sites(6):
        src = SiteId(7, site.layer, site.module)
        assert same(probe[site], fresh[src])


def test_probe_differs_from_full_at_cached_step():
    full = TrajectoryHistory.start(SAMPLES, DEN, SCHED, HistoryMode.FULL)
    corr = TrajectoryHistory.start(SAMPLES, DEN, SCHED, HistoryMode.CORRECTED)
    advance_full(full, DEN, SCHED)
    calibrated_advance(corr, FORA, None, DEN, SCHED)
    sites = DEN.sites(6)
    a = advance_full(full, DEN, SCHED, sites)
    b = probe_advance(corr, FORA, None, DEN, SCHED, sites)
    for site in sites[1:]:  # the first site sees identical input, later ones do not
        assert sum(np.linalg.norm(x - y) for x, y in zip(a[site], b[site])) > 0


def test_replay_reproduces_corrected_endpoints():
    est = estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW)
    replay = run_calibrated_inference(SAMPLES, DEN, SCHED, FORA, est.pack)
    assert same(replay.final, est.corrected_final)


def test_alpha_zero_pack_is_plain_cache():
    est = estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW, alpha=0.0)
    plain = run_calibrated_inference(SAMPLES, DEN, SCHED, FORA)
    assert same(run_calibrated_inference(SAMPLES, DEN, SCHED, FORA, est.pack).final, plain.final)
    assert same(est.corrected_final, plain.final)


def test_empty_window_gives_empty_pack():
    est = estimate_priors(SAMPLES, DEN, SCHED, FORA, CalibrationWindow.empty())
    assert est.pack.operators == {}
    assert same(est.corrected_final, run_calibrated_inference(SAMPLES, DEN, SCHED, FORA).final)


def test_none_policy_matches_full():
    none = CachePolicy.none()
    est = estimate_priors(SAMPLES, DEN, SCHED, none, WINDOW)
    assert est.pack.operators == {}
    full = run_full(SAMPLES, DEN, SCHED).final
    assert same(run_calibrated_inference(SAMPLES, DEN, SCHED, none, est.pack).final, full)
    assert same(run_calibrated_inference(SAMPLES, DEN, SCHED, none).final, full)
    one = estimate_priors_oneshot(SAMPLES, DEN, SCHED, none, WINDOW)
    assert one.pack == est.pack


def test_oneshot_first_step_matches_and_later_differ():
    tcc = estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW).pack
    one = estimate_priors_oneshot(SAMPLES, DEN, SCHED, FORA, WINDOW).pack
    assert list(tcc.operators) == list(one.operators)
    first = max(s.step_index for s in tcc.operators)
    for site in tcc.at_step(first):
        assert tcc.operators[site] == one.operators[site]
    later = [s for s in tcc.operators if s.step_index < first]
    assert max(np.linalg.norm(tcc.operators[s].rotation - one.operators[s].rotation) for s in later) > 0


def test_known_distortion_is_undone_at_one_site():
    # 2 conditions x 8 tokens gives 16 pooled rows, enough to pin an 8-dim rotation
    cfg = DenoiserConfig(d_model=8, n_layers=2, n_tokens=8, n_heads=2, d_mlp=16, n_conditions=2)
    den = build_denoiser(cfg)
    site = SiteId(6, 0, ModuleKind.ATTENTION)
    dist = SimilarityDistortion(1.5, 0.3, 0.1, 0.0, sites=((0, ModuleKind.ATTENTION),))
    policy = CachePolicy.with_distortion(2, dist)
    est = estimate_priors(SAMPLES, den, SCHED, policy, CalibrationWindow(6, 6), [site])
    full = run_full(SAMPLES, den, SCHED, [site])
    calib = run_calibrated_inference(SAMPLES, den, SCHED, policy, est.pack, [site])
    for x, y in zip(calib.site_values[site], full.site_values[site]):
        assert np.max(np.abs(x - y)) < 1e-6


def test_missing_operator_rejected():
    est = estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW)
    pack = est.pack
    for site in list(pack.at_step(4)):
        del pack.operators[site]
    with pytest.raises(ValueError, match="missing operator"):
        run_calibrated_inference(SAMPLES, DEN, SCHED, FORA, pack)


def test_pack_fingerprint_checked():
    est = estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW)
    with pytest.raises(PackMismatchError):
        run_calibrated_inference(SAMPLES, DEN, SCHED, CachePolicy.module_interval(3), est.pack)


def test_sites_outside_window_rejected():
    with pytest.raises(ValueError, match="outside window"):
        estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW, [SiteId(2, 0, ModuleKind.MLP)])
    with pytest.raises(ValueError, match="not cache-affected"):
        estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW, [SiteId(7, 0, ModuleKind.MLP)])


def test_threads_do_not_change_results(monkeypatch):
    base = estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW)
    monkeypatch.setenv("TCC_LAB_THREADS", "3")
    threaded = estimate_priors(SAMPLES, DEN, SCHED, FORA, WINDOW)
    assert threaded.pack == base.pack
    assert same(threaded.corrected_final, base.corrected_final)


def test_batch_composition_independence():
    together = run_calibrated_inference(SAMPLES, DEN, SCHED, FORA).final
    alone = [run_calibrated_inference([s], DEN, SCHED, FORA).final[0] for s in SAMPLES]
    assert same(together, alone)


def test_history_mode_checks():
    full = TrajectoryHistory.start(SAMPLES, DEN, SCHED, HistoryMode.FULL)
    with pytest.raises(ValueError):
        calibrated_advance(full, FORA, None, DEN, SCHED)
    with pytest.raises(ValueError):
        probe_advance(full, FORA, None, DEN, SCHED, [])
    for _ in range(SCHED.n_steps):
        advance_full(full, DEN, SCHED)
    with pytest.raises(RuntimeError, match="exhausted"):
        advance_full(full, DEN, SCHED)
