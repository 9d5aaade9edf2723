import numpy as np
import pytest

from tcclab.cache import (CacheKind, CachePolicy, CacheStore, SimilarityDistortion, cache_hook, cache_side_value,
                          is_cache_affected, n_fresh_tokens, plan_step, select_fresh_tokens)
from tcclab.denoiser import ModuleKind, SiteId
from tcclab.linalg import SeededRng
from tcclab.schedule import build_schedule

SCHED = build_schedule()


def test_interval_two_alternates_from_first_step():
    policy = CachePolicy.module_interval(2)
    fresh = [k for k in SCHED.step_indices() if plan_step(policy, k, SCHED).fresh]
    assert fresh == [19, 17, 15, 13, 11, 9, 7, 5, 3, 1]


def test_interval_three_fresh_count():
    policy = CachePolicy.module_interval(3)
    assert sum(plan_step(policy, k, SCHED).fresh for k in SCHED.step_indices()) == 7


def test_none_policy_never_caches():
    policy = CachePolicy.none()
    assert all(plan_step(policy, k, SCHED).fresh for k in SCHED.step_indices())
    assert not is_cache_affected(policy, SiteId(18, 0, ModuleKind.MLP), SCHED)


@pytest.mark.parametrize("kw", [dict(kind=CacheKind.MODULE_INTERVAL, interval_n=1),
                                dict(kind=CacheKind.TOKEN_LEVEL, interval_n=2, token_reuse_ratio=1.0),
                                dict(kind=CacheKind.DISTORTION, interval_n=2),
                                dict(first_step_fresh=False)])
def test_policy_validation(kw):
    with pytest.raises(ValueError):
        CachePolicy(**kw)


def test_distortion_covers_only_listed_sites():
    dist = SimilarityDistortion(sites=((1, ModuleKind.MLP),))
    policy = CachePolicy.with_distortion(2, dist)
    assert is_cache_affected(policy, SiteId(18, 1, ModuleKind.MLP), SCHED)
    assert not is_cache_affected(policy, SiteId(18, 1, ModuleKind.ATTENTION), SCHED)
    assert not is_cache_affected(policy, SiteId(19, 1, ModuleKind.MLP), SCHED)


def test_n_fresh_tokens_guard():
    assert n_fresh_tokens(10, 0.7) == 3
    assert n_fresh_tokens(16, 0.5) == 8
    assert n_fresh_tokens(16, 0.99) == 1


def test_token_selection_by_drift_with_stable_ties():
    store = CacheStore()
    site = SiteId(19, 0, ModuleKind.MLP)
    snap = np.zeros((6, 2))
    store.record_fresh(site, snap, np.zeros((6, 2)))
    incoming = snap.copy()
    incoming[4] = 5.0
    incoming[1] = 1.0
    mask = select_fresh_tokens(store, site, incoming, 0.5)
    assert list(np.flatnonzero(mask)) == [0, 1, 4]  # 4 and 1 by drift, then lowest index among ties


def test_token_level_updates_only_selected_rows():
    store = CacheStore()
    s0 = SiteId(19, 0, ModuleKind.MLP)
    s1 = SiteId(18, 0, ModuleKind.MLP)
    store.record_fresh(s0, np.zeros((4, 2)), np.ones((4, 2)))
    incoming = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    policy = CachePolicy.token_level(2, 0.5)
    out = cache_side_value(policy, store, s1, incoming, lambda h, rows=None: h[rows] * 10)
    assert np.array_equal(out[[1, 3]], incoming[[1, 3]] * 10)
    assert np.array_equal(out[[0, 2]], np.ones((2, 2)))
    entry = store.get(s1)
    assert list(entry.staleness) == [1, 0, 1, 0]


def test_module_interval_reuses_copy():
    store = CacheStore()
    site = SiteId(19, 2, ModuleKind.ATTENTION)
    store.record_fresh(site, np.zeros((3, 2)), np.arange(6.0).reshape(3, 2))
    out = cache_side_value(CachePolicy.module_interval(2), store, SiteId(18, 2, ModuleKind.ATTENTION), None)
    out[0, 0] = 99.0
    assert store.get(site).output[0, 0] == 0.0


def test_cache_not_warmed():
    with pytest.raises(RuntimeError, match="cache not warmed"):
        CacheStore().get(SiteId(3, 0, ModuleKind.MLP))


def test_distortion_value_is_known_similarity():
    dist = SimilarityDistortion(2.0, 0.4, 0.3, 0.0)
    d = 4
    r = dist.rotation(d)
    assert np.allclose(r @ r.T, np.eye(d))
    store = CacheStore()
    store.record_fresh(SiteId(19, 0, ModuleKind.MLP), np.zeros((3, d)), np.zeros((3, d)))
    h = SeededRng(0).normal_matrix(3, d)
    out = cache_side_value(CachePolicy.with_distortion(2, dist), store, SiteId(18, 0, ModuleKind.MLP),
                           h, lambda x, rows=None: x)
    assert np.allclose(out, 2.0 * h @ r + dist.shift_vector(d))


def test_hook_records_on_fresh_steps_and_calibrates_cached():
    store = CacheStore()
    policy = CachePolicy.module_interval(2)
    h = np.ones((2, 2))
    hook = cache_hook(policy, store, plan_step(policy, 19, SCHED), SCHED)
    hook(SiteId(19, 0, ModuleKind.MLP), h, lambda x, rows=None: x * 3)
    calls = []

    def calibrate(site, value):
        calls.append(site)
        return value + 1

    hook = cache_hook(policy, store, plan_step(policy, 18, SCHED), SCHED, calibrate)
    out = hook(SiteId(18, 0, ModuleKind.MLP), h * 5, lambda x, rows=None: x * 0)
    assert np.array_equal(out, h * 3 + 1)
    assert np.array_equal(store.get(SiteId(18, 0, ModuleKind.MLP)).output, h * 3)  # raw value kept
    assert calls == [SiteId(18, 0, ModuleKind.MLP)]


def test_store_serialize_changes_with_content():
    a, b = CacheStore(), CacheStore()
    site = SiteId(19, 0, ModuleKind.MLP)
    a.record_fresh(site, np.zeros((2, 2)), np.zeros((2, 2)))
    b.record_fresh(site, np.zeros((2, 2)), np.ones((2, 2)))
    assert a.serialize() != b.serialize()
