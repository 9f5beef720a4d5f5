import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmode.maskgen import (
    INF,
    SAMPLING_PRESETS,
    ContextSpec,
    SamplingSpace,
    build_mask,
    receptive_field,
    reachability_table,
    sample_context,
    sampling_space,
    to_frames,
    verify_no_lookahead_accumulation,
)


def reach_by_sets(allow, n_layers):
    """Oracle: propagate source sets layer by layer (no matrix algebra)."""
    T = len(allow)
    srcs = [{s for s in range(T) if allow[t][s]} for t in range(T)]
    cur = [set(x) for x in srcs]
    for _ in range(n_layers - 1):
        cur = [set().union(*(srcs[m] for m in cur[t])) for t in range(T)]
    return [(min(c), max(c)) for c in cur]


def naive_allow(T, lb, la):
    C = None if la == INF else la + 1
    out = np.zeros((T, T), dtype=bool)
    for t in range(T):
        end = T - 1 if C is None else min(T - 1, (t // C + 1) * C - 1)
        for s in range(T):
            out[t, s] = (lb == INF or s >= t - lb) and s <= end
    return out


class TestToFrames:
    @pytest.mark.parametrize("sec,frames", [(5.4, 135), (0.0, 0), (1.8, 45), (4.6, 115), (3.6, 90), (1.0, 25)])
    def test_values(self, sec, frames):
        assert to_frames(sec) == frames

    def test_inf_passes(self):
        assert to_frames(INF) == INF

    def test_half_up(self):
        assert to_frames(0.02) == 1
        assert to_frames(0.06) == 2

    def test_negative(self):
        with pytest.raises(ValueError):
            to_frames(-0.04)


class TestBuildMask:
    def test_t6_example(self):
        m = build_mask(6, 2, 2)
        rows = [set(np.flatnonzero(r)) for r in m.dense()]
        assert rows == [{0, 1, 2}, {0, 1, 2}, {0, 1, 2}, {1, 2, 3, 4, 5}, {2, 3, 4, 5}, {3, 4, 5}]
        assert m.chunk_size == 3

    def test_full_context(self):
        assert build_mask(4, INF, INF).dense().all()

    def test_causal(self):
        np.testing.assert_array_equal(build_mask(4, INF, 0).dense(), np.tril(np.ones((4, 4), dtype=bool)))

    def test_t_zero(self):
        with pytest.raises(ValueError):
            build_mask(0, 2, 2)

    def test_rule_agrees_with_dense(self):
        m = build_mask(50, 7, 3)
        t, s = np.meshgrid(np.arange(50), np.arange(50), indexing="ij")
        np.testing.assert_array_equal(m.allowed(t, s), m.dense())

    def test_large_t_is_implicit(self):
        m = build_mask(5000, 135, 25)
        assert m.allow is None
        assert m.allowed(4999, 4999) and not m.allowed(100, 200)

    @settings(max_examples=200, deadline=None)
    @given(T=st.integers(1, 40), lb=st.one_of(st.just(INF), st.integers(0, 40)),
           la=st.one_of(st.just(INF), st.integers(0, 40)))
    def test_matches_naive(self, T, lb, la):
        m = build_mask(T, lb, la)
        np.testing.assert_array_equal(m.dense(), naive_allow(T, lb, la))
        assert m.dense().diagonal().all()
        if la != INF and T > la:
            # max single-layer look-ahead is exactly la, attained at a chunk start
            assert max(int(np.flatnonzero(r).max()) - t for t, r in enumerate(m.dense())) == la

    @settings(max_examples=100, deadline=None)
    @given(T=st.integers(1, 30), lb=st.integers(0, 30), la=st.integers(0, 30),
           dlb=st.integers(0, 5), dla=st.integers(0, 5))
    def test_monotone(self, T, lb, la, dlb, dla):
        small = build_mask(T, lb, la).dense()
        big = build_mask(T, lb + dlb, la + dla).dense()
        # larger chunks only regroup frames into supersets when chunks nest; the
        # look-back direction is always monotone
        assert (build_mask(T, lb + dlb, la).dense() | ~small).all()
        if (la + dla + 1) % (la + 1) == 0:
            assert (big | ~small).all()


class TestReceptiveField:
    def test_examples(self):
        rf = receptive_field(build_mask(6, 2, 2), 2)
        assert tuple(rf[0]) == (0, 2)
        assert tuple(rf[5]) == (1, 5)

    def test_one_layer_is_row_extent(self):
        m = build_mask(10, 3, 1)
        rf = receptive_field(m, 1)
        for t, row in enumerate(m.dense()):
            idx = np.flatnonzero(row)
            assert tuple(rf[t]) == (idx.min(), idx.max())

    @settings(max_examples=60, deadline=None)
    @given(T=st.integers(1, 24), lb=st.one_of(st.just(INF), st.integers(0, 8)),
           la=st.one_of(st.just(INF), st.integers(0, 8)), L=st.integers(1, 5))
    def test_matches_set_oracle(self, T, lb, la, L):
        m = build_mask(T, lb, la)
        assert [tuple(r) for r in receptive_field(m, L)] == reach_by_sets(m.dense(), L)

    def test_fixed_window_future_accumulates(self):
        T = 8
        allow = np.array([[s <= t + 2 for s in range(T)] for t in range(T)])
        assert not verify_no_lookahead_accumulation(allow, 2)
        assert receptive_field(allow, 2)[0, 1] == 4

    def test_causal_never_accumulates(self):
        for L in (1, 5, 20):
            assert verify_no_lookahead_accumulation(build_mask(16, INF, 0), L)

    def test_reachability_table_rows(self):
        rows = reachability_table(build_mask(6, 2, 2), 2)
        assert len(rows) == 12
        assert rows[-1] == {"t": 5, "layers": 2, "min_reach": 1, "max_reach": 5}


class TestSampling:
    def test_presets(self):
        assert SAMPLING_PRESETS["T1"].l_past == (INF, 5.4, 4.6, 3.6)
        assert SAMPLING_PRESETS["T1"].l_future == (0.0, 1.0, 1.8, INF)
        t3 = SAMPLING_PRESETS["T3"]
        assert len(t3.l_past) == 13 and len(t3.l_future) == 11
        assert t3.l_past[1] == 5.8 and t3.l_past[-1] == 3.6

    def test_t2_pairs(self):
        rng = np.random.default_rng(0)
        seen = {sample_context(SAMPLING_PRESETS["T2"], rng) for _ in range(200)}
        assert seen == set(SAMPLING_PRESETS["T2"].combinations())
        assert len(seen) == 4

    def test_singleton(self):
        rng = np.random.default_rng(1)
        sp = SamplingSpace((5.4,), (0.0,))
        assert all(sample_context(sp, rng) == ContextSpec(5.4, 0.0) for _ in range(20))

    def test_t1_uniform(self):
        rng = np.random.default_rng(1234)
        n = 16000
        counts = Counter(sample_context(SAMPLING_PRESETS["T1"], rng) for _ in range(n))
        assert len(counts) == 16
        for c in counts.values():
            assert abs(c / n - 1 / 16) <= 0.01

    def test_deterministic(self):
        a = [sample_context(SAMPLING_PRESETS["T3"], np.random.default_rng(5)) for _ in range(3)]
        b = [sample_context(SAMPLING_PRESETS["T3"], np.random.default_rng(5)) for _ in range(3)]
        assert a == b

    def test_empty(self):
        with pytest.raises(ValueError):
            SamplingSpace((), (0.0,))

    def test_resolve(self):
        assert sampling_space("T2") is SAMPLING_PRESETS["T2"]
        sp = sampling_space({"l_past": [None, 2.0], "l_future": ["inf"]})
        assert sp.l_past == (INF, 2.0) and sp.l_future == (INF,)
        with pytest.raises(ValueError):
            sampling_space("T9")


class TestContextSpec:
    def test_json_roundtrip(self):
        for c in (ContextSpec(), ContextSpec(5.4, 0.0), ContextSpec(INF, 1.0)):
            assert ContextSpec.from_json(c.to_json()) == c

    def test_label(self):
        assert ContextSpec(INF, 0.0).label() == "(inf,0)"
        assert ContextSpec(5.4, 0.6).label() == "(5.4,0.6)"

    def test_negative(self):
        with pytest.raises(ValueError):
            ContextSpec(-1.0, 0.0)
        with pytest.raises(ValueError):
            ContextSpec.from_json([1.0])

    def test_frames(self):
        c = ContextSpec(5.4, 1.0)
        assert (c.lb_frames, c.la_frames) == (135, 25)
        assert math.isinf(ContextSpec().lb_frames)
