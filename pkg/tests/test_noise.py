import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stochfiber.noise import (
    MAGIC,
    WienerIncrements,
    aggregate_cells,
    coarsen,
    dump,
    load,
    sample,
    sample_batch,
    trajectory_seed,
)


def test_moments():
    dt = 0.01
    w = sample(11, 1000, 500, 2, dt)
    x = w.data.ravel()
    assert x.size == 10**6
    assert abs(x.mean()) <= 4 * np.sqrt(dt / 1e6)
    assert abs(x.var() / dt - 1) < 0.01


def test_kolmogorov_smirnov():
    dt = 0.25
    x = sample(3, 100, 50, 2, dt).data.ravel() / np.sqrt(dt)
    assert x.size == 10**4
    assert stats.kstest(x, "norm").pvalue > 1e-3


def test_deterministic():
    a = sample(42, 16, 7, 2, 0.1)
    b = sample(42, 16, 7, 2, 0.1)
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, sample(43, 16, 7, 2, 0.1).data)


def test_batch_is_order_independent():
    full = sample_batch(5, range(6), 8, 3, 2, 0.5)
    part = sample_batch(5, [4, 2], 8, 3, 2, 0.5)
    np.testing.assert_array_equal(part.data[0], full.data[4])
    np.testing.assert_array_equal(part.data[1], full.data[2])
    np.testing.assert_array_equal(full.data[3], sample(trajectory_seed(5, 3), 8, 3, 2, 0.5).data)


def test_seed_schedule():
    assert trajectory_seed(0b1010, 0b0110) == 0b1100
    assert trajectory_seed(2**64 - 1, 1) == 2**64 - 2


def test_invalid_inputs():
    with pytest.raises(ValueError):
        sample(0, 0, 3, 2, 0.1)
    with pytest.raises(ValueError):
        sample(0, 4, 3, 2, -0.1)
    with pytest.raises(ValueError):
        WienerIncrements(np.zeros((3, 2)), 0.1)


class TestCoarsen:
    def test_identity(self):
        w = sample(1, 12, 4, 2, 0.1)
        assert coarsen(w, 1) is w

    def test_full_sum(self):
        w = sample(1, 12, 4, 2, 0.1)
        c = coarsen(w, 12)
        assert c.steps == 1 and np.isclose(c.dt, 1.2)
        np.testing.assert_allclose(c.data[0], w.data.sum(axis=0), rtol=1e-14)

    def test_associative(self):
        w = sample(2, 64, 3, 2, 0.01)
        np.testing.assert_allclose(coarsen(coarsen(w, 2), 2).data, coarsen(w, 4).data, rtol=0, atol=1e-15)

    def test_non_divisor(self):
        with pytest.raises(ValueError):
            coarsen(sample(1, 10, 2, 2, 0.1), 3)

    def test_batched(self):
        w = sample_batch(0, range(3), 8, 2, 2, 0.1)
        c = coarsen(w, 4)
        assert c.data.shape == (3, 2, 2, 2)
        np.testing.assert_allclose(c.data[1, 0], w.data[1, :4].sum(axis=0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**63), st.sampled_from([1, 2, 4, 8, 16, 32]))
    def test_telescoping(self, seed, k):
        w = sample(seed, 32, 3, 2, 1 / 32)
        np.testing.assert_allclose(coarsen(w, k).terminal(), w.terminal(), rtol=0, atol=1e-13)


class TestAggregate:
    def test_cell_sums(self):
        # N_f + 1 = 8 fine cells, factor 4 gives N_c + 1 = 2 coarse cells
        w = sample(9, 5, 7, 2, 0.1)
        a = aggregate_cells(w, 4)
        assert a.N == 1
        # coarse cell 1 holds fine cells 4..7, i.e. dynamic nodes 4..7 (array rows 3..6)
        np.testing.assert_allclose(a.data[:, 0], w.data[:, 3:7].sum(axis=1) / 2)

    def test_preserves_variance(self):
        w = sample(1, 4000, 63, 2, 0.5)
        a = aggregate_cells(w, 8)
        assert a.N == 7
        assert abs(a.data.var() / 0.5 - 1) < 0.03

    def test_rejects_non_nested(self):
        with pytest.raises(ValueError):
            aggregate_cells(sample(0, 2, 6, 2, 0.1), 4)


def test_dump_roundtrip(tmp_path):
    w = sample(2**64 - 5, 6, 4, 3, 0.125)
    path = tmp_path / "w.bin"
    dump(w, path)
    raw = path.read_bytes()
    assert raw[:6] == MAGIC
    assert len(raw) == 6 + 3 * 8 + 8 + 8 + 6 * 4 * 3 * 8
    back = load(path)
    assert back.data.tobytes() == w.data.tobytes()
    assert back.dt == 0.125 and back.seed == w.seed


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE00" + bytes(64))
    with pytest.raises(ValueError, match="magic"):
        load(path)
