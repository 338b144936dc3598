import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volterra_mp.timebase import filtration_atoms, make_grid, sample_noise


def test_grid_nodes():
    g = make_grid(1.0, 4)
    assert np.array_equal(g.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert g.dt == 0.25
    assert np.array_equal(make_grid(2.0, 1).nodes, [0.0, 2.0])


@pytest.mark.parametrize("T,N", [(1.0, 0), (0.0, 4), (-1.0, 3), (float("nan"), 2), (1.0, 2.5)])
def test_grid_rejects_bad_arguments(T, N):
    with pytest.raises(ValueError):
        make_grid(T, N)


def test_tree_two_steps():
    noise = sample_noise(make_grid(1.0, 2), 4, "tree")
    s = np.sqrt(0.5)
    assert np.allclose(noise.dW, [[s, s], [s, -s], [-s, s], [-s, -s]])
    assert np.allclose(noise.weights, 0.25)


def test_tree_needs_power_of_two():
    with pytest.raises(ValueError, match="2\\*\\*N"):
        sample_noise(make_grid(1.0, 3), 4, "tree")


def test_unknown_mode():
    with pytest.raises(ValueError):
        sample_noise(make_grid(1.0, 3), 8, "sobol")


def test_gaussian_moments():
    g = make_grid(1.0, 10)
    noise = sample_noise(g, 10_000, "gaussian", seed=7)
    assert np.all(np.abs(noise.dW.mean(axis=0)) <= 5 * np.sqrt(g.dt / noise.M))
    assert np.all(np.abs(noise.dW.var(axis=0) - g.dt) <= 5 / np.sqrt(noise.M))
    assert np.allclose(noise.weights.sum(), 1.0)


def test_gaussian_reproducible_and_prefix_stable():
    g = make_grid(1.0, 6)
    a = sample_noise(g, 1000, "gaussian", seed=3)
    b = sample_noise(g, 1000, "gaussian", seed=3)
    assert np.array_equal(a.dW, b.dW)
    # block substreams: a longer ensemble extends a shorter one
    c = sample_noise(g, 1300, "gaussian", seed=3)
    assert np.array_equal(c.dW[:1000], a.dW)
    assert not np.array_equal(sample_noise(g, 1000, "gaussian", seed=4).dW, a.dW)


def test_increments_read_only():
    noise = sample_noise(make_grid(1.0, 3), 8, "tree")
    with pytest.raises(ValueError):
        noise.dW[0, 0] = 1.0


def test_atoms_tree():
    noise = sample_noise(make_grid(1.0, 3), 8, "tree")
    assert len(filtration_atoms(noise, 0)) == 1
    atoms = filtration_atoms(noise, 3)
    assert len(atoms) == 8 and all(len(a) == 1 for a in atoms)
    small = sample_noise(make_grid(1.0, 2), 4, "tree")
    assert [len(a) for a in filtration_atoms(small, 1)] == [2, 2]
    with pytest.raises(ValueError):
        filtration_atoms(noise, 4)


def test_atoms_gaussian_match_increments():
    noise = sample_noise(make_grid(1.0, 4), 50, "gaussian", seed=1)
    assert len(filtration_atoms(noise, 0)) == 1
    assert len(filtration_atoms(noise, 2)) == 50


@settings(max_examples=30, deadline=None)
@given(N=st.integers(1, 7), k=st.integers(0, 7))
def test_atoms_refine(N, k):
    k = min(k, N)
    noise = sample_noise(make_grid(1.0, N), 2**N, "tree")
    atoms = filtration_atoms(noise, k)
    assert len(atoms) == 2**k
    for a in atoms:
        # paths in one atom share their first k increments
        assert np.all(noise.dW[a, :k] == noise.dW[a[0], :k])
    if k > 0:
        parent = {int(i): j for j, a in enumerate(filtration_atoms(noise, k - 1)) for i in a}
        for a in atoms:
            assert len({parent[int(i)] for i in a}) == 1


@settings(max_examples=30, deadline=None)
@given(N=st.integers(1, 7), data=st.data())
def test_tower_by_atom_averages(N, data):
    noise = sample_noise(make_grid(1.0, N), 2**N, "tree")
    v = np.array(data.draw(st.lists(st.floats(-1e3, 1e3), min_size=2**N, max_size=2**N)))
    k = data.draw(st.integers(0, N))
    j = data.draw(st.integers(0, k))

    def avg(x, lvl):
        out = np.empty_like(x)
        for a in filtration_atoms(noise, lvl):
            out[a] = x[a].mean()
        return out

    assert np.max(np.abs(avg(avg(v, k), j) - avg(v, j))) <= 1e-12 * max(1.0, np.abs(v).max())
