import numpy as np
import pytest

from singchar.geometry import Grid, nearest_lift, reduce, torus_distance, torus_point


def test_distance_examples():
    assert torus_distance([0.1], [0.9]) == pytest.approx(0.2)
    assert torus_distance([0.37], [0.37]) == 0.0
    assert torus_distance([0.0, 0.0], [0.5, 0.5]) == pytest.approx(np.sqrt(0.5))


def test_nearest_lift_examples():
    assert nearest_lift([0.05], [0.95]) == pytest.approx([-0.05])
    assert nearest_lift([0.5], [0.5]) == pytest.approx([0.5])
    assert nearest_lift([0.9, 0.1], [0.1, 0.9]) == pytest.approx([1.1, -0.1])


def test_tie_goes_to_positive_shift():
    assert nearest_lift([0.0], [0.5]) == pytest.approx([0.5])
    assert nearest_lift([0.25], [0.75]) == pytest.approx([0.75])


def test_triangle_inequality_and_symmetry(rng):
    for d in (1, 2):
        a, b, c = rng.random((3, 1000, d))
        ab, bc, ac = torus_distance(a, b), torus_distance(b, c), torus_distance(a, c)
        assert np.all(ac <= ab + bc)
        assert np.array_equal(ab, torus_distance(b, a))
        assert np.all(ab <= np.sqrt(d) / 2 + 1e-15)


def test_lift_reduces_to_target(rng):
    for d in (1, 2):
        b, t = rng.random((2, 500, d))
        lift = nearest_lift(b, t)
        assert np.allclose(reduce(lift), t, atol=1e-15)
        assert np.allclose(np.linalg.norm(lift - b, axis=-1), torus_distance(b, t), atol=1e-15)


def test_reduce_and_validation():
    assert reduce([-1e-18])[0] == 0.0
    assert reduce([1.25])[0] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        torus_point([0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        torus_point([np.nan])


def test_grid_nodes():
    g = Grid.uniform(4, 2)
    assert g.size == 16 and g.dim == 2
    assert np.allclose(g.nodes[:5], [[0, 0], [0, 0.25], [0, 0.5], [0, 0.75], [0.25, 0]])
    assert g.flat_index(np.array([[4, -1]]))[0] == 3
    assert int(Grid((8,)).nearest_node([0.99])) == 0
    with pytest.raises(ValueError):
        Grid((0,))
