import numpy as np
import pytest

from neural_diss.sampling import (
    BoxDomain,
    CoverBudgetExceeded,
    SampleCover,
    build_cover,
    export_cover,
    import_cover,
    make_pair_batches,
    verify_cover,
)


def test_two_point_cover():
    c = build_cover(BoxDomain([-1.0], [1.0]), 1.0)
    assert np.array_equal(c.points[:, 0], [-1.0, 1.0])
    assert verify_cover(c, 10_000).passed


def test_one_ball_cover():
    c = build_cover(BoxDomain([0, 0], [1, 1]), 10.0)
    assert len(c) == 1
    v = verify_cover(c, 10_000)
    assert v.passed and v.worst_distance <= np.sqrt(0.5)


def test_scalar_plant_domain_count():
    c = build_cover(BoxDomain([-np.pi / 2], [np.pi / 2]), 0.0016)
    assert len(c) == int(np.ceil(np.pi / (2 * 0.0016))) + 1
    assert verify_cover(c, 100_000, seed=1).passed


@pytest.mark.parametrize("lo,hi,eps", [([-1, -2], [1, 0.5], 0.1), ([0, 0, 0], [1, 2, 0.05], 0.2), ([-3], [5], 0.3)])
def test_built_covers_pass_probe(lo, hi, eps):
    c = build_cover(BoxDomain(lo, hi), eps)
    v = verify_cover(c, 20_000, seed=3)
    assert v.passed and v.worst_distance <= eps


def test_hole_witness():
    c = build_cover(BoxDomain([-1.0], [1.0]), 1.0)
    holed = SampleCover(c.points[:1], c.eps, c.domain)
    assert not verify_cover(holed, 1000).passed


def test_empty_probe():
    c = build_cover(BoxDomain([-1.0], [1.0]), 0.5)
    v = verify_cover(c, 0)
    assert v.passed and v.worst_distance == 0.0


def test_budget_exceeded_reports_count():
    with pytest.raises(CoverBudgetExceeded) as exc:
        build_cover(BoxDomain([0, 0], [1, 1]), 1e-3, budget=100)
    assert exc.value.required > 100


def test_invalid_box_and_radius():
    with pytest.raises(ValueError):
        BoxDomain([1.0], [0.0])
    with pytest.raises(ValueError):
        build_cover(BoxDomain([0.0], [1.0]), 0.0)


def test_single_tuple_membership():
    xs = build_cover(BoxDomain([-1.0], [1.0]), 0.1)
    ws = build_cover(BoxDomain([-0.5, -0.5], [0.5, 0.5]), 0.2)
    (b,) = make_pair_batches(xs, ws, 1, 1, seed=4)
    assert len(b) == 1
    for pts, cov in ((b.xq, xs), (b.xr, xs), (b.wq, ws), (b.wr, ws)):
        assert np.any(np.all(cov.points == pts[0], axis=1))


def test_total_exclusion():
    xs = build_cover(BoxDomain([-1.0], [1.0]), 0.1)
    ws = build_cover(BoxDomain([-0.1], [0.1]), 0.1)
    for b in make_pair_batches(xs, ws, 64, 3, d_min=10.0, seed=0):
        assert not b.separated.any()


def test_default_exclusion_radius():
    xs = build_cover(BoxDomain([-1.0], [1.0]), 0.1)
    ws = build_cover(BoxDomain([-0.1], [0.1]), 0.1)
    for b in make_pair_batches(xs, ws, 256, 2, seed=5):
        d = np.abs(b.xq - b.xr)[:, 0]
        assert np.array_equal(b.separated, d >= 0.2)


def test_batches_deterministic():
    xs = build_cover(BoxDomain([-1.0, -1.0], [1.0, 1.0]), 0.2)
    ws = build_cover(BoxDomain([-0.1], [0.1]), 0.1)
    a = make_pair_batches(xs, ws, 32, 4, seed=[7, 3])
    b = make_pair_batches(xs, ws, 32, 4, seed=[7, 3])
    for u, v in zip(a, b):
        assert np.array_equal(u.iq, v.iq) and np.array_equal(u.jr, v.jr)


def test_cover_round_trip(tmp_path):
    c = build_cover(BoxDomain([-1.0, 0.0], [1.0, 0.3]), 0.07)
    export_cover(c, tmp_path / "cover.csv")
    back = import_cover(tmp_path / "cover.csv")
    assert np.array_equal(back.points, c.points)
    assert back.digest() == c.digest()
