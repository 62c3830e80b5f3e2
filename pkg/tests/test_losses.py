import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from intersection import flat_patch_points
from intersection_mlp import init_classifier
from losses import (
    DecaySchedule,
    LossWeights,
    chamfer_loss,
    normal_loss,
    ordered_patch_pairs,
    pair_intersection_loss,
    self_intersection_loss,
    template_loss,
    total_loss,
)
from mesh_utils import SpatialIndex, SurfaceSamples, build_index, sample_surface
from template_utils import Template, instantiate, tessellate_collection, transform_points

SEEDS = range(20)
H = 1e-5
PATCH_SAMPLES = 20
TARGET_SAMPLES = 50


class FrozenNeighbours:
    """Records nearest-neighbour answers on the first evaluation and replays them afterwards."""

    def __init__(self, monkeypatch):
        self.recorded = []
        self.cursor = None
        original = SpatialIndex.query
        frozen = self

        def query(index, queries):
            if frozen.cursor is None:
                dist, idx = original(index, queries)
                frozen.recorded.append(idx)
                return dist, idx
            idx = frozen.recorded[frozen.cursor]
            frozen.cursor += 1
            queries = np.asarray(queries, dtype=float).reshape(-1, 3)
            return np.linalg.norm(queries - index.points[idx], axis=1), idx

        monkeypatch.setattr(SpatialIndex, "query", query)

    def replay(self, fn):
        self.cursor = 0
        try:
            return fn()
        finally:
            self.cursor = None


def assert_gradient(fn, pc, frozen):
    _, grad = fn()
    fd = np.zeros_like(pc.points)
    for i in range(pc.points.shape[0]):
        for k in range(3):
            pc.points[i, k] += H
            plus = frozen.replay(fn)[0]
            pc.points[i, k] -= 2 * H
            minus = frozen.replay(fn)[0]
            pc.points[i, k] += H
            fd[i, k] = (plus - minus) / (2 * H)
    err = np.linalg.norm(fd - grad)
    assert err <= 1e-4 * np.linalg.norm(grad) + 1e-8, f"gradient error {err:.3g} vs norm {np.linalg.norm(grad):.3g}"


@pytest.fixture
def frozen(monkeypatch):
    return FrozenNeighbours(monkeypatch)


# =============================================================================
# GRADIENTS
# =============================================================================

@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("directions", ["both", "patch_to_mesh", "mesh_to_patch"])
def test_chamfer_gradient(random_two_patch, frozen, seed, directions):
    pc, index, samples, _ = random_two_patch(seed, TARGET_SAMPLES)
    assert_gradient(lambda: chamfer_loss(pc, index, samples, PATCH_SAMPLES, seed, directions=directions),
                    pc, frozen)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("distance,normalization", [("squared", "global"), ("euclidean", "per_patch"),
                                                    ("squared", "per_patch")])
def test_chamfer_gradient_variants(random_two_patch, frozen, seed, distance, normalization):
    pc, index, samples, _ = random_two_patch(seed, TARGET_SAMPLES)
    assert_gradient(lambda: chamfer_loss(pc, index, samples, PATCH_SAMPLES, seed, distance=distance,
                                         normalization=normalization), pc, frozen)


@pytest.mark.parametrize("seed", SEEDS)
def test_normal_gradient(random_two_patch, frozen, seed):
    pc, index, _, _ = random_two_patch(seed, TARGET_SAMPLES)
    assert_gradient(lambda: normal_loss(pc, index, PATCH_SAMPLES, seed), pc, frozen)


@pytest.mark.parametrize("seed", SEEDS)
def test_template_gradient(random_two_patch, frozen, seed):
    pc, _, _, template = random_two_patch(seed, TARGET_SAMPLES)
    rng = np.random.default_rng(seed + 100)
    pc.points += rng.normal(0.0, 0.1, size=pc.points.shape)
    sched = DecaySchedule(0.4, 600.0, 150)
    assert_gradient(lambda: template_loss(pc, template, sched), pc, frozen)


@pytest.mark.parametrize("seed", SEEDS)
def test_intersection_gradients(random_two_patch, frozen, seed):
    pc, _, _, _ = random_two_patch(seed, TARGET_SAMPLES)
    self_clf = init_classifier(36, (32, 32), seed=seed)
    pair_clf = init_classifier(72, (32, 32), seed=seed + 1)
    assert_gradient(lambda: self_intersection_loss(pc, self_clf), pc, frozen)
    assert_gradient(lambda: pair_intersection_loss(pc, pair_clf, include_adjacent_pairs=True), pc, frozen)


@pytest.mark.parametrize("seed", SEEDS)
def test_total_gradient(random_two_patch, frozen, seed):
    pc, index, samples, template = random_two_patch(seed, TARGET_SAMPLES)
    pc.points += np.random.default_rng(seed + 7).normal(0.0, 0.05, size=pc.points.shape)
    weights = LossWeights(chamfer=1.0, normal=0.5, template=0.3, self_x=0.2, pair_x=0.2)
    self_clf = init_classifier(36, (32, 32), seed=seed)
    pair_clf = init_classifier(72, (32, 32), seed=seed + 1)

    def fn():
        b = total_loss(pc, index, samples, template, weights, DecaySchedule(t=60), PATCH_SAMPLES, seed,
                       self_clf=self_clf, pair_clf=pair_clf, include_adjacent_pairs=True)
        return b.total, b.gradient

    assert_gradient(fn, pc, frozen)


# =============================================================================
# VALUES
# =============================================================================

def test_decay_schedule():
    sched = DecaySchedule(0.4, 600.0)
    assert sched.weight == 1.0
    assert sched.at(600).weight == pytest.approx(0.4)
    assert sched.at(1200).weight == pytest.approx(0.16)


def test_template_loss_at_rest(cube_template):
    pc = instantiate(cube_template, cube_template.points)
    value, grad = template_loss(pc, cube_template, DecaySchedule())
    assert value == 0.0
    assert not grad.any()


def test_template_loss_counts_multiplicity(cube_template):
    pc = instantiate(cube_template, cube_template.points)
    pc.points[0] += [0.1, 0.0, 0.0]
    pc.points[8] += [0.0, 0.1, 0.0]
    value, _ = template_loss(pc, cube_template, DecaySchedule())
    assert value == pytest.approx(3 * 0.01 + 2 * 0.01)


def test_cube_at_rest_matches_its_own_surface(cube_template, cube_mesh):
    samples = sample_surface(cube_mesh, 20000, seed=1)
    index = build_index(samples)
    pc = instantiate(cube_template, cube_template.points)
    chamfer, _ = chamfer_loss(pc, index, samples, 5000, seed=2)
    normal, _ = normal_loss(pc, index, 5000, seed=2)
    assert chamfer < 0.05
    assert normal < 0.05


def test_chamfer_is_consistent_across_sample_counts(cube_template, cube_mesh):
    samples = sample_surface(cube_mesh, 20000, seed=1)
    index = build_index(samples)
    pc = instantiate(cube_template, transform_points(cube_template.points, scale=1.5))
    coarse, _ = chamfer_loss(pc, index, samples, 10_000, seed=3)
    fine, _ = chamfer_loss(pc, index, samples, 100_000, seed=4)
    assert coarse == pytest.approx(fine, rel=0.02)


def test_ordered_pairs_on_cube(cube_template):
    pc = instantiate(cube_template, cube_template.points)
    assert len(ordered_patch_pairs(pc, include_adjacent_pairs=True)) == 30
    far = ordered_patch_pairs(pc)
    assert len(far) == 6
    assert all((j, i) in far for i, j in far)


def test_pair_loss_without_pairs_is_zero(two_patch_template):
    pc = instantiate(two_patch_template, two_patch_template.points)
    value, grad = pair_intersection_loss(pc, init_classifier(72, (8,), seed=0))
    assert value == 0.0
    assert not grad.any()


def test_total_is_weighted_sum(random_two_patch):
    pc, index, samples, template = random_two_patch(3, 200)
    weights = LossWeights(chamfer=1.0, normal=0.3, template=0.5, self_x=0.1, pair_x=0.0)
    sched = DecaySchedule(t=30)
    self_clf = init_classifier(36, (16,), seed=0)
    b = total_loss(pc, index, samples, template, weights, sched, 100, 11, self_clf=self_clf)

    chamfer, _ = chamfer_loss(pc, index, samples, 100, 11)
    normal, _ = normal_loss(pc, index, 100, 11)
    tmpl, _ = template_loss(pc, template, sched)
    self_x, _ = self_intersection_loss(pc, self_clf)
    assert b.chamfer == pytest.approx(chamfer)
    assert b.normal == pytest.approx(normal)
    assert b.total == pytest.approx(chamfer + 0.3 * normal + 0.5 * tmpl + 0.1 * self_x)
    assert b.pair_x == 0.0
    assert b.is_finite()
    assert set(b.record(5)) == {"iter", "chamfer", "normal", "template", "self_x", "pair_x", "total", "grad_max"}


def test_invalid_options(random_two_patch):
    pc, index, samples, _ = random_two_patch(0, 50)
    with pytest.raises(ValueError):
        chamfer_loss(pc, index, samples, 10, 0, distance="manhattan")
    with pytest.raises(ValueError):
        chamfer_loss(pc, index, samples, 10, 0, normalization="per_point")
    with pytest.raises(ValueError):
        chamfer_loss(pc, index, samples, 10, 0, directions="sideways")
    with pytest.raises(ValueError):
        chamfer_loss(pc, index, samples, 0, 0)
    with pytest.raises(ValueError):
        self_intersection_loss(pc, init_classifier(72, (8,), seed=0))
    with pytest.raises(ValueError):
        LossWeights(chamfer=-1.0)
    with pytest.raises(ValueError):
        DecaySchedule(gamma=1.0)


def test_normal_loss_needs_sample_normals(random_two_patch):
    pc, _, samples, _ = random_two_patch(0, 50)
    with pytest.raises(ValueError):
        normal_loss(pc, SpatialIndex(samples.positions), 10, 0)


# =============================================================================
# KNOWN VALUES AND SYMMETRIES
# =============================================================================

SQUARE = Template("square", flat_patch_points(), np.array([list(range(12))]), 1.0)


def square_target(points, n_samples, seed=5):
    samples = sample_surface(tessellate_collection(instantiate(SQUARE, points), 4), n_samples, seed)
    return build_index(samples), samples


@pytest.mark.parametrize("degrees,expected", [(0.0, 0.0), (90.0, 1.0), (45.0, 0.5), (-45.0, 0.5)])
def test_normal_loss_against_tilted_planes(degrees, expected):
    tilt = Rotation.from_euler("x", degrees, degrees=True).as_matrix()
    index, _ = square_target(transform_points(SQUARE.points, rotation=tilt, translation=[0.0, 0.3, 0.2]), 500)
    value, _ = normal_loss(instantiate(SQUARE, SQUARE.points), index, 2000, seed=1)
    assert value == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("directions", ["mesh_to_patch", "patch_to_mesh"])
def test_chamfer_of_unit_offset_plane(directions):
    index, samples = square_target(transform_points(SQUARE.points, translation=[0.0, 0.0, 1.0]), 20000)
    value, _ = chamfer_loss(instantiate(SQUARE, SQUARE.points), index, samples, 20000, seed=2,
                            directions=directions)
    assert value == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_losses_are_invariant_under_rigid_motion(random_two_patch, seed):
    pc, index, samples, template = random_two_patch(seed, 300)
    rot = Rotation.random(random_state=seed).as_matrix()
    shift = np.random.default_rng(seed).normal(size=3)

    moved_samples = SurfaceSamples(samples.positions @ rot.T + shift, samples.normals @ rot.T, samples.source)
    moved_index = build_index(moved_samples)
    moved_pc = instantiate(template, transform_points(pc.points, rotation=rot, translation=shift))

    for distance in ("euclidean", "squared"):
        before, _ = chamfer_loss(pc, index, samples, 400, seed=7, distance=distance)
        after, _ = chamfer_loss(moved_pc, moved_index, moved_samples, 400, seed=7, distance=distance)
        assert after == pytest.approx(before, abs=1e-9)
    before, _ = normal_loss(pc, index, 400, seed=7)
    after, _ = normal_loss(moved_pc, moved_index, 400, seed=7)
    assert after == pytest.approx(before, abs=1e-9)


@pytest.mark.parametrize("lam", [0.0, 0.5, 2.0, -3.0])
def test_template_loss_is_quadratic_in_the_offset(cube_template, lam):
    offset = np.random.default_rng(9).normal(size=cube_template.points.shape)
    sched = DecaySchedule().at(250)
    unit, _ = template_loss(instantiate(cube_template, cube_template.points + offset), cube_template, sched)
    scaled, grad = template_loss(instantiate(cube_template, cube_template.points + lam * offset), cube_template,
                                 sched)
    assert scaled == pytest.approx(lam ** 2 * unit, rel=1e-12, abs=1e-12)
    assert np.allclose(grad, lam * template_loss(instantiate(cube_template, cube_template.points + offset),
                                                 cube_template, sched)[1])
