import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from geom_kernel import CoonsPatch, tessellate
from intersection import (
    SQUARE_SYMMETRIES,
    DatasetFormatError,
    IntersectionDataset,
    apply_isometry,
    augment_batch,
    augment_isometry,
    count_intersections,
    flat_patch_points,
    folded_patch_points,
    generate_dataset,
    label_coords,
    load_dataset,
    normalize_unit_cube,
    normalize_unit_cube_backward,
    patch_self_intersects,
    patches_intersect,
    save_dataset,
    severity,
    split_dataset,
)

N = 8


def square(origin, e1, e2):
    """Planar square patch origin + u e1 + v e2 with straight boundary curves."""
    uv = flat_patch_points()[:, :2]
    return np.asarray(origin, float) + uv[:, :1] * np.asarray(e1, float) + uv[:, 1:] * np.asarray(e2, float)


def rigid(points, seed):
    rot = Rotation.random(1, seed).as_matrix()[0]
    return points @ rot.T + np.random.default_rng(seed).normal(size=3)


# =============================================================================
# NORMALIZATION
# =============================================================================

def test_normalize_unit_cube():
    pts = np.random.default_rng(0).normal(size=(5, 12, 3)) * [1.0, 3.0, 0.5] + 4.0
    out = normalize_unit_cube(pts)
    assert np.allclose(out.min(axis=1), 0.0)
    assert np.allclose((out.max(axis=1) - out.min(axis=1)).max(axis=1), 1.0)
    single = normalize_unit_cube(pts[0])
    assert np.allclose(single, out[0])


def test_normalize_unit_cube_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(2, 12, 3))
    weights = rng.normal(size=pts.shape)
    grad = normalize_unit_cube_backward(pts, weights)
    h = 1e-6
    fd = np.zeros_like(pts)
    for idx in np.ndindex(pts.shape):
        plus, minus = pts.copy(), pts.copy()
        plus[idx] += h
        minus[idx] -= h
        fd[idx] = ((normalize_unit_cube(plus) - normalize_unit_cube(minus)) * weights).sum() / (2 * h)
    assert np.allclose(grad, fd, atol=1e-6)


# =============================================================================
# ORACLE
# =============================================================================

def test_flat_patch_does_not_self_intersect():
    assert not patch_self_intersects(CoonsPatch(flat_patch_points()), n=N)
    assert not patch_self_intersects(CoonsPatch(rigid(flat_patch_points(), 3)), n=N)


def test_folded_patch_self_intersects():
    assert patch_self_intersects(CoonsPatch(folded_patch_points()), n=N)
    assert patch_self_intersects(CoonsPatch(rigid(folded_patch_points(), 5)), n=N)
    assert count_intersections(CoonsPatch(folded_patch_points()), n=16) > 0


def test_oracle_resolution_floor():
    with pytest.raises(ValueError):
        count_intersections(CoonsPatch(flat_patch_points()), n=3)


def test_crossing_pair_is_symmetric():
    flat = CoonsPatch(flat_patch_points())
    wall = CoonsPatch(square([0.5, 0.25, -0.5], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0]))
    assert patches_intersect(flat, wall, n=N)
    assert patches_intersect(wall, flat, n=N)
    lifted = CoonsPatch(flat_patch_points() + [0.0, 0.0, 0.5])
    assert not patches_intersect(flat, lifted, n=N)
    assert not patches_intersect(lifted, flat, n=N)


def test_shared_seam_is_exempt():
    left = CoonsPatch(flat_patch_points())
    right = CoonsPatch(flat_patch_points() + [1.0, 0.0, 0.0])
    assert not patches_intersect(left, right, n=N)
    assert patches_intersect(left, right, n=N, exempt_seams=False)


def test_label_and_severity_on_flat_vectors():
    folded = folded_patch_points().reshape(-1)
    assert label_coords(folded, "self", n=N) == 1
    assert severity(folded, "self", n=N) >= 1
    pair = np.concatenate([flat_patch_points(), flat_patch_points() + [0.0, 0.0, 2.0]]).reshape(-1)
    assert label_coords(pair, "pair", n=N) == 0


@pytest.mark.slow
def test_oracle_resolution_agreement():
    rng = np.random.default_rng(21)
    patches = [CoonsPatch(rng.random((12, 3))) for _ in range(200)]
    coarse = np.array([patch_self_intersects(p, n=32) for p in patches])
    fine = np.array([patch_self_intersects(p, n=64) for p in patches])
    assert (coarse == fine).mean() >= 0.99


# =============================================================================
# DATASETS
# =============================================================================

@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset("self", 10, seed=4, n=N, chunk_size=8)


def test_generated_dataset_is_balanced(small_dataset):
    assert len(small_dataset) == 10
    assert small_dataset.labels.sum() == 5
    assert small_dataset.coords.shape == (10, 36)
    assert small_dataset.coords.min() >= 0.0
    assert small_dataset.coords.max() <= 1.0 + 1e-12
    meta = small_dataset.metadata
    assert meta["raw_draws"] >= 10
    assert 0.0 < meta["raw_prior"] < 1.0


def test_generation_is_deterministic(small_dataset):
    again = generate_dataset("self", 10, seed=4, n=N, chunk_size=3)
    assert np.array_equal(again.coords, small_dataset.coords)
    assert np.array_equal(again.labels, small_dataset.labels)


def test_generation_does_not_depend_on_threads(small_dataset):
    parallel = generate_dataset("self", 10, seed=4, n=N, threads=2, chunk_size=4)
    assert np.array_equal(parallel.coords, small_dataset.coords)
    assert np.array_equal(parallel.labels, small_dataset.labels)


def test_generation_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate_dataset("triple", 10, seed=0)
    with pytest.raises(ValueError):
        generate_dataset("self", 1, seed=0)


def test_dataset_file_roundtrip(tmp_path, small_dataset):
    path = str(tmp_path / "self.cxds")
    save_dataset(small_dataset, path)
    loaded = load_dataset(path)
    assert loaded.kind == "self"
    assert np.array_equal(loaded.coords, small_dataset.coords)
    assert np.array_equal(loaded.labels, small_dataset.labels)
    assert loaded.metadata["seed"] == 4


def test_dataset_file_errors(tmp_path, small_dataset):
    path = tmp_path / "self.cxds"
    save_dataset(small_dataset, str(path))
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.cxds"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(str(bad_magic))

    truncated = tmp_path / "short.cxds"
    truncated.write_bytes(raw[:-5])
    with pytest.raises(DatasetFormatError):
        load_dataset(str(truncated))

    with pytest.raises(FileNotFoundError):
        load_dataset(str(tmp_path / "missing.cxds"))


def test_split_dataset(small_dataset):
    train, held = split_dataset(small_dataset, holdout=0.2, seed=1)
    assert len(train) == 8
    assert len(held) == 2
    rows = {tuple(r) for r in train.coords} | {tuple(r) for r in held.coords}
    assert len(rows) == 10


def test_dataset_validates_shapes():
    with pytest.raises(ValueError):
        IntersectionDataset("self", np.zeros((3, 36)), np.zeros(2))
    with pytest.raises(ValueError):
        IntersectionDataset("quad", np.zeros((1, 36)), np.zeros(1))


# =============================================================================
# AUGMENTATION
# =============================================================================

@pytest.mark.parametrize("seed", range(5))
def test_isometries_preserve_labels(seed):
    folded = folded_patch_points().reshape(-1)
    flat = flat_patch_points().reshape(-1)
    assert label_coords(augment_isometry(folded, "self", seed), "self", n=N) == 1
    assert label_coords(augment_isometry(flat, "self", seed), "self", n=N) == 0


@pytest.mark.parametrize("perm", range(len(SQUARE_SYMMETRIES)))
def test_square_symmetries_keep_the_surface(perm):
    pts = folded_patch_points()
    original = tessellate(CoonsPatch(pts), 6).vertices
    moved = tessellate(CoonsPatch(pts[SQUARE_SYMMETRIES[perm]]), 6).vertices
    dist, _ = cKDTree(original).query(moved)
    assert dist.max() < 1e-9


def test_pair_swap():
    a = flat_patch_points()
    b = a + [0.0, 0.0, 1.0]
    coords = np.concatenate([a, b]).reshape(-1)
    swapped = apply_isometry(coords, "pair", swap=True)
    assert np.allclose(swapped[:36], normalize_unit_cube(np.concatenate([b, a]))[:12].reshape(-1))


def test_augment_batch_stays_in_unit_cube():
    rng = np.random.default_rng(2)
    coords = rng.random((16, 72))
    out = augment_batch(coords, "pair", rng)
    assert out.shape == (16, 72)
    pts = out.reshape(16, -1, 3)
    assert np.allclose(pts.min(axis=1), 0.0)
    assert np.allclose((pts.max(axis=1) - pts.min(axis=1)).max(axis=1), 1.0)
