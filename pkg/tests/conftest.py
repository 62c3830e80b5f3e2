"""Shared fixtures: cube and two-patch templates, target meshes, drawings."""

import json

import numpy as np
import pytest

from intersection import flat_patch_points
from mesh_utils import build_index, sample_surface, save_obj
from template_utils import Template, build_cube_template, instantiate, tessellate_collection

# Second square [1, 2] x [0, 1]; its c4 (D -> A) runs back along the first square's c2
TWO_PATCH_ROWS = [
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
    [3, 12, 13, 14, 15, 16, 17, 18, 19, 6, 5, 4],
]


def _two_patch_points():
    first = flat_patch_points()
    extra = [(4, 0), (5, 0), (6, 0), (6, 1), (6, 2), (6, 3), (5, 3), (4, 3)]
    second = np.array([[x / 3.0, y / 3.0, 0.0] for x, y in extra])
    return np.vstack([first, second])


@pytest.fixture
def cube_template():
    return build_cube_template(1.0)


@pytest.fixture
def cube_mesh(cube_template):
    """Exact unit cube surface (flat faces), 2 x 2 grid per face."""
    return tessellate_collection(instantiate(cube_template, cube_template.points), 2)


@pytest.fixture
def cube_obj(tmp_path, cube_mesh):
    path = tmp_path / "cube.obj"
    save_obj(cube_mesh, str(path))
    return str(path)


@pytest.fixture
def two_patch_template():
    points = _two_patch_points()
    diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    return Template(name="two_squares", points=points, patches=np.array(TWO_PATCH_ROWS), scale_hint=diag)


@pytest.fixture
def random_two_patch():
    """Factory: (PatchCollection, target SpatialIndex, target SurfaceSamples) for a seed."""
    def make(seed, n_targets=300):
        rng = np.random.default_rng(seed)
        base = _two_patch_points()
        points = base + rng.normal(0.0, 0.15, size=base.shape)
        target_points = base + rng.normal(0.0, 0.15, size=base.shape) + [0.0, 0.0, 0.2]
        template = Template("t", points, np.array(TWO_PATCH_ROWS), 1.0)
        target_mesh = tessellate_collection(instantiate(template, target_points), 4)
        samples = sample_surface(target_mesh, n_targets, rng.integers(1 << 32))
        pc = instantiate(template, points)
        return pc, build_index(samples), samples, template
    return make


@pytest.fixture
def drawing_dir(tmp_path):
    """Directory with one JSON drawing, one SVG drawing and one unreadable file."""
    directory = tmp_path / "drawings"
    directory.mkdir()
    doc = {
        "canvas": [128, 128],
        "curves": [
            [[10, 10], [110, 10], [110, 110]],
            [[20, 60], [60, 90], [100, 60]],
        ],
    }
    (directory / "a_shape.json").write_text(json.dumps(doc))
    (directory / "b_shape.svg").write_text(
        '<svg xmlns="http://www.w3.org/2000/svg" width="128" height="128">'
        '<path d="M 10 100 C 40 20 80 20 118 100"/>'
        '<polyline points="10,120 60,110 118,120"/>'
        '</svg>'
    )
    (directory / "c_broken.json").write_text("{not json")
    return str(directory)
