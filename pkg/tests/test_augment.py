import json
import os
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from augment import (
    AugmentParams,
    VectorDrawing,
    arc_length,
    augment_contours,
    augment_contours_tracked,
    batch_augment,
    import_svg,
    ink_coverage,
    item_seed,
    list_drawings,
    load_drawing,
    output_name,
    parse_path,
    rasterize,
    replay_manifest_row,
    run_texture_hook,
    save_drawing,
    split_curve,
)
from reports import read_manifest, write_manifest

LINE = np.array([[0.0, 0.0], [100.0, 0.0]])


def line_drawing(length=100.0, canvas=128, y=64.0):
    start = (canvas - length) / 2.0
    return VectorDrawing([[[start, y], [start + length, y]]], canvas, canvas)


def write_svg(tmp_path, body, attrs='width="100" height="80"'):
    path = tmp_path / "drawing.svg"
    path.write_text(f'<svg xmlns="http://www.w3.org/2000/svg" {attrs}>{body}</svg>')
    return str(path)


# =============================================================================
# SPLITTING AND TRUNCATION
# =============================================================================

def test_split_leaves_a_gap():
    left, right = split_curve(LINE, 0.5, 4.0)
    assert arc_length(left) == pytest.approx(48.0)
    assert arc_length(right) == pytest.approx(48.0)
    assert np.allclose(left[-1], [48.0, 0.0])
    assert np.allclose(right[0], [52.0, 0.0])


def test_split_gap_can_consume_a_side():
    left, right = split_curve(LINE, 0.01, 4.0)
    assert left is None
    assert arc_length(right) == pytest.approx(97.0)
    assert split_curve(np.array([[0.0, 0.0], [3.0, 0.0]]), 0.5, 4.0) == (None, None)


def test_split_follows_polyline_corners():
    corner = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
    left, right = split_curve(corner, 0.75, 0.0)
    assert np.allclose(left, [[0.0, 0.0], [10.0, 0.0], [10.0, 5.0]])
    assert np.allclose(right, [[10.0, 5.0], [10.0, 10.0]])


def test_augmentation_is_deterministic():
    drawing = line_drawing()
    params = AugmentParams(split_prob=0.5, trunc_prob=0.5)
    first = augment_contours(drawing, params, seed=7)
    second = augment_contours(drawing, params, seed=7)
    assert len(first.curves) == len(second.curves)
    for a, b in zip(first.curves, second.curves):
        assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.sampled_from(["endpoint", "curve"]))
def test_length_bookkeeping(seed, mode):
    drawing = VectorDrawing([[[10, 10], [110, 10], [110, 110]], [[20, 60], [60, 90], [100, 60]],
                             [[5, 120], [12, 120]]], 128, 128)
    params = AugmentParams(split_prob=0.6, max_splits=6, trunc_prob=0.5, trunc_max=0.3, gap=6.0,
                           min_length=20.0, trunc_mode=mode)
    out, stats = augment_contours_tracked(drawing, params, seed)
    accounted = out.total_length + stats.gap_length + stats.truncated_length + stats.removed_length
    assert accounted == pytest.approx(drawing.total_length, abs=1e-6)
    assert stats.endpoints_considered % 2 == 0
    assert stats.endpoints_truncated <= stats.endpoints_considered
    if mode == "curve":
        assert stats.endpoints_truncated % 2 == 0
    assert stats.splits <= params.max_splits


def test_no_operations_leave_the_drawing_alone():
    drawing = line_drawing()
    params = AugmentParams(split_prob=0.0, trunc_prob=0.0)
    out, stats = augment_contours_tracked(drawing, params, seed=1)
    assert stats.splits == 0 and stats.removed == 0
    assert np.array_equal(out.curves[0], drawing.curves[0])


@pytest.mark.slow
def test_augmentation_statistics():
    drawing = VectorDrawing([[[10.0, 256.0], [500.0, 256.0]]], 512, 512)
    params = AugmentParams()
    splits = 0
    considered = truncated = 0
    runs = 10_000
    for seed in range(runs):
        _, stats = augment_contours_tracked(drawing, params, seed)
        splits += stats.splits
        considered += stats.endpoints_considered
        truncated += stats.endpoints_truncated
    assert abs(splits / runs - 3.0) <= 0.05
    assert abs(truncated / considered - 0.2) <= 0.01


def test_short_curves_are_removed_relative_to_the_canvas(caplog):
    params = AugmentParams(split_prob=0.0, trunc_prob=0.0, min_length=8.0)
    small_canvas = VectorDrawing([[[10.0, 10.0], [15.0, 10.0]]], 128, 128)
    out, stats = augment_contours_tracked(small_canvas, params, seed=0)
    assert len(out.curves) == 1
    assert stats.removed == 0

    large_canvas = VectorDrawing([[[10.0, 10.0], [15.0, 10.0]]], 512, 512)
    out, stats = augment_contours_tracked(large_canvas, params, seed=0)
    assert out.curves == []
    assert stats.removed == 1
    assert stats.removed_length == pytest.approx(5.0)
    assert stats.empty
    assert "removed every curve" in caplog.text


def test_params_validation():
    AugmentParams()
    with pytest.raises(ValueError):
        AugmentParams(split_prob=1.5)
    with pytest.raises(ValueError):
        AugmentParams(max_splits=-1)
    with pytest.raises(ValueError):
        AugmentParams(trunc_min=0.2, trunc_max=0.1)
    with pytest.raises(ValueError):
        AugmentParams(trunc_max=0.5)
    with pytest.raises(ValueError):
        AugmentParams(gap=-1.0)
    with pytest.raises(ValueError):
        AugmentParams(trunc_mode="middle")


def test_drawing_validation():
    clipped = VectorDrawing([[[-5.0, 10.0], [200.0, 10.0]]], 128, 64)
    assert clipped.curves[0][:, 0].tolist() == [0.0, 128.0]
    with pytest.raises(ValueError):
        VectorDrawing([[[1.0, 1.0]]], 10, 10)
    with pytest.raises(ValueError):
        VectorDrawing([], 0, 10)


# =============================================================================
# RASTERIZATION
# =============================================================================

def test_rasterize_size_and_background():
    image = rasterize(VectorDrawing([], 128, 128), 2, 128)
    assert image.mode == "L"
    assert image.size == (128, 128)
    assert (np.asarray(image) == 255).all()
    assert ink_coverage(image) == 0.0

    wide = rasterize(VectorDrawing([[[0.0, 10.0], [200.0, 10.0]]], 200, 100), 3, 64)
    assert wide.size == (64, 64)
    assert ink_coverage(wide) > 0.0


@pytest.mark.parametrize("width", [1, 2, 3])
def test_stroke_ink_matches_width(width):
    ink = ink_coverage(rasterize(line_drawing(), width, 128))
    expected = 100.0 * width + np.pi * width ** 2 / 4.0
    assert ink == pytest.approx(expected, rel=0.06)


def test_ink_grows_with_width():
    drawing = line_drawing()
    inks = [ink_coverage(rasterize(drawing, w, 128)) for w in (1, 2, 4, 8)]
    assert inks == sorted(inks)
    assert len(set(inks)) == 4


def test_rasterize_rejects_bad_sizes():
    with pytest.raises(ValueError):
        rasterize(line_drawing(), 0, 128)
    with pytest.raises(ValueError):
        rasterize(line_drawing(), 1, 8)


# =============================================================================
# DRAWING FILES
# =============================================================================

def test_drawing_roundtrip(tmp_path):
    drawing = VectorDrawing([[[1.5, 2.0], [30.0, 40.25], [60.0, 10.0]]], 64, 48)
    path = str(tmp_path / "nested" / "drawing.json")
    save_drawing(drawing, path)
    loaded = load_drawing(path)
    assert (loaded.width, loaded.height) == (64, 48)
    assert np.array_equal(loaded.curves[0], drawing.curves[0])


def test_drawing_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_drawing(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    with pytest.raises(ValueError):
        load_drawing(str(bad))
    incomplete = tmp_path / "incomplete.json"
    incomplete.write_text(json.dumps({"curves": []}))
    with pytest.raises(ValueError):
        load_drawing(str(incomplete))


def test_path_lines():
    (poly,) = parse_path("M 10 10 L 50 10 H 80 V 40")
    assert poly.tolist() == [[10, 10], [50, 10], [80, 10], [80, 40]]
    (rel,) = parse_path("m 10 10 l 20 0 l 0 20")
    assert rel.tolist() == [[10, 10], [30, 10], [30, 30]]
    (implicit,) = parse_path("M0,0 10,10 20,0")
    assert implicit.tolist() == [[0, 0], [10, 10], [20, 0]]
    (closed,) = parse_path("M 0 0 L 10 0 L 10 10 Z")
    assert closed.tolist() == [[0, 0], [10, 0], [10, 10], [0, 0]]
    assert len(parse_path("M 0 0 L 5 5 M 20 20 L 30 30")) == 2


def test_path_cubic_is_flattened_on_the_curve():
    ctrl = np.array([[0.0, 0.0], [30.0, 60.0], [70.0, 60.0], [100.0, 0.0]])
    (poly,) = parse_path("M 0 0 C 30 60 70 60 100 0")
    assert np.allclose(poly[0], ctrl[0])
    assert np.allclose(poly[-1], ctrl[3])
    assert len(poly) > 4
    t = np.linspace(0.0, 1.0, 2001)[:, None]
    dense = ((1 - t) ** 3 * ctrl[0] + 3 * (1 - t) ** 2 * t * ctrl[1] + 3 * (1 - t) * t ** 2 * ctrl[2]
             + t ** 3 * ctrl[3])
    gaps = np.linalg.norm(poly[:, None, :] - dense[None], axis=2).min(axis=1)
    assert gaps.max() < 0.1


def test_path_arc_is_skipped(caplog):
    polys = parse_path("M 10 10 A 5 5 0 0 1 20 10 L 30 10")
    assert [p.tolist() for p in polys] == [[[20, 10], [30, 10]]]
    assert "arc segment skipped" in caplog.text


def test_path_errors():
    with pytest.raises(ValueError):
        parse_path("10 10 L 20 20")
    with pytest.raises(ValueError):
        parse_path("M 10")


def test_import_svg_elements(tmp_path):
    path = write_svg(tmp_path, '<g><polyline points="0,0 10,10 20,0"/></g>'
                               '<line x1="1" y1="2" x2="3" y2="4"/>'
                               '<polygon points="0,0 5,0 5,5"/>')
    drawing = import_svg(path)
    assert (drawing.width, drawing.height) == (100, 80)
    assert [c.tolist() for c in drawing.curves] == [
        [[0, 0], [10, 10], [20, 0]],
        [[1, 2], [3, 4]],
        [[0, 0], [5, 0], [5, 5], [0, 0]],
    ]


def test_import_svg_canvas(tmp_path):
    drawing = import_svg(write_svg(tmp_path, '<path d="M 0 0 L 10 10"/>', attrs='viewBox="0 0 200 150"'))
    assert (drawing.width, drawing.height) == (200, 150)
    with pytest.raises(ValueError):
        import_svg(write_svg(tmp_path, '<path d="M 0 0 L 10 10"/>', attrs=''))
    broken = tmp_path / "broken.svg"
    broken.write_text("<svg")
    with pytest.raises(ValueError):
        import_svg(str(broken))


# =============================================================================
# BATCH AUGMENTATION
# =============================================================================

def test_item_seed_and_output_name():
    assert item_seed(1, 2, 3) == item_seed(1, 2, 3)
    assert item_seed(1, 2, 3) != item_seed(1, 3, 2)
    assert output_name("/data/cat.svg", 7, 2) == "cat_svg_007_w2.png"
    assert output_name("/data/cat.JSON", 0, 1) == "cat_json_000_w1.png"


def test_list_drawings(drawing_dir, tmp_path):
    (tmp_path / "drawings" / "notes.txt").write_text("ignored")
    names = [os.path.basename(p) for p in list_drawings(drawing_dir)]
    assert names == ["a_shape.json", "b_shape.svg", "c_broken.json"]
    with pytest.raises(FileNotFoundError):
        list_drawings(str(tmp_path / "nowhere"))


def test_batch_augment(drawing_dir, tmp_path, caplog):
    out_dir = tmp_path / "out"
    rows = batch_augment(drawing_dir, str(out_dir), AugmentParams(), [1, 2], count=2, seed=5, out_size=64)
    assert len(rows) == 8
    assert "Skipping unreadable input" in caplog.text
    assert {row["source"] for row in rows} == {"a_shape.json", "b_shape.svg"}
    assert rows[0]["output"] == "a_shape_json_000_w1.png"
    assert rows[-1]["output"] == "b_shape_svg_001_w2.png"
    for row in rows:
        image = Image.open(out_dir / row["output"])
        assert image.size == (64, 64)
        assert row["item_seed"] == item_seed(5, row["file_index"], row["copy"])


def test_same_stem_inputs_keep_separate_outputs(drawing_dir, tmp_path):
    twins = tmp_path / "twins"
    twins.mkdir()
    shutil.copy(os.path.join(drawing_dir, "a_shape.json"), twins / "shape.json")
    shutil.copy(os.path.join(drawing_dir, "b_shape.svg"), twins / "shape.svg")
    out_dir = tmp_path / "out"
    rows = batch_augment(str(twins), str(out_dir), AugmentParams(), [1], count=1, seed=2, out_size=32)
    assert sorted(row["output"] for row in rows) == ["shape_json_000_w1.png", "shape_svg_000_w1.png"]
    assert len(list(out_dir.glob("*.png"))) == 2


def test_batch_augment_does_not_depend_on_threads(drawing_dir, tmp_path):
    params = AugmentParams(split_prob=0.5)
    serial = batch_augment(drawing_dir, str(tmp_path / "serial"), params, [2], count=3, seed=9, out_size=32)
    threaded = batch_augment(drawing_dir, str(tmp_path / "threaded"), params, [2], count=3, seed=9,
                             out_size=32, threads=2)
    assert serial == threaded
    for row in serial:
        assert ((tmp_path / "serial" / row["output"]).read_bytes()
                == (tmp_path / "threaded" / row["output"]).read_bytes())


def test_batch_augment_arguments(drawing_dir, tmp_path):
    with pytest.raises(ValueError):
        batch_augment(drawing_dir, str(tmp_path / "out"), AugmentParams(), [1], count=0, seed=0)
    with pytest.raises(ValueError):
        batch_augment(drawing_dir, str(tmp_path / "out"), AugmentParams(), [], count=1, seed=0)


def test_manifest_rows_replay(drawing_dir, tmp_path):
    out_dir = tmp_path / "out"
    rows = batch_augment(drawing_dir, str(out_dir), AugmentParams(trunc_prob=0.5), [1, 3], count=2, seed=3,
                         out_size=48)
    manifest = write_manifest(rows, str(out_dir / "manifest.tsv"))
    for row in read_manifest(manifest):
        written = np.asarray(Image.open(out_dir / row["output"]))
        assert np.array_equal(np.asarray(replay_manifest_row(row, drawing_dir)), written)


def test_texture_hook(tmp_path):
    png = str(tmp_path / "x.png")
    Image.new("L", (16, 16), 255).save(png)
    assert run_texture_hook("true", png)
    assert not run_texture_hook("false", png)
    assert not run_texture_hook("no-such-texture-command-here", png)
