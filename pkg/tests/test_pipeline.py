"""Scene sampling, mask filtering, compositing, and annotation emission."""

import numpy as np
import pytest

from quadfit.camera import Camera, project
from quadfit.errors import ParseError, ValidationError
from quadfit.imgio import (
    DEPTH_SENTINEL,
    load_mask_png,
    load_pfm,
    load_rgb_png,
    save_mask_png,
    save_pfm,
    save_rgb_png,
)
from quadfit.model import pose_mesh
from quadfit.pipeline import (
    IOU_ACCEPT,
    IOU_UNCERTAIN,
    POSITION_HIGH,
    POSITION_LOW,
    SPECIES,
    SPECIES_FAMILY,
    AnnotationRecord,
    SceneSample,
    composite_background,
    cycle_consistency,
    emit_annotation,
    iou_bucket,
    load_pose_library,
    load_record,
    mask_bbox,
    sample_scene,
    sample_scene_arrays,
    sample_scenes,
    save_pose_library,
    save_record,
)
from quadfit.raster import rasterize

# ---------------------------------------------------------------------------
# scene sampling


def test_draw_bounds_and_means(prior, pose_library):
    n = 100_000
    draws = sample_scene_arrays(prior, pose_library, n, seed=5)
    root = draws["theta"][:, 0, :]
    assert np.all(root >= -np.pi) and np.all(root < np.pi)
    pos = draws["position"]
    assert np.all(pos >= POSITION_LOW) and np.all(pos < POSITION_HIGH)
    assert np.all(draws["species_idx"] >= 0)
    assert np.all(draws["species_idx"] < len(SPECIES))
    assert np.all(draws["pose_idx"] < len(pose_library))
    assert np.isfinite(draws["beta"]).all()
    # means sit within 1% of each range's center
    assert np.all(np.abs(root.mean(axis=0)) <= 0.01 * 2 * np.pi)
    center = (POSITION_LOW + POSITION_HIGH) / 2
    span = POSITION_HIGH - POSITION_LOW
    assert np.all(np.abs(pos.mean(axis=0) - center) <= 0.01 * span)
    # species draws are uniform across the table
    freq = np.bincount(draws["species_idx"], minlength=len(SPECIES)) / n
    assert np.all(np.abs(freq - 1 / len(SPECIES)) <= 0.01)


def test_draw_determinism(prior, pose_library):
    a = sample_scene_arrays(prior, pose_library, 50, seed=9)
    b = sample_scene_arrays(prior, pose_library, 50, seed=9)
    for key in a:
        assert np.array_equal(a[key], b[key])
    c = sample_scene_arrays(prior, pose_library, 50, seed=10)
    assert not np.array_equal(a["beta"], c["beta"])


def test_single_scene_matches_batch_head(prior, pose_library):
    one = sample_scene(prior, pose_library, seed=33)
    batch = sample_scenes(prior, pose_library, 1, seed=33)[0]
    assert np.array_equal(one.params.beta, batch.params.beta)
    assert np.array_equal(one.params.theta, batch.params.theta)
    assert one.species == batch.species and one.pose_id == batch.pose_id
    assert np.array_equal(one.camera.translation, batch.camera.translation)


def test_scene_fields(prior, pose_library):
    scenes = sample_scenes(prior, pose_library, 20, seed=4)
    draws = sample_scene_arrays(prior, pose_library, 20, seed=4)
    for i, s in enumerate(scenes):
        assert s.family == SPECIES_FAMILY[s.species]
        assert np.array_equal(s.params.gamma, np.zeros(3))
        assert np.array_equal(s.params.theta[0], draws["theta"][i, 0])
        # non-root rows come from the library pose untouched
        assert np.array_equal(s.params.theta[1:], pose_library[s.pose_id][1:])
        assert np.array_equal(s.camera.translation, draws["position"][i])
        assert s.seed == 4 and s.index == i


def test_scene_dict_round_trip(prior, pose_library):
    scene = sample_scene(prior, pose_library, seed=77)
    back = SceneSample.from_dict(scene.to_dict())
    assert np.array_equal(back.params.beta, scene.params.beta)
    assert np.array_equal(back.params.theta, scene.params.theta)
    assert back.species == scene.species and back.family == scene.family
    assert back.pose_id == scene.pose_id and back.seed == scene.seed
    with pytest.raises(ParseError):
        SceneSample.from_dict({"species": "cat"})


def test_sampling_rejects_bad_library(prior):
    with pytest.raises(ValidationError):
        sample_scene_arrays(prior, np.zeros((0, 18, 3)), 1, seed=0)
    with pytest.raises(ValidationError):
        sample_scene_arrays(prior, np.zeros((4, 3)), 1, seed=0)


# ---------------------------------------------------------------------------
# pose library serialization


def test_pose_library_round_trip(tmp_path, pose_library):
    path = tmp_path / "poses.json"
    save_pose_library(pose_library, path)
    back = load_pose_library(path)
    assert np.array_equal(back, pose_library)


def test_pose_library_save_shape_errors(tmp_path):
    with pytest.raises(ValidationError):
        save_pose_library(np.zeros((4, 3)), tmp_path / "bad.json")
    with pytest.raises(ValidationError):
        save_pose_library(np.zeros((2, 5, 2)), tmp_path / "bad.json")


def test_pose_library_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[[[1.0,")
    with pytest.raises(ParseError):
        load_pose_library(bad)
    ragged = tmp_path / "ragged.json"
    ragged.write_text('[[[1.0, 2.0, 3.0]], [[1.0, 2.0]]]')
    with pytest.raises(ParseError):
        load_pose_library(ragged)
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    with pytest.raises(ValidationError):
        load_pose_library(empty)


# ---------------------------------------------------------------------------
# cycle consistency


def test_cycle_consistency_identical_masks():
    m = np.zeros((8, 8), dtype=bool)
    m[2:5, 3:6] = True
    iou, accepted = cycle_consistency(m, m)
    assert iou == 1.0 and accepted


def test_cycle_consistency_disjoint():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[0, 0] = True
    b[7, 7] = True
    iou, accepted = cycle_consistency(a, b)
    assert iou == 0.0 and not accepted


def test_cycle_consistency_half_shift():
    # equal-area strips shifted by half their width: IoU = 1/3
    a = np.zeros((4, 12), dtype=bool)
    b = np.zeros((4, 12), dtype=bool)
    a[:, 0:8] = True
    b[:, 4:12] = True
    iou, accepted = cycle_consistency(a, b)
    assert iou == pytest.approx(1 / 3, abs=1e-12)
    assert not accepted


def test_cycle_consistency_accept_boundary():
    # intersection 4 of union 5 sits exactly on the 0.8 threshold
    a = np.zeros((5, 5), dtype=bool)
    b = np.zeros((5, 5), dtype=bool)
    a[0, :5] = True
    b[0, :4] = True
    iou, accepted = cycle_consistency(a, b)
    assert iou == 0.8 and accepted


def test_cycle_consistency_errors():
    with pytest.raises(ValidationError):
        cycle_consistency(np.zeros((4, 4), dtype=bool), np.zeros((4, 4), dtype=bool))
    with pytest.raises(ValueError):
        cycle_consistency(np.ones((4, 4), dtype=bool), np.ones((4, 5), dtype=bool))


def test_iou_buckets():
    assert iou_bucket(1.0) == "accepted"
    assert iou_bucket(IOU_ACCEPT) == "accepted"
    assert iou_bucket(0.79) == "uncertain"
    assert iou_bucket(IOU_UNCERTAIN) == "uncertain"
    assert iou_bucket(0.59) == "rejected"
    assert iou_bucket(0.0) == "rejected"


# ---------------------------------------------------------------------------
# compositing


def test_composite_selects_per_pixel():
    fg = np.full((4, 4, 3), 255, dtype=np.uint8)
    bg = np.zeros((4, 4, 3), dtype=np.uint8)
    mask = np.indices((4, 4)).sum(axis=0) % 2 == 0
    out = composite_background(fg, mask, bg)
    assert out.dtype == np.uint8
    assert np.array_equal(out[mask], fg[mask])
    assert np.array_equal(out[~mask], bg[~mask])


def test_composite_shape_errors():
    fg = np.zeros((4, 4, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        composite_background(fg, np.zeros((4, 4), dtype=bool),
                             np.zeros((4, 5, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        composite_background(fg, np.zeros((5, 4), dtype=bool), fg)


# ---------------------------------------------------------------------------
# bbox


def test_mask_bbox_pad_and_clamp():
    m = np.zeros((20, 30), dtype=bool)
    m[5:8, 10:14] = True
    assert mask_bbox(m) == (8, 3, 16, 10)
    assert mask_bbox(m, pad=0) == (10, 5, 14, 8)
    edge = np.zeros((10, 10), dtype=bool)
    edge[0:2, 8:10] = True
    assert mask_bbox(edge) == (6, 0, 10, 4)


def test_mask_bbox_empty():
    with pytest.raises(ValidationError):
        mask_bbox(np.zeros((5, 5), dtype=bool))


# ---------------------------------------------------------------------------
# annotation emission


@pytest.fixture(scope="module")
def rendered_scene(template, prior, pose_library):
    # deterministic scene with a healthy on-screen mask
    for seed in range(100):
        scene = sample_scene(prior, pose_library, seed=seed)
        mesh = pose_mesh(template, scene.params)
        cond = rasterize(mesh.vertices, template.faces, scene.camera)
        if cond.mask.sum() > 500:
            return scene, cond
    raise AssertionError("no usable scene found in 100 seeds")


def test_emit_annotation_invariants(template, rendered_scene):
    scene, cond = rendered_scene
    rec = emit_annotation(template, scene, cond, "img/000.png")
    assert rec.has_3d()
    assert rec.image == "img/000.png" and rec.source == "CtrlAni3D"
    assert rec.species == scene.species and rec.family == scene.family
    assert set(np.unique(rec.visibility)).issubset({0, 1})
    x0, y0, x1, y1 = rec.bbox
    h, w = cond.mask.shape
    assert 0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h
    ys, xs = np.nonzero(cond.mask)
    assert x0 <= xs.min() and xs.max() < x1 and y0 <= ys.min() and ys.max() < y1
    vis = rec.visibility.astype(bool)
    assert vis.any()
    for x, y in rec.keypoints2d[vis]:
        assert x0 <= x < x1 and y0 <= y < y1
        assert cond.mask[int(np.floor(y)), int(np.floor(x))]


def test_emit_annotation_replay(template, rendered_scene):
    # reprojecting the stored 3D keypoints reproduces the stored pixels
    scene, cond = rendered_scene
    rec = emit_annotation(template, scene, cond, "img/000.png")
    px, _, ok = project(rec.keypoints3d, rec.camera)
    assert np.allclose(px[ok], rec.keypoints2d[ok], atol=0.5)
    assert np.allclose(px[ok], rec.keypoints2d[ok], atol=1e-9)
    assert np.all(rec.keypoints2d[~ok] == -1.0)


def test_record_round_trip(template, rendered_scene, tmp_path):
    scene, cond = rendered_scene
    rec = emit_annotation(template, scene, cond, "img/000.png")
    path = tmp_path / "rec.json"
    save_record(rec, path)
    back = load_record(path)
    assert back.image == rec.image and back.source == rec.source
    assert back.bbox == rec.bbox
    assert np.array_equal(back.keypoints2d, rec.keypoints2d)
    assert np.array_equal(back.visibility, rec.visibility)
    assert np.array_equal(back.keypoints3d, rec.keypoints3d)
    assert np.array_equal(back.beta, rec.beta)
    assert np.array_equal(back.theta, rec.theta)
    assert np.array_equal(back.gamma, rec.gamma)
    assert np.array_equal(back.camera.translation, rec.camera.translation)


def test_record_without_3d(template, rendered_scene, tmp_path):
    scene, cond = rendered_scene
    rec = emit_annotation(template, scene, cond, "img/000.png")
    d = rec.to_dict()
    for name in ("keypoints3d", "beta", "theta", "gamma"):
        d[name] = None
    flat = AnnotationRecord.from_dict(d)
    assert not flat.has_3d()
    path = tmp_path / "flat.json"
    save_record(flat, path)
    assert not load_record(path).has_3d()


def test_load_record_malformed(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ParseError):
        load_record(bad)
    partial = tmp_path / "partial.json"
    partial.write_text('{"image": "x.png"}')
    with pytest.raises(ParseError):
        load_record(partial)


def test_emit_annotation_empty_mask(template, prior, pose_library):
    scene = sample_scene(prior, pose_library, seed=0)
    empty = rasterize(np.zeros((0, 3)), np.zeros((0, 3), dtype=int), scene.camera)
    with pytest.raises(ValidationError):
        emit_annotation(template, scene, empty, "img/never.png")


# ---------------------------------------------------------------------------
# image files


def test_mask_png_round_trip(tmp_path):
    rng = np.random.default_rng(91)
    mask = rng.random((32, 40)) < 0.3
    path = tmp_path / "m.png"
    save_mask_png(mask, path)
    assert np.array_equal(load_mask_png(path), mask)


def test_rgb_png_round_trip(tmp_path):
    rng = np.random.default_rng(92)
    img = rng.integers(0, 256, size=(16, 24, 3), dtype=np.uint8)
    path = tmp_path / "i.png"
    save_rgb_png(img, path)
    assert np.array_equal(load_rgb_png(path), img)
    with pytest.raises(ValueError):
        save_rgb_png(img.astype(np.float64), path)


def test_pfm_round_trip(tmp_path):
    depth = np.array([
        [1.0, 2.5, np.inf],
        [0.125, 4096.0, 7.75],
    ])
    path = tmp_path / "d.pfm"
    save_pfm(depth, path)
    back = load_pfm(path)
    assert back.shape == depth.shape
    assert np.isinf(back[0, 2])
    finite = np.isfinite(depth)
    assert np.array_equal(back[finite], depth[finite])  # float32-exact values


def test_pfm_sentinel_threshold(tmp_path):
    # values at or above the sentinel reload as +inf, values below survive
    depth = np.array([[DEPTH_SENTINEL, DEPTH_SENTINEL / 2]])
    path = tmp_path / "s.pfm"
    save_pfm(depth, path)
    back = load_pfm(path)
    assert np.isinf(back[0, 0])
    assert np.isfinite(back[0, 1])


def test_pfm_errors(tmp_path):
    path = tmp_path / "d.pfm"
    save_pfm(np.ones((4, 6)), path)
    raw = path.read_bytes()
    truncated = tmp_path / "t.pfm"
    truncated.write_bytes(raw[:-8])
    with pytest.raises(ParseError):
        load_pfm(truncated)
    color = tmp_path / "c.pfm"
    color.write_bytes(b"PF\n4 6\n-1.0\n" + raw[-96:])
    with pytest.raises(ParseError):
        load_pfm(color)
    with pytest.raises(ValueError):
        save_pfm(np.ones((2, 2, 3)), tmp_path / "x.pfm")
