import json

import numpy as np
import pytest

from gazemap.errors import InvalidWarpRange, PointOutsideScene, SchemaError
from gazemap.session import detect_fixations, ingest_gaze_log, load_frames
from gazemap.synth import (
    Event,
    SceneSpec,
    SessionScript,
    case_study_script,
    generate_scene,
    generate_session,
    parse_spec,
    write_outputs,
)

CASE_DWELLS = {"H1": 900.0, "H2": 235.0, "H3": 257.0, "H4": 1148.0, "H5": 1270.0}
IDENTITY = dict(rotation_deg=(0.0, 0.0), scale=(1.0, 1.0), translation_px=(0.0, 0.0), projective=(0.0, 0.0))


@pytest.fixture(scope="module")
def small_scene():
    return generate_scene(SceneSpec(n_views=2))


def test_identity_warps_reproduce_base():
    scene = generate_scene(SceneSpec(n_views=3, **IDENTITY))
    for v in scene.views:
        assert np.array_equal(v.image, scene.base)


def test_pure_translation_shifts_view():
    spec = SceneSpec(n_views=1, **{**IDENTITY, "translation_px": (20.0, 20.0)})
    scene = generate_scene(spec)
    (v,) = scene.views
    # ty is drawn from the same range, so the shift is (20, 20)
    np.testing.assert_allclose(v.h, [[1, 0, 20], [0, 1, 20], [0, 0, 1]], atol=1e-12)
    assert np.array_equal(v.image[:-20, :-20], scene.base[20:, 20:])


def test_horizontal_translation_only():
    spec = SceneSpec(n_views=1, **{**IDENTITY, "translation_px": (20.0, 20.0)})
    scene = generate_scene(spec)
    h = np.array([[1.0, 0, 20], [0, 1, 0], [0, 0, 1]])
    from gazemap.synth import render_view

    view = render_view(scene.base, h)
    assert np.array_equal(view[:, :-20], scene.base[:, 20:])
    assert np.all(view[:, -20:] == 0)


def test_scene_deterministic():
    a, b = generate_scene(SceneSpec(n_views=3, seed=11)), generate_scene(SceneSpec(n_views=3, seed=11))
    assert np.array_equal(a.base, b.base)
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.image, vb.image) and np.array_equal(va.h, vb.h)
    c = generate_scene(SceneSpec(n_views=3, seed=12))
    assert not np.array_equal(a.base, c.base)


def test_invalid_warp_ranges():
    with pytest.raises(InvalidWarpRange):
        generate_scene(SceneSpec(scale=(0.0, 1.0)))
    with pytest.raises(InvalidWarpRange):
        generate_scene(SceneSpec(rotation_deg=(5.0, -5.0)))
    with pytest.raises(InvalidWarpRange):
        generate_scene(SceneSpec(translation_px=(float("nan"), 1.0)))
    with pytest.raises(InvalidWarpRange):
        generate_scene(SceneSpec(aois=(("H1", "", (300.0, 0.0, 400.0, 10.0)),)))


def test_fixate_saccade_fixate_truth(small_scene):
    h1 = small_scene.aois["H1"][1].center
    script = SessionScript((Event("fixate", 400, (h1.x, h1.y)), Event("saccade", 100), Event("fixate", 400, (160.0, 40.0))))
    truth = generate_session(small_scene, script).truth
    assert len(truth["fixations"]) == 2
    assert [(d["aoi_id"], d["duration_ms"]) for d in truth["dwells"]] == [("H1", 400.0)]
    assert truth["fixations"][1]["aoi_id"] is None


def test_off_scene_only(small_scene):
    sess = generate_session(small_scene, SessionScript((Event("off_scene", 1000),)))
    assert sess.truth["fixations"] == [] and sess.truth["dwells"] == []
    assert not sess.gaze_valid.any()
    assert detect_fixations(sess.gaze_t, np.where(sess.gaze_valid[:, None], sess.gaze_xy, np.nan)) == []


def test_gaze_maps_through_view_inverse(small_scene):
    p = (160.0, 120.0)
    script = SessionScript((Event("fixate", 400, p),), noise_px=0.0, frame_noise=0.0)
    sess = generate_session(small_scene, script)
    v = small_scene.views[0]
    from gazemap.geometry import apply_homography

    back = apply_homography(v.h, sess.gaze_xy[sess.gaze_valid])
    np.testing.assert_allclose(back, np.repeat([p], len(back), axis=0), atol=1e-9)
    assert np.array_equal(sess.frames[0], v.image)
    assert sess.truth["n_frames"] == 10 and sess.truth["n_samples"] == 40


def test_case_study_proportions():
    scene = generate_scene(SceneSpec(n_views=2))
    script = case_study_script(scene.spec)
    total = sum(e.duration_ms for e in script.events)
    assert total == pytest.approx(18200.0)
    truth = generate_session(scene, script).truth
    per = truth["aoi_fixation_ms"]
    assert per == CASE_DWELLS
    s, ref = sum(per.values()), sum(CASE_DWELLS.values())
    for a in CASE_DWELLS:
        assert per[a] / s == pytest.approx(CASE_DWELLS[a] / ref, abs=1e-12)
    assert truth["metrics"]["fc"] == 33


def test_point_outside_scene(small_scene):
    with pytest.raises(PointOutsideScene):
        generate_session(small_scene, SessionScript((Event("fixate", 100, (500.0, 10.0)),)))
    with pytest.raises(SchemaError):
        generate_session(small_scene, SessionScript((Event("fixate", 0, (5.0, 5.0)),)))


def test_spec_round_trip(small_scene):
    script = case_study_script(small_scene.spec, seed=3)
    scene2, script2 = parse_spec(json.loads(json.dumps({"scene": small_scene.spec.to_dict(), "script": script.to_dict()})))
    assert scene2 == small_scene.spec and script2 == script
    with pytest.raises(SchemaError):
        parse_spec({"scene": {"bogus": 1}})


def test_outputs_pass_ingestion(tmp_path, small_scene):
    h1 = small_scene.aois["H1"][1].center
    script = SessionScript((Event("fixate", 400, (h1.x, h1.y)), Event("off_scene", 200), Event("fixate", 300, (160.0, 120.0))))
    sess = generate_session(small_scene, script)
    truth = write_outputs(tmp_path, small_scene, sess)
    log = ingest_gaze_log(tmp_path / "gaze.csv")
    assert len(log) == sess.truth["n_samples"]
    assert np.array_equal(log.valid, sess.gaze_valid)
    frames = load_frames(tmp_path / "frames")
    assert len(frames) == sess.truth["n_frames"]
    assert json.loads((tmp_path / "truth.json").read_text())["dwells"] == truth["dwells"]
    assert len(list((tmp_path / "scene" / "refs").glob("*.png"))) == 3
