import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinforge.perception import (
    GOAL,
    LOG_COLUMNS,
    OBSTACLE,
    Calibration,
    CameraModel,
    Degenerate,
    Detection2D,
    DetectionLog,
    NoGoalDetected,
    OutOfFrame,
    apply_homography,
    demo_calibration,
    estimate_scene,
    homography_from_corners,
    load_calibration,
    pixel_to_world,
    read_detection_log,
    save_calibration,
    synth_detect,
    world_to_pixel,
)
from twinforge.world import TABLE_Z, BoxObstacle, Scene, SceneDistribution

CALIB = demo_calibration()
UNIT = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
px_x = st.floats(0.0, 330.0)
px_y = st.floats(0.0, 270.0)


def centered_scene():
    # goal and box both near the middle of the demo frame
    cx, cy, _ = pixel_to_world(330.0, 270.0, CALIB)
    box = BoxObstacle((cx + 0.05, cy + 0.08, 0.03), (0.02, 0.025, 0.03))
    return Scene(goal_pos=(cx, cy, TABLE_Z), obstacles=(box,))


def test_pixel_to_world_full_frame_corner():
    assert pixel_to_world(660, 540, Calibration()) == (-0.482, 0.587, 0.025)


def test_pixel_to_world_origin_and_offsets():
    assert pixel_to_world(0, 0, Calibration()) == (0.0, 0.0, 0.025)
    x, y, z = pixel_to_world(330, 270, Calibration(offset_x=0.1, offset_y=-0.2))
    assert (x, y, z) == (pytest.approx(-0.141, abs=1e-12), pytest.approx(0.0935, abs=1e-12), 0.025)


@given(px_x, px_y, px_x, px_y)
def test_pixel_to_world_is_affine(x1, y1, x2, y2):
    f = lambda x, y: np.array(pixel_to_world(x, y, CALIB))  # noqa: E731
    assert np.allclose(f(x1 + x2, y1 + y2), f(x1, y1) + f(x2, y2) - f(0, 0), atol=1e-12)


@given(px_x, px_y)
def test_world_to_pixel_inverts_pixel_to_world(x_p, y_p):
    x, y, _ = pixel_to_world(x_p, y_p, CALIB)
    assert np.allclose(world_to_pixel(x, y, CALIB), (x_p, y_p), atol=1e-9)


def test_out_of_frame():
    with pytest.raises(OutOfFrame):
        pixel_to_world(661, 10, CALIB)
    with pytest.raises(OutOfFrame):
        pixel_to_world(10, -1, CALIB)


def test_homography_identity_and_translation():
    assert np.allclose(homography_from_corners(UNIT, UNIT), np.eye(3), atol=1e-12)
    H = homography_from_corners(UNIT, [(x + 3.0, y - 2.0) for x, y in UNIT])
    assert np.allclose(H, [[1, 0, 3], [0, 1, -2], [0, 0, 1]], atol=1e-12)


def test_homography_recovers_random_projective_map():
    rng = np.random.default_rng(0)
    done = 0
    while done < 50:
        H = np.eye(3) + rng.normal(scale=[[0.3, 0.3, 1.0], [0.3, 0.3, 1.0], [0.1, 0.1, 0.0]])
        dst = apply_homography(H, UNIT)
        try:
            got = homography_from_corners(UNIT, dst)
        except Degenerate:
            continue  # the sampled map folded the square
        assert np.allclose(got, H / H[2, 2], atol=1e-9)
        assert np.allclose(apply_homography(got, UNIT), dst, atol=1e-9)
        done += 1


def test_homography_rejects_collinear_corners():
    with pytest.raises(Degenerate):
        homography_from_corners([(0, 0), (1, 0), (2, 0), (0, 1)], UNIT)
    with pytest.raises(Degenerate):
        homography_from_corners([(0, 0), (1, 1), (1, 0), (0, 1)], UNIT)  # self-intersecting


def test_camera_calibration_rectifies_corners():
    cam = CameraModel(corners=((20.0, 15.0), (640.0, 30.0), (650.0, 520.0), (5.0, 530.0)))
    calib = cam.calibrate()
    frame = [(0, 0), (660, 0), (660, 540), (0, 540)]
    assert np.allclose(apply_homography(calib.homography, cam.corners), frame, atol=1e-9)


def test_calibration_validation_and_file_round_trip(tmp_path):
    with pytest.raises(ValueError):
        Calibration(homography=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Calibration(px_total_x=0.0)
    save_calibration(CALIB, tmp_path / "calib.json")
    again = load_calibration(tmp_path / "calib.json")
    assert again.to_dict() == CALIB.to_dict()


def test_noiseless_round_trip_reconstructs_scenes():
    dist = SceneDistribution()
    rng = np.random.default_rng(1)
    cam = CameraModel()
    for seed in range(50):
        truth = dist.sample(np.random.default_rng(seed))
        est = estimate_scene(synth_detect(truth, cam, CALIB, rng), CALIB, truth.workspace_bounds)
        assert np.max(np.abs(est.goal_pos - truth.goal_pos)) <= 1e-9
        assert len(est.obstacles) == len(truth.obstacles)
        for a, b in zip(est.obstacles, truth.obstacles):
            assert np.max(np.abs(a.center - b.center)) <= 1e-9
            assert np.max(np.abs(a.half_extents - b.half_extents)) <= 1e-9


def test_full_false_negative_rate_sees_nothing():
    cam = CameraModel(false_negative_rate=1.0)
    assert synth_detect(centered_scene(), cam, CALIB, np.random.default_rng(0)) == []


def position_error_std(sigma, trials=10_000, seed=0):
    scene = centered_scene()
    cam = CameraModel(sigma_px=sigma)
    rng = np.random.default_rng(seed)
    errs = np.empty((trials, 2))
    for i in range(trials):
        goal = synth_detect(scene, cam, CALIB, rng)[0]
        x, y, _ = pixel_to_world(goal.x, goal.y, CALIB)
        errs[i] = (x - scene.goal_pos[0], y - scene.goal_pos[1])
    return errs.std(axis=0)


def test_pixel_noise_propagates_through_the_mapping():
    expected = 2.0 * np.array(CALIB.meters_per_px)
    assert np.allclose(position_error_std(2.0), expected, rtol=0.1)


def test_position_error_scales_linearly_with_noise():
    stds = np.array([position_error_std(s, trials=4000, seed=int(s))[0] for s in (1.0, 2.0, 4.0)])
    slope = stds / np.array([1.0, 2.0, 4.0])
    assert np.allclose(slope, CALIB.meters_per_px[0], rtol=0.1)


def test_highest_confidence_goal_wins():
    dets = [Detection2D(GOAL, 100, 100, 5, 5, 0.02, 0.6), Detection2D(GOAL, 200, 300, 5, 5, 0.02, 0.9)]
    scene = estimate_scene(dets, CALIB)
    assert np.allclose(scene.goal_pos, pixel_to_world(200, 300, CALIB))


def test_missing_goal_raises():
    with pytest.raises(NoGoalDetected):
        estimate_scene([Detection2D(OBSTACLE, 100, 100, 20, 20, 0.05)], CALIB)


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection2D("cat", 1, 1, 1, 1, 0.1)
    with pytest.raises(ValueError):
        Detection2D(GOAL, 1, 1, 1, 1, 0.1, confidence=1.5)
    with pytest.raises(ValueError):
        CameraModel(false_negative_rate=2.0)


def test_detection_log_round_trip():
    dets = synth_detect(centered_scene(), CameraModel(sigma_px=1.0), CALIB, np.random.default_rng(3))
    buf = io.StringIO()
    log = DetectionLog(buf)
    log.write(0, dets)
    log.write(4, dets[:1])
    assert buf.getvalue().splitlines()[0].split(",") == LOG_COLUMNS
    frames = read_detection_log(io.StringIO(buf.getvalue()))
    assert frames == {0: dets, 4: dets[:1]}


@settings(max_examples=30)
@given(st.floats(0.0, 0.3), st.floats(0.0, 0.3))
def test_objects_outside_frame_are_not_seen(dx, dy):
    # frame spans x in [offset - ratio, offset] and y in [offset, offset + ratio]
    goal = (CALIB.offset_x + 0.01 + dx, CALIB.offset_y + 0.1 + dy, TABLE_Z)
    scene = Scene(goal_pos=goal, obstacles=(), workspace_bounds=((-1, -1, 0), (2, 2, 1)))
    assert synth_detect(scene, CameraModel(), CALIB, np.random.default_rng(0)) == []
