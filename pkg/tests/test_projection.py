import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panokit.projection import (
    DEMO_YAWS,
    CameraRig,
    PanoramaSpec,
    PinholeCamera,
    RgbImage,
    RigError,
    panorama_rays,
    pixel_to_ray,
    project_to_camera,
    ring_rig,
    solid_images,
    stitch,
    yaw_pitch_rotation,
)

PALETTE = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (0, 255, 255), (255, 0, 255)]


def textured_images(rig, seed=0):
    rng = np.random.default_rng(seed)
    return [RgbImage(rng.integers(0, 256, (c.height, c.width, 3), dtype=np.uint8)) for c in rig.cameras]


def analytic_owner(theta_deg, yaws, half_fov=45.0):
    """Lowest-priority camera whose horizontal half field of view contains the longitude."""
    for i, yaw in enumerate(yaws):
        rel = (theta_deg - yaw + 180.0) % 360.0 - 180.0
        if abs(rel) < half_fov:
            return i
    return None


# --- rays -----------------------------------------------------------------------


def test_centre_pixel_points_forward():
    spec = PanoramaSpec(1024, 512, -math.pi / 2, math.pi / 2)
    ray = pixel_to_ray(spec, 256, 512)
    step = 2 * math.pi / 1024
    assert np.allclose(ray, [1, 0, 0], atol=step)


def test_first_column_is_back_seam():
    spec = PanoramaSpec(360, 10)
    theta = math.atan2(*pixel_to_ray(spec, 5, 0)[[1, 0]])
    assert theta == pytest.approx(-math.pi + math.pi / 360, abs=1e-12)


@settings(max_examples=1000)
@given(st.integers(0, 255), st.integers(0, 1023))
def test_rays_unit_norm(j, k):
    assert abs(np.linalg.norm(pixel_to_ray(PanoramaSpec(1024, 256), j, k)) - 1) <= 1e-12


def test_ray_bounds():
    with pytest.raises(IndexError):
        pixel_to_ray(PanoramaSpec(8, 4), 4, 0)


def test_vectorised_rays_match_scalar():
    spec = PanoramaSpec(16, 8, -0.3, 0.7)
    rays = panorama_rays(spec)
    for j in range(8):
        for k in range(16):
            assert np.array_equal(rays[j, k], pixel_to_ray(spec, j, k))


# --- projection -----------------------------------------------------------------


def test_optical_axis_hits_principal_point():
    cam = PinholeCamera.looking_at(math.radians(30), math.radians(90), 100, 80)
    axis = [math.cos(math.radians(30)), math.sin(math.radians(30)), 0.0]
    u, v = project_to_camera(cam, axis)
    assert (u, v) == pytest.approx((50.0, 40.0), abs=1e-12)


def test_ray_behind_camera_misses():
    cam = PinholeCamera.looking_at(0.0, math.radians(170), 100, 100)
    assert project_to_camera(cam, [-1.0, 0.0, 0.0]) is None
    assert project_to_camera(cam, [-0.1, 0.995, 0.0]) is None


def test_fov_boundary():
    W = 200
    cam = PinholeCamera.looking_at(0.0, math.radians(90), W, W)
    assert cam.fx == pytest.approx(W / 2)

    def ray(deg):
        a = math.radians(deg)
        return [math.cos(a), math.sin(a), 0.0]

    # leftward rays land near u = 0, rightward near u = W
    u, v = project_to_camera(cam, ray(44.9))
    assert u == pytest.approx(W / 2 - W / 2 * math.tan(math.radians(44.9)), abs=1e-9)
    assert 0 <= u < 1 and v == pytest.approx(W / 2)
    u, _ = project_to_camera(cam, ray(-44.9))
    assert W - 1 < u < W
    assert project_to_camera(cam, ray(45.1)) is None
    assert project_to_camera(cam, ray(-45.1)) is None


def test_projection_equals_plane_intersection():
    # intersect the ray with the tangent plane at distance f along the axis, then express in image axes
    cam = PinholeCamera.looking_at(math.radians(-50), math.radians(80), 120, 90, pitch=math.radians(10))
    rng = np.random.default_rng(3)
    R = cam.rotation
    axis, right, down = R[2], R[0], R[1]
    for _ in range(200):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        hit = project_to_camera(cam, d)
        denom = d @ axis
        if denom <= 1e-6:
            assert hit is None
            continue
        point = d * (cam.fx / denom)  # on the plane {p : p . axis = f}
        u, v = point @ right + cam.cx, point @ down * cam.fy / cam.fx + cam.cy
        inside = 0 <= u < cam.width and 0 <= v < cam.height
        assert (hit is not None) == inside
        if hit is not None:
            assert hit == pytest.approx((u, v), abs=1e-9)


# --- camera / rig validation ------------------------------------------------------


def test_rotation_orthonormal():
    for yaw, pitch in [(0, 0), (1, 0.3), (-2.5, -0.7)]:
        R = yaw_pitch_rotation(yaw, pitch)
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_camera_validation():
    with pytest.raises(RigError, match="orthonormal"):
        PinholeCamera(10, 10, 5, 5, np.diag([1.0, 2.0, 1.0]), 10, 10)
    with pytest.raises(RigError):
        PinholeCamera(-1, 10, 5, 5, np.eye(3), 10, 10)
    with pytest.raises(RigError):
        PinholeCamera(10, 10, 50, 5, np.eye(3), 10, 10)


def test_rig_priorities_contiguous():
    cam = PinholeCamera.looking_at(0, 1.0, 10, 10, priority=1)
    with pytest.raises(RigError):
        CameraRig([cam])


def test_rig_json_round_trip(tmp_path):
    rig = ring_rig(DEMO_YAWS)
    rig.save(tmp_path / "rig.json")
    back = CameraRig.load(tmp_path / "rig.json")
    for a, b in zip(rig.cameras, back.cameras):
        assert np.array_equal(a.rotation, b.rotation) and a.intrinsics.tolist() == b.intrinsics.tolist()


def test_rig_json_errors_name_field():
    good = ring_rig([0.0]).to_json()
    bad = json.loads(json.dumps(good))
    bad["cameras"][0]["rotation"] = [1, 0, 0, 0, 2, 0, 0, 0, 1]
    with pytest.raises(RigError, match=r"cameras\[0\].*orthonormal"):
        CameraRig.from_json(bad)
    del bad["cameras"][0]["fx"]
    with pytest.raises(RigError, match=r"cameras\[0\]\.fx"):
        CameraRig.from_json(bad)


# --- stitching ------------------------------------------------------------------


def test_single_camera_covers_narrow_panorama():
    rig = CameraRig([PinholeCamera.looking_at(0.0, math.radians(90), 32, 32)])
    pano = stitch(rig, solid_images(rig, [(9, 8, 7)]), PanoramaSpec(1, 20, -0.5, 0.5))
    assert (pano.coverage == 0).all() and (pano.pixels == [9, 8, 7]).all()


def test_identical_cameras_credit_priority_zero():
    cams = [PinholeCamera.looking_at(0.3, math.radians(100), 40, 40, priority=p) for p in (1, 0)]
    rig = CameraRig(cams)
    pano = stitch(rig, solid_images(rig, PALETTE[:2]), PanoramaSpec(128, 32))
    covered = pano.coverage != 255
    assert covered.any() and (pano.coverage[covered] == 0).all()


def test_rig_image_mismatch():
    rig = ring_rig([0.0, 90.0])
    with pytest.raises(RigError):
        stitch(rig, solid_images(rig, PALETTE[:1]), PanoramaSpec(16, 8))
    imgs = solid_images(rig, PALETTE[:2])
    imgs[1] = RgbImage(np.zeros((5, 5, 3), np.uint8))
    with pytest.raises(RigError):
        stitch(rig, imgs, PanoramaSpec(16, 8))


@pytest.fixture(scope="module")
def demo_pano():
    rig = ring_rig(DEMO_YAWS)
    spec = PanoramaSpec(1024, 256)
    return rig, spec, stitch(rig, solid_images(rig, PALETTE), spec)


def test_demo_rig_full_band_coverage(demo_pano):
    _, _, pano = demo_pano
    assert (pano.coverage != 255).all()


def test_demo_rig_owner_matches_analytic_priority(demo_pano):
    _, spec, pano = demo_pano
    lon = np.degrees(spec.longitudes())
    expected = np.array([analytic_owner(t, DEMO_YAWS) for t in lon])
    # horizontal extent does not depend on latitude for cameras on the horizon
    assert (pano.coverage == expected[None, :]).all()


def test_demo_rig_seams_at_priority_edges(demo_pano):
    _, spec, pano = demo_pano
    row = pano.coverage[spec.height // 2].astype(int)
    lon = np.degrees(spec.longitudes())
    change = np.nonzero(np.diff(row))[0]
    seams = sorted((lon[c] + lon[c + 1]) / 2 for c in change)
    # higher-priority camera owns its full +-45 degrees
    expected = [-165.0, -105.0, -45.0, 45.0, 105.0, 165.0]
    step = 360 / spec.width
    assert len(seams) == 6
    assert all(abs(a - b) <= step for a, b in zip(seams, expected))


def test_wraparound_continuity(demo_pano):
    _, _, pano = demo_pano
    assert np.array_equal(pano.pixels[:, 0], pano.pixels[:, -1])


def test_stitch_deterministic_across_workers():
    rig = ring_rig(DEMO_YAWS)
    spec = PanoramaSpec(512, 128)
    imgs = textured_images(rig)
    a = stitch(rig, imgs, spec, workers=1)
    b = stitch(rig, imgs, spec, workers=4)
    c = stitch(rig, imgs, spec, workers=1)
    assert a.pixels.tobytes() == b.pixels.tobytes() == c.pixels.tobytes()
    assert a.coverage.tobytes() == b.coverage.tobytes()


def test_no_invented_colours():
    rig = ring_rig(DEMO_YAWS)
    spec = PanoramaSpec(256, 64)
    imgs = textured_images(rig, 1)
    pano = stitch(rig, imgs, spec)
    for j in range(0, 64, 7):
        for k in range(0, 256, 5):
            cam_idx = pano.coverage[j, k]
            u, v = project_to_camera(rig.cameras[cam_idx], pixel_to_ray(spec, j, k))
            assert (pano.pixels[j, k] == imgs[cam_idx].pixels[int(v), int(u)]).all()


@pytest.mark.parametrize("m", [1, 7, -40])
def test_rig_rotation_cyclic_shift(m):
    spec = PanoramaSpec(720, 90)
    step = 360.0 / spec.width
    base_rig = ring_rig(DEMO_YAWS)
    turned = ring_rig([y + m * step for y in DEMO_YAWS])
    a = stitch(base_rig, solid_images(base_rig, PALETTE), spec)
    b = stitch(turned, solid_images(turned, PALETTE), spec)
    assert np.array_equal(b.pixels, np.roll(a.pixels, m, axis=1))
    assert np.array_equal(b.coverage, np.roll(a.coverage, m, axis=1))


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(6)), st.integers(0, 5))
def test_raising_priority_never_shrinks_coverage(order, target):
    spec = PanoramaSpec(180, 45)
    base_yaws = [DEMO_YAWS[i] + 7.0 * i for i in order]

    def region(yaws, cam_yaw):
        rig = ring_rig(yaws, hfov_deg=100.0)
        cov = stitch(rig, solid_images(rig, PALETTE), spec).coverage
        return cov == yaws.index(cam_yaw)

    pos = order.index(target)
    cam_yaw = base_yaws[pos]
    before = region(base_yaws, cam_yaw)
    raised = base_yaws[:]
    raised.insert(max(0, pos - 1), raised.pop(pos))
    after = region(raised, cam_yaw)
    assert (after | ~before).all()
