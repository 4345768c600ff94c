import filecmp
import os

import numpy as np
import pytest

from conftest import SMALL_ROOM
from lidarsfm.errors import SpecError
from lidarsfm.ply import read_ply
from lidarsfm.synthetic import generate, load_spec, render_image, synth


def tree_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    for name in cmp.common_files:
        with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
            if fa.read() != fb.read():
                return False
    return all(tree_identical(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def test_dataset_byte_identical(tmp_path):
    spec = SMALL_ROOM + "sigma_px = 0.5\nsigma_map = 0.005\noutlier_rate = 0.05\n"
    synth(spec, 3, str(tmp_path / "a"))
    synth(spec, 3, str(tmp_path / "b"))
    assert tree_identical(tmp_path / "a", tmp_path / "b")
    synth(spec, 4, str(tmp_path / "c"))
    assert not tree_identical(tmp_path / "a", tmp_path / "c")


def test_written_files(tmp_path):
    syn = synth(SMALL_ROOM, 0, str(tmp_path))
    names = sorted(os.listdir(tmp_path))
    assert names == ["features", "map.ply", "matches.txt", "poses_gt.txt", "reconstruct.cfg"]
    cols = read_ply(tmp_path / "map.ply")
    assert list(cols) == ["x", "y", "z", "nx", "ny", "nz"]
    assert len(cols["x"]) == len(syn.lidar_positions)


def test_noise_free_features_are_exact_projections(small_room):
    intr = small_room.intrinsics
    for pose, feats, own in zip(small_room.poses, small_room.features, small_room.feature_landmark):
        pc = pose.transform(small_room.landmarks[own])
        uv = np.column_stack([intr.fx * pc[:, 0] / pc[:, 2] + intr.cx, intr.fy * pc[:, 1] / pc[:, 2] + intr.cy])
        assert np.abs(uv - feats).max() < 1e-9


def test_pixel_noise_level():
    syn = generate(SMALL_ROOM + "sigma_px = 0.5\n", 1)
    d = np.concatenate([f - e for f, e in zip(syn.features, syn.exact_features)]).ravel()
    assert len(d) > 1000
    assert abs(d.std() - 0.5) < 0.05


def test_map_noise_level():
    syn = generate(SMALL_ROOM + "sigma_map = 0.005\n", 2)
    off = np.array([(p - syn.planes[k].origin) @ syn.planes[k].normal
                    for p, k in zip(syn.lidar_positions, syn.lidar_plane)])
    assert abs(off.std() - 0.005) < 0.0005


def test_landmarks_on_planes(small_room):
    for k, pl in enumerate(small_room.planes):
        on = small_room.landmarks[small_room.landmark_plane == k]
        assert np.abs((on - pl.origin) @ pl.normal).max() < 1e-9


def test_outlier_matches_added():
    clean = generate(SMALL_ROOM, 0)
    dirty = generate(SMALL_ROOM + "outlier_rate = 0.2\n", 0)
    for key, pairs in clean.matches.items():
        assert len(dirty.matches[key]) == len(pairs) + round(0.2 * len(pairs))


def test_two_planes_rejected():
    spec = ("plane = 0 0 0 5 0 0 0 5 0\n"
            "plane = 0 0 0 0 5 0 0 0 3\n"
            "camera = 2 2 1 4 4 1\n"
            "camera = 2.5 2 1 4 4 1\n")
    with pytest.raises(SpecError):
        generate(spec, 0)


def test_coplanar_normals_rejected():
    spec = ("plane = 0 0 0 5 0 0 0 5 0\n"
            "plane = 0 0 1 5 0 0 0 5 0\n"
            "plane = 0 0 2 5 0 0 0 5 0\n"
            "camera = 2 2 0.5 4 4 0.5\n"
            "camera = 2.5 2 0.5 4 4 0.5\n")
    with pytest.raises(SpecError):
        generate(spec, 0)


def test_unknown_spec_name():
    with pytest.raises(SpecError):
        load_spec("no_such_scene")


def test_bundled_reference_spec():
    values = load_spec("reference")
    assert values["num_cameras"] == "40" and values["sigma_px"] == "0.5" and values["sigma_map"] == "0.005"


def test_render_image_labels(small_room):
    img = render_image(small_room, small_room.poses[0])
    assert img.shape == (small_room.intrinsics.height, small_room.intrinsics.width, 3)
    # inside a closed room every pixel hits some plane
    assert not np.all(img == 30, axis=2).any()
