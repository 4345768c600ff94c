"""Reconstruction state: images, features, matches, tracks and 3D points."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .geometry import CameraIntrinsics, CameraPose, normalized_plane_coords

log = logging.getLogger(__name__)


@dataclass
class Image:
    image_id: int
    name: str
    camera: CameraIntrinsics
    keypoints: np.ndarray  # (n, 2) pixels
    pose: CameraPose | None = None
    registered: bool = False
    prior: CameraPose | None = None
    point_ids: np.ndarray = None  # feature -> scene point id, -1 if none

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        if self.point_ids is None:
            self.point_ids = np.full(len(self.keypoints), -1, dtype=np.int64)
        self.normalized = normalized_plane_coords(self.camera, self.keypoints)


@dataclass
class ScenePoint:
    position: np.ndarray
    track: list = field(default_factory=list)  # [(image_id, feature_index)]
    correspondence: object = None  # PlaneCorrespondence or None
    error: float = 0.0  # last mean reprojection error, pixels
    lidar_init: bool = False
    rounds: int = 0  # optimisations applied so far


class SceneStore:
    """Mutable bookkeeping for one reconstruction.

    Feature tracks are the connected components of the match graph; each
    component yields at most one scene point, which keeps tracks exclusive.
    """

    def __init__(self):
        self.images: dict[int, Image] = {}
        self.names: dict[str, int] = {}
        self.matches: dict[tuple[int, int], np.ndarray] = {}
        self.points: dict[int, ScenePoint] = {}
        self._next_point = 0
        self._comp = None
        self.comp_point: dict[int, int] = {}

    # -- construction ------------------------------------------------------

    def add_image(self, name, camera, keypoints):
        iid = len(self.images)
        self.images[iid] = Image(iid, name, camera, keypoints)
        self.names[name] = iid
        self._comp = None
        return iid

    def add_matches(self, a, b, pairs):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if a == b:
            raise ValueError("self matches are not allowed")
        if a > b:
            a, b, pairs = b, a, pairs[:, ::-1]
        na, nb = len(self.images[a].keypoints), len(self.images[b].keypoints)
        if len(pairs) and (pairs[:, 0].max() >= na or pairs[:, 1].max() >= nb or pairs.min() < 0):
            raise ValueError(f"match index out of range for pair {a}-{b}")
        prev = self.matches.get((a, b))
        self.matches[(a, b)] = pairs if prev is None else np.vstack([prev, pairs])
        self._comp = None

    def num_matches(self, a, b):
        key = (a, b) if a < b else (b, a)
        m = self.matches.get(key)
        return 0 if m is None else len(m)

    def neighbors(self, iid, min_matches):
        """Image ids sharing at least ``min_matches`` matches with ``iid``."""
        out = []
        for (a, b), m in self.matches.items():
            if len(m) >= min_matches:
                if a == iid:
                    out.append(b)
                elif b == iid:
                    out.append(a)
        return sorted(out)

    # -- feature tracks ----------------------------------------------------

    def _build_components(self):
        offsets = {}
        total = 0
        for iid in sorted(self.images):
            offsets[iid] = total
            total += len(self.images[iid].keypoints)
        parent = np.arange(total)

        def find(x):
            root = x
            while parent[root] != root:
                root = parent[root]
            while parent[x] != root:
                parent[x], x = root, parent[x]
            return root

        for (a, b) in sorted(self.matches):
            for fa, fb in self.matches[(a, b)]:
                ra, rb = find(offsets[a] + fa), find(offsets[b] + fb)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        roots = np.array([find(i) for i in range(total)], dtype=np.int64)
        self._offsets = offsets
        self._comp = roots
        members = {}
        for iid in sorted(self.images):
            o = offsets[iid]
            for f in range(len(self.images[iid].keypoints)):
                members.setdefault(int(roots[o + f]), []).append((iid, f))
        self._members = members

    def component(self, iid, feat):
        if self._comp is None:
            self._build_components()
        return int(self._comp[self._offsets[iid] + feat])

    def component_members(self, comp):
        if self._comp is None:
            self._build_components()
        return self._members[comp]

    def point_of_feature(self, iid, feat):
        pid = int(self.images[iid].point_ids[feat])
        return pid if pid >= 0 else None

    def component_point(self, iid, feat):
        """Scene point already reconstructed for the feature's track, if any."""
        return self.comp_point.get(self.component(iid, feat))

    # -- points ------------------------------------------------------------

    def add_point(self, position, track, lidar_init=False):
        pid = self._next_point
        self._next_point += 1
        pt = ScenePoint(np.asarray(position, dtype=float).copy(), [], lidar_init=lidar_init)
        self.points[pid] = pt
        comp = self.component(*track[0])
        self.comp_point[comp] = pid
        for iid, f in track:
            self.add_observation(pid, iid, f)
        return pid

    def add_observation(self, pid, iid, feat):
        img = self.images[iid]
        if img.point_ids[feat] >= 0:
            raise ValueError(f"feature {feat} of image {iid} already in a track")
        if any(i == iid for i, _ in self.points[pid].track):
            raise ValueError(f"point {pid} already observed by image {iid}")
        img.point_ids[feat] = pid
        self.points[pid].track.append((iid, feat))

    def remove_observation(self, pid, iid, feat):
        self.images[iid].point_ids[feat] = -1
        self.points[pid].track.remove((iid, feat))

    def delete_point(self, pid):
        pt = self.points.pop(pid)
        for iid, f in pt.track:
            self.images[iid].point_ids[f] = -1
        for comp, p in list(self.comp_point.items()):
            if p == pid:
                del self.comp_point[comp]

    def registered_ids(self):
        return [i for i in sorted(self.images) if self.images[i].registered]

    def registered_track_length(self, pid):
        return sum(1 for iid, _ in self.points[pid].track if self.images[iid].registered)

    def visible_points(self, iid):
        """Feature indices of ``iid`` whose track already has a scene point not yet seen by ``iid``."""
        img = self.images[iid]
        feats, pids = [], []
        seen = set()
        for f in range(len(img.keypoints)):
            if img.point_ids[f] >= 0:
                continue
            pid = self.component_point(iid, f)
            if pid is None or pid in seen:
                continue
            if any(i == iid for i, _ in self.points[pid].track):
                continue
            seen.add(pid)
            feats.append(f)
            pids.append(pid)
        return np.array(feats, dtype=np.int64), np.array(pids, dtype=np.int64)


# -- text formats ------------------------------------------------------------


def read_features(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 2:
                raise ParseError(f"expected 'x y', got {line!r}", line=lineno)
            try:
                rows.append((float(tok[0]), float(tok[1])))
            except ValueError:
                raise ParseError(f"non-numeric feature {line!r}", line=lineno) from None
    return np.array(rows, dtype=float).reshape(-1, 2)


def write_features(path, keypoints):
    with open(path, "w") as fh:
        for x, y in keypoints:
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def _is_int(s):
    try:
        int(s)
    except ValueError:
        return False
    return True


def read_matches(path):
    """Parse ``IMAGE_A IMAGE_B`` blocks of ``idxA idxB`` lines -> {(a, b): (k, 2)}."""
    out = {}
    current = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 2:
                raise ParseError(f"expected two tokens, got {line!r}", line=lineno)
            if _is_int(tok[0]) and _is_int(tok[1]):
                if current is None:
                    raise ParseError("match indices before any image pair header", line=lineno)
                out[current].append((int(tok[0]), int(tok[1])))
            else:
                current = (tok[0], tok[1])
                out.setdefault(current, [])
    return {k: np.array(v, dtype=np.int64).reshape(-1, 2) for k, v in out.items()}


def write_matches(path, matches):
    with open(path, "w") as fh:
        for (a, b), pairs in matches.items():
            fh.write(f"{a} {b}\n")
            for i, j in pairs:
                fh.write(f"{int(i)} {int(j)}\n")
            fh.write("\n")


def read_poses(path):
    """Parse ``name qw qx qy qz tx ty tz`` lines into an ordered dict of poses."""
    poses = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 8:
                raise ParseError(f"expected 8 fields, got {len(tok)}", line=lineno)
            try:
                vals = np.array([float(v) for v in tok[1:]])
            except ValueError:
                raise ParseError("non-numeric pose field", line=lineno) from None
            if not np.all(np.isfinite(vals)) or np.linalg.norm(vals[:4]) == 0:
                raise ParseError("invalid pose values", line=lineno)
            poses[tok[0]] = CameraPose(vals[:4], vals[4:])
    return poses


def write_poses(path, poses):
    with open(path, "w") as fh:
        for name, pose in poses.items():
            vals = list(pose.q) + list(pose.t)
            fh.write(name + " " + " ".join(repr(float(v)) for v in vals) + "\n")


def load_known_poses(scene, path):
    """Attach pose priors from ``path``; returns (count loaded, unknown names)."""
    poses = read_poses(path)
    unknown = []
    count = 0
    for name, pose in poses.items():
        iid = scene.names.get(name)
        if iid is None:
            unknown.append(name)
            log.warning("known-poses file names unknown image %r", name)
            continue
        scene.images[iid].prior = pose
        count += 1
    return count, unknown


def load_dataset(scene, features_dir, matches_path, camera):
    """Populate ``scene`` from a features directory and a matches file."""
    names = sorted(f[:-4] for f in os.listdir(features_dir) if f.endswith(".txt"))
    for name in names:
        scene.add_image(name, camera, read_features(os.path.join(features_dir, name + ".txt")))
    for (a, b), pairs in read_matches(matches_path).items():
        if a not in scene.names or b not in scene.names:
            log.warning("matches reference unknown images %s %s", a, b)
            continue
        scene.add_matches(scene.names[a], scene.names[b], pairs)
    return scene
