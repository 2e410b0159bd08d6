"""Skeleton presets and forward kinematics in global segment space.

Each segment's global orientation rotates the offset of its children, so
no parent-relative joint chain is needed. In the N-pose all segment frames
coincide with the world frame (x forward, y left, z up).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import quaternion as Q
from .dataset import atomic_write_text
from .errors import ContractError, ParseError

PRESETS = {"upper9": 9, "full17": 17}


@dataclass
class Skeleton:
    names: list
    parents: np.ndarray  # parent index per segment, -1 for the root
    offsets: np.ndarray  # [S, 3] metres, origin relative to parent origin in the parent frame
    npose: np.ndarray = None  # [S, 4] segment orientation in the N-pose
    tips: dict = field(default_factory=dict)  # name -> [3] end-effector offset in the segment frame

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.offsets = np.asarray(self.offsets, dtype=float)
        S = len(self.names)
        if self.npose is None:
            self.npose = np.tile(Q.IDENTITY, (S, 1))
        self.npose = Q.normalize(np.asarray(self.npose, dtype=float))
        if self.parents.shape != (S,) or self.offsets.shape != (S, 3) or self.npose.shape != (S, 4):
            raise ContractError("skeleton arrays disagree with the segment list")
        if not np.all(np.isfinite(self.offsets)):
            raise ContractError("skeleton offsets must be finite")
        roots = np.flatnonzero(self.parents < 0)
        if roots.tolist() != [0]:
            raise ContractError("skeleton must have a single root at index 0")
        # parents precede children, which also rules out cycles
        if np.any(self.parents[1:] >= np.arange(1, S)):
            raise ContractError("each parent must precede its children")
        self.tips = {k: np.asarray(v, dtype=float) for k, v in self.tips.items()}

    @property
    def n_segments(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ContractError(f"unknown segment {name!r}") from None

    @classmethod
    def from_config(cls, config, preset, height=None):
        """Build from a proportions config (dict or JSON path), scaled by ``height``."""
        if not isinstance(config, dict):
            with open(config) as fh:
                config = json.load(fh)
        if preset not in config:
            raise ContractError(f"preset {preset!r} not in skeleton config")
        height = float(height or config.get("default_height", 1.75))
        if height <= 0:
            raise ContractError("height must be positive")
        layout = config[preset]
        names = [s["name"] for s in layout["segments"]]
        try:
            parents = [-1 if s["parent"] is None else names.index(s["parent"]) for s in layout["segments"]]
        except ValueError as exc:
            raise ParseError(f"skeleton config: {exc}") from None
        offsets = [np.asarray(s["offset"], dtype=float) * height for s in layout["segments"]]
        npose = [s.get("npose", Q.IDENTITY) for s in layout["segments"]]
        tips = {k: np.asarray(v, dtype=float) * height for k, v in layout.get("tips", {}).items()}
        return cls(names, parents, np.array(offsets), np.array(npose, dtype=float), tips)


def default_config():
    return json.loads(resources.files("inertialpose").joinpath("data/skeletons.json").read_text())


def preset(name="upper9", height=None):
    """One of the shipped skeletons: ``upper9`` (9 segments) or ``full17``."""
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return Skeleton.from_config(default_config(), name, height)


def _check(skel, q):
    q = np.asarray(q, dtype=float)
    if q.shape[-2:] != (skel.n_segments, 4):
        raise ContractError(f"expected [..., {skel.n_segments}, 4] orientations, got {q.shape}")
    return q


def local_offsets(skel):
    """Child offsets expressed in the parent's segment frame."""
    out = skel.offsets.copy()
    for i in range(1, skel.n_segments):
        out[i] = Q.rotate(Q.conjugate(skel.npose[skel.parents[i]]), skel.offsets[i])
    return out


def forward_kinematics(skel, q, root=(0.0, 0.0, 0.0)):
    """Segment origin positions ``[..., S, 3]`` from global orientations ``[..., S, 4]``."""
    q = _check(skel, q)
    local = local_offsets(skel)
    pos = np.empty(q.shape[:-1] + (3,))
    pos[..., 0, :] = np.asarray(root, dtype=float)
    for i in range(1, skel.n_segments):
        p = skel.parents[i]
        pos[..., i, :] = pos[..., p, :] + Q.rotate(q[..., p, :], local[i])
    return pos


def tip_positions(skel, q, pos):
    """End-effector positions for segments that declare a tip."""
    out = {}
    for name, off in skel.tips.items():
        i = skel.index(name)
        local = Q.rotate(Q.conjugate(skel.npose[i]), off)
        out[name] = pos[..., i, :] + Q.rotate(q[..., i, :], local)
    return out


def joint_angles(skel, q):
    """Relative rotation ``parent⁻¹ ⊗ child`` per edge, ``[..., S-1, 4]`` ordered by child."""
    q = _check(skel, q)
    child = q[..., 1:, :]
    parent = q[..., skel.parents[1:], :]
    return Q.multiply_raw(Q.conjugate(parent), child)


def bones(skel):
    """(parent, child) index pairs."""
    return [(int(skel.parents[i]), i) for i in range(1, skel.n_segments)]


# ---------------------------------------------------------------------------
# export


def pose_csv(skel, t, q, pos=None):
    """Long-format CSV: ``t,segment,qw,qx,qy,qz,px,py,pz``."""
    q = _check(skel, q)
    if pos is None:
        pos = forward_kinematics(skel, q)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "segment", "qw", "qx", "qy", "qz", "px", "py", "pz"])
    for k, tk in enumerate(np.asarray(t, dtype=float)):
        for i, name in enumerate(skel.names):
            w.writerow([repr(float(tk)), name] + [repr(float(v)) for v in q[k, i]] + [repr(float(v)) for v in pos[k, i]])
    return buf.getvalue()


def write_pose_csv(path, skel, t, q):
    atomic_write_text(path, pose_csv(skel, t, q))


def pose_lines(skel, q):
    """Line segments ``[[x0, y0, z0], [x1, y1, z1]]`` for every bone and tip, per frame."""
    q = _check(skel, q)
    pos = forward_kinematics(skel, q)
    tips = tip_positions(skel, q, pos)
    frames = []
    for k in range(q.shape[0]):
        lines = [[pos[k, p].tolist(), pos[k, c].tolist()] for p, c in bones(skel)]
        lines += [[pos[k, skel.index(n)].tolist(), tips[n][k].tolist()] for n in skel.tips]
        frames.append(lines)
    return frames


def pose_json(skel, t, q):
    doc = {"segments": skel.names, "t": [float(v) for v in t], "frames": pose_lines(skel, q)}
    return json.dumps(doc, sort_keys=True)


def pose_svg(skel, q, frame=0, size=400, view="front"):
    """Orthographic line drawing of one frame (front: y-z plane, side: x-z plane)."""
    lines = pose_lines(skel, np.asarray(q)[frame : frame + 1])[0]
    axes = (1, 2) if view == "front" else (0, 2)
    pts = np.array([p for ln in lines for p in ln])[:, axes]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = 0.9 * size / max(float(np.max(hi - lo)), 1e-9)
    centre = (lo + hi) / 2

    def xy(p):
        u = (p[axes[0]] - centre[0]) * scale + size / 2
        if view == "front":
            u = size - u  # y points left; draw the subject facing the viewer
        v = size / 2 - (p[axes[1]] - centre[1]) * scale
        return f"{u:.3f}", f"{v:.3f}"

    body = []
    for a, b in lines:
        (x1, y1), (x2, y2) = xy(a), xy(b)
        body.append(f'<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="black" stroke-width="3"/>')
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )
