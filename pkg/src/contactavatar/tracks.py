"""Per-frame pose/expression/scale/translation tracks and their JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .morphable import ExpressionParams, PoseParams

TRACKS_FILE_VERSION = 1

# channel groups that alignment may optimize; everything else stays frozen.
# Scale is a separate opt-in channel: a monocular sequence cannot observe
# absolute scale (scene scaling about the camera center is projection-
# invariant), so the estimator-provided scale is trusted by default.
CHANNELS = ("face_global", "face_scale", "face_theta", "face_expr",
            "hand_global", "hand_scale", "hand_theta")
DEFAULT_OPTIMIZE = frozenset({"face_global", "hand_global"})


@dataclass
class FrameTrack:
    face_pose: PoseParams
    face_expr: ExpressionParams
    hand_pose: PoseParams
    optimize: frozenset = DEFAULT_OPTIMIZE

    def copy(self) -> "FrameTrack":
        return FrameTrack(
            face_pose=PoseParams(theta=self.face_pose.theta.copy(),
                                 global_rot=self.face_pose.global_rot.copy(),
                                 global_trans=self.face_pose.global_trans.copy(),
                                 scale=self.face_pose.scale),
            face_expr=ExpressionParams(psi=self.face_expr.psi.copy()),
            hand_pose=PoseParams(theta=self.hand_pose.theta.copy(),
                                 global_rot=self.hand_pose.global_rot.copy(),
                                 global_trans=self.hand_pose.global_trans.copy(),
                                 scale=self.hand_pose.scale),
            optimize=self.optimize)


def _pose_to_doc(p: PoseParams) -> dict:
    return {"theta": p.theta.tolist(), "rot": p.global_rot.tolist(),
            "trans": p.global_trans.tolist(), "scale": p.scale}


def _pose_from_doc(d: dict) -> PoseParams:
    return PoseParams(theta=np.array(d["theta"]), global_rot=np.array(d["rot"]),
                      global_trans=np.array(d["trans"]), scale=float(d["scale"]))


def save_tracks(path, tracks: list[FrameTrack]) -> None:
    doc = {"version": TRACKS_FILE_VERSION, "frames": []}
    for t in tracks:
        doc["frames"].append({
            "face": _pose_to_doc(t.face_pose),
            "face_psi": t.face_expr.psi.tolist(),
            "hand": _pose_to_doc(t.hand_pose),
            "optimize": sorted(t.optimize),
        })
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_tracks(path) -> list[FrameTrack]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != TRACKS_FILE_VERSION:
        raise ValueError(f"unsupported tracks file version {doc.get('version')}")
    out = []
    for fr in doc["frames"]:
        out.append(FrameTrack(
            face_pose=_pose_from_doc(fr["face"]),
            face_expr=ExpressionParams(psi=np.array(fr["face_psi"])),
            hand_pose=_pose_from_doc(fr["hand"]),
            optimize=frozenset(fr["optimize"])))
    return out
