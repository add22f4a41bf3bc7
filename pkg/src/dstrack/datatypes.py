"""Immutable value types shared across the engine.

Everything here is a frozen dataclass; array fields are numpy arrays marked
read-only at construction.  The tracker replaces instances rather than
mutating them.  to_dict/from_dict round-trip through JSON without losing a
single bit (floats serialize via repr, which is exact for float64).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

VISIBILITY_CONF_FLOOR = 0.05


def _frozen_array(x, dtype=np.float64) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not np.isfinite(v):
                raise ValueError("box coordinates must be finite")
        if not (self.x_min < self.x_max):
            raise ValueError("box needs x_min < x_max")
        if not (self.y_min < self.y_max):
            raise ValueError("box needs y_min < y_max")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def to_dict(self) -> dict:
        return {
            "x_min": float(self.x_min),
            "y_min": float(self.y_min),
            "x_max": float(self.x_max),
            "y_max": float(self.y_max),
        }

    @staticmethod
    def from_dict(d: dict) -> "Box":
        return Box(d["x_min"], d["y_min"], d["x_max"], d["y_max"])


@dataclass(frozen=True)
class Pose:
    """K keypoints: (K,2) coordinates, (K,) confidences, (K,) visible flags."""

    coords: np.ndarray
    conf: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        coords = _frozen_array(self.coords)
        conf = _frozen_array(self.conf)
        vis = _frozen_array(self.visible, dtype=bool)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError("pose coords must have shape (K, 2)")
        k = coords.shape[0]
        if conf.shape != (k,) or vis.shape != (k,):
            raise ValueError("pose conf/visible must have shape (K,)")
        if not np.isfinite(coords).all():
            raise ValueError("pose coordinates must be finite")
        if ((conf < 0.0) | (conf > 1.0)).any():
            raise ValueError("pose confidences must lie in [0, 1]")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "conf", conf)
        object.__setattr__(self, "visible", vis)

    @property
    def keypoint_count(self) -> int:
        return self.coords.shape[0]

    def visibility_mask(self) -> np.ndarray:
        """A keypoint counts as present if flagged visible or confidently detected."""
        return self.visible | (self.conf > VISIBILITY_CONF_FLOOR)

    def shifted(self, dx: float, dy: float) -> "Pose":
        return Pose(self.coords + np.array([dx, dy]), self.conf, self.visible)

    def to_dict(self) -> dict:
        return {
            "keypoints": [
                [float(x), float(y), float(c), bool(v)]
                for (x, y), c, v in zip(self.coords, self.conf, self.visible)
            ]
        }

    @staticmethod
    def from_dict(d: dict) -> "Pose":
        rows = d["keypoints"]
        return Pose(
            coords=[[r[0], r[1]] for r in rows],
            conf=[r[2] for r in rows],
            visible=[bool(r[3]) for r in rows],
        )


@dataclass(frozen=True)
class Detection:
    box: Box
    pose: Pose
    score: float = 1.0
    appearance: Optional[np.ndarray] = None      # precomputed embedding, length d
    heatmaps: Optional[np.ndarray] = None        # (K, H, W) unit-interval grids
    crop: Optional[np.ndarray] = None            # (3, H, W) image patch for the backbone

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("detection score must lie in [0, 1]")
        if self.appearance is not None:
            object.__setattr__(self, "appearance", _frozen_array(self.appearance))
        if self.heatmaps is not None:
            hm = _frozen_array(self.heatmaps)
            if hm.ndim != 3 or hm.shape[0] != self.pose.keypoint_count:
                raise ValueError("heatmaps must have shape (K, H, W)")
            object.__setattr__(self, "heatmaps", hm)
        if self.crop is not None:
            object.__setattr__(self, "crop", _frozen_array(self.crop))

    def to_dict(self) -> dict:
        out = {
            "box": self.box.to_dict(),
            "pose": self.pose.to_dict(),
            "score": float(self.score),
        }
        if self.appearance is not None:
            out["appearance"] = [float(v) for v in self.appearance]
        if self.heatmaps is not None:
            out["heatmaps"] = self.heatmaps.tolist()
        if self.crop is not None:
            out["crop"] = self.crop.tolist()
        return out

    @staticmethod
    def from_dict(d: dict) -> "Detection":
        return Detection(
            box=Box.from_dict(d["box"]),
            pose=Pose.from_dict(d["pose"]),
            score=d.get("score", 1.0),
            appearance=d.get("appearance"),
            heatmaps=d.get("heatmaps"),
            crop=d.get("crop"),
        )


@dataclass(frozen=True)
class Track:
    id: int
    embedding: np.ndarray
    last_pose: Pose
    last_box: Box
    frames_since_match: int = 0
    active: bool = True

    def __post_init__(self):
        emb = _frozen_array(self.embedding)
        if not np.isfinite(emb).all():
            raise ValueError("track embedding must be finite")
        if self.frames_since_match < 0:
            raise ValueError("frames_since_match must be non-negative")
        object.__setattr__(self, "embedding", emb)

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "embedding": [float(v) for v in self.embedding],
            "last_pose": self.last_pose.to_dict(),
            "last_box": self.last_box.to_dict(),
            "frames_since_match": int(self.frames_since_match),
            "active": bool(self.active),
        }

    @staticmethod
    def from_dict(d: dict) -> "Track":
        return Track(
            id=d["id"],
            embedding=d["embedding"],
            last_pose=Pose.from_dict(d["last_pose"]),
            last_box=Box.from_dict(d["last_box"]),
            frames_since_match=d["frames_since_match"],
            active=d["active"],
        )
