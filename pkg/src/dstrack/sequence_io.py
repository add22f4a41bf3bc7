"""File formats: sequence JSON, per-frame result JSONL, loss-curve CSV.

A sequence file is a single JSON document holding ordered frames of
detections.  Detections may carry an identity label (for evaluation and
training) and a precomputed appearance vector (standing in for a backbone).
Frames may flag some detection indices as injected duplicates; those are
distractors, not ground-truth instances.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .datatypes import Detection
from .tracker import FrameResult

SCHEMA_VERSION = 1

_KNOWN_TOP = {"schema_version", "sequence_id", "fps", "frames"}
_KNOWN_FRAME = {"index", "image_size", "detections", "duplicates"}
_KNOWN_DET = {"box", "pose", "score", "appearance", "heatmaps", "crop", "identity"}


@dataclass
class SequenceFrame:
    index: int
    image_size: Tuple[int, int]                  # (height, width)
    detections: List[Detection] = field(default_factory=list)
    identities: List[Optional[int]] = field(default_factory=list)
    duplicates: Tuple[int, ...] = ()             # indices of injected distractors

    def __post_init__(self):
        if len(self.identities) != len(self.detections):
            raise ValueError("one identity slot per detection required")


@dataclass
class SequenceFile:
    sequence_id: str
    fps: float
    frames: List[SequenceFrame] = field(default_factory=list)

    def keypoint_count(self) -> Optional[int]:
        for fr in self.frames:
            for det in fr.detections:
                return det.pose.keypoint_count
        return None

    def detection_frames(self) -> List[List[Detection]]:
        return [list(fr.detections) for fr in self.frames]


def _frame_to_dict(fr: SequenceFrame) -> dict:
    dets = []
    for det, ident in zip(fr.detections, fr.identities):
        d = det.to_dict()
        if ident is not None:
            d["identity"] = int(ident)
        dets.append(d)
    out = {
        "index": int(fr.index),
        "image_size": [int(fr.image_size[0]), int(fr.image_size[1])],
        "detections": dets,
    }
    if fr.duplicates:
        out["duplicates"] = [int(i) for i in fr.duplicates]
    return out


def save_sequence(seq: SequenceFile, path: str) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "sequence_id": seq.sequence_id,
        "fps": float(seq.fps),
        "frames": [_frame_to_dict(fr) for fr in seq.frames],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _warn_unknown(found: dict, known: set, where: str) -> None:
    extra = sorted(set(found) - known)
    if extra:
        warnings.warn(f"ignoring unknown field(s) {extra} in {where}")


def load_sequence(path: str) -> SequenceFile:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"malformed JSON: {e}") from e
    if not isinstance(doc, dict) or "frames" not in doc:
        raise ValueError("sequence file needs a top-level frames list")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unrecognized schema version {version}")
    _warn_unknown(doc, _KNOWN_TOP, "sequence header")

    frames: List[SequenceFrame] = []
    last_index = None
    kp_count = None
    for fd in doc["frames"]:
        _warn_unknown(fd, _KNOWN_FRAME, f"frame {fd.get('index')}")
        index = int(fd["index"])
        if last_index is not None and index <= last_index:
            raise ValueError("non-monotone frame index")
        last_index = index
        dets: List[Detection] = []
        idents: List[Optional[int]] = []
        for dd in fd.get("detections", []):
            _warn_unknown(dd, _KNOWN_DET, f"detection in frame {index}")
            det = Detection.from_dict(dd)
            if kp_count is None:
                kp_count = det.pose.keypoint_count
            elif det.pose.keypoint_count != kp_count:
                raise ValueError("inconsistent keypoint count")
            dets.append(det)
            idents.append(dd.get("identity"))
        size = fd.get("image_size", [0, 0])
        frames.append(SequenceFrame(
            index=index,
            image_size=(int(size[0]), int(size[1])),
            detections=dets,
            identities=idents,
            duplicates=tuple(int(i) for i in fd.get("duplicates", [])),
        ))
    return SequenceFile(
        sequence_id=str(doc.get("sequence_id", "")),
        fps=float(doc.get("fps", 0.0)),
        frames=frames,
    )


# ---------------------------------------------------------------------------
# tracker results

def result_to_dict(frame_index: int, res: FrameResult) -> dict:
    return {
        "frame": int(frame_index),
        "assignments": [[int(d), int(t)] for d, t in res.assignments],
        "duplicates": [int(d) for d in res.duplicates],
        "new_tracks": [[int(d), int(t)] for d, t in res.new_tracks],
        "closed_tracks": [int(t) for t in res.closed_tracks],
    }


def result_from_dict(d: dict) -> Tuple[int, FrameResult]:
    res = FrameResult(
        assignments=[(a, b) for a, b in d["assignments"]],
        duplicates=list(d["duplicates"]),
        new_tracks=[(a, b) for a, b in d["new_tracks"]],
        closed_tracks=list(d["closed_tracks"]),
    )
    return int(d["frame"]), res


def write_results_jsonl(frame_results: Sequence[Tuple[int, FrameResult]], path: str) -> None:
    with open(path, "w") as fh:
        for frame_index, res in frame_results:
            fh.write(json.dumps(result_to_dict(frame_index, res), sort_keys=True))
            fh.write("\n")


def read_results_jsonl(path: str) -> List[Tuple[int, FrameResult]]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(result_from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ValueError(f"malformed JSON: {e}") from e
    return out


# ---------------------------------------------------------------------------
# loss curves

def write_loss_csv(rows, path: str) -> None:
    """One row per iteration: iteration, match loss, per-stage attention
    losses, total."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if rows:
            n_enc = len(rows[0].enc)
            n_dec = len(rows[0].dec)
            header = (["iteration", "match"]
                      + [f"enc{k}" for k in range(n_enc)]
                      + [f"dec{k}" for k in range(n_dec)]
                      + ["total"])
            writer.writerow(header)
        for r in rows:
            writer.writerow([r.iteration, repr(r.match)]
                            + [repr(v) for v in r.enc]
                            + [repr(v) for v in r.dec]
                            + [repr(r.total)])
