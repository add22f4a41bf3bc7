"""Online per-frame association and track lifecycle.

step() is the single entry point: it runs the frame through the attention
model, solves the assignment, filters duplicate detections, updates every
track embedding, opens tracks for unexplained detections and retires tracks
that have gone unmatched too long.  State is threaded functionally: step
returns a fresh TrackerState and never mutates its input.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import nn
from .config import EngineConfig
from .datatypes import Detection, Track
from .geometry import edge_features
from .transformer import FrameForward, TrackingModel

LOG_EPS = 1e-12
FORBIDDEN_COST = 1e9


@dataclass
class FrameResult:
    """Where every detection of one frame went, plus closed track ids."""

    assignments: List[Tuple[int, int]] = field(default_factory=list)  # (det idx, track id)
    duplicates: List[int] = field(default_factory=list)
    new_tracks: List[Tuple[int, int]] = field(default_factory=list)   # (det idx, track id)
    closed_tracks: List[int] = field(default_factory=list)

    def detection_partition(self, n_detections: int) -> bool:
        """True when every detection index lands in exactly one bucket."""
        seen = ([i for i, _ in self.assignments] + list(self.duplicates)
                + [i for i, _ in self.new_tracks])
        return sorted(seen) == list(range(n_detections))


@dataclass
class TrackerState:
    tracks: List[Track] = field(default_factory=list)
    next_id: int = 0
    frame_index: int = -1


def hungarian(cost: np.ndarray) -> List[Tuple[int, int]]:
    """Minimum-cost one-to-one assignment of min(n, m) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def assign_and_filter(match: np.ndarray, tau_dup: float):
    """Partition detections into matched / duplicate / new.

    match: D x (T+1) row-stochastic, last column = no-match probability.
    Pairs whose probability is dominated by the no-match column are barred
    from assignment.  Detections left over are duplicates when they give
    probability above tau_dup to some track that did receive a match this
    frame, otherwise they start new tracks.

    Returns (matched pairs as (det idx, track idx), duplicate det idxs,
    new det idxs).
    """
    match = np.asarray(match, dtype=np.float64)
    n_det = match.shape[0]
    n_track = match.shape[1] - 1
    if n_det == 0:
        return [], [], []
    if n_track == 0:
        return [], [], list(range(n_det))

    probs = match[:, :n_track]
    null_col = match[:, n_track]
    allowed = probs > null_col[:, None]
    cost = -np.log(probs + LOG_EPS)
    cost[~allowed] = FORBIDDEN_COST

    matched = [(i, j) for i, j in hungarian(cost) if allowed[i, j]]
    matched_dets = {i for i, _ in matched}
    matched_tracks = sorted({j for _, j in matched})

    duplicates, new = [], []
    for i in range(n_det):
        if i in matched_dets:
            continue
        if matched_tracks and probs[i, matched_tracks].max() > tau_dup:
            duplicates.append(i)
        else:
            new.append(i)
    return matched, duplicates, new


def _detection_embeddings(dets: Sequence[Detection], model: TrackingModel) -> nn.Tensor:
    """Appearance embeddings for a frame: precomputed vectors when present,
    otherwise the pose-modulated backbone on crops."""
    cfg = model.cfg
    if all(d.appearance is not None for d in dets):
        for d in dets:
            if d.appearance.shape != (cfg.d,):
                raise ValueError(
                    f"appearance embedding has length {d.appearance.shape[0]}, "
                    f"config expects {cfg.d}")
        return nn.Tensor(np.stack([d.appearance for d in dets]))
    if "backbone.head.w" not in model.store:
        raise RuntimeError(
            "detections lack appearance embeddings and no backbone is configured")
    from .spapde import appearance_embed_batch, render_heatmaps

    crops, heats = [], []
    for d in dets:
        if d.crop is None:
            raise RuntimeError(
                "detections lack appearance embeddings and no backbone is configured"
                if d.appearance is None else "mixed appearance/crop detections")
        crops.append(np.asarray(d.crop, dtype=np.float64))
        if d.heatmaps is not None:
            heats.append(np.asarray(d.heatmaps, dtype=np.float64))
        else:
            # map pose into the crop frame and render
            w = d.box.x_max - d.box.x_min
            h = d.box.y_max - d.box.y_min
            coords = d.pose.coords.copy()
            coords[:, 0] = (coords[:, 0] - d.box.x_min) / w * cfg.crop_width
            coords[:, 1] = (coords[:, 1] - d.box.y_min) / h * cfg.crop_height
            pose = dataclasses.replace(d.pose, coords=coords)
            heats.append(render_heatmaps(pose, cfg.crop_height, cfg.crop_width,
                                         cfg.heatmap_kernel_width))
    return appearance_embed_batch(np.stack(crops), np.stack(heats), model.store, cfg)


def _age_and_close(tracks: Sequence[Track], matched_ids: set, tau_age: int):
    """Apply per-frame aging; returns (surviving tracks, closed ids)."""
    survivors, closed = [], []
    for t in tracks:
        if t.id in matched_ids:
            survivors.append(t)
            continue
        aged = dataclasses.replace(t, frames_since_match=t.frames_since_match + 1,
                                   active=False)
        if aged.frames_since_match > tau_age:
            closed.append(aged.id)
        else:
            survivors.append(aged)
    return survivors, closed


def step(state: TrackerState, detections: Sequence[Detection],
         model: TrackingModel, alpha: Optional[float] = None,
         ) -> Tuple[FrameResult, TrackerState, Optional[FrameForward]]:
    """Advance the tracker by one frame.

    Returns (FrameResult, new state, FrameForward or None).  The forward
    intermediates are returned so training and diagnostics can reuse them;
    plain tracking can ignore the third element.
    """
    cfg = model.cfg
    tracks = state.tracks
    frame_index = state.frame_index + 1

    if len(detections) == 0:
        survivors, closed = _age_and_close(tracks, set(), cfg.tau_age)
        result = FrameResult(closed_tracks=closed)
        return result, TrackerState(survivors, state.next_id, frame_index), None

    e_d0 = _detection_embeddings(detections, model)
    raw = edge_features(tracks, detections, cfg)
    e_t_old = np.stack([t.embedding for t in tracks]) if tracks else np.zeros((0, cfg.d))
    fwd = model.forward_frame(e_t_old, raw, e_d0, alpha)

    matched, dup_idx, new_idx = assign_and_filter(fwd.match.data, cfg.tau_dup)

    next_id = state.next_id
    result = FrameResult(duplicates=list(dup_idx))
    updated = fwd.updated_tracks.data

    new_tracks: List[Track] = []
    track_by_pos = {}
    for pos, t in enumerate(tracks):
        track_by_pos[pos] = t

    matched_ids = set()
    for det_idx, track_pos in matched:
        old = track_by_pos[track_pos]
        det = detections[det_idx]
        new_tracks.append(dataclasses.replace(
            old,
            embedding=updated[track_pos],
            last_pose=det.pose,
            last_box=det.box,
            frames_since_match=0,
            active=True,
        ))
        matched_ids.add(old.id)
        result.assignments.append((det_idx, old.id))

    # unmatched existing tracks keep their confidence-blended embedding
    unmatched_existing = [
        dataclasses.replace(track_by_pos[pos], embedding=updated[pos])
        for pos in range(len(tracks)) if track_by_pos[pos].id not in matched_ids
    ]

    if new_idx:
        fresh_embed = model.new_track_head(
            nn.take(fwd.enc_out, (np.asarray(new_idx),))).data
        for row, det_idx in enumerate(new_idx):
            det = detections[det_idx]
            new_tracks.append(Track(
                id=next_id, embedding=fresh_embed[row], last_pose=det.pose,
                last_box=det.box, frames_since_match=0, active=True))
            result.new_tracks.append((det_idx, next_id))
            next_id += 1

    survivors, closed = _age_and_close(unmatched_existing, set(), cfg.tau_age)
    result.closed_tracks = closed
    all_tracks = sorted(new_tracks + survivors, key=lambda t: t.id)
    return result, TrackerState(all_tracks, next_id, frame_index), fwd


def run_sequence(frames: Sequence[Sequence[Detection]], model: TrackingModel,
                 alpha: Optional[float] = None):
    """Track a whole sequence; yields (frame index, FrameResult, state)."""
    state = TrackerState()
    for idx, dets in enumerate(frames):
        result, state, _ = step(state, dets, model, alpha)
        yield idx, result, state
