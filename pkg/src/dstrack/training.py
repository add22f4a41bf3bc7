"""Losses, ground-truth identity labeling, optimizer, and the toy trainer.

The trainer unrolls the tracker over sub-sequences of three frames with
teacher-forced track states: associations between frames come from ground
truth, only embeddings flow through the model.  Gradients propagate through
a whole sub-sequence and are cut between sub-sequences.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .config import EngineConfig, kappa_array
from .datatypes import Box, Detection, Pose
from .geometry import edge_features, oks_triplet
from .transformer import TrackingModel

PROB_EPS = 1e-12
GREEDY_OKS_FLOOR = 0.3

# training-schedule values used in the original full-scale setup, kept for
# reference and for configs that want them; the toy defaults below are tuned
# for 200-iteration runs on synthetic data
FULL_SCALE_LR = 1e-4
FULL_SCALE_WARMUP_ITERS = 16000
FULL_SCALE_DECAY_FACTOR = 10

TOY_LR = 3e-3
TOY_WARMUP_ITERS = 10
TOY_DECAY_AT = 150
TOY_DECAY_FACTOR = 10

DUPLICATE_PROB = 0.3
DUPLICATE_SCALE_JITTER = 0.05
DUPLICATE_SHIFT_JITTER = 3.0


# ---------------------------------------------------------------------------
# identity labels

@dataclass
class IdentityLabels:
    """Ground-truth identity of each detection (None = unlabeled)."""

    det_identity: List[Optional[int]]

    def groups(self) -> Dict[int, List[int]]:
        """identity -> detection indices sharing it (duplicate groups)."""
        out: Dict[int, List[int]] = {}
        for i, ident in enumerate(self.det_identity):
            if ident is not None:
                out.setdefault(ident, []).append(i)
        return out


def greedy_identity_assignment(det_poses: Sequence[Pose], gt_poses: Sequence[Pose],
                               gt_ids: Sequence[int], gt_boxes: Sequence[Box],
                               kappas, floor: float = GREEDY_OKS_FLOOR) -> IdentityLabels:
    """Label detections by repeatedly taking the globally best detection/gt
    pair by shared-keypoint OKS, above a floor.  Each gt is used once, each
    detection at most once."""
    kappas = np.asarray(kappas, dtype=np.float64)
    n_det, n_gt = len(det_poses), len(gt_poses)
    labels: List[Optional[int]] = [None] * n_det
    if n_det == 0 or n_gt == 0:
        return IdentityLabels(labels)
    sim = np.zeros((n_det, n_gt))
    for i, dp in enumerate(det_poses):
        for j, (gp, gb) in enumerate(zip(gt_poses, gt_boxes)):
            sim[i, j] = oks_triplet(dp, gp, gb, kappas)[0]
    sim = sim.copy()
    while True:
        i, j = np.unravel_index(np.argmax(sim), sim.shape)
        if sim[i, j] <= floor:
            break
        labels[i] = gt_ids[j]
        sim[i, :] = -np.inf
        sim[:, j] = -np.inf
    return IdentityLabels(labels)


# ---------------------------------------------------------------------------
# losses

def loss_match(match: nn.Tensor, det_identity: Sequence[Optional[int]],
               track_identity: Sequence[Optional[int]],
               linear_null_term: bool = False) -> nn.Tensor:
    """Cross-entropy on the assignment matrix (detections x tracks+null).

    A labeled detection whose identity appears in the track set is pushed
    toward that track's column, every other detection toward the null
    column.  linear_null_term switches the null term from -log(p) to -p, the
    uncommon linear form.
    """
    n_det = match.data.shape[0]
    n_track = match.data.shape[1] - 1
    if n_det == 0:
        return nn.Tensor(np.zeros(()))
    track_col = {ident: j for j, ident in enumerate(track_identity) if ident is not None}
    terms = []
    for i in range(n_det):
        ident = det_identity[i]
        col = track_col.get(ident, n_track) if ident is not None else n_track
        p = nn.clip(match[i, col], PROB_EPS, 1.0)
        if linear_null_term and col == n_track:
            terms.append(p)
        else:
            terms.append(nn.log(p))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nn.mul(total, -1.0 / n_det)


def loss_attn(attn: nn.Tensor, row_groups: Sequence[Sequence[int]]) -> nn.Tensor:
    """Duplicate-aware cross-entropy on one attention matrix.

    attn: R x (C+1) row-stochastic; row_groups[r] lists the columns whose
    probability mass should jointly explain row r.  An empty group routes
    the row to the null column.
    """
    rows = attn.data.shape[0]
    n_cols = attn.data.shape[1] - 1
    if rows == 0:
        return nn.Tensor(np.zeros(()))
    if len(row_groups) != rows:
        raise ValueError("one column group required per attention row")
    terms = []
    for r, group in enumerate(row_groups):
        if len(group):
            p = attn[r, np.asarray(group)]
            p = nn.reduce_sum(p)
        else:
            p = attn[r, n_cols]
        terms.append(nn.log(nn.clip(p, PROB_EPS, 1.0)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nn.mul(total, -1.0 / rows)


def total_loss(match_term: nn.Tensor, enc_terms: Sequence[nn.Tensor],
               dec_terms: Sequence[nn.Tensor]) -> nn.Tensor:
    out = match_term
    for t in list(enc_terms) + list(dec_terms):
        out = out + t
    return out


def _sq_dist(a: nn.Tensor, b: nn.Tensor) -> nn.Tensor:
    d = a - b
    return nn.reduce_sum(d * d)


def triplet_loss(anchor, pos, neg, margin: float = 0.3) -> nn.Tensor:
    """Hinge on Euclidean distances: max(0, margin + d(a,p) - d(a,n))."""
    d_pos = nn.sqrt(_sq_dist(nn.as_tensor(anchor), nn.as_tensor(pos)) + 1e-12)
    d_neg = nn.sqrt(_sq_dist(nn.as_tensor(anchor), nn.as_tensor(neg)) + 1e-12)
    return nn.relu(d_pos - d_neg + margin)


def center_loss(embeds: nn.Tensor, ids: Sequence[int], centers: nn.Tensor) -> nn.Tensor:
    """Mean squared distance of each embedding to its class center."""
    ids = np.asarray(ids, dtype=np.int64)
    picked = centers[ids]
    diff = nn.as_tensor(embeds) - picked
    return nn.reduce_mean(nn.reduce_sum(diff * diff, axis=1))


def ce_label_smooth(logits: nn.Tensor, target: int, smooth: float = 0.1) -> nn.Tensor:
    """Cross-entropy with a label-smoothed target distribution."""
    logits = nn.as_tensor(logits)
    n = logits.data.shape[-1]
    shift = logits - nn.Tensor(np.array(logits.data.max()))
    logz = nn.log(nn.reduce_sum(nn.exp(shift)))
    logp = shift - logz
    q = np.full(n, smooth / n)
    q[target] += 1.0 - smooth
    return nn.mul(nn.reduce_sum(nn.mul(logp, q)), -1.0)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class LrSchedule:
    lr: float = TOY_LR
    warmup_iters: int = TOY_WARMUP_ITERS
    decay_at: Optional[int] = TOY_DECAY_AT
    decay_factor: float = TOY_DECAY_FACTOR

    def at(self, it: int) -> float:
        lr = self.lr
        if self.warmup_iters > 0:
            lr *= min(1.0, (it + 1) / self.warmup_iters)
        if self.decay_at is not None and it >= self.decay_at:
            lr /= self.decay_factor
        return lr


class AdamW:
    """Decoupled-weight-decay adaptive-moments optimizer."""

    def __init__(self, store: nn.ParamStore, schedule: LrSchedule,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.store = store
        self.schedule = schedule
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in store.items()}

    def step(self):
        lr = self.schedule.at(self.step_count)
        self.step_count += 1
        t = self.step_count
        for name, param in self.store.items():
            g = param.grad
            if g is None:
                continue
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            param.data = param.data - lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * param.data
            )


# ---------------------------------------------------------------------------
# toy trainer

@dataclass
class LabeledFrame:
    detections: List[Detection]
    identities: List[Optional[int]]


@dataclass
class LossRow:
    iteration: int
    match: float
    enc: Tuple[float, ...]
    dec: Tuple[float, ...]
    total: float


def inject_duplicate(frame: LabeledFrame, rng: np.random.Generator,
                     prob: float = DUPLICATE_PROB) -> LabeledFrame:
    """With the configured probability, append a jittered copy of one labeled
    detection, sharing its identity."""
    labeled = [i for i, ident in enumerate(frame.identities) if ident is not None]
    if not labeled or rng.uniform() >= prob:
        return frame
    src_idx = int(rng.choice(labeled))
    src = frame.detections[src_idx]
    scale = 1.0 + rng.uniform(-DUPLICATE_SCALE_JITTER, DUPLICATE_SCALE_JITTER)
    dx, dy = rng.uniform(-DUPLICATE_SHIFT_JITTER, DUPLICATE_SHIFT_JITTER, size=2)
    cx = (src.box.x_min + src.box.x_max) / 2 + dx
    cy = (src.box.y_min + src.box.y_max) / 2 + dy
    w = (src.box.x_max - src.box.x_min) * scale
    h = (src.box.y_max - src.box.y_min) * scale
    box = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    center = np.array([(src.box.x_min + src.box.x_max) / 2,
                       (src.box.y_min + src.box.y_max) / 2])
    coords = (src.pose.coords - center) * scale + np.array([cx, cy])
    pose = Pose(coords=coords, conf=src.pose.conf, visible=src.pose.visible)
    dup = dataclasses.replace(src, box=box, pose=pose)
    return LabeledFrame(
        detections=list(frame.detections) + [dup],
        identities=list(frame.identities) + [frame.identities[src_idx]],
    )


@dataclass
class _TeacherTrack:
    identity: int
    pose: Pose
    box: Box


def _frame_labels(frame: LabeledFrame, cfg: EngineConfig) -> IdentityLabels:
    """Recover detection identities by greedy OKS matching against the
    frame's own labeled poses (canonical detections, duplicates excluded),
    then copy identities onto injected duplicates by index."""
    canonical = {}
    for i, ident in enumerate(frame.identities):
        if ident is not None and ident not in canonical:
            canonical[ident] = i
    gt_ids = list(canonical)
    gt_poses = [frame.detections[canonical[g]].pose for g in gt_ids]
    gt_boxes = [frame.detections[canonical[g]].box for g in gt_ids]
    labels = greedy_identity_assignment(
        [d.pose for d in frame.detections], gt_poses, gt_ids, gt_boxes,
        kappa_array(cfg))
    # injected duplicates carry their identity explicitly; trust the metadata
    merged = list(labels.det_identity)
    for i, ident in enumerate(frame.identities):
        if ident is not None:
            merged[i] = ident
    return IdentityLabels(merged)


def _encoder_groups(labels: IdentityLabels) -> List[List[int]]:
    groups = labels.groups()
    out = []
    for i, ident in enumerate(labels.det_identity):
        out.append(groups[ident] if ident is not None else [i])
    return out


def _detection_matrix(frame: LabeledFrame, cfg: EngineConfig) -> np.ndarray:
    embeds = []
    for d in frame.detections:
        if d.appearance is None:
            raise ValueError("toy training expects precomputed appearance vectors")
        embeds.append(d.appearance)
    return np.stack(embeds) if embeds else np.zeros((0, cfg.d))


def labeled_frames(seq) -> List[LabeledFrame]:
    """Adapt a loaded sequence file (anything with .frames carrying
    .detections/.identities) to the trainer's input."""
    return [LabeledFrame(list(fr.detections), list(fr.identities))
            for fr in seq.frames]


def subsequences(n_frames: int, length: int = 3, overlap: int = 1):
    """Start indices of length-3 windows overlapping by one frame."""
    step = length - overlap
    starts = list(range(0, max(n_frames - length + 1, 1), step))
    return [s for s in starts if s + length <= n_frames] or ([0] if n_frames >= length else [])


def train_toy(sequences: Sequence[Sequence[LabeledFrame]], cfg: EngineConfig,
              seed: int = 0, n_iters: int = 200,
              schedule: Optional[LrSchedule] = None,
              model: Optional[TrackingModel] = None,
              duplicate_prob: float = DUPLICATE_PROB,
              ) -> Tuple[TrackingModel, List[LossRow]]:
    """Train the association model on labeled sequences.

    Each iteration draws one 3-frame window, teacher-forces track states
    through it, accumulates the matching and attention losses of both
    transitions (plus encoder losses on every frame), and takes one
    optimizer step.  Returns the model and the per-iteration loss curve.
    """
    rng = np.random.default_rng(seed)
    model = model or TrackingModel(cfg, seed=seed)
    opt = AdamW(model.store, schedule or LrSchedule())

    windows = [(si, start) for si, seq in enumerate(sequences)
               for start in subsequences(len(seq))]
    if not windows:
        raise ValueError("no trainable 3-frame windows in the given sequences")

    curve: List[LossRow] = []
    order: List[int] = []
    for it in range(n_iters):
        if not order:
            order = list(rng.permutation(len(windows)))
        si, start = windows[order.pop()]
        frames = [inject_duplicate(sequences[si][start + k], rng, duplicate_prob)
                  for k in range(3)]
        row = _train_window(model, opt, frames, cfg, it)
        if not np.isfinite(row.total):
            raise RuntimeError(
                f"non-finite loss at iteration {it} (sequence {si}, frame {start})")
        curve.append(row)
    return model, curve


def _train_window(model: TrackingModel, opt: AdamW, frames: List[LabeledFrame],
                  cfg: EngineConfig, iteration: int) -> LossRow:
    n_enc = cfg.n_encoder_stages
    n_dec = cfg.n_decoder_stages
    enc_acc = [nn.Tensor(np.zeros(()))] * n_enc
    dec_acc = [nn.Tensor(np.zeros(()))] * n_dec
    match_acc = nn.Tensor(np.zeros(()))

    labels0 = _frame_labels(frames[0], cfg)
    e_d0 = _detection_matrix(frames[0], cfg)
    enc_out, enc_attn = model.encoder_forward(e_d0)
    for k in range(n_enc):
        enc_acc[k] = enc_acc[k] + loss_attn(enc_attn[k], _encoder_groups(labels0))

    # teacher-forced initial tracks: one per identity, embedding from the
    # new-track head on the canonical detection's encoded feature
    track_ids: List[int] = []
    teacher: List[_TeacherTrack] = []
    rows = []
    for ident, group in labels0.groups().items():
        det = frames[0].detections[group[0]]
        track_ids.append(ident)
        teacher.append(_TeacherTrack(ident, det.pose, det.box))
        rows.append(group[0])
    e_t = model.new_track_head(nn.take(enc_out, (np.asarray(rows),))) if rows \
        else nn.Tensor(np.zeros((0, cfg.d)))

    for frame in frames[1:]:
        labels = _frame_labels(frame, cfg)
        raw = _teacher_edge_features(teacher, frame.detections, cfg)
        e_d = _detection_matrix(frame, cfg)
        fwd = model.forward_frame(e_t, raw, e_d)

        match_acc = match_acc + loss_match(fwd.match, labels.det_identity, track_ids,
                                           linear_null_term=False)
        groups = labels.groups()
        track_groups = [groups.get(ident, []) for ident in track_ids]
        for k in range(n_dec):
            dec_acc[k] = dec_acc[k] + loss_attn(fwd.bundles[k].fused, track_groups)
        for k in range(n_enc):
            enc_acc[k] = enc_acc[k] + loss_attn(fwd.enc_attn[k], _encoder_groups(labels))

        # teacher-forced state advance
        e_t, track_ids, teacher = _advance_state(model, fwd, frame, labels,
                                                 track_ids, teacher, cfg)

    total = total_loss(match_acc, enc_acc, dec_acc)
    model.store.zero_grad()
    total.backward()
    opt.step()
    model.store.zero_grad()
    return LossRow(
        iteration=iteration,
        match=float(match_acc.data),
        enc=tuple(float(t.data) for t in enc_acc),
        dec=tuple(float(t.data) for t in dec_acc),
        total=float(total.data),
    )


def _teacher_edge_features(teacher: List[_TeacherTrack], dets: List[Detection],
                           cfg: EngineConfig) -> np.ndarray:
    from .datatypes import Track

    pseudo = [Track(id=k, embedding=np.zeros(1), last_pose=t.pose, last_box=t.box)
              for k, t in enumerate(teacher)]
    return edge_features(pseudo, dets, cfg)


def _advance_state(model: TrackingModel, fwd, frame: LabeledFrame,
                   labels: IdentityLabels, track_ids: List[int],
                   teacher: List[_TeacherTrack], cfg: EngineConfig):
    """Ground-truth-matched update: existing tracks adopt their blended
    embedding and the canonical detection geometry; unseen identities open
    teacher-forced new tracks."""
    groups = labels.groups()
    new_track_ids = list(track_ids)
    new_teacher = []
    for pos, ident in enumerate(track_ids):
        group = groups.get(ident, [])
        if group:
            det = frame.detections[group[0]]
            new_teacher.append(_TeacherTrack(ident, det.pose, det.box))
        else:
            new_teacher.append(teacher[pos])
    e_t = fwd.updated_tracks

    fresh_rows = []
    for ident, group in groups.items():
        if ident in track_ids:
            continue
        det = frame.detections[group[0]]
        new_track_ids.append(ident)
        new_teacher.append(_TeacherTrack(ident, det.pose, det.box))
        fresh_rows.append(group[0])
    if fresh_rows:
        fresh = model.new_track_head(nn.take(fwd.enc_out, (np.asarray(fresh_rows),)))
        e_t = nn.concat([e_t, fresh], axis=0)
    return e_t, new_track_ids, new_teacher
