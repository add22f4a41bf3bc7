"""Dual-source attention transformer.

Track embeddings attend over detections through two parallel channels: an
appearance channel (dot-product cross-attention on embeddings) and a pose
channel (a learned scalar readout of per-pair geometry embeddings).  Both
channels are normalized with an extra null column so a row can place mass on
"no detection matches me", and the alpha gate blends the two row-stochastic
matrices:

    A = alpha * S_appearance + (1 - alpha) * S_geometry

All projection matrices (query, key, edge readout, aggregation) are
bias-free; feed-forward blocks and heads carry biases.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import nn
from .config import EngineConfig


@dataclass
class AttentionBundle:
    """Everything one dual-source attention evaluation produced."""

    o_appear: nn.Tensor   # T x D raw appearance logits
    o_edge: nn.Tensor     # T x D raw geometry logits
    s_appear: nn.Tensor   # T x (D+1) row-stochastic
    s_edge: nn.Tensor     # T x (D+1) row-stochastic
    fused: nn.Tensor      # T x (D+1) alpha-gated blend


@dataclass
class FrameForward:
    """Intermediates of one frame's model pass, kept for losses and update."""

    enc_out: nn.Tensor                 # D x d encoded detections
    enc_attn: List[nn.Tensor]          # per encoder stage, D x (D+1)
    edge0: nn.Tensor                   # T x D x d_e initial edge embeddings
    edge_final: nn.Tensor              # T x D x d_e after the last decoder refresh
    bundles: List[AttentionBundle]     # per decoder stage
    decoder_out: nn.Tensor             # T x d, pre-head
    head_out: nn.Tensor                # T x d, track embedding head output
    updated_tracks: nn.Tensor          # T x d, confidence-blended embeddings
    update_gate: np.ndarray            # T blend weights
    match: nn.Tensor                   # D x (T+1) assignment probabilities


def fuse(alpha: float, a: nn.Tensor, b: nn.Tensor) -> nn.Tensor:
    """The alpha gate; written once so every code path shares the exact
    floating-point evaluation order."""
    return nn.add(nn.mul(a, alpha), nn.mul(b, 1.0 - alpha))


def dual_source_attention(e_t, e_d, e_edge, alpha, wq, wk, we, wa):
    """One attention evaluation: returns (track update, bundle).

    e_t: T x d tracks, e_d: D x d detections, e_edge: T x D x d_e.
    """
    d = wq.data.shape[1]
    q = nn.linear(e_t, wq)
    k = nn.linear(e_d, wk)
    o_appear = nn.mul(nn.linear(q, k), 1.0 / np.sqrt(d))        # T x D
    t_count, d_count = o_appear.data.shape
    o_edge = nn.reshape(nn.linear(e_edge, we), (t_count, d_count))
    s_appear = nn.softmax_null(o_appear)
    s_edge = nn.softmax_null(o_edge)
    fused = fuse(alpha, s_appear, s_edge)
    weights = nn.take(fused, (slice(None), slice(0, d_count)))
    delta = nn.linear(nn.matmul(weights, e_d), wa)
    bundle = AttentionBundle(o_appear, o_edge, s_appear, s_edge, fused)
    return delta, bundle


class TrackingModel:
    """Parameter container plus every forward pass of the association engine."""

    def __init__(self, cfg: EngineConfig, seed: int = 0, with_backbone: bool = False):
        self.cfg = cfg
        self.store = nn.ParamStore()
        rng = np.random.default_rng(seed)
        self._init_params(rng, with_backbone)

    # -- parameters --------------------------------------------------------

    def _init_params(self, rng, with_backbone):
        cfg = self.cfg
        d, d_e, hidden = cfg.d, cfg.d_e, cfg.ffn_hidden
        s = self.store

        def ffn_params(prefix, width):
            s.create(f"{prefix}.w1", (hidden, width), rng)
            s.create(f"{prefix}.b1", (hidden,), rng, init="zeros")
            s.create(f"{prefix}.w2", (width, hidden), rng)
            s.create(f"{prefix}.b2", (width,), rng, init="zeros")

        def ln_params(prefix, width):
            s.create(f"{prefix}.g", (width,), rng, init="ones")
            s.create(f"{prefix}.b", (width,), rng, init="zeros")

        for n in range(cfg.n_encoder_stages):
            p = f"encoder.stage{n}"
            s.create(f"{p}.wq", (d, d), rng)
            s.create(f"{p}.wk", (d, d), rng)
            s.create(f"{p}.wa", (d, d), rng)
            ffn_params(f"{p}.ffn", d)
            ln_params(f"{p}.ln1", d)
            ln_params(f"{p}.ln2", d)

        # edge embedding head: 4 geometry features -> d_e, two LN+GELU blocks
        s.create("edge_head.w1", (d_e, 4), rng)
        s.create("edge_head.b1", (d_e,), rng, init="zeros")
        ln_params("edge_head.ln1", d_e)
        s.create("edge_head.w2", (d_e, d_e), rng)
        s.create("edge_head.b2", (d_e,), rng, init="zeros")
        ln_params("edge_head.ln2", d_e)
        s.create("edge_head.w3", (d_e, d_e), rng)
        s.create("edge_head.b3", (d_e,), rng, init="zeros")

        for n in range(cfg.n_decoder_stages):
            p = f"decoder.stage{n}"
            s.create(f"{p}.wq", (d, d), rng)
            s.create(f"{p}.wk", (d, d), rng)
            s.create(f"{p}.we", (1, d_e), rng)
            s.create(f"{p}.wa", (d, d), rng)
            ffn_params(f"{p}.ffn", d)
            ln_params(f"{p}.ln1", d)
            ln_params(f"{p}.ln2", d)
            # per-pair edge refresh: scalar fused logit -> d_e
            s.create(f"{p}.ffn_e.w1", (hidden, 1), rng)
            s.create(f"{p}.ffn_e.b1", (hidden,), rng, init="zeros")
            s.create(f"{p}.ffn_e.w2", (d_e, hidden), rng)
            s.create(f"{p}.ffn_e.b2", (d_e,), rng, init="zeros")

        for head in ("track_head", "new_track_head"):
            s.create(f"{head}.w1", (d, d), rng)
            s.create(f"{head}.b1", (d,), rng, init="zeros")
            ln_params(f"{head}.ln", d)
            s.create(f"{head}.w2", (d, d), rng)
            s.create(f"{head}.b2", (d,), rng, init="zeros")

        # matching layer: own projections, no output linear after the gate
        s.create("match.wq", (d, d), rng)
        s.create("match.wk", (d, d), rng)
        s.create("match.we", (1, d_e), rng)

        # confidence gate over per-stage attention maxima
        s.create("conf.w", (cfg.n_decoder_stages,), rng)
        s.create("conf.b", (1,), rng, init="zeros")

        if with_backbone:
            from .spapde import init_backbone_params

            init_backbone_params(s, cfg, rng)

    # -- building blocks ---------------------------------------------------

    def _ffn(self, x, prefix):
        s = self.store
        return nn.ffn(x, s[f"{prefix}.w1"], s[f"{prefix}.b1"],
                      s[f"{prefix}.w2"], s[f"{prefix}.b2"])

    def _ln(self, x, prefix):
        s = self.store
        return nn.layer_norm(x, s[f"{prefix}.g"], s[f"{prefix}.b"])

    def edge_head(self, raw) -> nn.Tensor:
        """Per-pair geometry MLP, 4 -> d_e, shared across all pairs."""
        s = self.store
        x = nn.as_tensor(raw)
        x = nn.gelu(self._ln(nn.linear(x, s["edge_head.w1"], s["edge_head.b1"]), "edge_head.ln1"))
        x = nn.gelu(self._ln(nn.linear(x, s["edge_head.w2"], s["edge_head.b2"]), "edge_head.ln2"))
        return nn.linear(x, s["edge_head.w3"], s["edge_head.b3"])

    def encoder_forward(self, e_d0):
        """Self-attention stack over detections; no positional encoding.

        Returns (encoded detections, per-stage attention matrices D x (D+1)).
        """
        x = nn.as_tensor(e_d0)
        attn = []
        if x.data.shape[0] == 0:
            return x, [nn.Tensor(np.zeros((0, 1))) for _ in range(self.cfg.n_encoder_stages)]
        s = self.store
        d = self.cfg.d
        for n in range(self.cfg.n_encoder_stages):
            p = f"encoder.stage{n}"
            q = nn.linear(x, s[f"{p}.wq"])
            k = nn.linear(x, s[f"{p}.wk"])
            logits = nn.mul(nn.linear(q, k), 1.0 / np.sqrt(d))
            probs = nn.softmax_null(logits)                      # D x (D+1)
            attn.append(probs)
            weights = nn.take(probs, (slice(None), slice(0, x.data.shape[0])))
            delta = nn.linear(nn.matmul(weights, x), s[f"{p}.wa"])
            x = self._ln(nn.add(x, delta), f"{p}.ln1")
            x = self._ln(nn.add(x, self._ffn(x, f"{p}.ffn")), f"{p}.ln2")
        return x, attn

    def decoder_layer(self, e_t, e_edge, e_d, alpha: float, stage: int):
        """One decoder stage: returns (new e_t, new e_edge, bundle)."""
        s = self.store
        p = f"decoder.stage{stage}"
        delta, bundle = dual_source_attention(
            e_t, e_d, e_edge, alpha,
            s[f"{p}.wq"], s[f"{p}.wk"], s[f"{p}.we"], s[f"{p}.wa"])
        x = self._ln(nn.add(e_t, delta), f"{p}.ln1")
        x = self._ln(nn.add(x, self._ffn(x, f"{p}.ffn")), f"{p}.ln2")

        t_count, d_count = bundle.o_appear.data.shape
        if self.cfg.edge_update_mode == "weights":
            gate_in = nn.take(bundle.fused, (slice(None), slice(0, d_count)))
        else:
            gate_in = fuse(alpha, bundle.o_appear, bundle.o_edge)
        scalar = nn.reshape(gate_in, (t_count, d_count, 1))
        new_edge = nn.ffn(scalar, s[f"{p}.ffn_e.w1"], s[f"{p}.ffn_e.b1"],
                          s[f"{p}.ffn_e.w2"], s[f"{p}.ffn_e.b2"])
        return x, new_edge, bundle

    def decoder_forward(self, e_t, e_edge, e_d, alpha: float):
        bundles = []
        for stage in range(self.cfg.n_decoder_stages):
            e_t, e_edge, bundle = self.decoder_layer(e_t, e_edge, e_d, alpha, stage)
            bundles.append(bundle)
        return e_t, e_edge, bundles

    def _head(self, x, prefix):
        s = self.store
        h = nn.gelu(self._ln(nn.linear(x, s[f"{prefix}.w1"], s[f"{prefix}.b1"]), f"{prefix}.ln"))
        return nn.linear(h, s[f"{prefix}.w2"], s[f"{prefix}.b2"])

    def track_head(self, x) -> nn.Tensor:
        return self._head(x, "track_head")

    def new_track_head(self, x) -> nn.Tensor:
        return self._head(x, "new_track_head")

    def confidence_update(self, bundles, e_t_old, e_t_head):
        """Blend old and proposed embeddings per track, gated by how
        confidently the decoder attended to any detection.

        Returns (blended T x d tensor, gate values as a plain array).
        """
        t_count = e_t_old.data.shape[0]
        if t_count == 0:
            return nn.as_tensor(e_t_old), np.zeros(0)
        maxima = []
        for bundle in bundles:
            d_count = bundle.fused.data.shape[1] - 1
            if d_count == 0:
                maxima.append(nn.Tensor(np.zeros(t_count)))
            else:
                det_cols = nn.take(bundle.fused, (slice(None), slice(0, d_count)))
                maxima.append(nn.reduce_max(det_cols, axis=1))
        stacked = nn.stack(maxima, axis=1)                       # T x n_stages
        gate = nn.sigmoid(nn.linear(stacked, nn.reshape(self.store["conf.w"], (1, -1)),
                                    self.store["conf.b"]))       # T x 1
        keep = nn.add(nn.mul(gate, -1.0), 1.0)
        blended = nn.add(nn.mul(keep, e_t_old), nn.mul(gate, e_t_head))
        return blended, gate.data[:, 0].copy()

    def matching_layer(self, e_t, e_d, e_edge, alpha: float) -> nn.Tensor:
        """Detection-major assignment probabilities, D x (T+1); the last
        column is the no-track probability.  No linear layer after the gate."""
        s = self.store
        d = self.cfg.d
        q = nn.linear(e_d, s["match.wq"])
        k = nn.linear(e_t, s["match.wk"])
        o_appear = nn.mul(nn.linear(q, k), 1.0 / np.sqrt(d))     # D x T
        t_count = e_t.data.shape[0]
        d_count = e_d.data.shape[0]
        o_edge_tm = nn.reshape(nn.linear(e_edge, s["match.we"]), (t_count, d_count))
        o_edge = nn.transpose(o_edge_tm)                         # D x T
        return fuse(alpha, nn.softmax_null(o_appear), nn.softmax_null(o_edge))

    def forward_frame(self, e_t_old, raw_edge, e_d0, alpha: Optional[float] = None) -> FrameForward:
        """Full per-frame pass, from raw detection embeddings and geometry
        features to the assignment matrix.

        e_t_old: T x d track embeddings from the previous frame;
        raw_edge: T x D x 4 geometry features; e_d0: D x d detection
        appearance embeddings.
        """
        alpha = self.cfg.alpha if alpha is None else alpha
        e_t_old = nn.as_tensor(e_t_old)
        enc_out, enc_attn = self.encoder_forward(e_d0)
        edge0 = self.edge_head(raw_edge)
        dec_out, edge_final, bundles = self.decoder_forward(e_t_old, edge0, enc_out, alpha)
        head_out = self.track_head(dec_out)
        updated, gate = self.confidence_update(bundles, e_t_old, head_out)
        match = self.matching_layer(updated, enc_out, edge_final, alpha)
        return FrameForward(
            enc_out=enc_out, enc_attn=enc_attn, edge0=edge0, edge_final=edge_final,
            bundles=bundles, decoder_out=dec_out, head_out=head_out,
            updated_tracks=updated, update_gate=gate, match=match,
        )
