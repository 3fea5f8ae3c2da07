"""Attention-guided head suppression.

For every text query token we rank the heads of a layer by how much
attention they pay to the vision span (pre-softmax logit mass by default),
keep the top K = H - round(r*H) heads intact, and scale every other head's
attention output by the suppression factor alpha. Masks are recomputed
fresh for every query position, so the suppressed subset is dynamic.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from typing import IO

import numpy as np

from .engine import PromptLayout, _softmax
from .errors import ConfigError, SpanError

STRATEGIES = ("image_attention", "total_attention", "query_norm", "key_norm")
APPLY_MODES = ("all_text_queries", "generated_text_queries_only")

if hasattr(np, "vecdot"):
    _row_dots = np.vecdot  # one dispatch on the decode hot path
else:
    def _row_dots(a, b):
        return (a * b).sum(axis=-1)


@dataclass(frozen=True)
class SpinConfig:
    strategy: str = "image_attention"
    r: float = 0.0
    alpha: float = 0.0
    layer_lo: int = 1  # inclusive, 1-indexed
    layer_hi: int = 1
    apply_to: str = "all_text_queries"
    post_softmax: bool = False  # experimental: rank by post-softmax vision mass

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"spin.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.r < 1.0:
            raise ConfigError(f"spin.r must be in [0, 1), got {self.r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"spin.alpha must be in [0, 1], got {self.alpha}")
        if not 1 <= self.layer_lo <= self.layer_hi:
            raise ConfigError(
                f"spin.layer_range must satisfy 1 <= lo <= hi, got [{self.layer_lo}, {self.layer_hi}]"
            )
        if self.apply_to not in APPLY_MODES:
            raise ConfigError(f"spin.apply_to must be one of {APPLY_MODES}, got {self.apply_to!r}")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "r": self.r,
            "alpha": self.alpha,
            "layer_range": [self.layer_lo, self.layer_hi],
            "apply_to": self.apply_to,
            "post_softmax": self.post_softmax,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpinConfig":
        d = dict(d)
        lo, hi = d.pop("layer_range", (1, 1))
        known = {"strategy", "r", "alpha", "apply_to", "post_softmax"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"spin config has unknown keys: {sorted(extra)}")
        return cls(layer_lo=int(lo), layer_hi=int(hi), **d)


def kept_count(r: float, n_heads: int) -> int:
    """K = H - round(r*H) with half rounded up, clamped to [1, H]."""
    suppressed = math.floor(r * n_heads + 0.5)
    return min(n_heads, max(1, n_heads - suppressed))


def top_k_heads(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores; ties keep the lower head index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.sort(order[:k])


def score_heads_image_attention(
    q: np.ndarray, keys: np.ndarray, i_start: int, i_end: int
) -> np.ndarray:
    """Per-head cumulated query-to-vision-key logit mass.

    q is (H, d_head) for one query token, keys is (H, S, d_head) covering
    the cached context; the score of head i is sum_j q_i . k_ij over the
    vision span only, with no softmax and no 1/sqrt(d_k) scaling.
    """
    if keys.shape[1] < i_end:
        raise SpanError(f"vision span end {i_end} outside cached context of {keys.shape[1]} rows")
    if not 0 <= i_start < i_end:
        raise SpanError(f"bad vision span [{i_start}, {i_end})")
    kv = keys[:, i_start:i_end]  # (H, Nv, dk)
    return np.einsum("hd,hsd->h", q, kv.astype(np.float32))


def score_heads_alternative(strategy: str, q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Norm- and total-attention alternatives to image-attention ranking."""
    if strategy == "query_norm":
        return np.sqrt(np.sum(np.square(q), axis=-1))
    if strategy == "key_norm":
        norms = np.sqrt(np.sum(np.square(keys), axis=-1))  # (H, S)
        return norms.mean(axis=1)
    if strategy == "total_attention":
        return np.einsum("hd,hsd->h", q, keys)
    raise ConfigError(f"unknown head scoring strategy {strategy!r}")


def build_mask(scores: np.ndarray, config: SpinConfig, layer: int) -> np.ndarray:
    """Per-head multipliers for one layer and one query position.

    `layer` is 1-indexed. Outside the configured layer range the mask is
    all ones; inside it the K highest-scoring heads get exactly 1 and the
    rest exactly alpha.
    """
    n_heads = len(scores)
    if not config.layer_lo <= layer <= config.layer_hi:
        return np.ones(n_heads, dtype=np.float32)
    k = kept_count(config.r, n_heads)
    order = np.argsort(-np.asarray(scores), kind="stable")
    mask = np.full(n_heads, config.alpha, dtype=np.float32)
    mask[order[:k]] = 1.0
    return mask


class MaskTraceWriter:
    """Streams per-step masks as JSONL: one meta line, then one line per
    (query position, in-range layer). Thread safe."""

    def __init__(self, fh: IO[str], n_layers: int, n_heads: int, config: SpinConfig):
        self._fh = fh
        self._lock = threading.Lock()
        meta = {"n_layers": n_layers, "n_heads": n_heads, "spin": config.to_dict()}
        fh.write(json.dumps({"meta": meta}) + "\n")

    def write(self, position: int, layer: int, mask: np.ndarray) -> None:
        line = json.dumps({"pos": int(position), "layer": int(layer), "mask": [float(m) for m in mask]})
        with self._lock:
            self._fh.write(line + "\n")

    def close(self) -> None:
        self._fh.close()


class SpinPolicy:
    """Mask policy plugged into the engine (the per-layer suppression hook).

    Pure function of the step context: safe to share across concurrent
    generation streams. Query rows are only maskable once the full vision
    span is behind them (pos >= i_end), which also keeps scoring causal
    during batched prefill; vision positions always get all-ones masks.
    """

    def __init__(
        self,
        config: SpinConfig,
        n_layers: int,
        n_heads: int,
        trace: MaskTraceWriter | None = None,
    ):
        if config.layer_hi > n_layers:
            raise ConfigError(
                f"spin.layer_range [{config.layer_lo}, {config.layer_hi}] exceeds n_layers {n_layers}"
            )
        self.config = config
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.trace = trace
        self._kept = kept_count(config.r, n_heads)
        self._alpha = float(np.float32(config.alpha))

    def _scores(
        self, q: np.ndarray, keys: np.ndarray, positions: np.ndarray, layout: PromptLayout
    ) -> np.ndarray:
        """Vectorized scores (T, H) for a batch of query rows; each row only
        sees keys at its own position or earlier."""
        cfg = self.config
        T, H, dk = q.shape
        S = keys.shape[1]
        qh = q.transpose(1, 0, 2)  # (H, T, dk)
        if cfg.strategy == "image_attention":
            if cfg.post_softmax:
                logits = np.matmul(qh, keys.transpose(0, 2, 1)) * np.float32(1.0 / math.sqrt(dk))
                logits[:, np.arange(S)[None, :] > positions[:, None]] = -np.inf
                w = _softmax(logits)
                return w[:, :, layout.i_start : layout.i_end].sum(axis=2).T
            kv = keys[:, layout.i_start : layout.i_end]
            return np.matmul(qh, kv.transpose(0, 2, 1)).sum(axis=2).T
        if cfg.strategy == "total_attention":
            logits = np.matmul(qh, keys.transpose(0, 2, 1))  # (H, T, S)
            allowed = np.arange(S)[None, :] <= positions[:, None]
            return np.where(allowed[None], logits, np.float32(0.0)).sum(axis=2).T
        if cfg.strategy == "query_norm":
            return np.sqrt(np.sum(np.square(q), axis=-1))
        # key_norm: causal running mean of key L2 norms
        norms = np.sqrt(np.sum(np.square(keys), axis=-1))  # (H, S)
        cum = np.cumsum(norms, axis=1) / np.arange(1, S + 1, dtype=np.float32)[None, :]
        return cum[:, positions].T

    def _floor(self, layout: PromptLayout) -> int:
        if self.config.apply_to == "generated_text_queries_only":
            return max(layout.i_end, layout.prompt_len)
        return layout.i_end

    def __call__(
        self,
        layer_index: int,
        q: np.ndarray,
        cache,
        positions: np.ndarray,
        layout: PromptLayout,
    ) -> np.ndarray | None:
        layer = layer_index + 1
        cfg = self.config
        if not cfg.layer_lo <= layer <= cfg.layer_hi:
            return None
        if q.shape[0] == 1:  # decode hot path: one query row, all keys visible
            pos = int(positions[0])
            if pos < self._floor(layout):
                return None
            if cfg.strategy == "image_attention" and not cfg.post_softmax:
                # the span's keys are frozen once cached, so score against
                # their memoized sum: sum_j q.k_j == q.(sum_j k_j)
                ksum = cache.key_span_sum(layer_index, layout.i_start, layout.i_end)
                scores = _row_dots(q[0], ksum).tolist()
            else:
                scores = self._scores(q, cache.keys(layer_index), positions, layout)[0].tolist()
            # top-K with the (-score, index) tie rule, in plain python: for a
            # handful of heads this dodges a pile of per-call numpy dispatch
            order = sorted(range(self.n_heads), key=lambda i: (-scores[i], i))
            row = [self._alpha] * self.n_heads
            for i in order[: self._kept]:
                row[i] = 1.0
            mask = np.array(row, dtype=np.float32)
            if self.trace is not None:
                self.trace.write(pos, layer, mask)
            return mask[None, :]
        rows = positions >= self._floor(layout)
        if not rows.any():
            return None
        masks = np.ones((len(positions), self.n_heads), dtype=np.float32)
        idx = np.flatnonzero(rows)
        scores = self._scores(q[idx], cache.keys(layer_index), positions[idx], layout)
        for t, row in enumerate(idx):
            masks[row] = build_mask(scores[t], self.config, layer)
            if self.trace is not None:
                self.trace.write(int(positions[row]), layer, masks[row])
        return masks
