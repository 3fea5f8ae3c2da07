"""Minimal decoder-only transformer with a per-step head-masking hook.

Architecture: pre-norm residual blocks, RMSNorm, rotary position embedding
on q/k, GELU (tanh approximation) FFN, no biases. Everything runs in
float32 so runs are reproducible bit-for-bit.

The attention layer accepts an optional *mask policy*: a callable invoked
once per layer per forward with the post-rotation query vectors, the
layer's cached keys, and the query positions. It returns one multiplier
per head and query row (or None for all-ones); the multipliers scale each
head's attention output before the final output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ContextOverflowError, DataError
from .model import Checkpoint

# policy(layer_index, q_rot (T,H,dk), cache, positions (T,), layout) -> (T,H) or None
MaskPolicy = Callable[[int, np.ndarray, "KvCache", np.ndarray, "PromptLayout"], Optional[np.ndarray]]
# observer(layer_index, attn_weights (H,S), position) -- decode steps only
AttnObserver = Callable[[int, np.ndarray, int], None]

_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(eps))) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(np.float32(_GELU_C) * (x + np.float32(0.044715) * x * x * x)))


@dataclass(frozen=True)
class PromptLayout:
    """Static facts about one generation stream's token layout."""

    i_start: int
    i_end: int
    prompt_len: int

    @property
    def n_vision(self) -> int:
        return self.i_end - self.i_start


class MultimodalPrompt:
    """Token sequence with a single vision span: [prefix ids][vision][suffix ids].

    Vision positions carry pre-projected embeddings, text positions carry
    token ids. The span is half-open [i_start, i_end) and must be non-empty.
    """

    def __init__(self, prefix_ids, vision: np.ndarray, suffix_ids):
        vision = np.asarray(vision, dtype=np.float32)
        if vision.ndim != 2 or vision.shape[0] < 1:
            raise DataError(f"vision span must be a non-empty 2-D array, got shape {vision.shape}")
        self.prefix_ids = [int(t) for t in prefix_ids]
        self.vision = vision
        self.suffix_ids = [int(t) for t in suffix_ids]
        if any(t < 0 for t in self.prefix_ids + self.suffix_ids):
            raise DataError("token ids must be non-negative")

    @property
    def i_start(self) -> int:
        return len(self.prefix_ids)

    @property
    def i_end(self) -> int:
        return self.i_start + self.vision.shape[0]

    def __len__(self) -> int:
        return len(self.prefix_ids) + self.vision.shape[0] + len(self.suffix_ids)

    def layout(self) -> PromptLayout:
        return PromptLayout(self.i_start, self.i_end, len(self))

    def extended(self, extra_ids) -> "MultimodalPrompt":
        """New prompt with text appended after the suffix (multi-turn contexts)."""
        return MultimodalPrompt(self.prefix_ids, self.vision, self.suffix_ids + list(extra_ids))


class KvCache:
    """Per-layer, per-head key/value rows, preallocated to max_len.

    One cache belongs to exactly one generation stream; `fork` gives an
    independent copy for beam branching.
    """

    def __init__(self, n_layers: int, n_heads: int, d_head: int, max_len: int):
        self.max_len = max_len
        self.k = np.zeros((n_layers, n_heads, max_len, d_head), dtype=np.float32)
        self.v = np.zeros((n_layers, n_heads, max_len, d_head), dtype=np.float32)
        self._len = np.zeros(n_layers, dtype=np.int64)
        self._memo: dict = {}

    @property
    def length(self) -> int:
        """Number of fully processed tokens (min across layers mid-step)."""
        return int(self._len.min())

    @property
    def layer_lengths(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self._len)

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        t = self._len[layer]
        if t >= self.max_len:
            raise ContextOverflowError(f"kv cache full at {self.max_len} rows")
        self.k[layer, :, t] = k
        self.v[layer, :, t] = v
        self._len[layer] += 1

    def extend(self, layer: int, ks: np.ndarray, vs: np.ndarray) -> None:
        """Append a batch of rows; ks/vs are (T, H, d_head)."""
        t = int(self._len[layer])
        n = ks.shape[0]
        if t + n > self.max_len:
            raise ContextOverflowError(f"kv cache overflow: {t}+{n} > {self.max_len}")
        self.k[layer, :, t : t + n] = ks.transpose(1, 0, 2)
        self.v[layer, :, t : t + n] = vs.transpose(1, 0, 2)
        self._len[layer] += n

    def keys(self, layer: int) -> np.ndarray:
        return self.k[layer, :, : self._len[layer]]

    def values(self, layer: int) -> np.ndarray:
        return self.v[layer, :, : self._len[layer]]

    def key_span_sum(self, layer: int, lo: int, hi: int) -> np.ndarray:
        """Per-head sum of key rows [lo, hi), memoized.

        Cached rows are append-only, so once the span is fully present its
        sum never changes; this keeps per-step span scoring O(H*d_head).
        """
        memo_key = (layer, lo, hi)
        hit = self._memo.get(memo_key)
        if hit is None:
            if self._len[layer] < hi:
                raise ContextOverflowError(f"span [{lo}, {hi}) not yet cached at layer {layer}")
            hit = self.k[layer, :, lo:hi].sum(axis=1)
            hit.setflags(write=False)
            self._memo[memo_key] = hit
        return hit

    def fork(self) -> "KvCache":
        c = object.__new__(KvCache)
        c.max_len = self.max_len
        c.k = self.k.copy()
        c.v = self.v.copy()
        c._len = self._len.copy()
        c._memo = dict(self._memo)
        return c


def _softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


class Engine:
    """Inference over one immutable checkpoint; every stream owns its cache."""

    def __init__(self, checkpoint: Checkpoint, rope_base: float = 10000.0):
        self.checkpoint = checkpoint
        self.config = checkpoint.config
        dk = self.config.d_head
        half = dk // 2
        if half:
            j = np.arange(half, dtype=np.float64)
            self._inv_freq = (rope_base ** (-2.0 * j / dk)).astype(np.float32)
        else:
            self._inv_freq = np.zeros(0, dtype=np.float32)
        self._inv_sqrt_dk = np.float32(1.0 / math.sqrt(dk))

    def new_cache(self, max_len: int | None = None) -> KvCache:
        c = self.config
        return KvCache(c.n_layers, c.n_heads, c.d_head, max_len or c.max_seq_len)

    def _rope(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Rotate (T, H, dk) by position; odd trailing dim passes through."""
        half = self._inv_freq.shape[0]
        if half == 0:
            return x
        ang = positions.astype(np.float32)[:, None] * self._inv_freq[None, :]
        cos = np.cos(ang)[:, None, :]
        sin = np.sin(ang)[:, None, :]
        x1 = x[..., :half]
        x2 = x[..., half : 2 * half]
        out = x.copy()
        out[..., :half] = x1 * cos - x2 * sin
        out[..., half : 2 * half] = x2 * cos + x1 * sin
        return out

    def _embed_id(self, token_id: int) -> np.ndarray:
        if not 0 <= token_id < self.config.vocab_size:
            raise DataError(f"token id {token_id} out of range for vocab {self.config.vocab_size}")
        return self.checkpoint["embedding"][token_id]

    def embed_prompt(self, prompt: MultimodalPrompt) -> np.ndarray:
        if prompt.vision.shape[1] != self.config.d_model:
            raise ConfigError(
                f"vision embedding dim {prompt.vision.shape[1]} != d_model {self.config.d_model}"
            )
        rows = [self._embed_id(t) for t in prompt.prefix_ids]
        rows.extend(prompt.vision)
        rows.extend(self._embed_id(t) for t in prompt.suffix_ids)
        return np.stack(rows).astype(np.float32)

    def attention_step(
        self,
        query_state: np.ndarray,
        cache: KvCache,
        layer: int,
        position: int,
        mask: np.ndarray | None = None,
        observer: AttnObserver | None = None,
    ) -> np.ndarray:
        """One query token's masked multi-head attention over all cached rows.

        `query_state` is the pre-norm block input already normalized for
        attention; the query's own k/v row must have been appended first.
        With mask None (or all ones) this is plain MHA.
        """
        c = self.config
        if query_state.shape != (c.d_model,):
            raise ConfigError(
                f"query state shape {query_state.shape} does not match d_model {c.d_model}"
            )
        q = (query_state @ self.checkpoint.layer(layer, "wq")).reshape(c.n_heads, c.d_head)
        q = self._rope(q[None, :, :], np.array([position]))[0]
        return self._attend_one(q, cache, layer, position, mask, observer)

    def _attend_one(
        self,
        q: np.ndarray,
        cache: KvCache,
        layer: int,
        position: int,
        mask: np.ndarray | None,
        observer: AttnObserver | None,
    ) -> np.ndarray:
        K = cache.keys(layer)  # (H, S, dk)
        V = cache.values(layer)
        logits = np.matmul(K, q[:, :, None])[:, :, 0] * self._inv_sqrt_dk  # (H, S)
        w = _softmax(logits)
        if observer is not None:
            observer(layer, w, position)
        ctx = np.matmul(w[:, None, :], V)[:, 0, :]  # (H, dk)
        if mask is not None:
            ctx *= mask[:, None]
        return ctx.reshape(self.config.d_model) @ self.checkpoint.layer(layer, "wo")

    def _project_kv(self, h: np.ndarray, layer: int, positions: np.ndarray):
        c = self.config
        ck = self.checkpoint
        T = h.shape[0]
        k = (h @ ck.layer(layer, "wk")).reshape(T, c.n_heads, c.d_head)
        v = (h @ ck.layer(layer, "wv")).reshape(T, c.n_heads, c.d_head)
        return self._rope(k, positions), v

    def step(
        self,
        token: int | np.ndarray,
        cache: KvCache,
        layout: PromptLayout,
        policy: MaskPolicy | None = None,
        observer: AttnObserver | None = None,
    ) -> np.ndarray:
        """Process one token, appending one row to every layer's cache.

        Returns next-token logits over the vocabulary.
        """
        c = self.config
        pos = cache.length
        if pos + 1 > c.max_seq_len:
            raise ContextOverflowError(f"sequence length {pos + 1} exceeds max_seq_len {c.max_seq_len}")
        x = self._embed_id(token) if isinstance(token, (int, np.integer)) else np.asarray(token, np.float32)
        if x.shape != (c.d_model,):
            raise ConfigError(f"token state shape {x.shape} does not match d_model {c.d_model}")
        positions = np.array([pos])
        ck = self.checkpoint
        for layer in range(c.n_layers):
            h = rmsnorm(x, ck.layer(layer, "attn_norm"))
            q = (h @ ck.layer(layer, "wq")).reshape(1, c.n_heads, c.d_head)
            q = self._rope(q, positions)
            k, v = self._project_kv(h[None, :], layer, positions)
            cache.append(layer, k[0], v[0])
            mask = None
            if policy is not None:
                masks = policy(layer, q, cache, positions, layout)
                if masks is not None:
                    mask = masks[0]
            x = x + self._attend_one(q[0], cache, layer, pos, mask, observer)
            hf = rmsnorm(x, ck.layer(layer, "ffn_norm"))
            x = x + gelu(hf @ ck.layer(layer, "w1")) @ ck.layer(layer, "w2")
        return rmsnorm(x, ck["final_norm"]) @ ck["output"]

    def prefill(
        self,
        prompt: MultimodalPrompt,
        cache: KvCache,
        policy: MaskPolicy | None = None,
        return_all_logits: bool = False,
    ) -> np.ndarray:
        """Process the whole prompt in one batched pass.

        Returns logits for the last position, or for every position when
        `return_all_logits` is set.
        """
        c = self.config
        x = self.embed_prompt(prompt)
        T = x.shape[0]
        base = cache.length
        if base + T > c.max_seq_len:
            raise ContextOverflowError(f"prompt length {base + T} exceeds max_seq_len {c.max_seq_len}")
        positions = base + np.arange(T)
        layout = prompt.layout()
        ck = self.checkpoint
        for layer in range(c.n_layers):
            h = rmsnorm(x, ck.layer(layer, "attn_norm"))
            q = (h @ ck.layer(layer, "wq")).reshape(T, c.n_heads, c.d_head)
            q = self._rope(q, positions)
            k, v = self._project_kv(h, layer, positions)
            cache.extend(layer, k, v)
            K = cache.keys(layer)  # (H, S, dk)
            V = cache.values(layer)
            S = K.shape[1]
            logits = np.matmul(q.transpose(1, 0, 2), K.transpose(0, 2, 1)) * self._inv_sqrt_dk
            future = np.arange(S)[None, :] > positions[:, None]  # (T, S)
            logits[:, future] = -np.inf
            w = _softmax(logits)
            ctx = np.matmul(w, V).transpose(1, 0, 2)  # (T, H, dk)
            if policy is not None:
                masks = policy(layer, q, cache, positions, layout)
                if masks is not None:
                    ctx = ctx * masks[:, :, None]
            x = x + ctx.reshape(T, c.d_model) @ ck.layer(layer, "wo")
            hf = rmsnorm(x, ck.layer(layer, "ffn_norm"))
            x = x + gelu(hf @ ck.layer(layer, "w1")) @ ck.layer(layer, "w2")
        out = rmsnorm(x, ck["final_norm"]) @ ck["output"]
        return out if return_all_logits else out[-1]
