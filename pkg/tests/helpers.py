"""Shared builders for tiny engines, rigged checkpoints, and stub engines."""

from __future__ import annotations

import numpy as np

from spin_infer.engine import Engine, KvCache, MultimodalPrompt, _softmax
from spin_infer.model import Checkpoint, ModelConfig, init_checkpoint
from spin_infer.prng import SplitMix64


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=4, d_model=32, d_ffn=48, vocab_size=64, max_seq_len=96)
    base.update(kw)
    return ModelConfig(**base)


def tiny_engine(seed: int = 0, **kw) -> Engine:
    return Engine(init_checkpoint(tiny_config(**kw), seed))


def random_prompt(seed: int, config: ModelConfig, n_prefix=2, n_vision=4, n_suffix=3) -> MultimodalPrompt:
    rng = SplitMix64(seed)
    prefix = [rng.choice(config.vocab_size) for _ in range(n_prefix)]
    suffix = [rng.choice(config.vocab_size) for _ in range(n_suffix)]
    vision = (2.0 * rng.uniforms(n_vision * config.d_model) - 1.0).reshape(n_vision, config.d_model)
    return MultimodalPrompt(prefix, vision.astype(np.float32), suffix)


def reference_mha(engine: Engine, query_state, cache: KvCache, layer: int, position: int):
    """Plain multi-head attention with no masking code path; mirrors the
    engine's operation order so outputs must agree bit-for-bit."""
    c = engine.config
    ck = engine.checkpoint
    q = (query_state @ ck.layer(layer, "wq")).reshape(c.n_heads, c.d_head)
    q = engine._rope(q[None, :, :], np.array([position]))[0]
    K = cache.keys(layer)
    V = cache.values(layer)
    logits = np.matmul(K, q[:, :, None])[:, :, 0] * engine._inv_sqrt_dk
    w = _softmax(logits)
    ctx = np.matmul(w[:, None, :], V)[:, 0, :]
    return ctx.reshape(c.d_model) @ ck.layer(layer, "wo")


def uniform_attention_checkpoint(config: ModelConfig, seed: int = 0) -> Checkpoint:
    """Zero query projections everywhere: every attention row is uniform."""
    ck = init_checkpoint(config, seed)
    edits = {f"layers.{i}.wq": np.zeros((config.d_model, config.d_model), np.float32)
             for i in range(config.n_layers)}
    return ck.mutated(edits)


def planted_checkpoint(
    seed: int = 0,
    n_heads: int = 8,
    d_head: int = 8,
    n_layers: int = 2,
    vocab: int = 48,
    max_seq_len: int = 192,
    planted_heads: tuple[int, ...] = (5, 6),
    bait_head: int = 7,
):
    """Checkpoint where `planted_heads` of layer 1 always carry the largest
    query-to-vision-key dot products (for e1-aligned vision embeddings),
    while `bait_head` dominates the query-norm and key-norm rankings.

    Construction: vision embeddings proportional to e1 normalize to a pure
    e1 direction, so zeroing row 0 of wk for a head makes its vision keys
    exactly zero. The planted heads read a forced-positive embedding
    component through the slowest-rotating rope pair, which keeps their
    scores strictly positive at every position.
    """
    d = n_heads * d_head
    config = ModelConfig(n_layers=n_layers, n_heads=n_heads, d_model=d, d_ffn=2 * d,
                         vocab_size=vocab, max_seq_len=max_seq_len)
    ck = init_checkpoint(config, seed)
    emb = ck["embedding"].copy()
    emb[:, 2] = np.abs(emb[:, 2]) + 0.5
    wq = ck.layer(0, "wq").copy()
    wk = ck.layer(0, "wk").copy()
    half = d_head // 2
    for h in planted_heads:
        a = h * d_head + half - 1  # slowest-rotating rope pair: dims (half-1, d_head-1)
        b = h * d_head + d_head - 1
        wq[:, h * d_head : (h + 1) * d_head] = 0.0
        wk[:, h * d_head : (h + 1) * d_head] = 0.0
        wq[2, a] = wq[2, b] = 1.0
        wk[0, a] = wk[0, b] = 1.0
    for h in range(n_heads):
        if h not in planted_heads:
            wk[0, h * d_head : (h + 1) * d_head] = 0.0
    sl = slice(bait_head * d_head, (bait_head + 1) * d_head)
    wq[:, sl] *= 50.0
    wk[1:, sl] *= 50.0
    rigged = ck.mutated({"embedding": emb, "layers.0.wq": wq, "layers.0.wk": wk})
    return rigged, config


def e1_vision(n_vision: int, d_model: int, scale: float = 0.5) -> np.ndarray:
    v = np.zeros((n_vision, d_model), dtype=np.float32)
    v[:, 0] = scale + 0.01 * np.arange(n_vision)  # rmsnorm maps every row to the same direction
    return v


class StubCache:
    def __init__(self, length: int = 0):
        self.length = length

    def fork(self):
        return StubCache(self.length)


class StubConfig:
    def __init__(self, vocab_size: int, max_seq_len: int = 10_000):
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len


class StubEngine:
    """Duck-typed engine with scripted logits for decode tests.

    `first` is the prefill logits row; `after` maps a fed token id to the
    next logits row (missing ids fall back to `first`).
    """

    def __init__(self, first, after: dict[int, np.ndarray] | None = None):
        self.first = np.asarray(first, dtype=np.float32)
        self.after = {k: np.asarray(v, dtype=np.float32) for k, v in (after or {}).items()}
        self.config = StubConfig(vocab_size=len(self.first))

    def new_cache(self, max_len=None):
        return StubCache()

    def prefill(self, prompt, cache, policy=None, return_all_logits=False):
        cache.length = len(prompt)
        return self.first

    def step(self, token, cache, layout, policy=None, observer=None):
        cache.length += 1
        return self.after.get(int(token), self.first)


def stub_prompt(d_model: int = 4) -> MultimodalPrompt:
    return MultimodalPrompt([], np.zeros((1, d_model), np.float32), [])
