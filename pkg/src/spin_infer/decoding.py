"""Token selection strategies and stopping logic on top of the engine.

All three strategies stop at eos_id or max_new_tokens. The repetition
penalty applies to generated tokens only (never to prompt tokens) with the
sign-dependent divide/multiply convention. Nucleus sampling draws its
uniforms from a seeded splitmix64 stream, so sequences are reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .engine import AttnObserver, Engine, KvCache, MaskPolicy, MultimodalPrompt
from .errors import ConfigError, ContextOverflowError
from .prng import SplitMix64

DECODE_STRATEGIES = ("greedy", "beam", "nucleus")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    beam_width: int = 5
    nucleus_p: float = 0.9
    repetition_penalty: float = 1.0
    max_new_tokens: int = 32
    eos_id: int | None = 0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in DECODE_STRATEGIES:
            raise ConfigError(f"decode.strategy must be one of {DECODE_STRATEGIES}, got {self.strategy!r}")
        if self.beam_width < 1:
            raise ConfigError(f"decode.beam_width must be >= 1, got {self.beam_width}")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ConfigError(f"decode.nucleus_p must be in (0, 1], got {self.nucleus_p}")
        if self.repetition_penalty < 1.0:
            raise ConfigError(f"decode.repetition_penalty must be >= 1, got {self.repetition_penalty}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"decode.max_new_tokens must be >= 1, got {self.max_new_tokens}")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "beam_width": self.beam_width,
            "nucleus_p": self.nucleus_p,
            "repetition_penalty": self.repetition_penalty,
            "max_new_tokens": self.max_new_tokens,
            "eos_id": self.eos_id,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"decode config has unknown keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class GenerationResult:
    token_ids: list[int]
    text: str = ""
    step_latencies: list[float] = field(default_factory=list)
    prefill_latency: float = 0.0
    decode_latency: float = 0.0
    truncated: bool = False
    ended_at_eos: bool = False
    beam_step_scores: list[list[float]] | None = None

    @property
    def n_new_tokens(self) -> int:
        return len(self.token_ids)


def apply_repetition_penalty(logits: np.ndarray, context_ids, penalty: float) -> np.ndarray:
    """Penalize tokens already present in the generated context.

    For each context id: z -> z/penalty if z > 0 else z*penalty. Other
    logits are untouched; penalty 1.0 is an exact no-op.
    """
    if penalty == 1.0 or not len(context_ids):
        return logits
    out = logits.copy()
    idx = np.unique(np.asarray(list(context_ids), dtype=np.int64))
    z = out[idx]
    out[idx] = np.where(z > 0, z / np.float32(penalty), z * np.float32(penalty))
    return out


def _log_softmax64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def _nucleus_pick(logits: np.ndarray, p: float, rng: SplitMix64) -> int:
    """Sample from the smallest top-probability set with cumulative mass >= p."""
    z = logits.astype(np.float64)
    z -= z.max()
    e = np.exp(z)
    probs = e / e.sum()
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    m = int(np.searchsorted(csum, p, side="left")) + 1
    m = min(m, len(order))
    sel = order[:m]
    q = probs[sel]
    q = q / q.sum()
    u = rng.uniform()
    j = int(np.searchsorted(np.cumsum(q), u, side="right"))
    return int(sel[min(j, m - 1)])


def _decode_sequential(
    engine: Engine,
    prompt: MultimodalPrompt,
    config: DecodeConfig,
    pick,
    policy: MaskPolicy | None,
    observer: AttnObserver | None,
) -> GenerationResult:
    cache = engine.new_cache()
    layout = prompt.layout()
    t0 = time.perf_counter()
    logits = engine.prefill(prompt, cache, policy)
    prefill_s = time.perf_counter() - t0

    tokens: list[int] = []
    lat: list[float] = []
    truncated = False
    ended = False
    loop_start = time.perf_counter()
    while True:
        t_step = time.perf_counter()
        z = apply_repetition_penalty(logits, tokens, config.repetition_penalty)
        nxt = pick(z)
        tokens.append(nxt)
        if config.eos_id is not None and nxt == config.eos_id:
            ended = True
            lat.append(time.perf_counter() - t_step)
            break
        if len(tokens) >= config.max_new_tokens:
            lat.append(time.perf_counter() - t_step)
            break
        try:
            logits = engine.step(nxt, cache, layout, policy, observer)
        except ContextOverflowError:
            truncated = True
            lat.append(time.perf_counter() - t_step)
            break
        lat.append(time.perf_counter() - t_step)
    decode_s = time.perf_counter() - loop_start
    return GenerationResult(
        token_ids=tokens,
        step_latencies=lat,
        prefill_latency=prefill_s,
        decode_latency=decode_s,
        truncated=truncated,
        ended_at_eos=ended,
    )


def decode_greedy(
    engine: Engine,
    prompt: MultimodalPrompt,
    config: DecodeConfig,
    policy: MaskPolicy | None = None,
    observer: AttnObserver | None = None,
) -> GenerationResult:
    """Argmax decoding; ties go to the lowest token id."""
    return _decode_sequential(engine, prompt, config, lambda z: int(np.argmax(z)), policy, observer)


def decode_nucleus(
    engine: Engine,
    prompt: MultimodalPrompt,
    config: DecodeConfig,
    policy: MaskPolicy | None = None,
    observer: AttnObserver | None = None,
) -> GenerationResult:
    rng = SplitMix64(config.seed)
    return _decode_sequential(
        engine, prompt, config, lambda z: _nucleus_pick(z, config.nucleus_p, rng), policy, observer
    )


class _Beam:
    __slots__ = ("cache", "tokens", "logp_sum", "logits")

    def __init__(self, cache: KvCache, tokens: list[int], logp_sum: float, logits: np.ndarray):
        self.cache = cache
        self.tokens = tokens
        self.logp_sum = logp_sum
        self.logits = logits


def decode_beam(
    engine: Engine,
    prompt: MultimodalPrompt,
    config: DecodeConfig,
    policy: MaskPolicy | None = None,
    observer: AttnObserver | None = None,
) -> GenerationResult:
    """Length-normalized beam search; every beam owns a forked KvCache, so
    SPIN masks are computed per beam per step."""
    width = config.beam_width
    layout = prompt.layout()
    cache0 = engine.new_cache()
    t0 = time.perf_counter()
    logits0 = engine.prefill(prompt, cache0, policy)
    prefill_s = time.perf_counter() - t0

    live = [_Beam(cache0, [], 0.0, logits0)]
    finished: list[tuple[float, int, list[int], bool]] = []  # (norm_score, order, tokens, at_eos)
    step_scores: list[list[float]] = []
    lat: list[float] = []
    truncated = False
    loop_start = time.perf_counter()

    for step in range(1, config.max_new_tokens + 1):
        t_step = time.perf_counter()
        candidates: list[tuple[float, int, int]] = []  # (-score, beam_idx, token)
        for bi, beam in enumerate(live):
            z = apply_repetition_penalty(beam.logits, beam.tokens, config.repetition_penalty)
            logp = _log_softmax64(z)
            top = np.argsort(-logp, kind="stable")[:width]
            for tok in top:
                candidates.append((-(beam.logp_sum + float(logp[tok])), bi, int(tok)))
        candidates.sort()

        new_live: list[tuple[float, int, int]] = []
        for neg, bi, tok in candidates:
            score = -neg
            seq = live[bi].tokens + [tok]
            if config.eos_id is not None and tok == config.eos_id:
                finished.append((score / len(seq), len(finished), seq, True))
                continue
            if len(new_live) < width:
                new_live.append((score, bi, tok))
        step_scores.append([s for s, _, _ in new_live])

        if not new_live:
            lat.append(time.perf_counter() - t_step)
            break
        if step == config.max_new_tokens:
            for score, bi, tok in new_live:
                seq = live[bi].tokens + [tok]
                finished.append((score / len(seq), len(finished), seq, False))
            lat.append(time.perf_counter() - t_step)
            break

        children: list[_Beam] = []
        overflow = False
        for score, bi, tok in new_live:
            cache = live[bi].cache.fork()
            try:
                logits = engine.step(tok, cache, layout, policy, observer)
            except ContextOverflowError:
                seq = live[bi].tokens + [tok]
                finished.append((score / len(seq), len(finished), seq, False))
                overflow = True
                continue
            children.append(_Beam(cache, live[bi].tokens + [tok], score, logits))
        truncated = truncated or overflow
        live = children
        lat.append(time.perf_counter() - t_step)
        if not live:
            break

    decode_s = time.perf_counter() - loop_start
    if not finished:
        raise ConfigError("beam search finished no candidate (unexpected)")
    finished.sort(key=lambda f: (-f[0], f[1]))
    _, _, best, at_eos = finished[0]
    return GenerationResult(
        token_ids=best,
        step_latencies=lat,
        prefill_latency=prefill_s,
        decode_latency=decode_s,
        truncated=truncated,
        ended_at_eos=at_eos,
        beam_step_scores=step_scores,
    )


def generate(
    engine: Engine,
    prompt: MultimodalPrompt,
    config: DecodeConfig,
    policy: MaskPolicy | None = None,
    observer: AttnObserver | None = None,
    token_table=None,
) -> GenerationResult:
    """Strategy dispatcher; fills `text` when a token table is supplied."""
    fn = {"greedy": decode_greedy, "beam": decode_beam, "nucleus": decode_nucleus}[config.strategy]
    result = fn(engine, prompt, config, policy, observer)
    if token_table is not None:
        result.text = token_table.decode(result.token_ids)
    return result
