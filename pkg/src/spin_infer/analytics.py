"""Attention profiling, head-mask aggregation, and hyperparameter tuning.

The profiler measures where generated-token queries put their post-softmax
attention mass (vision span vs everything else), per layer, averaged over
steps and heads. This is deliberately separate from the pre-softmax logit
sums used to rank heads for suppression.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .decoding import DecodeConfig, generate
from .engine import Engine, MaskPolicy, MultimodalPrompt
from .errors import ConfigError, DataError
from .spin import SpinConfig


@dataclass
class AttentionProfile:
    vision: np.ndarray  # (n_layers,) mean post-softmax mass on the vision span
    text: np.ndarray  # (n_layers,) mean mass everywhere else
    n_steps: int  # generated-token query steps accumulated

    def to_rows(self) -> list[tuple[int, float, float]]:
        return [(l + 1, float(v), float(t)) for l, (v, t) in enumerate(zip(self.vision, self.text))]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "vision_fraction", "text_fraction"])
            w.writerows(self.to_rows())

    def to_dict(self) -> dict:
        return {
            "vision": [float(x) for x in self.vision],
            "text": [float(x) for x in self.text],
            "n_steps": self.n_steps,
        }


def profile_attention(
    engine: Engine,
    prompts: Iterable[MultimodalPrompt],
    decode_config: DecodeConfig,
    policy: MaskPolicy | None = None,
) -> AttentionProfile:
    """Run generation and accumulate per-layer vision/text attention mass
    for every generated-token query, every head."""
    n_layers = engine.config.n_layers
    sums_v = np.zeros(n_layers, dtype=np.float64)
    sums_t = np.zeros(n_layers, dtype=np.float64)
    counts = np.zeros(n_layers, dtype=np.int64)

    n_prompts = 0
    for prompt in prompts:
        n_prompts += 1
        i_start, i_end = prompt.i_start, prompt.i_end

        def observer(layer: int, weights: np.ndarray, pos: int) -> None:
            w64 = weights.astype(np.float64)
            v = w64[:, i_start:i_end].sum(axis=1)
            sums_v[layer] += v.sum()
            sums_t[layer] += (w64.sum(axis=1) - v).sum()
            counts[layer] += weights.shape[0]

        generate(engine, prompt, decode_config, policy, observer)
    if n_prompts == 0:
        raise DataError("profile_attention needs a non-empty corpus")
    if counts.min() < 1:
        raise DataError("profile_attention saw no generated-token query steps")
    return AttentionProfile(
        vision=sums_v / counts, text=sums_t / counts, n_steps=int(counts[0] // engine.config.n_heads)
    )


@dataclass
class MaskHeatmap:
    values: np.ndarray  # (n_layers, n_heads) fraction of traced steps kept
    steps_per_layer: np.ndarray  # (n_layers,) traced step count (0 outside range)
    n_layers: int
    n_heads: int

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "head", "value"])
            for l in range(self.n_layers):
                for h in range(self.n_heads):
                    w.writerow([l + 1, h, float(self.values[l, h])])

    def to_dict(self) -> dict:
        return {
            "values": [[float(x) for x in row] for row in self.values],
            "steps_per_layer": [int(x) for x in self.steps_per_layer],
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
        }


def _read_trace(path: str | Path):
    meta = None
    kept = None
    steps = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: bad trace line: {e}") from e
            if meta is None:
                if "meta" not in obj:
                    raise DataError(f"{path}:{lineno}: first trace line must carry the meta header")
                meta = obj["meta"]
                kept = np.zeros((meta["n_layers"], meta["n_heads"]), dtype=np.int64)
                steps = np.zeros(meta["n_layers"], dtype=np.int64)
                continue
            try:
                layer = int(obj["layer"]) - 1
                mask = np.asarray(obj["mask"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: bad trace record: {e}") from e
            if not 0 <= layer < kept.shape[0] or mask.shape != (kept.shape[1],):
                raise DataError(f"{path}:{lineno}: trace record shape does not match meta header")
            kept[layer] += mask == 1.0
            steps[layer] += 1
    if meta is None:
        raise DataError(f"{path}: empty mask trace")
    return meta, kept, steps


def aggregate_masks(paths: Sequence[str | Path]) -> MaskHeatmap:
    """Merge mask traces into a layer x head kept-fraction heatmap.

    Layers never traced (outside every trace's layer range) read exactly 1.
    Traces are weighted by their step counts.
    """
    if not paths:
        raise DataError("aggregate_masks needs at least one trace file")
    shape = None
    kept_total = steps_total = None
    for path in paths:
        meta, kept, steps = _read_trace(path)
        this_shape = (int(meta["n_layers"]), int(meta["n_heads"]))
        if shape is None:
            shape = this_shape
            kept_total = kept
            steps_total = steps
        elif this_shape != shape:
            raise DataError(f"{path}: trace shape {this_shape} does not match {shape}")
        else:
            kept_total += kept
            steps_total += steps
    values = np.ones(shape, dtype=np.float64)
    traced = steps_total > 0
    values[traced] = kept_total[traced] / steps_total[traced, None]
    return MaskHeatmap(values=values, steps_per_layer=steps_total, n_layers=shape[0], n_heads=shape[1])


def default_layer_grids(n_layers: int) -> list[tuple[int, int]]:
    """Prefix ranges [1, L0] and suffix ranges [L0, L] for L0 at 1/2, 5/8,
    3/4 and all of the stack."""
    cuts = []
    for frac in (0.5, 0.625, 0.75, 1.0):
        cuts.append(max(1, int(np.floor(frac * n_layers + 0.5))))
    grids: list[tuple[int, int]] = []
    for c in cuts:
        if (1, c) not in grids:
            grids.append((1, c))
    for c in cuts:
        if (c, n_layers) not in grids:
            grids.append((c, n_layers))
    return grids


@dataclass
class SweepEntry:
    config: SpinConfig
    metrics: dict[str, float]
    objective: float | None = None
    satisfies_constraint: bool | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "metrics": dict(self.metrics),
            "objective": self.objective,
            "satisfies_constraint": self.satisfies_constraint,
        }


@dataclass
class SweepStage:
    name: str
    entries: list[SweepEntry]
    selected_index: int

    @property
    def selected(self) -> SweepEntry:
        return self.entries[self.selected_index]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "entries": [e.to_dict() for e in self.entries],
            "selected_index": self.selected_index,
        }


@dataclass
class SweepResult:
    baseline: dict[str, float]
    stages: list[SweepStage]
    selected: SpinConfig
    f1_drop_limit: float
    tradeoff_lambda: float

    def to_dict(self) -> dict:
        return {
            "baseline": dict(self.baseline),
            "stages": [s.to_dict() for s in self.stages],
            "selected": self.selected.to_dict(),
            "f1_drop_limit": self.f1_drop_limit,
            "tradeoff_lambda": self.tradeoff_lambda,
        }


EvalFn = Callable[[SpinConfig | None], Mapping[str, float]]


def tune_three_stage(
    eval_fn: EvalFn,
    n_layers: int,
    r_grid: Sequence[float],
    alpha_grid: Sequence[float],
    layer_grids: Sequence[tuple[int, int]] | None = None,
    strategy: str = "image_attention",
    apply_to: str = "all_text_queries",
    f1_drop_limit: float = 0.03,
    tradeoff_lambda: float = 1.0,
) -> SweepResult:
    """Three-stage hyperparameter selection.

    Stage 1 sweeps r with alpha=0 over all layers and keeps the r with the
    lowest C_s whose F1 drop vs baseline stays within `f1_drop_limit` (if no
    candidate satisfies the constraint, the smallest drop wins). Stage 2
    fixes r and sweeps layer ranges for minimal C_s. Stage 3 fixes both and
    picks alpha minimizing C_s + lambda * (baseline F1 - F1). Ties always go
    to the earliest grid entry, so the tuner is deterministic.

    `eval_fn(None)` must return the baseline metrics; every call returns a
    mapping with keys "c_s" and "f1".
    """
    if not r_grid or not alpha_grid:
        raise ConfigError("tuner grids for r and alpha must be non-empty")
    if layer_grids is None:
        layer_grids = default_layer_grids(n_layers)
    if not layer_grids:
        raise ConfigError("tuner layer grid must be non-empty")

    cache: dict[tuple, dict[str, float]] = {}

    def run(cfg: SpinConfig) -> dict[str, float]:
        key = (cfg.strategy, cfg.r, cfg.alpha, cfg.layer_lo, cfg.layer_hi, cfg.apply_to)
        if key not in cache:
            m = eval_fn(cfg)
            cache[key] = {"c_s": float(m["c_s"]), "f1": float(m["f1"])}
        return cache[key]

    base = eval_fn(None)
    baseline = {"c_s": float(base["c_s"]), "f1": float(base["f1"])}

    # stage 1: ratio of suppressed heads, full stack, hard pruning
    entries1 = []
    for r in r_grid:
        cfg = SpinConfig(strategy=strategy, r=r, alpha=0.0, layer_lo=1, layer_hi=n_layers, apply_to=apply_to)
        m = run(cfg)
        drop = baseline["f1"] - m["f1"]
        entries1.append(
            SweepEntry(cfg, {**m, "f1_drop": drop}, satisfies_constraint=drop <= f1_drop_limit)
        )
    ok = [i for i, e in enumerate(entries1) if e.satisfies_constraint]
    if ok:
        sel1 = min(ok, key=lambda i: (entries1[i].metrics["c_s"], i))
    else:
        sel1 = min(range(len(entries1)), key=lambda i: (entries1[i].metrics["f1_drop"], i))
    r_sel = entries1[sel1].config.r

    # stage 2: layer range at the chosen r
    entries2 = []
    for lo, hi in layer_grids:
        cfg = SpinConfig(strategy=strategy, r=r_sel, alpha=0.0, layer_lo=lo, layer_hi=hi, apply_to=apply_to)
        entries2.append(SweepEntry(cfg, dict(run(cfg))))
    sel2 = min(range(len(entries2)), key=lambda i: (entries2[i].metrics["c_s"], i))
    lo_sel, hi_sel = entries2[sel2].config.layer_lo, entries2[sel2].config.layer_hi

    # stage 3: suppression factor, scalarized hallucination/F1 trade-off
    entries3 = []
    for alpha in alpha_grid:
        cfg = SpinConfig(
            strategy=strategy, r=r_sel, alpha=alpha, layer_lo=lo_sel, layer_hi=hi_sel, apply_to=apply_to
        )
        m = run(cfg)
        obj = m["c_s"] + tradeoff_lambda * (baseline["f1"] - m["f1"])
        entries3.append(SweepEntry(cfg, dict(m), objective=obj))
    sel3 = min(range(len(entries3)), key=lambda i: (entries3[i].objective, i))

    stages = [
        SweepStage("suppression_ratio", entries1, sel1),
        SweepStage("layer_range", entries2, sel2),
        SweepStage("suppression_factor", entries3, sel3),
    ]
    return SweepResult(
        baseline=baseline,
        stages=stages,
        selected=entries3[sel3].config,
        f1_drop_limit=f1_drop_limit,
        tradeoff_lambda=tradeoff_lambda,
    )
