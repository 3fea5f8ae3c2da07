"""Run configuration: one JSON file, strict validation, env overrides.

Any key can be overridden with SPIN__SECTION__KEY environment variables
(e.g. SPIN__DECODE__SEED=7); values are parsed as JSON with a plain-string
fallback. Relative paths resolve against the config file's directory.
Validation failures name the offending dotted key.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .decoding import DecodeConfig
from .errors import ConfigError, ConfigNotFoundError, ConfigSyntaxError
from .model import ModelConfig
from .spin import SpinConfig

SECTIONS = ("model", "spin", "decode", "eval", "output")


@dataclass(frozen=True)
class ModelSection:
    checkpoint: str | None = None
    init_seed: int | None = None
    init_config: ModelConfig | None = None

    def to_dict(self) -> dict:
        if self.checkpoint is not None:
            return {"checkpoint": self.checkpoint}
        return {"init": {"seed": self.init_seed, "config": self.init_config.to_dict()}}


@dataclass(frozen=True)
class EvalSection:
    corpus: str
    vocab: str
    tokens: str
    chair: bool = True
    pope: bool = True
    pope_mode: str = "multi_turn"  # or "single_turn"
    pope_max_new_tokens: int = 8
    measure_throughput: bool = True
    include_prefill: bool = False
    workers: int = 1
    max_records: int | None = None

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "vocab": self.vocab,
            "tokens": self.tokens,
            "chair": self.chair,
            "pope": self.pope,
            "pope_mode": self.pope_mode,
            "pope_max_new_tokens": self.pope_max_new_tokens,
            "measure_throughput": self.measure_throughput,
            "include_prefill": self.include_prefill,
            "workers": self.workers,
            "max_records": self.max_records,
        }


@dataclass(frozen=True)
class OutputSection:
    report_json: str | None = None
    report_csv: str | None = None
    trace_masks: str | None = None

    def to_dict(self) -> dict:
        return {
            "report_json": self.report_json,
            "report_csv": self.report_csv,
            "trace_masks": self.trace_masks,
        }


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection
    decode: DecodeConfig
    spin: SpinConfig | None = None
    eval: EvalSection | None = None
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "spin": self.spin.to_dict() if self.spin else None,
            "decode": self.decode.to_dict(),
            "eval": self.eval.to_dict() if self.eval else None,
            "output": self.output.to_dict(),
        }


def _apply_env_overrides(raw: dict, environ=None) -> dict:
    env = os.environ if environ is None else environ
    for key, value in sorted(env.items()):
        if not key.startswith("SPIN__"):
            continue
        parts = key.split("__")[1:]
        if len(parts) < 2 or not all(parts):
            raise ConfigError(f"bad override variable {key}: want SPIN__SECTION__KEY")
        section = parts[0].lower()
        if section not in SECTIONS:
            raise ConfigError(f"bad override variable {key}: unknown section {section!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw.setdefault(section, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {key}: section {section!r} is not an object")
        for p in parts[1:-1]:
            node = node.setdefault(p.lower(), {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key}: {p.lower()!r} is not an object")
        node[parts[-1].lower()] = parsed
    return raw


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def _resolve_path(base: Path, p: str) -> str:
    return str((base / p).resolve()) if not Path(p).is_absolute() else p


def _parse_model(raw: dict, base: Path) -> ModelSection:
    if not isinstance(raw, dict):
        raise ConfigError("model: must be an object")
    has_ckpt = "checkpoint" in raw and raw["checkpoint"] is not None
    has_init = "init" in raw and raw["init"] is not None
    _require(has_ckpt != has_init, "model", "exactly one of 'checkpoint' and 'init' must be present")
    if has_ckpt:
        path = _resolve_path(base, str(raw["checkpoint"]))
        if not Path(path).is_file():
            raise ConfigError(f"model.checkpoint: file not found: {path}")
        return ModelSection(checkpoint=path)
    init = raw["init"]
    _require(isinstance(init, dict), "model.init", "must be an object")
    _require("seed" in init, "model.init.seed", "missing")
    _require("config" in init and isinstance(init["config"], dict), "model.init.config", "missing")
    try:
        mc = ModelConfig.from_dict(init["config"])
    except ConfigError as e:
        raise ConfigError(f"model.init.config: {e}") from e
    return ModelSection(init_seed=int(init["seed"]), init_config=mc)


def _parse_decode(raw: dict) -> DecodeConfig:
    if raw is None:
        raw = {}
    _require(isinstance(raw, dict), "decode", "must be an object")
    try:
        return DecodeConfig.from_dict(raw)
    except ConfigError as e:
        raise ConfigError(f"decode: {e}") from e
    except TypeError as e:
        raise ConfigError(f"decode: {e}") from e


def _parse_spin(raw) -> SpinConfig | None:
    if raw is None:
        return None
    _require(isinstance(raw, dict), "spin", "must be an object")
    try:
        return SpinConfig.from_dict(raw)
    except ConfigError as e:
        raise ConfigError(f"spin: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"spin: {e}") from e


def _parse_eval(raw, base: Path) -> EvalSection | None:
    if raw is None:
        return None
    _require(isinstance(raw, dict), "eval", "must be an object")
    known = set(EvalSection.__dataclass_fields__)
    extra = set(raw) - known
    _require(not extra, "eval", f"unknown keys: {sorted(extra)}")
    for req in ("corpus", "vocab", "tokens"):
        _require(req in raw, f"eval.{req}", "missing")
    d = dict(raw)
    for req in ("corpus", "vocab", "tokens"):
        d[req] = _resolve_path(base, str(d[req]))
        if not Path(d[req]).is_file():
            raise ConfigError(f"eval.{req}: file not found: {d[req]}")
    section = EvalSection(**d)
    _require(section.pope_mode in ("multi_turn", "single_turn"), "eval.pope_mode",
             f"must be 'multi_turn' or 'single_turn', got {section.pope_mode!r}")
    _require(section.workers >= 1, "eval.workers", "must be >= 1")
    _require(section.pope_max_new_tokens >= 1, "eval.pope_max_new_tokens", "must be >= 1")
    return section


def _parse_output(raw, base: Path) -> OutputSection:
    if raw is None:
        return OutputSection()
    _require(isinstance(raw, dict), "output", "must be an object")
    known = set(OutputSection.__dataclass_fields__)
    extra = set(raw) - known
    _require(not extra, "output", f"unknown keys: {sorted(extra)}")
    d = {k: (None if v is None else _resolve_path(base, str(v))) for k, v in raw.items()}
    return OutputSection(**d)


def parse_run_config(raw: dict, base_dir: str | Path = ".", environ=None) -> RunConfig:
    """Validate a raw config dict (already parsed from JSON)."""
    raw = _apply_env_overrides(dict(raw), environ)
    extra = set(raw) - set(SECTIONS)
    _require(not extra, "config", f"unknown sections: {sorted(extra)}")
    _require("model" in raw, "model", "section missing")
    base = Path(base_dir)
    return RunConfig(
        model=_parse_model(raw["model"], base),
        spin=_parse_spin(raw.get("spin")),
        decode=_parse_decode(raw.get("decode")),
        eval=_parse_eval(raw.get("eval"), base),
        output=_parse_output(raw.get("output"), base),
    )


def load_run_config(path: str | Path, environ=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFoundError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    decoder = json.JSONDecoder()
    try:
        raw, end = decoder.raw_decode(text)
    except json.JSONDecodeError as e:
        raise ConfigSyntaxError(f"{path}:{e.lineno}: {e.msg}") from e
    tail = text[end:]
    if tail.strip():
        lineno = text[:end].count("\n") + 1
        raise ConfigSyntaxError(f"{path}:{lineno}: trailing garbage after config object")
    if not isinstance(raw, dict):
        raise ConfigSyntaxError(f"{path}: top level must be a JSON object")
    return parse_run_config(raw, base_dir=path.parent, environ=environ)
