"""Command-line surface: spin-infer <subcommand>.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analytics import aggregate_masks, profile_attention, tune_three_stage
from .config import load_run_config
from .corpus import SyntheticCorpusSpec, TokenTable, generate_synthetic_corpus, load_corpus
from .decoding import DecodeConfig, generate
from .engine import Engine, MultimodalPrompt
from .errors import ConfigError, ConfigNotFoundError, ConfigSyntaxError, DataError, SpinInferError
from .model import ModelConfig, init_checkpoint, load_checkpoint, save_checkpoint
from .runner import build_engine, run_eval, spin_eval_fn
from .spin import MaskTraceWriter, SpinConfig, SpinPolicy

log = logging.getLogger("spin_infer")


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--decode", choices=("greedy", "beam", "nucleus"), default="greedy")
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--rep-penalty", type=float, default=1.0)
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eos-id", type=int, default=0)


def _decode_from_args(args) -> DecodeConfig:
    return DecodeConfig(
        strategy=args.decode,
        beam_width=args.beam_width,
        nucleus_p=args.top_p,
        repetition_penalty=args.rep_penalty,
        max_new_tokens=args.max_new,
        eos_id=args.eos_id,
        seed=args.seed,
    )


def _load_spin_section(path: str) -> SpinConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigNotFoundError(f"spin config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigSyntaxError(f"{p}:{e.lineno}: {e.msg}") from e
    if isinstance(raw, dict) and "spin" in raw:
        raw = raw["spin"]
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: spin section must be a JSON object")
    return SpinConfig.from_dict(raw)


def _prompt_from_corpus(path: str, record_id: str | None, index: int) -> MultimodalPrompt:
    records = load_corpus(path)
    if record_id is not None:
        matches = [r for r in records if r.record_id == record_id]
        if not matches:
            raise DataError(f"{path}: no record with id {record_id!r}")
        rec = matches[0]
    else:
        if not 0 <= index < len(records):
            raise DataError(f"{path}: record index {index} out of range ({len(records)} records)")
        rec = records[index]
    return MultimodalPrompt([], rec.vision, rec.prompt_ids)


def cmd_init_ckpt(args) -> int:
    config = ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        d_model=args.d_model,
        d_ffn=args.d_ffn,
        vocab_size=args.vocab_size,
        max_seq_len=args.max_seq_len,
    )
    ckpt = init_checkpoint(config, args.seed)
    save_checkpoint(ckpt, args.out)
    print(f"wrote {args.out} ({len(ckpt.tensors)} tensors)")
    return 0


def cmd_make_corpus(args) -> int:
    spec = SyntheticCorpusSpec(
        n_images=args.images,
        span_len=args.span_len,
        embed_dim=args.embed_dim,
        n_objects=args.objects,
        objects_per_image=args.objects_per_image,
        pope_pairs_per_split=args.pope_pairs,
        zipf_s=args.zipf_s,
        noise=args.noise,
        seed=args.seed,
    )
    paths = generate_synthetic_corpus(spec, args.out_dir)
    table = TokenTable.load(paths.tokens)
    print(f"wrote {paths.corpus}")
    print(f"wrote {paths.vocab}")
    print(f"wrote {paths.tokens} (vocab_size needed: {len(table)})")
    return 0


def cmd_generate(args) -> int:
    engine = Engine(load_checkpoint(args.ckpt))
    prompt = _prompt_from_corpus(args.prompt, args.record_id, args.index)
    decode = _decode_from_args(args)
    table = TokenTable.load(args.tokens) if args.tokens else None

    policy = None
    trace = None
    if args.spin:
        spin_cfg = _load_spin_section(args.spin)
        if args.trace_masks:
            trace = MaskTraceWriter(
                open(args.trace_masks, "w", encoding="utf-8"),
                engine.config.n_layers,
                engine.config.n_heads,
                spin_cfg,
            )
        policy = SpinPolicy(spin_cfg, engine.config.n_layers, engine.config.n_heads, trace)
    try:
        result = generate(engine, prompt, decode, policy, token_table=table)
    finally:
        if trace is not None:
            trace.close()
    print(json.dumps({
        "token_ids": result.token_ids,
        "text": result.text,
        "n_new_tokens": result.n_new_tokens,
        "ended_at_eos": result.ended_at_eos,
        "truncated": result.truncated,
        "prefill_s": result.prefill_latency,
        "decode_s": result.decode_latency,
    }))
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    report = run_eval(cfg)
    print(json.dumps(report["metrics"], indent=2, sort_keys=True))
    return 0


def cmd_profile(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.eval is None:
        raise ConfigError("eval: section missing (profile needs a corpus)")
    engine = build_engine(cfg)
    records = load_corpus(cfg.eval.corpus)
    if args.samples is not None:
        records = records[: args.samples]
    prompts = [MultimodalPrompt([], r.vision, r.prompt_ids) for r in records]
    policy = SpinPolicy(cfg.spin, engine.config.n_layers, engine.config.n_heads) if cfg.spin else None
    profile = profile_attention(engine, prompts, cfg.decode, policy)
    profile.write_csv(args.out_prefix + ".csv")
    with open(args.out_prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(profile.to_dict(), fh, indent=2)
    print(f"wrote {args.out_prefix}.csv and {args.out_prefix}.json")
    return 0


def cmd_heatmap(args) -> int:
    heatmap = aggregate_masks(args.traces)
    heatmap.write_csv(args.out_prefix + ".csv")
    with open(args.out_prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(heatmap.to_dict(), fh, indent=2)
    print(f"wrote {args.out_prefix}.csv and {args.out_prefix}.json")
    return 0


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"bad grid {text!r}: {e}") from e


def _parse_layer_grids(text: str | None, n_layers: int) -> list[tuple[int, int]] | None:
    if text is None:
        return None
    grids = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            lo, hi = part.split("-")
            grids.append((int(lo), int(hi)))
        except ValueError as e:
            raise ConfigError(f"bad layer grid entry {part!r} (want LO-HI): {e}") from e
    return grids or None


def cmd_tune(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.eval is None:
        raise ConfigError("eval: section missing (tune needs a corpus)")
    engine = build_engine(cfg)
    n_layers = engine.config.n_layers
    result = tune_three_stage(
        spin_eval_fn(cfg),
        n_layers=n_layers,
        r_grid=_parse_grid(args.r_grid),
        alpha_grid=_parse_grid(args.alpha_grid),
        layer_grids=_parse_layer_grids(args.layer_grids, n_layers),
        strategy=args.strategy,
        f1_drop_limit=args.f1_drop,
        tradeoff_lambda=args.tradeoff,
    )
    out = result.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
        print(f"wrote {args.out}")
    print(json.dumps({"selected": out["selected"], "baseline": out["baseline"]}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spin-infer", description=__doc__)
    parser.add_argument("--version", action="version", version=f"spin-infer {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-ckpt", help="create a deterministic random checkpoint")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--d-model", type=int, required=True)
    p.add_argument("--d-ffn", type=int, required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init_ckpt)

    p = sub.add_parser("make-corpus", help="generate a synthetic evaluation corpus")
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--span-len", type=int, required=True)
    p.add_argument("--embed-dim", type=int, required=True)
    p.add_argument("--objects", type=int, default=24)
    p.add_argument("--objects-per-image", type=int, default=3)
    p.add_argument("--pope-pairs", type=int, default=1)
    p.add_argument("--zipf-s", type=float, default=1.1)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_make_corpus)

    p = sub.add_parser("generate", help="generate from one corpus record")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True, help="corpus JSONL file")
    p.add_argument("--record-id", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--tokens", default=None, help="token table for text output")
    p.add_argument("--spin", default=None, help="JSON file with a spin config section")
    p.add_argument("--trace-masks", default=None)
    _add_decode_flags(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="run the configured evaluation")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile", help="per-layer vision/text attention profile")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("heatmap", help="aggregate mask traces into a layer x head heatmap")
    p.add_argument("--traces", nargs="+", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("tune", help="three-stage r / layer-range / alpha selection")
    p.add_argument("--config", required=True)
    p.add_argument("--r-grid", required=True, help="comma-separated, e.g. 0.1,0.25,0.5")
    p.add_argument("--alpha-grid", required=True)
    p.add_argument("--layer-grids", default=None, help="comma-separated LO-HI pairs")
    p.add_argument("--strategy", default="image_attention")
    p.add_argument("--f1-drop", type=float, default=0.03)
    p.add_argument("--tradeoff", type=float, default=1.0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_tune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except SpinInferError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
