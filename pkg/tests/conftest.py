import json
import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spin_infer.corpus import SyntheticCorpusSpec, TokenTable, generate_synthetic_corpus
from spin_infer.model import ModelConfig, init_checkpoint, save_checkpoint


@dataclass
class Workspace:
    root: Path
    corpus: Path
    vocab: Path
    tokens: Path
    checkpoint: Path
    model_config: ModelConfig

    def run_config(self, path: Path, **overrides) -> Path:
        cfg = {
            "model": {"checkpoint": str(self.checkpoint)},
            "decode": {"strategy": "greedy", "max_new_tokens": 8, "eos_id": 0, "seed": 5},
            "eval": {
                "corpus": str(self.corpus),
                "vocab": str(self.vocab),
                "tokens": str(self.tokens),
            },
            "output": {},
        }
        for key, value in overrides.items():
            if value is None:
                cfg.pop(key, None)
            elif isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
        path.write_text(json.dumps(cfg, indent=2))
        return path


@pytest.fixture(scope="session")
def workspace(tmp_path_factory) -> Workspace:
    root = tmp_path_factory.mktemp("workspace")
    spec = SyntheticCorpusSpec(
        n_images=6, span_len=4, embed_dim=24, n_objects=10, objects_per_image=2, seed=3
    )
    paths = generate_synthetic_corpus(spec, root / "corpus")
    table = TokenTable.load(paths.tokens)
    model_config = ModelConfig(
        n_layers=2, n_heads=4, d_model=24, d_ffn=32, vocab_size=len(table), max_seq_len=320
    )
    ckpt_path = root / "model.spnm"
    save_checkpoint(init_checkpoint(model_config, 1), ckpt_path)
    return Workspace(
        root=root,
        corpus=paths.corpus,
        vocab=paths.vocab,
        tokens=paths.tokens,
        checkpoint=ckpt_path,
        model_config=model_config,
    )
