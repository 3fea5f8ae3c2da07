import json

import pytest

from spin_infer.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestInitCkpt:
    def test_creates_loadable_checkpoint(self, tmp_path, capsys):
        out = tmp_path / "m.spnm"
        code, stdout, _ = run_cli(
            capsys, "init-ckpt", "--layers", "2", "--heads", "2", "--d-model", "16",
            "--d-ffn", "16", "--vocab-size", "32", "--seed", "4", "--out", str(out),
        )
        assert code == 0
        from spin_infer.model import load_checkpoint

        ck = load_checkpoint(out)
        assert ck.config.n_layers == 2

    def test_invalid_dims_exit_2(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys, "init-ckpt", "--layers", "2", "--heads", "3", "--d-model", "16",
            "--d-ffn", "16", "--vocab-size", "32", "--out", str(tmp_path / "m.spnm"),
        )
        assert code == 2
        assert "config error" in err


class TestMakeCorpus:
    def test_writes_three_files(self, tmp_path, capsys):
        code, stdout, _ = run_cli(
            capsys, "make-corpus", "--images", "3", "--span-len", "2", "--embed-dim", "8",
            "--objects", "6", "--objects-per-image", "2", "--seed", "1",
            "--out-dir", str(tmp_path / "c"),
        )
        assert code == 0
        assert (tmp_path / "c" / "corpus.jsonl").exists()
        assert (tmp_path / "c" / "vocab.tsv").exists()
        assert (tmp_path / "c" / "tokens.json").exists()
        assert "vocab_size needed" in stdout

    def test_too_few_objects_exit_2(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys, "make-corpus", "--images", "3", "--span-len", "2", "--embed-dim", "8",
            "--objects", "2", "--objects-per-image", "2", "--out-dir", str(tmp_path / "c"),
        )
        assert code == 2


class TestGenerate:
    def test_outputs_json_result(self, workspace, capsys):
        code, stdout, _ = run_cli(
            capsys, "generate", "--ckpt", str(workspace.checkpoint),
            "--prompt", str(workspace.corpus), "--tokens", str(workspace.tokens),
            "--decode", "greedy", "--max-new", "6", "--seed", "3",
        )
        assert code == 0
        result = json.loads(stdout)
        assert len(result["token_ids"]) <= 6
        assert isinstance(result["text"], str)

    def test_spin_and_trace(self, workspace, tmp_path, capsys):
        spin_path = tmp_path / "spin.json"
        spin_path.write_text(json.dumps({"r": 0.5, "alpha": 0.0, "layer_range": [1, 2]}))
        trace_path = tmp_path / "masks.jsonl"
        code, stdout, _ = run_cli(
            capsys, "generate", "--ckpt", str(workspace.checkpoint),
            "--prompt", str(workspace.corpus), "--record-id", "img0001",
            "--spin", str(spin_path), "--trace-masks", str(trace_path),
            "--max-new", "6",
        )
        assert code == 0
        from spin_infer.analytics import aggregate_masks

        hm = aggregate_masks([trace_path])
        assert hm.steps_per_layer.max() > 0

    def test_missing_record_exit_3(self, workspace, capsys):
        code, _, err = run_cli(
            capsys, "generate", "--ckpt", str(workspace.checkpoint),
            "--prompt", str(workspace.corpus), "--record-id", "nope",
        )
        assert code == 3
        assert "data error" in err

    def test_missing_spin_file_exit_2(self, workspace, tmp_path, capsys):
        code, _, _ = run_cli(
            capsys, "generate", "--ckpt", str(workspace.checkpoint),
            "--prompt", str(workspace.corpus), "--spin", str(tmp_path / "absent.json"),
        )
        assert code == 2


class TestEval:
    def test_prints_metrics_and_writes_reports(self, workspace, tmp_path, capsys):
        cfg = workspace.run_config(
            tmp_path / "run.json",
            output={"report_json": str(tmp_path / "r.json"), "report_csv": str(tmp_path / "r.csv")},
        )
        code, stdout, _ = run_cli(capsys, "eval", "--config", str(cfg))
        assert code == 0
        metrics = json.loads(stdout)
        assert "chair" in metrics and "pope" in metrics
        assert (tmp_path / "r.json").exists()

    def test_bad_config_exit_2(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "eval", "--config", str(tmp_path / "absent.json"))
        assert code == 2

    def test_corrupt_corpus_exit_3(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("garbage\n")
        cfg = workspace.run_config(tmp_path / "run.json", eval={"corpus": str(bad)})
        code, _, err = run_cli(capsys, "eval", "--config", str(cfg))
        assert code == 3


class TestProfileHeatmapTune:
    def test_profile_writes_outputs(self, workspace, tmp_path, capsys):
        cfg = workspace.run_config(
            tmp_path / "run.json",
            decode={"strategy": "greedy", "max_new_tokens": 4, "eos_id": None, "seed": 5},
        )
        code, _, _ = run_cli(
            capsys, "profile", "--config", str(cfg), "--samples", "2",
            "--out-prefix", str(tmp_path / "prof"),
        )
        assert code == 0
        rows = (tmp_path / "prof.csv").read_text().strip().splitlines()
        assert rows[0] == "layer,vision_fraction,text_fraction"
        data = json.loads((tmp_path / "prof.json").read_text())
        assert len(data["vision"]) == 2

    def test_heatmap_command(self, workspace, tmp_path, capsys):
        spin_path = tmp_path / "spin.json"
        spin_path.write_text(json.dumps({"r": 0.5, "alpha": 0.0, "layer_range": [1, 2]}))
        trace_path = tmp_path / "masks.jsonl"
        run_cli(
            capsys, "generate", "--ckpt", str(workspace.checkpoint),
            "--prompt", str(workspace.corpus), "--spin", str(spin_path),
            "--trace-masks", str(trace_path), "--max-new", "4",
        )
        code, _, _ = run_cli(
            capsys, "heatmap", "--traces", str(trace_path), "--out-prefix", str(tmp_path / "heat")
        )
        assert code == 0
        rows = (tmp_path / "heat.csv").read_text().strip().splitlines()
        assert rows[0] == "layer,head,value"
        assert len(rows) == 1 + 2 * 4

    def test_tune_command(self, workspace, tmp_path, capsys):
        cfg = workspace.run_config(
            tmp_path / "run.json",
            eval={"pope": False, "max_records": 2},
            decode={"strategy": "greedy", "max_new_tokens": 4, "eos_id": 0, "seed": 5},
        )
        code, stdout, _ = run_cli(
            capsys, "tune", "--config", str(cfg), "--r-grid", "0.25",
            "--alpha-grid", "0.0,0.5", "--layer-grids", "1-2",
            "--out", str(tmp_path / "sweep.json"),
        )
        assert code == 0
        sweep = json.loads((tmp_path / "sweep.json").read_text())
        assert sweep["selected"]["r"] == 0.25
        assert len(sweep["stages"]) == 3
