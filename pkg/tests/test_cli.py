"""CLI subcommands: config handling, exit codes, end-to-end chain."""

import hashlib
import json

import numpy as np
import pytest

from coverseek.cli import main
from coverseek.store import read_tensors

TINY_CONFIG = {
    "cqt": {
        "chunk_seconds": 4.0,
        "overlap_seconds": 2.0,
        "avg_factor": 20,
        "n_bins": 48,
        "f_min": 65.4,
        "min_tail_seconds": 1.0,
    },
    "encoder": {
        "conv_blocks": 3,
        "channels": [8, 12, 16],
        "backbone_dim": 16,
        "out_dim": 8,
    },
    "synth": {
        "n_cliques": 3,
        "versions_per_clique": 2,
        "base_duration_s": 12.0,
    },
    "train": {
        "batch_size": 4,
        "epochs": 1,
        "steps_per_epoch": 3,
        "short_clip_min_s": 4.0,
        "short_clip_max_s": 10.0,
        "pca_warmup_chunks": 8,
    },
    "index": {"ef_construction": 80, "ef_search": 64},
    "retrieval": {"k": 10},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> train -> ingest -> index-build, shared by the query tests."""
    root = tmp_path_factory.mktemp("cli_ws")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    data = root / "data"
    assert main(["--config", str(cfg_path), "--seed", "13", "synth", "--out", str(data)]) == 0
    assert (
        main(
            [
                "--config",
                str(cfg_path),
                "train",
                "--data",
                str(data),
                "--out",
                str(root / "model"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "--config",
                str(cfg_path),
                "ingest",
                "--data",
                str(data),
                "--model",
                str(root / "model" / "model.cvst"),
                "--out",
                str(root / "gallery.cvs"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "--config",
                str(cfg_path),
                "index-build",
                "--store",
                str(root / "gallery.cvs"),
                "--out",
                str(root / "gallery.hnsw"),
            ]
        )
        == 0
    )
    return root


def tree_digest(root):
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


class TestSynth:
    def test_same_seed_identical_trees(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synth": {"n_cliques": 2, "versions_per_clique": 2, "base_duration_s": 6.0}}))
        for name in ("a", "b"):
            assert main(["--config", str(cfg), "--seed", "7", "synth", "--out", str(tmp_path / name)]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_summary_echoes_config(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "d"), "--cliques", "2", "--versions", "2"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["config"]["synth"]["n_cliques"] == 2
        assert summary["n_recordings"] == 4


class TestConfigHandling:
    def test_unknown_section_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"nope": {}}))
        assert main(["--config", str(cfg), "synth", "--out", str(tmp_path / "x")]) == 2

    def test_unknown_key_exit_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"cqt": {"hop_size": 512}}))
        assert main(["--config", str(cfg), "features", "--audio", "x.wav", "--out", "y"]) == 2

    def test_invalid_json_exit_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        assert main(["--config", str(cfg), "synth", "--out", str(tmp_path / "x")]) == 2

    def test_invalid_field_value_exit_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"cqt": {"overlap_seconds": 30.0}}))
        assert main(["--config", str(cfg), "features", "--audio", "x.wav", "--out", "y"]) == 2


class TestExitCodes:
    def test_missing_audio_exit_3(self, tmp_path):
        assert main(["features", "--audio", str(tmp_path / "none.wav"), "--out", str(tmp_path / "f")]) == 3

    def test_corrupt_store_exit_4(self, workspace, tmp_path):
        data = bytearray((workspace / "gallery.cvs").read_bytes())
        data[10] ^= 0xFF
        bad = tmp_path / "bad.cvs"
        bad.write_bytes(bytes(data))
        code = main(
            [
                "index-build",
                "--store",
                str(bad),
                "--out",
                str(tmp_path / "x.hnsw"),
            ]
        )
        assert code == 4


class TestFeatures:
    def test_writes_tensor_container(self, workspace, tmp_path, capsys):
        wav = next((workspace / "data").glob("*.wav"))
        out = tmp_path / "feats.cvst"
        cfg = workspace / "config.json"
        assert main(["--config", str(cfg), "features", "--audio", str(wav), "--out", str(out)]) == 0
        tensors = read_tensors(out)
        assert tensors["data"].ndim == 3
        assert tensors["data"].shape[1] == 48
        assert bytes(tensors["recording_id"]).decode() == wav.stem


class TestQueryAndEval:
    def test_self_query_rank_one(self, workspace, capsys):
        wav = sorted((workspace / "data").glob("*.wav"))[0]
        code = main(
            [
                "--config",
                str(workspace / "config.json"),
                "query",
                "--audio",
                str(wav),
                "--model",
                str(workspace / "model" / "model.cvst"),
                "--store",
                str(workspace / "gallery.cvs"),
                "--index",
                str(workspace / "gallery.hnsw"),
            ]
        )
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["results"][0]["recording_id"] == wav.stem
        assert result["results"][0]["score"] == pytest.approx(1.0, abs=1e-5)
        assert result["results"][0]["rank"] == 1
        assert result["maxmean_evals"] == result["stage1_candidates"]
        assert "config" in result

    def test_query_by_recording_id(self, workspace, capsys):
        code = main(
            [
                "--config",
                str(workspace / "config.json"),
                "query",
                "--recording-id",
                "clique0001_v0",
                "--model",
                str(workspace / "model" / "model.cvst"),
                "--store",
                str(workspace / "gallery.cvs"),
                "--index",
                str(workspace / "gallery.hnsw"),
            ]
        )
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["results"][0]["recording_id"] == "clique0001_v0"

    def test_eval_duration_rows(self, workspace, tmp_path, capsys):
        code = main(
            [
                "--config",
                str(workspace / "config.json"),
                "--seed",
                "3",
                "eval",
                "--data",
                str(workspace / "data"),
                "--model",
                str(workspace / "model" / "model.cvst"),
                "--store",
                str(workspace / "gallery.cvs"),
                "--index",
                str(workspace / "gallery.hnsw"),
                "--durations",
                "4,6,8",
                "--skip-full",
                "--max-sources",
                "3",
                "--out",
                str(tmp_path / "report"),
            ]
        )
        assert code == 0
        report = json.loads((tmp_path / "report" / "report.json").read_text())
        assert [row["duration_s"] for row in report["rows"]] == ["4", "6", "8"]
        csv_lines = (tmp_path / "report" / "report.csv").read_text().strip().split("\n")
        assert csv_lines[0] == "duration_s,mAP,MR1,n_queries"
        assert len(csv_lines) == 4
        assert report["config"]["eval"]["durations"] == [4, 6, 8]


class TestIdempotence:
    def test_ingest_and_index_build_are_idempotent(self, workspace, tmp_path):
        cfg = str(workspace / "config.json")
        outs = []
        for name in ("s1.cvs", "s2.cvs"):
            assert main([
                "--config", cfg, "ingest", "--data", str(workspace / "data"),
                "--model", str(workspace / "model" / "model.cvst"),
                "--out", str(tmp_path / name),
            ]) == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
        idx = []
        for name in ("i1.hnsw", "i2.hnsw"):
            assert main([
                "index-build", "--store", str(tmp_path / "s1.cvs"),
                "--out", str(tmp_path / name),
            ]) == 0
            idx.append((tmp_path / name).read_bytes())
        assert idx[0] == idx[1]
