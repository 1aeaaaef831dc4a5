import json
import subprocess
import sys

import numpy as np
import pytest

from coreinfer import synth
from coreinfer.cli import EXIT_CONFIG, EXIT_MODEL, EXIT_NO_STORE, build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out-dir", str(root / "synth"), "--seed", "3"]) == 0
    return {
        "root": root,
        "model": str(root / "synth" / "model"),
        "corpus": str(root / "synth" / "corpus.jsonl"),
    }


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


class TestManifests:
    def test_written_and_finalized(self, workspace, tmp_path):
        out = tmp_path / "run"
        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "1,2,3,4",
                "--strategy",
                "dense",
                "--max-new-tokens",
                "3",
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        manifest = read_json(out / "manifest.json")
        assert manifest["status"] == "ok"
        assert manifest["subcommand"] == "run"
        assert manifest["finished_at"] is not None
        assert manifest["config"]["alpha"] == 0.4  # defaults materialized
        assert manifest["outputs"]["report"]

    def test_help_documents_every_manifest_flag(self):
        from coreinfer.cli import _DEFAULTS

        parser = build_parser()
        sub_actions = next(
            a for a in parser._actions if isinstance(a, type(parser._subparsers._group_actions[0]))
        )
        for name, defaults in _DEFAULTS.items():
            sub = sub_actions.choices[name]
            helped = set()
            for action in sub._actions:
                for opt in action.option_strings:
                    helped.add(opt.lstrip("-").replace("-", "_"))
                assert action.help, f"{name} flag {action.option_strings} lacks help text"
            for key in defaults:
                flag_name = {"store_path": "store"}.get(key, key)
                assert flag_name in helped, f"{name} manifest key {key} has no documented flag"


class TestRun:
    def test_degeneracy_text_equal(self, workspace, tmp_path):
        prompt = ",".join(str(x) for x in np.random.default_rng(503).integers(0, 320, size=96))
        args_common = ["--model", workspace["model"], "--prompt-ids", prompt, "--max-new-tokens", "8"]
        assert main(["run", *args_common, "--strategy", "dense", "--out-dir", str(tmp_path / "d")]) == 0
        assert (
            main(
                [
                    "run",
                    *args_common,
                    "--strategy",
                    "force_stability",
                    "--alpha",
                    "1",
                    "--beta",
                    "1",
                    "--out-dir",
                    str(tmp_path / "s"),
                ]
            )
            == 0
        )
        dense = read_json(tmp_path / "d" / "report.json")
        sparse = read_json(tmp_path / "s" / "report.json")
        assert dense["text"] == sparse["text"]
        assert dense["token_ids"] == sparse["token_ids"]

    def test_missing_store_exit_4(self, workspace, tmp_path):
        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "17,202,54,96,311",
                "--strategy",
                "force_similarity",
                "--out-dir",
                str(tmp_path / "nostore"),
            ]
        )
        assert rc == EXIT_NO_STORE

    def test_config_error_exit_2(self, workspace, tmp_path):
        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "1,2",
                "--alpha",
                "1.5",
                "--out-dir",
                str(tmp_path / "badalpha"),
            ]
        )
        assert rc == EXIT_CONFIG

    def test_model_error_exit_3(self, tmp_path):
        (tmp_path / "notabundle").mkdir()
        rc = main(
            [
                "run",
                "--model",
                str(tmp_path / "notabundle"),
                "--prompt-ids",
                "1,2",
                "--out-dir",
                str(tmp_path / "bad"),
            ]
        )
        assert rc == EXIT_MODEL
        # Manifest was written before the failure and never finalized.
        manifest = read_json(tmp_path / "bad" / "manifest.json")
        assert manifest["status"] == "running"

    def test_seeded_sampling_reproducible(self, workspace, tmp_path):
        args = [
            "run",
            "--model",
            workspace["model"],
            "--prompt-ids",
            "4,9,16,25",
            "--strategy",
            "dense",
            "--sampling",
            "top_k",
            "--top-k",
            "5",
            "--seed",
            "7",
            "--max-new-tokens",
            "8",
        ]
        assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
        assert main([*args, "--out-dir", str(tmp_path / "b")]) == 0
        a = read_json(tmp_path / "a" / "report.json")
        b = read_json(tmp_path / "b" / "report.json")
        assert a["token_ids"] == b["token_ids"]

    def test_raw_text_needs_guard(self, workspace, tmp_path):
        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-text",
                "[5][7]",
                "--out-dir",
                str(tmp_path / "guard"),
            ]
        )
        assert rc == EXIT_CONFIG
        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-text",
                "[5][7]",
                "--vocab-detok-only",
                "--strategy",
                "dense",
                "--max-new-tokens",
                "2",
                "--out-dir",
                str(tmp_path / "guarded"),
            ]
        )
        assert rc == 0

    def test_config_file_and_flag_precedence(self, workspace, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"max_new_tokens": 3, "strategy": "dense", "beta": 0.5}))
        out = tmp_path / "prec"
        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "1,2,3",
                "--config",
                str(config),
                "--beta",
                "0.25",
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        manifest = read_json(out / "manifest.json")
        assert manifest["config"]["max_new_tokens"] == 3  # from file
        assert manifest["config"]["beta"] == 0.25  # flag wins
        assert len(read_json(out / "report.json")["token_ids"]) == 3

    def test_dump_logits(self, workspace, tmp_path):
        out = tmp_path / "dump"
        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "1,2,3",
                "--strategy",
                "dense",
                "--max-new-tokens",
                "2",
                "--dump-logits",
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        payload = read_json(out / "logits.json")
        assert payload["prompt_len"] == 3
        assert len(payload["last_logits"]) == 320


class TestAnalyze:
    def test_monotone_curve_on_drifting_document(self, workspace, tmp_path):
        # Document with early drift then stationary token statistics.
        rng = np.random.default_rng(0)
        early = rng.integers(0, 80, size=40)
        late = rng.integers(240, 320, size=260)
        doc = np.concatenate([early, late])
        corpus = synth.save_corpus_jsonl(tmp_path / "doc.jsonl", [doc])
        out = tmp_path / "analyze"
        rc = main(
            [
                "analyze",
                "--model",
                workspace["model"],
                "--corpus",
                str(corpus),
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        rows = (out / "stability_curve.csv").read_text().splitlines()[1:]
        sims = [float(r.split(",")[2]) for r in rows]
        lens = [int(r.split(",")[1]) for r in rows]
        assert lens == [10, 50, 100, 200, 300]
        assert all(sims[i + 1] >= sims[i] - 0.02 for i in range(len(sims) - 1))
        assert (out / "stability_curve.png").exists()
        assert (out / "docs" / "0000_frequency.csv").exists()

    def test_single_token_corpus(self, workspace, tmp_path):
        corpus = synth.save_corpus_jsonl(tmp_path / "one.jsonl", [np.asarray([5])])
        out = tmp_path / "one"
        rc = main(
            [
                "analyze",
                "--model",
                workspace["model"],
                "--corpus",
                str(corpus),
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        rows = (out / "stability_curve.csv").read_text().splitlines()[1:]
        assert len(rows) == 1
        assert float(rows[0].split(",")[2]) == 1.0

    def test_rerun_identical_bytes(self, workspace, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        args = [
            "analyze",
            "--model",
            workspace["model"],
            "--corpus",
            workspace["corpus"],
            "--max-docs",
            "2",
        ]
        assert main([*args, "--out-dir", str(out1)]) == 0
        assert main([*args, "--out-dir", str(out2)]) == 0
        assert (out1 / "stability_curve.csv").read_bytes() == (out2 / "stability_curve.csv").read_bytes()
        assert (out1 / "docs" / "0000_core_sets.csv").read_bytes() == (
            out2 / "docs" / "0000_core_sets.csv"
        ).read_bytes()


class TestCluster:
    def test_labeled_corpus_keys_groups_by_label(self, workspace, tmp_path):
        out = tmp_path / "cluster"
        rc = main(
            [
                "cluster",
                "--model",
                workspace["model"],
                "--corpus",
                workspace["corpus"],
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        manifest = read_json(out / "manifest.json")
        assert manifest["outputs"]["k_groups"] == 4  # synth corpus has 4 topics
        assert (out / "groups.cinfstore").exists()

    def test_k_override_bypasses_elbow(self, workspace, tmp_path):
        # Strip topics so clustering runs unlabeled, then force k.
        lines = [json.loads(l) for l in open(workspace["corpus"], encoding="utf-8")]
        unlabeled = tmp_path / "unlabeled.jsonl"
        with open(unlabeled, "w", encoding="utf-8") as fh:
            for record in lines:
                fh.write(json.dumps({"tokens": record["tokens"]}) + "\n")
        out = tmp_path / "forced"
        rc = main(
            [
                "cluster",
                "--model",
                workspace["model"],
                "--corpus",
                str(unlabeled),
                "--k",
                "2",
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        manifest = read_json(out / "manifest.json")
        assert manifest["outputs"]["k_groups"] == 2
        assert "wcss" not in manifest["outputs"]  # elbow bypassed

    def test_store_drives_similarity_run(self, workspace, tmp_path):
        store_out = tmp_path / "store"
        assert (
            main(
                [
                    "cluster",
                    "--model",
                    workspace["model"],
                    "--corpus",
                    workspace["corpus"],
                    "--out-dir",
                    str(store_out),
                ]
            )
            == 0
        )
        run_out = tmp_path / "simrun"
        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "3,8,13,21,34",
                "--strategy",
                "force_similarity",
                "--store",
                str(store_out / "groups.cinfstore"),
                "--max-new-tokens",
                "4",
                "--out-dir",
                str(run_out),
            ]
        )
        assert rc == 0
        report = read_json(run_out / "report.json")
        assert report["strategy"] == "similarity"
        assert report["dense_layers"] == [0, 1, 2]


class TestEvalAndBench:
    def test_ppl_reproducible(self, workspace, tmp_path):
        args = [
            "eval",
            "--model",
            workspace["model"],
            "--corpus",
            workspace["corpus"],
            "--mode",
            "ppl",
        ]
        assert main([*args, "--out-dir", str(tmp_path / "p1")]) == 0
        assert main([*args, "--out-dir", str(tmp_path / "p2")]) == 0
        assert (tmp_path / "p1" / "ppl.json").read_bytes() == (tmp_path / "p2" / "ppl.json").read_bytes()

    def test_sweep_grid_cardinality(self, workspace, tmp_path):
        out = tmp_path / "sweep"
        rc = main(
            [
                "eval",
                "--model",
                workspace["model"],
                "--corpus",
                workspace["corpus"],
                "--mode",
                "sweep",
                "--alphas",
                "0.4,1.0",
                "--betas",
                "0.5,1.0",
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        rows = (out / "sweep.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 * 2
        assert (out / "sweep.png").exists()

    def test_bench_reports_flop_ratio_column(self, workspace, tmp_path):
        out = tmp_path / "bench"
        rc = main(
            [
                "bench",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "1,2,3,4,5,6",
                "--betas",
                "0.2",
                "--runs",
                "2",
                "--warmup",
                "1",
                "--max-new-tokens",
                "4",
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        header = (out / "bench.csv").read_text().splitlines()[0].split(",")
        assert "flop_ratio" in header
        assert (out / "bench.png").exists()


class TestReplay:
    def test_replay_reproduces_csv_bytes(self, workspace, tmp_path):
        out = tmp_path / "orig"
        args = [
            "analyze",
            "--model",
            workspace["model"],
            "--corpus",
            workspace["corpus"],
            "--max-docs",
            "2",
            "--out-dir",
            str(out),
        ]
        assert main(args) == 0
        replayed = tmp_path / "replayed"
        assert main(["replay", str(out / "manifest.json"), "--out-dir", str(replayed)]) == 0
        assert (out / "stability_curve.csv").read_bytes() == (replayed / "stability_curve.csv").read_bytes()
        m1 = read_json(out / "manifest.json")
        m2 = read_json(replayed / "manifest.json")
        assert m1["config"] == m2["config"]

    def test_replay_run_report_matches_without_timings(self, workspace, tmp_path):
        out = tmp_path / "runorig"
        args = [
            "run",
            "--model",
            workspace["model"],
            "--prompt-ids",
            "2,4,8,16",
            "--strategy",
            "force_stability",
            "--max-new-tokens",
            "5",
            "--out-dir",
            str(out),
        ]
        assert main(args) == 0
        replayed = tmp_path / "runreplay"
        assert main(["replay", str(out / "manifest.json"), "--out-dir", str(replayed)]) == 0
        a = read_json(out / "report.json")
        b = read_json(replayed / "report.json")
        a.pop("timings")
        b.pop("timings")
        assert a == b


class TestEntryPoint:
    def test_module_invocation(self, workspace, tmp_path):
        result = subprocess.run(
            [
                sys.executable,
                "-m",
                "coreinfer.cli",
                "run",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "1,2,3",
                "--strategy",
                "dense",
                "--max-new-tokens",
                "2",
                "--out-dir",
                str(tmp_path / "proc"),
            ],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0
        assert "report:" in result.stdout


class TestClusterUnlabeled:
    def test_elbow_path_emits_wcss_and_figure(self, workspace, tmp_path):
        seqs, _ = synth.make_topic_corpus(seed=5, n_topics=2, per_topic=8, length=24, vocab_size=320)
        corpus = synth.save_corpus_jsonl(tmp_path / "u.jsonl", seqs)
        out = tmp_path / "cluster"
        rc = main(
            [
                "cluster",
                "--model",
                workspace["model"],
                "--corpus",
                str(corpus),
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        manifest = read_json(out / "manifest.json")
        assert manifest["outputs"]["k_groups"] >= 1
        assert (out / "wcss.csv").exists()
        assert (out / "elbow.png").exists()
        wcss_rows = (out / "wcss.csv").read_text().splitlines()
        assert wcss_rows[0] == "k,wcss"
        values = [float(r.split(",")[1]) for r in wcss_rows[1:]]
        assert all(values[i] >= values[i + 1] - 1e-9 for i in range(len(values) - 1))


class TestEvalSpearmanCli:
    def test_pairs_corpus_produces_report(self, workspace, tmp_path):
        rng = np.random.default_rng(0)
        base = rng.integers(0, 320, size=28)
        pairs = []
        for i in range(12):
            other = base.copy()
            other[: 2 * i + 1] = rng.integers(0, 320, size=2 * i + 1)
            pairs.append((base.tolist(), other.tolist(), float(5 - 5 * i / 11)))
        corpus = synth.save_corpus_jsonl(tmp_path / "pairs.jsonl", None, pairs=pairs)
        out = tmp_path / "spearman"
        rc = main(
            [
                "eval",
                "--model",
                workspace["model"],
                "--corpus",
                str(corpus),
                "--mode",
                "spearman",
                "--out-dir",
                str(out),
            ]
        )
        assert rc == 0
        payload = read_json(out / "spearman.json")
        assert payload["n_pairs"] == 12
        assert -1.0 <= payload["rho"] <= 1.0


class TestThreadCap:
    def test_env_cap_propagates_to_blas_vars(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("COREINFER_THREADS", "1")
        import os

        rc = main(
            [
                "run",
                "--model",
                workspace["model"],
                "--prompt-ids",
                "1,2,3",
                "--strategy",
                "dense",
                "--max-new-tokens",
                "2",
                "--out-dir",
                str(tmp_path / "capped"),
            ]
        )
        assert rc == 0
        assert os.environ["OPENBLAS_NUM_THREADS"] == "1"
        assert os.environ["OMP_NUM_THREADS"] == "1"
