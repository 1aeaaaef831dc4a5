"""Command-line entry point exposing every pipeline stage.

Subcommands: ``run`` (generate), ``analyze`` (core-set and stability CSVs),
``cluster`` (build a semantic group store), ``eval`` (perplexity, sweeps,
rank correlation), ``bench`` (decode timing), ``synth`` (seeded fixtures)
and ``replay`` (re-run a manifest). Every run writes a manifest before any
work starts and finalizes it on success; re-running from the manifest
reproduces all non-timing outputs byte for byte.

Exit codes: 0 success, 2 configuration error, 3 model error, 4 missing
group store. ``COREINFER_THREADS`` caps kernel thread counts and must be
applied before numpy loads, so heavyweight imports happen inside handlers.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from pathlib import Path

from . import __version__

EXIT_CONFIG = 2
EXIT_MODEL = 3
EXIT_NO_STORE = 4

_GENERATION_KEYS = (
    "alpha",
    "beta",
    "gamma",
    "tau_stability",
    "strategy",
    "max_new_tokens",
    "sampling",
    "top_k",
    "seed",
    "store_path",
    "reference_layer",
)


class ConfigError(ValueError):
    pass


def _apply_thread_cap() -> None:
    cap = os.environ.get("COREINFER_THREADS")
    if cap:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = cap


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coreinfer",
        description="Sparse-decode inference engine driven by frozen core-neuron sets",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p: argparse.ArgumentParser, model: bool = True) -> None:
        p.add_argument("--out-dir", required=True, help="directory for outputs and the run manifest")
        p.add_argument("--config", help="JSON config file; explicit flags override it")
        p.add_argument("--seed", type=int, help="single seed feeding all randomness (default 0)")
        if model:
            p.add_argument("--model", required=True, help="CINF bundle directory")

    def add_generation(p: argparse.ArgumentParser) -> None:
        p.add_argument("--alpha", type=float, help="token core fraction (default 0.4)")
        p.add_argument("--beta", type=float, help="sentence core fraction (default 0.2)")
        p.add_argument("--gamma", type=float, help="group core fraction (default 0.2)")
        p.add_argument("--tau-stability", type=float, help="stability threshold (default 0.85)")
        p.add_argument(
            "--strategy",
            choices=("auto", "force_stability", "force_similarity", "dense"),
            help="plan strategy (default auto)",
        )
        p.add_argument("--max-new-tokens", type=int, help="tokens to generate (default 32)")
        p.add_argument("--sampling", choices=("greedy", "top_k"), help="decoder (default greedy)")
        p.add_argument("--top-k", type=int, help="k for top_k sampling")
        p.add_argument("--store", dest="store_path", help="semantic group store (.cinfstore)")
        p.add_argument("--reference-layer", type=int, help="layer for stability/grouping")

    def add_prompt(p: argparse.ArgumentParser) -> None:
        p.add_argument("--prompt-file", help="token-id JSON array or JSONL record")
        p.add_argument("--prompt-ids", help="comma-separated token ids")
        p.add_argument("--prompt-text", help="raw text; requires --vocab-detok-only")
        p.add_argument(
            "--vocab-detok-only",
            action="store_const",
            const=True,
            help="acknowledge that reverse vocab lookup is not a real tokenizer",
        )

    p = sub.add_parser("run", help="generate from a prompt")
    add_common(p)
    add_generation(p)
    add_prompt(p)
    p.add_argument("--dump-logits", action="store_const", const=True, help="write dense prefill logits for parity checks")

    p = sub.add_parser("analyze", help="export core sets, frequencies and stability curves")
    add_common(p)
    p.add_argument("--corpus", required=True, help="JSON-lines token corpus")
    p.add_argument("--alpha", type=float, help="token core fraction (default 0.4)")
    p.add_argument("--beta", type=float, help="sentence core fraction (default 0.2)")
    p.add_argument("--reference-layer", type=int, help="layer for the stability curve")
    p.add_argument("--prefix-lengths", help="comma list of prefix lengths (default 10,50,100,200,300)")
    p.add_argument("--max-docs", type=int, help="cap on documents exported (default 16)")

    p = sub.add_parser("cluster", help="build a semantic group store from a corpus")
    add_common(p)
    p.add_argument("--corpus", required=True, help="JSON-lines token corpus (topics optional)")
    p.add_argument("--alpha", type=float, help="token core fraction (default 0.4)")
    p.add_argument("--gamma", type=float, help="group core fraction (default 0.2)")
    p.add_argument("--k", type=int, help="force the group count, bypassing the elbow")
    p.add_argument("--max-k", type=int, help="largest k tried by the elbow (default 8)")
    p.add_argument("--reference-layer", type=int, help="layer whose activations are clustered")

    p = sub.add_parser("eval", help="perplexity, ratio sweeps, rank correlation")
    add_common(p)
    p.add_argument("--corpus", required=True, help="JSON-lines corpus (pairs for spearman)")
    p.add_argument(
        "--mode",
        required=True,
        choices=("ppl", "sweep", "spearman"),
        help="which evaluation to run",
    )
    p.add_argument("--alpha", type=float, help="token core fraction (default 0.4)")
    p.add_argument("--beta", type=float, help="sentence core fraction (default 0.2)")
    p.add_argument("--alphas", help="sweep grid, comma list (default 0.4,1.0)")
    p.add_argument("--betas", help="sweep grid, comma list (default 0.25,0.5,1.0)")
    p.add_argument("--reference-layer", type=int, help="layer for spearman core sets")

    p = sub.add_parser("bench", help="decode throughput and FFN cost accounting")
    add_common(p)
    add_prompt(p)
    p.add_argument("--alpha", type=float, help="token core fraction (default 0.4)")
    p.add_argument("--betas", help="sparse arms, comma list (default 0.2,0.4,1.0)")
    p.add_argument("--runs", type=int, help="measured runs per arm (default 5)")
    p.add_argument("--warmup", type=int, help="unmeasured warmup runs per arm (default 1)")
    p.add_argument("--max-new-tokens", type=int, help="decode steps per run (default 32)")

    p = sub.add_parser("synth", help="generate a seeded synthetic bundle and corpus")
    add_common(p, model=False)
    p.add_argument("--preset", choices=("tiny", "bench"), help="model size preset (default tiny)")
    p.add_argument(
        "--activation",
        choices=("relu_ffn", "silu_gated_ffn"),
        help="FFN flavor (default relu_ffn)",
    )

    p = sub.add_parser("replay", help="re-run a finished manifest")
    p.add_argument("manifest", help="path to a manifest.json from a previous run")
    p.add_argument("--out-dir", required=True, help="directory for the replayed outputs")
    return parser


_DEFAULTS: dict[str, dict] = {
    "run": {
        "alpha": 0.4,
        "beta": 0.2,
        "gamma": 0.2,
        "tau_stability": 0.85,
        "strategy": "auto",
        "max_new_tokens": 32,
        "sampling": "greedy",
        "top_k": 0,
        "seed": 0,
        "store_path": None,
        "reference_layer": None,
        "prompt_file": None,
        "prompt_ids": None,
        "prompt_text": None,
        "vocab_detok_only": False,
        "dump_logits": False,
    },
    "analyze": {
        "alpha": 0.4,
        "beta": 0.2,
        "seed": 0,
        "reference_layer": None,
        "prefix_lengths": "10,50,100,200,300",
        "max_docs": 16,
    },
    "cluster": {
        "alpha": 0.4,
        "gamma": 0.2,
        "seed": 0,
        "k": None,
        "max_k": 8,
        "reference_layer": None,
    },
    "eval": {
        "mode": None,
        "alpha": 0.4,
        "beta": 0.2,
        "alphas": "0.4,1.0",
        "betas": "0.25,0.5,1.0",
        "seed": 0,
        "reference_layer": None,
    },
    "bench": {
        "alpha": 0.4,
        "betas": "0.2,0.4,1.0",
        "runs": 5,
        "warmup": 1,
        "max_new_tokens": 32,
        "seed": 0,
        "prompt_file": None,
        "prompt_ids": None,
        "prompt_text": None,
        "vocab_detok_only": False,
    },
    "synth": {"preset": "tiny", "activation": "relu_ffn", "seed": 0},
}


def _resolve_config(subcommand: str, args: argparse.Namespace) -> dict:
    resolved = dict(_DEFAULTS[subcommand])
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            overrides = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        unknown = set(overrides) - set(resolved)
        if unknown:
            raise ConfigError(f"unknown config keys for {subcommand}: {sorted(unknown)}")
        resolved.update(overrides)
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    if "mode" in resolved and resolved["mode"] is None:
        raise ConfigError("eval requires --mode")
    return resolved


def _write_manifest(outdir: Path, payload: dict) -> Path:
    path = outdir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_model(path: str):
    from .bundle import BundleError
    from .model import load_model

    try:
        return load_model(path)
    except (OSError, BundleError) as exc:
        raise _ModelError(str(exc)) from exc


class _ModelError(RuntimeError):
    pass


def _prompt_ids_from_config(cfg: dict, model) -> "np.ndarray":
    import numpy as np

    given = [k for k in ("prompt_file", "prompt_ids", "prompt_text") if cfg.get(k)]
    if len(given) != 1:
        raise ConfigError("exactly one of --prompt-file, --prompt-ids, --prompt-text is required")
    if cfg.get("prompt_text"):
        if not cfg.get("vocab_detok_only"):
            raise ConfigError(
                "raw text prompts need --vocab-detok-only: vocab.json is a "
                "detokenization table, not a tokenizer; pre-tokenize with the "
                "exporter for faithful ids"
            )
        return np.asarray(_greedy_vocab_encode(cfg["prompt_text"], model.vocab), dtype=np.int64)
    if cfg.get("prompt_ids"):
        return np.asarray(_ints(cfg["prompt_ids"]), dtype=np.int64)
    raw = Path(cfg["prompt_file"]).read_text(encoding="utf-8").strip()
    try:
        payload = json.loads(raw.splitlines()[0])
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"prompt file is not token-id JSON ({exc}); raw text needs "
            "--prompt-text with --vocab-detok-only"
        ) from exc
    if isinstance(payload, dict):
        payload = payload.get("tokens")
    if not isinstance(payload, list):
        raise ConfigError("prompt file must hold a token-id array or a {'tokens': ...} record")
    return np.asarray(payload, dtype=np.int64)


def _greedy_vocab_encode(text: str, vocab: list[str]) -> list[int]:
    by_string = sorted(
        ((entry, i) for i, entry in enumerate(vocab) if entry),
        key=lambda pair: -len(pair[0]),
    )
    ids: list[int] = []
    pos = 0
    while pos < len(text):
        for entry, idx in by_string:
            if text.startswith(entry, pos):
                ids.append(idx)
                pos += len(entry)
                break
        else:
            raise ConfigError(f"text not representable with this vocab at offset {pos}")
    return ids


def _generation_config(cfg: dict):
    from .engine import GenerationConfig

    kwargs = {k: cfg[k] for k in _GENERATION_KEYS if k in cfg}
    return GenerationConfig(**kwargs).validate()


def _handle_run(cfg: dict, inputs: dict, outdir: Path) -> dict:
    import numpy as np

    from .engine import generate
    from .predict import load_store

    model = _load_model(inputs["model"])
    prompt = _prompt_ids_from_config(cfg, model)
    gen_cfg = _generation_config(cfg)
    store = load_store(cfg["store_path"]) if cfg.get("store_path") else None
    report = generate(model, prompt, gen_cfg, store)
    report_path = outdir / "report.json"
    report_path.write_text(report.to_json(), encoding="utf-8")
    outputs = {"report": str(report_path)}
    if cfg.get("dump_logits"):
        from .model import forward_prefill

        logits = forward_prefill(model, prompt).last_logits
        dump_path = outdir / "logits.json"
        dump_path.write_text(
            json.dumps(
                {
                    "prompt_len": int(prompt.size),
                    "last_logits": [float(x) for x in np.asarray(logits, dtype=np.float64)],
                },
            )
            + "\n",
            encoding="utf-8",
        )
        outputs["logits"] = str(dump_path)
    print(report.text if report.text is not None else report.token_ids)
    print(f"report: {report_path}")
    return outputs


def _load_corpus(path: str):
    from .evalbench import load_corpus

    try:
        return load_corpus(path)
    except OSError as exc:
        raise ConfigError(f"cannot read corpus: {exc}") from exc


def _handle_analyze(cfg: dict, inputs: dict, outdir: Path) -> dict:
    import numpy as np

    from . import core
    from .figures import render_stability_curves
    from .model import forward_prefill
    from .predict import default_reference_layer

    model = _load_model(inputs["model"])
    corpus = _load_corpus(inputs["corpus"])
    if not corpus.sequences:
        raise ConfigError("analyze needs a sequence corpus")
    ref = cfg["reference_layer"]
    if ref is None:
        ref = default_reference_layer(model.config.n_layers)
    prefix_lengths = _ints(cfg["prefix_lengths"])
    if not prefix_lengths:
        raise ConfigError("--prefix-lengths must name at least one length")

    docs_dir = outdir / "docs"
    docs_dir.mkdir(parents=True, exist_ok=True)
    curves: dict[str, list[tuple[int, float]]] = {}
    curve_rows: list[tuple[int, int, float]] = []
    n_docs = min(len(corpus.sequences), cfg["max_docs"])
    for di in range(n_docs):
        seq = corpus.sequences[di]
        res = forward_prefill(model, seq, record=True)
        freq_maps, sent_sets = [], []
        per_layer_token_sets = {}
        for layer in range(model.config.n_layers):
            block = res.activations[layer]
            token_sets = [
                core.token_core(block[t], cfg["alpha"], layer=layer, token_pos=t)
                for t in range(block.shape[0])
            ]
            per_layer_token_sets[layer] = token_sets
            freq = core.frequency_counts(token_sets, model.config.d_ffn, layer=layer)
            freq_maps.append(freq)
            sent_sets.append(core.sentence_core(freq, cfg["beta"], alpha=cfg["alpha"]))
        core.write_frequency_csv(freq_maps, docs_dir / f"{di:04d}_frequency.csv")
        core.write_core_sets_csv(sent_sets, docs_dir / f"{di:04d}_core_sets.csv")

        m = len(seq)
        lengths = sorted({p for p in prefix_lengths if p <= m}) or [m]
        token_sets = per_layer_token_sets[ref]
        final = core.sentence_core(
            core.frequency_counts(token_sets, model.config.d_ffn, layer=ref), cfg["beta"]
        )
        points = []
        for p in lengths:
            prefix = core.sentence_core(
                core.frequency_counts(token_sets[:p], model.config.d_ffn, layer=ref),
                cfg["beta"],
            )
            sim = core.core_similarity(prefix, final)
            points.append((p, sim))
            curve_rows.append((di, p, sim))
        curves[f"doc{di}"] = points

    curve_path = outdir / "stability_curve.csv"
    with open(curve_path, "w", newline="") as fh:
        fh.write("doc,prefix_len,similarity\n")
        for di, p, sim in curve_rows:
            fh.write(f"{di},{p},{sim!r}\n")
    figure_path = render_stability_curves(curves, outdir / "stability_curve.png")
    return {
        "stability_curve": str(curve_path),
        "figure": str(figure_path),
        "docs_dir": str(docs_dir),
    }


def _sentence_activations(model, sequences):
    from .model import forward_prefill

    out = []
    for seq in sequences:
        res = forward_prefill(model, seq, record=True)
        out.append(res.activations)
    return out


def _handle_cluster(cfg: dict, inputs: dict, outdir: Path) -> dict:
    from .figures import render_elbow
    from .predict import (
        build_group_store,
        default_reference_layer,
        elbow_select_k,
        kmeans,
        save_store,
    )

    model = _load_model(inputs["model"])
    corpus = _load_corpus(inputs["corpus"])
    if not corpus.sequences:
        raise ConfigError("cluster needs a sequence corpus")
    sentences = _sentence_activations(model, corpus.sequences)
    ref = cfg["reference_layer"]
    if ref is None:
        ref = default_reference_layer(model.config.n_layers)
    store = build_group_store(
        sentences,
        labels=corpus.topics,
        alpha=cfg["alpha"],
        gamma=cfg["gamma"],
        n_layers=model.config.n_layers,
        n_neurons=model.config.d_ffn,
        reference_layer=ref,
        k=cfg["k"],
        seed=cfg["seed"],
        max_k=cfg["max_k"],
    )
    store_path = save_store(store, outdir / "groups.cinfstore")
    outputs = {"store": str(store_path), "k_groups": store.k_groups}
    if corpus.topics is None and cfg["k"] is None and store.k_groups > 1:
        import numpy as np

        reps = np.stack(
            [np.asarray(s[ref], dtype=np.float64).mean(axis=0) for s in sentences]
        )
        curve = [
            (kk, kmeans(reps, kk, seed=cfg["seed"])[2])
            for kk in range(1, min(cfg["max_k"], len(sentences)) + 1)
        ]
        wcss_path = outdir / "wcss.csv"
        with open(wcss_path, "w", newline="") as fh:
            fh.write("k,wcss\n")
            for kk, w in curve:
                fh.write(f"{kk},{w!r}\n")
        outputs["wcss"] = str(wcss_path)
        outputs["figure"] = str(render_elbow(curve, elbow_select_k(curve), outdir / "elbow.png"))
    return outputs


def _handle_eval(cfg: dict, inputs: dict, outdir: Path) -> dict:
    from .engine import GenerationConfig
    from .evalbench import perplexity, spearman_core_vs_semantic, sweep
    from .figures import render_sweep

    model = _load_model(inputs["model"])
    corpus = _load_corpus(inputs["corpus"])
    mode = cfg["mode"]
    if mode == "ppl":
        gen_cfg = GenerationConfig(
            alpha=cfg["alpha"], beta=cfg["beta"], reference_layer=cfg["reference_layer"]
        )
        payload = {
            "dense": perplexity(model, corpus, "dense", gen_cfg),
            "plan": perplexity(model, corpus, "plan", gen_cfg),
            "alpha": cfg["alpha"],
            "beta": cfg["beta"],
        }
        path = outdir / "ppl.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return {"ppl": str(path)}
    if mode == "sweep":
        result = sweep(model, corpus, _floats(cfg["alphas"]), _floats(cfg["betas"]))
        csv_path = result.to_csv(outdir / "sweep.csv")
        figure_path = render_sweep(result.rows, outdir / "sweep.png")
        return {"sweep": str(csv_path), "figure": str(figure_path)}
    result = spearman_core_vs_semantic(
        model, corpus, cfg["alpha"], cfg["beta"], cfg["reference_layer"]
    )
    path = outdir / "spearman.json"
    path.write_text(
        json.dumps(
            {"rho": result.rho, "pvalue": result.pvalue, "n_pairs": result.n_pairs},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    return {"spearman": str(path)}


def _handle_bench(cfg: dict, inputs: dict, outdir: Path) -> dict:
    from .evalbench import bench_decode, bench_rows_to_csv
    from .figures import render_bench

    model = _load_model(inputs["model"])
    prompt = _prompt_ids_from_config(cfg, model)
    rows = bench_decode(
        model,
        prompt,
        betas=_floats(cfg["betas"]),
        alpha=cfg["alpha"],
        runs=cfg["runs"],
        warmup=cfg["warmup"],
        max_new_tokens=cfg["max_new_tokens"],
    )
    csv_path = bench_rows_to_csv(rows, outdir / "bench.csv")
    figure_path = render_bench(rows, outdir / "bench.png")
    return {"bench": str(csv_path), "figure": str(figure_path)}


def _handle_synth(cfg: dict, inputs: dict, outdir: Path) -> dict:
    from .synth import (
        make_bench_model,
        make_tiny_model,
        make_topic_corpus,
        save_corpus_jsonl,
        write_model_bundle,
    )

    if cfg["preset"] == "tiny":
        model = make_tiny_model(seed=cfg["seed"], activation_kind=cfg["activation"])
    else:
        model = make_bench_model(seed=cfg["seed"])
    bundle_dir = write_model_bundle(model, outdir / "model")
    sequences, topics = make_topic_corpus(
        seed=cfg["seed"],
        n_topics=4,
        per_topic=6,
        length=24,
        vocab_size=model.config.vocab_size,
    )
    corpus_path = save_corpus_jsonl(outdir / "corpus.jsonl", sequences, topics=topics)
    return {"model": str(bundle_dir), "corpus": str(corpus_path)}


_HANDLERS = {
    "run": _handle_run,
    "analyze": _handle_analyze,
    "cluster": _handle_cluster,
    "eval": _handle_eval,
    "bench": _handle_bench,
    "synth": _handle_synth,
}


def _execute(subcommand: str, cfg: dict, inputs: dict, out_dir: str) -> int:
    outdir = Path(out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "seed": cfg.get("seed", 0),
        "config": cfg,
        "inputs": inputs,
        "outputs": {},
        "status": "running",
        "started_at": _now(),
        "finished_at": None,
    }
    _write_manifest(outdir, manifest)
    outputs = _HANDLERS[subcommand](cfg, inputs, outdir)
    manifest["outputs"] = outputs
    manifest["status"] = "ok"
    manifest["finished_at"] = _now()
    _write_manifest(outdir, manifest)
    return 0


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.subcommand == "replay":
            try:
                manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot load manifest: {exc}") from exc
            return _execute(
                manifest["subcommand"],
                manifest["config"],
                manifest["inputs"],
                args.out_dir,
            )
        cfg = _resolve_config(args.subcommand, args)
        inputs = {}
        for key in ("model", "corpus"):
            if getattr(args, key, None) is not None:
                inputs[key] = getattr(args, key)
        return _execute(args.subcommand, cfg, inputs, args.out_dir)
    except _ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        from .engine import MissingStoreError

        if isinstance(exc, MissingStoreError):
            print(f"missing store: {exc}", file=sys.stderr)
            return EXIT_NO_STORE
        raise


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
