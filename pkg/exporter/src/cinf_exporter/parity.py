"""Logit parity between the source framework and the engine's dense path.

The engine is driven strictly through its CLI: each probe prompt becomes a
``coreinfer run --strategy dense --dump-logits`` invocation whose dumped
prefill logits are compared against the checkpoint's forward pass.
"""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


@dataclass
class ParityReport:
    per_prompt_max_abs_diff: list[float]
    tolerance: float

    @property
    def max_abs_diff(self) -> float:
        return max(self.per_prompt_max_abs_diff)

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tolerance

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_prompt_max_abs_diff": self.per_prompt_max_abs_diff,
                "max_abs_diff": self.max_abs_diff,
                "tolerance": self.tolerance,
                "passed": self.passed,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"


def engine_prefill_logits(bundle_dir, prompt_ids: list[int], workdir: Path) -> np.ndarray:
    result = subprocess.run(
        [
            sys.executable,
            "-m",
            "coreinfer.cli",
            "run",
            "--model",
            str(bundle_dir),
            "--prompt-ids",
            ",".join(str(t) for t in prompt_ids),
            "--strategy",
            "dense",
            "--max-new-tokens",
            "1",
            "--dump-logits",
            "--out-dir",
            str(workdir),
        ],
        capture_output=True,
        text=True,
    )
    if result.returncode != 0:
        raise RuntimeError(
            f"engine run failed (exit {result.returncode}): {result.stderr.strip()}"
        )
    payload = json.loads((workdir / "logits.json").read_text(encoding="utf-8"))
    return np.asarray(payload["last_logits"], dtype=np.float64)


def parity_check(bundle_dir, checkpoint_dir, probe_prompts: list[list[int]], tolerance: float = 1e-3) -> ParityReport:
    from transformers import AutoModelForCausalLM

    for prompt in probe_prompts:
        if len(prompt) == 0:
            raise ValueError("probe prompts must be nonempty")
    model = AutoModelForCausalLM.from_pretrained(checkpoint_dir, dtype=torch.float32).eval()
    diffs = []
    with tempfile.TemporaryDirectory() as tmp:
        for idx, prompt in enumerate(probe_prompts):
            with torch.no_grad():
                source = model(torch.tensor([prompt])).logits[0, -1].numpy().astype(np.float64)
            workdir = Path(tmp) / f"probe{idx}"
            engine = engine_prefill_logits(bundle_dir, prompt, workdir)
            if engine.shape != source.shape:
                raise RuntimeError(
                    f"logit shape mismatch: engine {engine.shape} vs source {source.shape}"
                )
            diffs.append(float(np.abs(engine - source).max()))
    return ParityReport(per_prompt_max_abs_diff=diffs, tolerance=tolerance)
