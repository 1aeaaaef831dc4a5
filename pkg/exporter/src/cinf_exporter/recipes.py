"""Export recipes: which checkpoints are convertible and how tensors map."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ExportError(RuntimeError):
    """Checkpoint cannot be converted; the message lists what is missing."""


@dataclass
class ExportRecipe:
    """One conversion job: source checkpoint directory to CINF bundle."""

    checkpoint: Path
    out_dir: Path
    tokenizer: str = "byte"  # byte-level is the only tokenizer shipped
    max_seq_len: int | None = None  # clamp below the checkpoint's maximum

    def __post_init__(self) -> None:
        self.checkpoint = Path(self.checkpoint)
        self.out_dir = Path(self.out_dir)
        if self.tokenizer != "byte":
            raise ExportError(f"unsupported tokenizer {self.tokenizer!r}; only 'byte' ships")


# Source state-dict key template -> CINF tensor name, per architecture family.
OPT_LAYER_MAP = {
    "model.decoder.layers.{i}.self_attn_layer_norm.weight": "layers.{i}.attn_norm.gain",
    "model.decoder.layers.{i}.self_attn_layer_norm.bias": "layers.{i}.attn_norm.bias",
    "model.decoder.layers.{i}.self_attn.q_proj.weight": "layers.{i}.attn.wq",
    "model.decoder.layers.{i}.self_attn.q_proj.bias": "layers.{i}.attn.bq",
    "model.decoder.layers.{i}.self_attn.k_proj.weight": "layers.{i}.attn.wk",
    "model.decoder.layers.{i}.self_attn.k_proj.bias": "layers.{i}.attn.bk",
    "model.decoder.layers.{i}.self_attn.v_proj.weight": "layers.{i}.attn.wv",
    "model.decoder.layers.{i}.self_attn.v_proj.bias": "layers.{i}.attn.bv",
    "model.decoder.layers.{i}.self_attn.out_proj.weight": "layers.{i}.attn.wo",
    "model.decoder.layers.{i}.self_attn.out_proj.bias": "layers.{i}.attn.bo",
    "model.decoder.layers.{i}.final_layer_norm.weight": "layers.{i}.ffn_norm.gain",
    "model.decoder.layers.{i}.final_layer_norm.bias": "layers.{i}.ffn_norm.bias",
    "model.decoder.layers.{i}.fc1.weight": "layers.{i}.ffn.up",
    "model.decoder.layers.{i}.fc1.bias": "layers.{i}.ffn.up_bias",
    "model.decoder.layers.{i}.fc2.weight": "layers.{i}.ffn.down",
    "model.decoder.layers.{i}.fc2.bias": "layers.{i}.ffn.down_bias",
}

LLAMA_LAYER_MAP = {
    "model.layers.{i}.input_layernorm.weight": "layers.{i}.attn_norm.gain",
    "model.layers.{i}.self_attn.q_proj.weight": "layers.{i}.attn.wq",
    "model.layers.{i}.self_attn.k_proj.weight": "layers.{i}.attn.wk",
    "model.layers.{i}.self_attn.v_proj.weight": "layers.{i}.attn.wv",
    "model.layers.{i}.self_attn.o_proj.weight": "layers.{i}.attn.wo",
    "model.layers.{i}.post_attention_layernorm.weight": "layers.{i}.ffn_norm.gain",
    "model.layers.{i}.mlp.gate_proj.weight": "layers.{i}.ffn.gate",
    "model.layers.{i}.mlp.up_proj.weight": "layers.{i}.ffn.up",
    "model.layers.{i}.mlp.down_proj.weight": "layers.{i}.ffn.down",
}
