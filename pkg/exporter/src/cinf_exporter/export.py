"""Checkpoint conversion: Hugging Face decoder checkpoints to CINF bundles.

Supported families: OPT-style (ReLU FFN, layernorm, learned positions with
the +2 row offset baked out) and LLaMA-style (gated-SiLU FFN, rmsnorm,
rotary positions, no grouped-query attention). Everything exports as f32;
anything else is refused with the list of tensors the engine would miss.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .cinfio import write_bundle
from .recipes import LLAMA_LAYER_MAP, OPT_LAYER_MAP, ExportError, ExportRecipe
from .tokenizer import byte_vocab

POSITION_OFFSET_OPT = 2  # learned-position rows 0 and 1 are legacy padding


def _load_checkpoint(path: Path):
    from transformers import AutoConfig, AutoModelForCausalLM

    if not (path / "config.json").exists():
        raise ExportError(f"{path}: no config.json; not a checkpoint directory")
    config = AutoConfig.from_pretrained(path)
    if config.model_type not in ("opt", "llama"):
        family = OPT_LAYER_MAP if config.model_type != "llama" else LLAMA_LAYER_MAP
        missing = sorted(k.format(i=0) for k in family)[:6]
        raise ExportError(
            f"unsupported architecture {config.model_type!r}: decoder-only "
            f"relu_ffn/silu_gated_ffn structure required; would miss tensors "
            f"such as {missing}"
        )
    model = AutoModelForCausalLM.from_pretrained(path, dtype=torch.float32).eval()
    return config, model


def _to_numpy(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().to(torch.float32).cpu().numpy()


def _collect(state: dict, layer_map: dict, n_layers: int) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    missing: list[str] = []
    for i in range(n_layers):
        for source_key, target_key in layer_map.items():
            key = source_key.format(i=i)
            if key not in state:
                missing.append(key)
                continue
            tensors[target_key.format(i=i)] = _to_numpy(state[key])
    if missing:
        raise ExportError(f"checkpoint lacks required tensors: {missing[:8]}")
    return tensors


def export_model(recipe: ExportRecipe) -> Path:
    """Convert the checkpoint and return the bundle directory."""
    config, model = _load_checkpoint(recipe.checkpoint)
    state = dict(model.state_dict())

    if config.model_type == "opt":
        if not getattr(config, "do_layer_norm_before", True):
            raise ExportError("post-norm OPT variants are not supported")
        if config.word_embed_proj_dim != config.hidden_size:
            raise ExportError("OPT word_embed_proj_dim != hidden_size is not supported")
        if config.activation_function != "relu":
            raise ExportError(
                f"OPT activation {config.activation_function!r} is not relu"
            )
        n_layers = config.num_hidden_layers
        max_positions = config.max_position_embeddings
        max_seq_len = min(recipe.max_seq_len or max_positions, max_positions)
        tensors = _collect(state, OPT_LAYER_MAP, n_layers)
        tensors["embed.tokens"] = _to_numpy(state["model.decoder.embed_tokens.weight"])
        positions = _to_numpy(state["model.decoder.embed_positions.weight"])
        tensors["embed.positions"] = positions[
            POSITION_OFFSET_OPT : POSITION_OFFSET_OPT + max_seq_len
        ]
        tensors["final_norm.gain"] = _to_numpy(state["model.decoder.final_layer_norm.weight"])
        tensors["final_norm.bias"] = _to_numpy(state["model.decoder.final_layer_norm.bias"])
        tensors["lm_head"] = _to_numpy(model.get_output_embeddings().weight)
        bundle_config = {
            "n_layers": n_layers,
            "d_model": config.hidden_size,
            "d_ffn": config.ffn_dim,
            "n_heads": config.num_attention_heads,
            "head_dim": config.hidden_size // config.num_attention_heads,
            "activation_kind": "relu_ffn",
            "norm_kind": "layernorm",
            "vocab_size": config.vocab_size,
            "max_seq_len": max_seq_len,
            "positions": "learned",
            "norm_eps": 1e-5,
            "rope_theta": 10000.0,
        }
    else:
        if config.num_key_value_heads != config.num_attention_heads:
            raise ExportError("grouped-query attention is not supported")
        if getattr(config, "attention_bias", False) or getattr(config, "mlp_bias", False):
            raise ExportError("biased LLaMA variants are not supported")
        if config.hidden_act != "silu":
            raise ExportError(f"LLaMA activation {config.hidden_act!r} is not silu")
        n_layers = config.num_hidden_layers
        tensors = _collect(state, LLAMA_LAYER_MAP, n_layers)
        tensors["embed.tokens"] = _to_numpy(state["model.embed_tokens.weight"])
        tensors["final_norm.gain"] = _to_numpy(state["model.norm.weight"])
        tensors["lm_head"] = _to_numpy(model.get_output_embeddings().weight)
        max_seq_len = min(
            recipe.max_seq_len or config.max_position_embeddings,
            config.max_position_embeddings,
        )
        bundle_config = {
            "n_layers": n_layers,
            "d_model": config.hidden_size,
            "d_ffn": config.intermediate_size,
            "n_heads": config.num_attention_heads,
            "head_dim": config.hidden_size // config.num_attention_heads,
            "activation_kind": "silu_gated_ffn",
            "norm_kind": "rmsnorm",
            "vocab_size": config.vocab_size,
            "max_seq_len": max_seq_len,
            "positions": "rope",
            "norm_eps": config.rms_norm_eps,
            "rope_theta": float(getattr(config, "rope_theta", 10000.0)),
        }

    vocab = byte_vocab(bundle_config["vocab_size"])
    return write_bundle(recipe.out_dir, bundle_config, tensors, vocab)


def bundle_vocab_size(bundle_dir) -> int:
    config = json.loads((Path(bundle_dir) / "config.json").read_text(encoding="utf-8"))
    return int(config["vocab_size"])
