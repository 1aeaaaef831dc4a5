"""Seeded desk-scale stand-in checkpoints in Hugging Face format.

This environment has no hub access, so conversion and parity are exercised
against locally constructed random-weight checkpoints of the two supported
architecture families. The files on disk are ordinary ``save_pretrained``
output; swapping in a real downloaded checkpoint changes nothing else.
"""

from __future__ import annotations

from pathlib import Path

ARCHES = ("opt-relu", "llama-silu")


def make_checkpoint(arch: str, seed: int, out_dir, n_layers: int = 6, hidden: int = 64) -> Path:
    import torch
    from transformers import LlamaConfig, LlamaForCausalLM, OPTConfig, OPTForCausalLM

    if arch not in ARCHES:
        raise ValueError(f"arch must be one of {ARCHES}, got {arch!r}")
    torch.manual_seed(seed)
    if arch == "opt-relu":
        config = OPTConfig(
            hidden_size=hidden,
            ffn_dim=4 * hidden,
            num_hidden_layers=n_layers,
            num_attention_heads=4,
            vocab_size=320,
            max_position_embeddings=512,
            do_layer_norm_before=True,
            activation_function="relu",
            word_embed_proj_dim=hidden,
            dropout=0.0,
        )
        model = OPTForCausalLM(config)
    else:
        config = LlamaConfig(
            hidden_size=hidden,
            intermediate_size=4 * hidden,
            num_hidden_layers=n_layers,
            num_attention_heads=4,
            num_key_value_heads=4,
            vocab_size=320,
            max_position_embeddings=512,
            rms_norm_eps=1e-5,
            rope_theta=10000.0,
            attention_bias=False,
            mlp_bias=False,
            tie_word_embeddings=False,
        )
        model = LlamaForCausalLM(config)
    out_dir = Path(out_dir)
    model.eval().save_pretrained(out_dir)
    return out_dir
