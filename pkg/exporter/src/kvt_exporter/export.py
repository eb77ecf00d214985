"""Capture per-head attention tensors from a causal LM and write KVT1 traces.

Hooks on each attention block's q/k/v projections record the raw projection
outputs during one prefill forward and a greedy decode loop; rotary position
embedding is then applied with the model's own rotary module and explicit
position indices, so the dumped Q and K reproduce the dot products the model
actually used.  The model's per-head attention outputs (the input of the
output projection) are kept alongside as a fidelity reference.

The on-disk layout is the ``KVT1`` trace format: ``manifest.json`` plus one
little-endian float32 blob per (layer, head, tensor, phase), row-major
[time, dim].  Filtered exports re-index the selected layers/heads compactly
from zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ExportError, UnsupportedLayout

TRACE_VERSION = 1
TRACE_DTYPE = "f32"


@dataclass(frozen=True)
class ExportSpec:
    """What to capture: model, prompt, decode length, optional head filters."""

    model_id: str
    prompt_text: str
    decode_len: int
    layers: frozenset[int] | None = None
    heads: frozenset[int] | None = None

    def __post_init__(self) -> None:
        if self.decode_len < 1:
            raise ExportError(f"decode_len must be >= 1, got {self.decode_len}")
        if not self.prompt_text:
            raise ExportError("prompt text is empty")


@dataclass
class Captured:
    """Post-rotary Q/K, V, and the model's own attention outputs.

    Arrays are float32: ``q``/``k``/``v`` have shape [L, H, P+D, head_dim]
    over the selected layers/heads; ``attn_out`` holds the model's per-head
    prefill attention outputs (pre output-projection) with shape
    [L, H, P, head_dim].
    """

    prompt_len: int
    decode_len: int
    head_dim: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn_out: np.ndarray
    token_ids: list[int] = field(default_factory=list)


def _check_layout(model) -> tuple:
    config = model.config
    n_heads = getattr(config, "num_attention_heads", None)
    n_kv_heads = getattr(config, "num_key_value_heads", n_heads)
    if n_heads is None:
        raise UnsupportedLayout("model config does not expose num_attention_heads")
    if n_kv_heads != n_heads:
        raise UnsupportedLayout(
            f"grouped-query attention ({n_kv_heads} KV heads for {n_heads} query heads) "
            "is not supported; per-head replay needs one KV stream per query head"
        )
    inner = getattr(model, "model", None)
    layers = getattr(inner, "layers", None)
    rotary = getattr(inner, "rotary_emb", None)
    if layers is None or rotary is None:
        raise UnsupportedLayout("expected a decoder with .model.layers and .model.rotary_emb")
    for idx, layer in enumerate(layers):
        attn = getattr(layer, "self_attn", None)
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            if attn is None or not hasattr(attn, proj):
                raise UnsupportedLayout(f"layer {idx} attention lacks {proj}")
    head_dim = getattr(config, "head_dim", None) or config.hidden_size // n_heads
    return layers, rotary, n_heads, head_dim


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat((-x[..., half:], x[..., :half]), dim=-1)


def capture(spec: ExportSpec) -> Captured:
    """Run prefill plus greedy decode under projection hooks."""
    from transformers import AutoModelForCausalLM, AutoTokenizer

    model = AutoModelForCausalLM.from_pretrained(spec.model_id, dtype=torch.float32)
    model.eval()
    tokenizer = AutoTokenizer.from_pretrained(spec.model_id)
    layers, rotary, n_heads, head_dim = _check_layout(model)
    n_layers = len(layers)

    layer_idx = sorted(spec.layers) if spec.layers is not None else list(range(n_layers))
    head_idx = sorted(spec.heads) if spec.heads is not None else list(range(n_heads))
    if layer_idx and (layer_idx[0] < 0 or layer_idx[-1] >= n_layers):
        raise ExportError(f"layer filter {layer_idx} outside [0, {n_layers})")
    if head_idx and (head_idx[0] < 0 or head_idx[-1] >= n_heads):
        raise ExportError(f"head filter {head_idx} outside [0, {n_heads})")
    if not layer_idx or not head_idx:
        raise ExportError("layer/head filters must select at least one stream")

    ids = tokenizer(spec.prompt_text, return_tensors="pt").input_ids
    prompt_len = ids.shape[1]
    if prompt_len < 1:
        raise ExportError("prompt tokenized to zero tokens")

    grabbed: dict[tuple[int, str], list[torch.Tensor]] = {
        (i, name): [] for i in range(n_layers) for name in ("q", "k", "v", "o_in")
    }
    hooks = []

    def proj_hook(i: int, name: str):
        def fn(_module, _inp, out):
            grabbed[(i, name)].append(out.detach().to(torch.float32))

        return fn

    def o_pre_hook(i: int):
        def fn(_module, inp):
            grabbed[(i, "o_in")].append(inp[0].detach().to(torch.float32))

        return fn

    for i, layer in enumerate(layers):
        attn = layer.self_attn
        hooks.append(attn.q_proj.register_forward_hook(proj_hook(i, "q")))
        hooks.append(attn.k_proj.register_forward_hook(proj_hook(i, "k")))
        hooks.append(attn.v_proj.register_forward_hook(proj_hook(i, "v")))
        hooks.append(attn.o_proj.register_forward_pre_hook(o_pre_hook(i)))

    token_ids = ids[0].tolist()
    try:
        with torch.no_grad():
            out = model(ids, use_cache=True)
            past = out.past_key_values
            next_id = out.logits[:, -1, :].argmax(dim=-1, keepdim=True)
            token_ids.append(int(next_id))
            for _ in range(spec.decode_len - 1):
                out = model(next_id, past_key_values=past, use_cache=True)
                past = out.past_key_values
                next_id = out.logits[:, -1, :].argmax(dim=-1, keepdim=True)
                token_ids.append(int(next_id))
            # one more forward so the final generated token's q/k/v are captured
            model(next_id, past_key_values=past, use_cache=True)
    finally:
        for h in hooks:
            h.remove()

    total = prompt_len + spec.decode_len
    positions = torch.arange(total)[None]
    cos, sin = rotary(torch.zeros(1, total, head_dim, dtype=torch.float32), positions)
    cos = cos.unsqueeze(1)  # [1, 1, T, head_dim], broadcast over heads
    sin = sin.unsqueeze(1)

    def assemble(i: int, name: str) -> torch.Tensor:
        seq = torch.cat(grabbed[(i, name)], dim=1)  # [1, T(+extra), n_heads*head_dim]
        seq = seq[:, :total]
        if seq.shape[1] != total:
            raise ExportError(f"captured {seq.shape[1]} steps for layer {i} {name}, expected {total}")
        return seq.view(1, total, n_heads, head_dim).transpose(1, 2)  # [1, H, T, dh]

    q_sel = np.empty((len(layer_idx), len(head_idx), total, head_dim), dtype=np.float32)
    k_sel = np.empty_like(q_sel)
    v_sel = np.empty_like(q_sel)
    attn_sel = np.empty((len(layer_idx), len(head_idx), prompt_len, head_dim), dtype=np.float32)
    for li, i in enumerate(layer_idx):
        q = assemble(i, "q")
        k = assemble(i, "k")
        v = assemble(i, "v")
        q_rot = q * cos + _rotate_half(q) * sin
        k_rot = k * cos + _rotate_half(k) * sin
        o_in = torch.cat(grabbed[(i, "o_in")], dim=1)[:, :prompt_len]
        o_heads = o_in.view(1, -1, n_heads, head_dim).transpose(1, 2)
        q_sel[li] = q_rot[0, head_idx].numpy()
        k_sel[li] = k_rot[0, head_idx].numpy()
        v_sel[li] = v[0, head_idx].numpy()
        attn_sel[li] = o_heads[0, head_idx].numpy()

    return Captured(
        prompt_len=prompt_len,
        decode_len=spec.decode_len,
        head_dim=head_dim,
        q=q_sel,
        k=k_sel,
        v=v_sel,
        attn_out=attn_sel,
        token_ids=token_ids,
    )


def write_kvt1(captured: Captured, out_dir: str | Path) -> Path:
    """Write the captured tensors as a KVT1 trace directory."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    n_layers, n_heads = captured.q.shape[0], captured.q.shape[1]
    manifest = {
        "version": TRACE_VERSION,
        "n_layers": n_layers,
        "n_heads": n_heads,
        "d_k": captured.head_dim,
        "d_v": captured.head_dim,
        "prompt_len": captured.prompt_len,
        "decode_len": captured.decode_len,
        "dtype": TRACE_DTYPE,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    split = captured.prompt_len
    for layer in range(n_layers):
        for head in range(n_heads):
            for tensor, arr in (("q", captured.q), ("k", captured.k), ("v", captured.v)):
                series = arr[layer, head]
                for phase, chunk in (("prefill", series[:split]), ("decode", series[split:])):
                    blob = np.ascontiguousarray(chunk, dtype="<f4").tobytes()
                    (root / f"L{layer}_H{head}_{tensor}_{phase}.bin").write_bytes(blob)
    return root


def export(spec: ExportSpec, out_dir: str | Path) -> Path:
    """Capture the model's attention tensors and write them under ``out_dir``."""
    return write_kvt1(capture(spec), out_dir)
