"""Dual-channel transformer denoiser predicting x0.

The temporal channel tokenizes each time step (``[b, L, F] -> [b, L, H]``),
the dimension channel tokenizes each feature (``[b, F, L] -> [b, F, H]``).
Each channel runs an encoder then a residual-chained stack of adaLN-Zero
DiT blocks conditioned on the diffusion step; the channel outputs are
projected back to ``[b, L, F]`` and summed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    length: int
    features: int
    hidden: int = 128
    heads: int = 4
    encoder_blocks: int = 1
    dit_blocks: int = 3
    steps: int = 250
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("length", "features", "hidden", "heads", "encoder_blocks", "dit_blocks", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class StepEmbedding(nn.Module):
    """Sinusoidal encoding of the integer step followed by a two-layer MLP."""

    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.hidden).to(dtype))


def _modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x):
        b, s, h = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.heads, h // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(h // self.heads)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, s, h))


def _mlp(hidden: int, ratio: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(hidden, ratio * hidden),
        nn.GELU(approximate="tanh"),
        nn.Linear(ratio * hidden, hidden),
    )


class EncoderBlock(nn.Module):
    """Pre-norm transformer encoder block (no positional term)."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden)
        self.mlp = _mlp(hidden, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DiTBlock(nn.Module):
    """adaLN-Zero block: six modulation chunks (shift/scale/gate for attention and MLP).

    The modulation layer is zero-initialized, so the block starts as the
    identity map for any conditioning.
    """

    def __init__(self, hidden: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = _mlp(hidden, mlp_ratio)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        nn.init.zeros_(self.modulation[-1].weight)
        nn.init.zeros_(self.modulation[-1].bias)

    def forward(self, x, c):
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(c).chunk(6, dim=-1)
        x = x + gate_a.unsqueeze(1) * self.attn(_modulate(self.norm1(x), shift_a, scale_a))
        return x + gate_m.unsqueeze(1) * self.mlp(_modulate(self.norm2(x), shift_m, scale_m))


class Channel(nn.Module):
    """Dense token embedding, encoder, DiT stack and output projection for one axis."""

    def __init__(self, in_dim: int, tokens: int, cfg: BackboneConfig, positional: bool):
        super().__init__()
        h = cfg.hidden
        self.embed = nn.Linear(in_dim, h)
        self.pos = nn.Parameter(torch.randn(1, tokens, h) * 0.02) if positional else None
        self.encoder = nn.ModuleList(EncoderBlock(h, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_blocks))
        self.dits = nn.ModuleList(DiTBlock(h, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dit_blocks))
        self.out = nn.Linear(h, in_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def embed_tokens(self, x):
        h = self.embed(x)
        return h + self.pos if self.pos is not None else h

    def encode(self, h):
        for blk in self.encoder:
            h = blk(h)
        return h

    def dit_stack(self, h, c) -> list[torch.Tensor]:
        """Residual chain: O0 = D(H), O1 = D(O0 + H), Oi = D(O(i-1) + O(i-2))."""
        outs = [self.dits[0](h, c)]
        prev = h
        for blk in self.dits[1:]:
            outs.append(blk(outs[-1] + prev, c))
            prev = outs[-2]
        return outs

    def forward(self, x, c):
        outs = self.dit_stack(self.encode(self.embed_tokens(x)), c)
        return self.out(torch.stack(outs).sum(0))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.temporal = Channel(cfg.features, cfg.length, cfg, positional=True)
        self.dimension = Channel(cfg.length, cfg.features, cfg, positional=False)
        self.step_embed = StepEmbedding(cfg.hidden)

    @property
    def length(self) -> int:
        return self.cfg.length

    @property
    def features(self) -> int:
        return self.cfg.features

    def _check(self, x, t):
        if x.ndim != 3 or tuple(x.shape[1:]) != (self.cfg.length, self.cfg.features):
            raise ValueError(
                f"config mismatch: expected [b, {self.cfg.length}, {self.cfg.features}], got {tuple(x.shape)}"
            )
        if t.shape != (x.shape[0],):
            raise ValueError(f"config mismatch: step vector {tuple(t.shape)} for batch {x.shape[0]}")
        if len(t) and (int(t.min()) < 0 or int(t.max()) >= self.cfg.steps):
            raise ValueError(f"invalid diffusion step: must lie in [0, {self.cfg.steps - 1}]")

    def embed_channels(self, x):
        """Token embeddings ``(h_T [b, L, H], h_D [b, F, H])``."""
        return self.temporal.embed_tokens(x), self.dimension.embed_tokens(x.transpose(1, 2))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        self._check(x, t)
        c = self.step_embed(t)
        return self.temporal(x, c) + self.dimension(x.transpose(1, 2), c).transpose(1, 2)

    predict_x0 = forward


def build_backbone(cfg: BackboneConfig, seed: int, dtype: torch.dtype = torch.float32) -> Backbone:
    """Construct with a private RNG so the initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Backbone(cfg)
    return model.to(dtype)


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


_MANIFEST = "manifest.json"
_PARAMS = "params.bin"


def save_checkpoint(model: Backbone, outdir: str | os.PathLike, extra: dict | None = None) -> None:
    """Manifest (config, parameter layout, caller extras) plus one little-endian blob."""
    os.makedirs(outdir, exist_ok=True)
    state = model.state_dict()
    dtype = next(iter(state.values())).dtype
    np_dtype = {torch.float32: "<f4", torch.float64: "<f8"}[dtype]
    layout = []
    offset = 0
    with open(os.path.join(outdir, _PARAMS), "wb") as fh:
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype(np_dtype)
            fh.write(arr.tobytes())
            layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {
        "backbone": asdict(model.cfg),
        "dtype": np_dtype,
        "parameters": layout,
        "count": offset,
    }
    manifest.update(extra or {})
    with open(os.path.join(outdir, _MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[Backbone, dict]:
    try:
        with open(os.path.join(path, _MANIFEST)) as fh:
            manifest = json.load(fh)
        cfg = BackboneConfig(**manifest["backbone"])
        np_dtype = manifest["dtype"]
        blob = np.fromfile(os.path.join(path, _PARAMS), dtype=np_dtype)
        if blob.size != manifest["count"]:
            raise CheckpointError(f"parameter blob has {blob.size} values, manifest says {manifest['count']}")
        model = Backbone(cfg).to({"<f4": torch.float32, "<f8": torch.float64}[np_dtype])
        state = {}
        for entry in manifest["parameters"]:
            size = int(np.prod(entry["shape"], dtype=np.int64))
            chunk = blob[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
            state[entry["name"]] = torch.from_numpy(chunk.copy())
        model.load_state_dict(state, strict=True)
    except CheckpointError:
        raise
    except (OSError, KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"cannot load checkpoint at {path}: {exc}") from exc
    return model, manifest
