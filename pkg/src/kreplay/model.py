"""Miniature encoder-decoder captioner with an optional patch self-attention block.

Patches are projected to ``d_model``, given learned position embeddings, optionally
mixed by the extra patch self-attention block, and passed through a pre-norm
transformer encoder. The decoder is a pre-norm causal transformer with
cross-attention over the patch states. Everything runs in float64 on CPU.
"""

from __future__ import annotations

import copy
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"KRCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_enc_layers: int = 1
    n_dec_layers: int = 2
    d_ff: int = 64
    grid_h: int = 4
    grid_w: int = 4
    d_patch: int = 16
    max_len: int = 16
    use_patch_self_attention: bool = True
    patch_attn_layers: int = 1

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "grid_h", "grid_w", "d_patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_enc_layers < 0 or self.n_dec_layers < 1 or self.patch_attn_layers < 1:
            raise ValueError("invalid layer counts")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.wk = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.wv = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.wo = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))

    def forward(self, x, memory=None, causal=False):
        memory = x if memory is None else memory
        b, lq, d = x.shape
        lk = memory.shape[1]
        h = self.n_heads
        q = (x @ self.wq).view(b, lq, h, d // h).transpose(1, 2)
        k = (memory @ self.wk).view(b, lk, h, d // h).transpose(1, 2)
        v = (memory @ self.wv).view(b, lk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if causal:
            mask = torch.ones(lq, lk, dtype=torch.bool).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        out = scores.softmax(-1) @ v
        return out.transpose(1, 2).reshape(b, lq, d) @ self.wo


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(d_model, d_ff, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.empty(d_ff, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.empty(d_ff, d_model, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.empty(d_model, dtype=DTYPE))

    def forward(self, x):
        return F.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


def _norm(d_model):
    return nn.LayerNorm(d_model, dtype=DTYPE)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, with_ffn: bool = True):
        super().__init__()
        self.ln1 = _norm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        if with_ffn:
            self.ln2 = _norm(cfg.d_model)
            self.ffn = FeedForward(cfg.d_model, cfg.d_ff)
        else:
            self.ffn = None

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        if self.ffn is not None:
            x = x + self.ffn(self.ln2(x))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = _norm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads)
        self.ln2 = _norm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads)
        self.ln3 = _norm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff)

    def forward(self, x, memory):
        x = x + self.self_attn(self.ln1(x), causal=True)
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.ffn(self.ln3(x))


class Model(nn.Module):
    """Student or frozen teacher captioner."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.frozen = False
        d = config.d_model
        self.patch_proj = nn.Parameter(torch.empty(config.d_patch, d, dtype=DTYPE))
        self.patch_pos = nn.Parameter(torch.empty(config.n_patches, d, dtype=DTYPE))
        if config.use_patch_self_attention:
            # attention-only residual block; no FFN so the toggle isolates patch mixing
            self.patch_attn = nn.ModuleList(
                EncoderLayer(config, with_ffn=False) for _ in range(config.patch_attn_layers)
            )
        else:
            self.patch_attn = None
        self.encoder = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_enc_layers))
        self.enc_ln = _norm(d)
        self.tok_emb = nn.Parameter(torch.empty(config.vocab_size, d, dtype=DTYPE))
        self.tok_pos = nn.Parameter(torch.empty(config.max_len, d, dtype=DTYPE))
        self.decoder = nn.ModuleList(DecoderLayer(config) for _ in range(config.n_dec_layers))
        self.dec_ln = _norm(d)
        self.out_proj = nn.Parameter(torch.empty(d, config.vocab_size, dtype=DTYPE))

    # -- passes -------------------------------------------------------------

    def encode_images(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, H*W, d_patch) patches -> (B, H*W, d_model) patch states."""
        cfg = self.config
        if patches.shape[1:] != (cfg.n_patches, cfg.d_patch):
            raise ValueError(
                f"image shape {tuple(patches.shape[1:])} does not match "
                f"({cfg.n_patches}, {cfg.d_patch})"
            )
        x = patches @ self.patch_proj + self.patch_pos
        if self.patch_attn is not None:
            for layer in self.patch_attn:
                x = layer(x)
        for layer in self.encoder:
            x = layer(x)
        return self.enc_ln(x)

    def decode(self, memory: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        """Logits for every input position: (B, L) ids -> (B, L, V)."""
        length = inputs.shape[1]
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        x = self.tok_emb[inputs] + self.tok_pos[:length]
        for layer in self.decoder:
            x = layer(x, memory)
        return self.dec_ln(x) @ self.out_proj

    def forward(self, patches: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits; row r predicts token r+1. Shape (B, L-1, V)."""
        if tokens.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        return self.decode(self.encode_images(patches), tokens[:, :-1])

    # -- decoding interface -------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def max_len(self) -> int:
        return self.config.max_len

    @torch.no_grad()
    def encode(self, images) -> torch.Tensor:
        return self.encode_images(as_patch_tensor(images))

    @torch.no_grad()
    def step_logprobs(self, memory, prefixes: np.ndarray) -> np.ndarray:
        """Next-token log-probabilities for each prefix row against its memory row."""
        tokens = torch.as_tensor(np.asarray(prefixes), dtype=torch.long)
        logits = self.decode(memory, tokens)[:, -1]
        return logits.log_softmax(-1).numpy()

    # -- parameters ---------------------------------------------------------

    def param_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


def as_patch_tensor(images) -> torch.Tensor:
    """Accept SyntheticImage objects, (H, W, d) arrays, or an already batched tensor."""
    if isinstance(images, torch.Tensor):
        return images.to(DTYPE)
    arrays = [np.asarray(getattr(img, "patches", img), dtype=np.float64) for img in images]
    flat = [a.reshape(-1, a.shape[-1]) for a in arrays]
    return torch.from_numpy(np.stack(flat))


def init_model(config: ModelConfig, seed: int) -> Model:
    """Uniform +-1/sqrt(d_model) weights; layer-norm gains 1 and biases 0."""
    model = Model(config)
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(config.d_model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if ".ln" in f".{name}" or name.startswith(("enc_ln", "dec_ln")):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            else:
                p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
    return model


def forward(model: Model, image, tokens) -> torch.Tensor:
    """Single-image teacher-forced pass: (L-1, V) logits."""
    tok = torch.as_tensor(np.asarray(tokens), dtype=torch.long).unsqueeze(0)
    return model(as_patch_tensor([image]), tok)[0]


def encode_image(model: Model, image) -> torch.Tensor:
    return model.encode_images(as_patch_tensor([image]))[0]


def backward(model: Model, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of ``loss`` for every parameter; unused parameters get exact zeros."""
    if model.frozen:
        raise RuntimeError("teacher is frozen")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: torch.zeros_like(p) if g is None else g
        for n, p, g in zip(names, params, grads)
    }


def clone_frozen(model: Model) -> Model:
    clone = copy.deepcopy(model)
    clone.frozen = True
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(model: Model, path: str | Path, meta: dict | None = None) -> None:
    header = json.dumps(
        {"config": asdict(model.config), "frozen": model.frozen, "meta": meta or {}},
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.dim()))
        buf.write(struct.pack(f"<{p.dim()}I", *p.shape))
        buf.write(p.detach().numpy().astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off : off + hlen])
    off += hlen
    model = Model(ModelConfig(**header["config"]))
    params = model.param_dict()
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    if count != len(params):
        raise ValueError(f"{path}: expected {len(params)} tensors, found {count}")
    with torch.no_grad():
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            if name not in params or tuple(params[name].shape) != tuple(shape):
                raise ValueError(f"{path}: unexpected tensor {name} {shape}")
            params[name].copy_(torch.from_numpy(arr.astype(np.float64)))
    if header.get("frozen"):
        model = clone_frozen(model)
    return model, header.get("meta", {})
