"""Minimal Vision Transformer forward pass, linear head and attention maps.

Pre-norm encoder: z' = MSA(LN(z)) + z, z = MLP(LN(z')) + z', output
LN(z_L). Patch tokens are flattened in (y, x, c) order and projected
without bias; the class token is row 0. Positional embeddings are added
only when use_pos is set, so with use_pos=False the encoder is
permutation-equivariant over patch tokens.

Everything runs in float64; the VITW1 container stores float32.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import GridError, NumericalError, UsageError, WeightFormatError
from .imagecore import GridSpec, Image, PatchGrid, match_channels, patchify, resize_bilinear
from .rng import KEY_HEAD, KEY_INIT, keyed_rng
from .utils import atomic_write_bytes

log = logging.getLogger(__name__)

TokenSequence = np.ndarray
INIT_STD = 0.02
HEAD_INIT_STD = 0.01

MAGIC = b"VITW1"
BLOCK_TENSORS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


class ViTConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_patches: int = 196
    channels: int = 3
    use_pos_embed: bool = True
    layernorm_eps: float = 1e-6
    pooling: Literal["cls", "mean"] = "cls"

    @model_validator(mode="after")
    def _geometry(self) -> "ViTConfig":
        if min(self.patch_size, self.embed_dim, self.num_patches, self.num_heads) < 1:
            raise ValueError("patch_size, embed_dim, num_patches and num_heads must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if math.isqrt(self.num_patches) ** 2 != self.num_patches:
            raise ValueError(f"num_patches {self.num_patches} is not a square grid")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.mlp_hidden < 1:
            raise ValueError("mlp_ratio too small")
        return self

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.num_patches)

    @property
    def image_size(self) -> int:
        return self.grid_side * self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class BlockWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _block_shapes(cfg: ViTConfig) -> dict:
    d, h = cfg.embed_dim, cfg.mlp_hidden
    return {
        "ln1_g": (d,), "ln1_b": (d,),
        "wq": (d, d), "bq": (d,),
        "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "w1": (d, h), "b1": (h,),
        "w2": (h, d), "b2": (d,),
    }


@dataclass
class ViTWeights:
    config: ViTConfig
    patch_embed: np.ndarray  # (P*P*C, D)
    cls_token: np.ndarray  # (D,)
    pos_embed: np.ndarray  # (M+1, D)
    blocks: List[BlockWeights] = field(default_factory=list)
    norm_g: Optional[np.ndarray] = None
    norm_b: Optional[np.ndarray] = None

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Tensors in container order."""
        yield "patch_embed", self.patch_embed
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, blk in enumerate(self.blocks):
            for name in BLOCK_TENSORS:
                yield f"blocks.{i}.{name}", getattr(blk, name)
        yield "norm_g", self.norm_g
        yield "norm_b", self.norm_b

    def check(self) -> "ViTWeights":
        for name, (got, want) in _shape_pairs(self):
            if got != want:
                raise WeightFormatError(f"{name}: shape {got}, expected {want}")
        for name, t in self.named_tensors():
            if not np.all(np.isfinite(t)):
                raise WeightFormatError(f"{name}: non-finite entries")
        return self


def _expected_shapes(cfg: ViTConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    d = cfg.embed_dim
    out = [
        ("patch_embed", (cfg.patch_dim, d)),
        ("cls_token", (d,)),
        ("pos_embed", (cfg.num_patches + 1, d)),
    ]
    shapes = _block_shapes(cfg)
    for i in range(cfg.depth):
        out.extend((f"blocks.{i}.{name}", shapes[name]) for name in BLOCK_TENSORS)
    out.extend([("norm_g", (d,)), ("norm_b", (d,))])
    return out


def _shape_pairs(w: ViTWeights):
    expected = _expected_shapes(w.config)
    actual = list(w.named_tensors())
    if len(actual) != len(expected):
        raise WeightFormatError(f"{len(actual)} tensors, expected {len(expected)}")
    for (name, t), (_, shape) in zip(actual, expected):
        yield name, (None if t is None else tuple(t.shape), shape)


def init_weights(cfg: ViTConfig, seed: int) -> ViTWeights:
    rng = keyed_rng(seed, KEY_INIT)
    d = cfg.embed_dim

    def normal(*shape: int) -> np.ndarray:
        return rng.normal(0.0, INIT_STD, size=shape)

    patch_embed = normal(cfg.patch_dim, d)
    cls_token = normal(d)
    pos_embed = normal(cfg.num_patches + 1, d)
    blocks = []
    for _ in range(cfg.depth):
        tensors = {}
        for name, shape in _block_shapes(cfg).items():
            if name.startswith("ln") and name.endswith("_g"):
                tensors[name] = np.ones(shape)
            elif name.startswith("b") or name.endswith("_b"):
                tensors[name] = np.zeros(shape)
            else:
                tensors[name] = normal(*shape)
        blocks.append(BlockWeights(**tensors))
    return ViTWeights(cfg, patch_embed, cls_token, pos_embed, blocks, np.ones(d), np.zeros(d)).check()


# --- numeric pieces ---

def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _msa(h: np.ndarray, blk: BlockWeights, num_heads: int) -> Tuple[np.ndarray, np.ndarray]:
    t, d = h.shape
    hd = d // num_heads

    def split(x: np.ndarray) -> np.ndarray:
        return x.reshape(t, num_heads, hd).transpose(1, 0, 2)

    q = split(h @ blk.wq + blk.bq)
    k = split(h @ blk.wk + blk.bk)
    v = split(h @ blk.wv + blk.bv)
    att = softmax(q @ k.transpose(0, 2, 1) / math.sqrt(hd), axis=-1)  # (heads, T, T)
    o = (att @ v).transpose(1, 0, 2).reshape(t, d)
    return o @ blk.wo + blk.bo, att


def _mlp(h: np.ndarray, blk: BlockWeights) -> np.ndarray:
    return gelu(h @ blk.w1 + blk.b1) @ blk.w2 + blk.b2


# --- forward ---

def embed(pg: PatchGrid, w: ViTWeights, use_pos: bool) -> TokenSequence:
    cfg = w.config
    flat = pg.patches.reshape(pg.num_patches, -1).astype(np.float64)
    if flat.shape[1] != cfg.patch_dim:
        raise GridError(f"patches carry {flat.shape[1]} values, backbone expects {cfg.patch_dim}")
    z = np.vstack([w.cls_token[None, :], flat @ w.patch_embed])
    if use_pos:
        if z.shape[0] != w.pos_embed.shape[0]:
            raise GridError(f"{pg.num_patches} patches, positional table holds {w.pos_embed.shape[0] - 1}")
        z = z + w.pos_embed
    return z


def encoder_forward(z0: TokenSequence, w: ViTWeights) -> Tuple[TokenSequence, List[np.ndarray]]:
    cfg = w.config
    z = np.asarray(z0, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cfg.embed_dim:
        raise GridError(f"token sequence shape {z.shape} does not match embed_dim {cfg.embed_dim}")
    eps = cfg.layernorm_eps
    attn = []
    for blk in w.blocks:
        a, att = _msa(layer_norm(z, blk.ln1_g, blk.ln1_b, eps), blk, cfg.num_heads)
        z = a + z
        z = _mlp(layer_norm(z, blk.ln2_g, blk.ln2_b, eps), blk) + z
        attn.append(att)
    out = layer_norm(z, w.norm_g, w.norm_b, eps)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite encoder output; check weights and inputs")
    return out, attn


def _check_compatible(w: ViTWeights, cfg: ViTConfig) -> None:
    a, b = w.config, cfg
    if (a.patch_size, a.embed_dim, a.num_patches, a.channels) != (b.patch_size, b.embed_dim, b.num_patches, b.channels):
        raise WeightFormatError("weights and config disagree on backbone geometry")


def image_tokens(img: Image, cfg: ViTConfig) -> PatchGrid:
    """Resize and channel-match img to the backbone input, then patchify."""
    side = cfg.image_size
    img = match_channels(resize_bilinear(img, side, side), cfg.channels)
    return patchify(img, GridSpec(cfg.grid_side, cfg.grid_side))


def features_from_grid(pg: PatchGrid, w: ViTWeights, use_pos: bool, pooling: str) -> np.ndarray:
    out, _ = encoder_forward(embed(pg, w, use_pos), w)
    if pooling == "cls":
        return out[0].copy()
    if pooling == "mean":
        return out[1:].mean(axis=0)
    raise UsageError(f"unknown pooling {pooling!r}")


def extract_feature(img: Image, w: ViTWeights, cfg: Optional[ViTConfig] = None) -> np.ndarray:
    cfg = cfg or w.config
    _check_compatible(w, cfg)
    return features_from_grid(image_tokens(img, cfg), w, cfg.use_pos_embed, cfg.pooling)


def attention_map(img: Image, w: ViTWeights, cfg: Optional[ViTConfig], block: int) -> Image:
    """Class-token attention of one block, head-averaged, min-max scaled, at input size."""
    cfg = cfg or w.config
    _check_compatible(w, cfg)
    if not 0 <= block < len(w.blocks):
        raise UsageError(f"block {block} out of range [0, {len(w.blocks)})")
    pg = image_tokens(img, cfg)
    _, attn = encoder_forward(embed(pg, w, cfg.use_pos_embed), w)
    row = attn[block][:, 0, 1:].mean(axis=0).reshape(cfg.grid_side, cfg.grid_side)
    lo, hi = float(row.min()), float(row.max())
    span = hi - lo
    if span <= 1e-12 * max(1.0, abs(hi)):
        heat = np.zeros_like(row)
    else:
        heat = (row - lo) / span
    return resize_bilinear(Image(heat), img.height, img.width)


# --- linear head ---

@dataclass
class HeadWeights:
    weight: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)

    @property
    def num_classes(self) -> int:
        return int(self.bias.shape[0])

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def head_loss(head: HeadWeights, x: np.ndarray, y: np.ndarray) -> float:
    return head_loss_and_grad(head, x, y)[0]


def head_loss_and_grad(head: HeadWeights, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy and its gradients w.r.t. weight and bias."""
    logits = head.logits(x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = x.shape[0]
    loss = float(-log_p[np.arange(n), y].mean())
    g = np.exp(log_p)
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, x.T @ g, g.sum(axis=0)


def _check_dataset(features: np.ndarray, labels: np.ndarray, num_classes: Optional[int]) -> Tuple[np.ndarray, np.ndarray, int]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise UsageError("empty dataset")
    if y.shape != (x.shape[0],):
        raise UsageError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} feature rows")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite features")
    if not np.issubdtype(y.dtype, np.integer):
        raise UsageError("labels must be integers")
    k = int(num_classes) if num_classes is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= k:
        raise UsageError(f"label out of range [0, {k})")
    return x, y.astype(np.int64), k


def train_head(
    features: np.ndarray,
    labels: np.ndarray,
    lr: float,
    epochs: int,
    seed: int,
    num_classes: Optional[int] = None,
) -> HeadWeights:
    """Full-batch gradient descent on softmax cross-entropy over a linear head."""
    x, y, k = _check_dataset(features, labels, num_classes)
    rng = keyed_rng(seed, KEY_HEAD)
    head = HeadWeights(rng.normal(0.0, HEAD_INIT_STD, size=(x.shape[1], k)), np.zeros(k))
    if epochs <= 0:
        return head

    initial = head_loss(head, x, y)
    for epoch in range(epochs):
        loss, gw, gb = head_loss_and_grad(head, x, y)
        head = HeadWeights(head.weight - lr * gw, head.bias - lr * gb)
        if epoch % 50 == 0:
            log.debug("head epoch %d loss %.6f", epoch, loss)
    loss = head_loss(head, x, y)
    log.info("trained head: %d samples, %d classes, loss %.4f -> %.4f", x.shape[0], k, initial, loss)
    return head


# --- container ---

def save_weights(w: ViTWeights, path: str) -> str:
    w.check()
    cfg = w.config
    header = np.array(
        [cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.num_heads, cfg.num_patches, cfg.channels,
         int(cfg.use_pos_embed), cfg.mlp_hidden],
        dtype="<u4",
    )
    parts = [MAGIC, header.tobytes()]
    parts.extend(np.ascontiguousarray(t, dtype="<f4").tobytes() for _, t in w.named_tensors())
    return atomic_write_bytes(path, b"".join(parts))


def load_weights(path: str) -> ViTWeights:
    if not os.path.isfile(path):
        raise WeightFormatError(f"no such weight file: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise WeightFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    off = len(MAGIC)
    if len(data) < off + 32:
        raise WeightFormatError(f"{path}: truncated header")
    p, d, depth, heads, m, c, use_pos, hidden = (int(v) for v in np.frombuffer(data, dtype="<u4", count=8, offset=off))
    off += 32
    try:
        cfg = ViTConfig(
            patch_size=p, embed_dim=d, depth=depth, num_heads=heads, num_patches=m, channels=c,
            use_pos_embed=bool(use_pos), mlp_ratio=hidden / d if d else 0.0,
        )
    except ValueError as e:
        raise WeightFormatError(f"{path}: bad header: {e}") from e

    tensors = {}
    for name, shape in _expected_shapes(cfg):
        count = int(np.prod(shape))
        if len(data) < off + 4 * count:
            raise WeightFormatError(f"{path}: truncated at tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 4 * count
    if off != len(data):
        raise WeightFormatError(f"{path}: {len(data) - off} trailing bytes")

    blocks = [
        BlockWeights(**{name: tensors[f"blocks.{i}.{name}"] for name in BLOCK_TENSORS})
        for i in range(cfg.depth)
    ]
    w = ViTWeights(cfg, tensors["patch_embed"], tensors["cls_token"], tensors["pos_embed"], blocks,
                   tensors["norm_g"], tensors["norm_b"])
    return w.check()
