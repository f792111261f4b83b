"""A mini vision transformer built on the tape engine.

Pre-norm blocks: x += Attn(LN(x)); x += MLP(LN(x)). Attention per head
is softmax(Q K^T / sqrt(d_head)); the per-layer record holds the
head-averaged post-softmax matrix as a live tape node, so consistency
losses computed on it propagate exact gradients back into the heads.
The record's ``adjoint`` is the summed per-head gradient -- the
sensitivity of the loss to a common additive shift of all heads, i.e.
the total derivative with respect to the average when each head is
written as average + offset. That is what the gradient-based
localization maps consume (their max-normalization makes any constant
factor irrelevant).

Parameters live in a plain ordered dict name -> Tensor, which is also
the checkpoint serialization unit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, StateError
from .gridtransform import GridShape, grid_interp_matrix

CHECKPOINT_MAGIC = b"ATTNCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    """Architecture of the toy model. The defaults are the desk-scale
    configuration used throughout: 32x32 RGB images, 4px patches."""

    patch_size: int = 4
    grid: GridShape = field(default_factory=lambda: GridShape(8, 8))
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 3
    use_positional_embedding: bool = True
    in_channels: int = 3

    def __post_init__(self):
        if self.patch_size < 1 or self.num_layers < 1 or self.num_heads < 1:
            raise ContractError("patch_size, num_layers and num_heads must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by "
                                f"num_heads {self.num_heads}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ContractError("num_classes and in_channels must be positive")
        if int(self.mlp_ratio * self.embed_dim) < 1:
            raise ContractError("mlp_ratio too small")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = [self.grid.h, self.grid.w]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        d = dict(d)
        d["grid"] = GridShape(*d["grid"])
        return cls(**d)


@dataclass
class AttentionRecord:
    """Head-averaged post-softmax attention of one layer, (n+1) x (n+1).

    ``matrix`` is a tape node (losses on it reach the parameters).
    After a backward pass on this record's tape, ``adjoint`` carries the
    summed per-head gradient: d(loss)/d(common shift of all heads)."""

    layer: int
    matrix: Tensor
    heads: tuple[Tensor, ...]

    @property
    def adjoint(self) -> np.ndarray | None:
        grads = [h.grad for h in self.heads]
        if any(g is None for g in grads):
            return None
        total = grads[0].copy()
        for g in grads[1:]:
            total += g
        return total


@dataclass
class ForwardResult:
    logits: Tensor  # (num_classes,)
    attentions: list[AttentionRecord]
    grid: GridShape  # grid the image was patchified on


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(C, H, W) image -> (n, C*p*p) rows of flattened patches, row-major
    patch order; channel-major layout inside each row."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got shape {image.shape}")
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    tiles = image.reshape(c, gh, patch_size, gw, patch_size)
    return np.ascontiguousarray(tiles.transpose(1, 3, 0, 2, 4).reshape(gh * gw, -1))


def init_params(config: ViTConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh trainable parameters; key order is the checkpoint order."""

    def glorot(fan_in, fan_out):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        return rng.normal(0.0, scale, size=(fan_in, fan_out))

    d = config.embed_dim
    params: dict[str, Tensor] = {}

    def put(name, value):
        params[name] = Tensor(value, requires_grad=True)

    put("patch_embed.weight", glorot(config.patch_dim, d))
    put("patch_embed.bias", np.zeros((1, d)))
    put("cls_token", rng.normal(0.0, 0.02, size=(1, d)))
    if config.use_positional_embedding:
        put("pos_embed", rng.normal(0.0, 0.02, size=(config.grid.n + 1, d)))
    for i in range(config.num_layers):
        p = f"blocks.{i}."
        put(p + "ln1.gain", np.ones((1, d)))
        put(p + "ln1.bias", np.zeros((1, d)))
        for name in ("wq", "wk", "wv", "wo"):
            put(p + f"attn.{name}", glorot(d, d))
        for name in ("bq", "bk", "bv", "bo"):
            put(p + f"attn.{name}", np.zeros((1, d)))
        put(p + "ln2.gain", np.ones((1, d)))
        put(p + "ln2.bias", np.zeros((1, d)))
        put(p + "mlp.w1", glorot(d, config.mlp_dim))
        put(p + "mlp.b1", np.zeros((1, config.mlp_dim)))
        put(p + "mlp.w2", glorot(config.mlp_dim, d))
        put(p + "mlp.b2", np.zeros((1, d)))
    put("final_ln.gain", np.ones((1, d)))
    put("final_ln.bias", np.zeros((1, d)))
    put("head.weight", glorot(d, config.num_classes))
    put("head.bias", np.zeros((1, config.num_classes)))
    return params


def _positional_rows(params: dict[str, Tensor], config: ViTConfig, grid: GridShape) -> Tensor:
    """Positional embedding rows for `grid`, bilinearly resampled from the
    configured grid when the view's grid differs (resize augmentation)."""
    pos = params["pos_embed"]
    if grid == config.grid:
        return pos
    interp = Tensor(grid_interp_matrix(config.grid, grid))
    cls_row = ad.slice2d(pos, 0, 1, None, None)
    patch_rows = ad.matmul(interp, ad.slice2d(pos, 1, None, None, None))
    return ad.concat([cls_row, patch_rows], axis=0)


def forward(image: np.ndarray, params: dict[str, Tensor], config: ViTConfig) -> ForwardResult:
    """Run the model on one (C, H, W) image. Record ops on the active tape
    if there is one; otherwise this is a pure inference pass."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != config.in_channels:
        raise DimensionError(f"expected ({config.in_channels}, H, W) image, got {image.shape}")
    grid = GridShape(image.shape[1] // config.patch_size, image.shape[2] // config.patch_size)
    patches = Tensor(patchify(image, config.patch_size))

    x = ad.add_bias(ad.matmul(patches, params["patch_embed.weight"]), params["patch_embed.bias"])
    x = ad.concat([params["cls_token"], x], axis=0)  # (n+1, d)
    if config.use_positional_embedding:
        x = ad.add(x, _positional_rows(params, config, grid))

    heads, dh = config.num_heads, config.head_dim
    scale = 1.0 / np.sqrt(dh)
    records: list[AttentionRecord] = []

    for i in range(config.num_layers):
        p = f"blocks.{i}."
        h = ad.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        q = ad.add_bias(ad.matmul(h, params[p + "attn.wq"]), params[p + "attn.bq"])
        k = ad.add_bias(ad.matmul(h, params[p + "attn.wk"]), params[p + "attn.bk"])
        v = ad.add_bias(ad.matmul(h, params[p + "attn.wv"]), params[p + "attn.bv"])
        per_head = []
        values = []
        for j in range(heads):
            qj = ad.slice2d(q, None, None, j * dh, (j + 1) * dh)
            kj = ad.slice2d(k, None, None, j * dh, (j + 1) * dh)
            values.append(ad.slice2d(v, None, None, j * dh, (j + 1) * dh))
            attn_j = ad.softmax_rows(ad.mul(ad.matmul(qj, ad.transpose(kj)), scale))
            attn_j.retain_grad()
            per_head.append(attn_j)
        if heads == 1:
            averaged = per_head[0]
        else:
            acc = per_head[0]
            for j in range(1, heads):
                acc = ad.add(acc, per_head[j])
            averaged = ad.mul(acc, 1.0 / heads)
        records.append(AttentionRecord(layer=i, matrix=averaged, heads=tuple(per_head)))
        outs = [ad.matmul(per_head[j], values[j]) for j in range(heads)]
        merged = outs[0] if heads == 1 else ad.concat(outs, axis=1)
        x = ad.add(x, ad.add_bias(ad.matmul(merged, params[p + "attn.wo"]), params[p + "attn.bo"]))
        h2 = ad.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        m = ad.gelu(ad.add_bias(ad.matmul(h2, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
        m = ad.add_bias(ad.matmul(m, params[p + "mlp.w2"]), params[p + "mlp.b2"])
        x = ad.add(x, m)

    x = ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    cls = ad.slice2d(x, 0, 1, None, None)
    logits = ad.reshape(ad.add_bias(ad.matmul(cls, params["head.weight"]), params["head.bias"]),
                        (config.num_classes,))
    return ForwardResult(logits=logits, attentions=records, grid=grid)


def class_logit(result: ForwardResult, class_index: int) -> Tensor:
    """Scalar pre-sigmoid logit y^c, the localization target."""
    return ad.pick(result.logits, class_index)


def attention_adjoints(result: ForwardResult, class_index: int) -> list[np.ndarray]:
    """Per-layer d(y^c)/d(attention) buffers. Requires that the caller
    already ran backward on class_logit(result, class_index) for this
    forward's tape; raises StateError otherwise."""
    if not 0 <= class_index < result.logits.shape[0]:
        raise ContractError(f"class index {class_index} out of range")
    adjoints = []
    for rec in result.attentions:
        if rec.adjoint is None:
            raise StateError(f"layer {rec.layer} has no adjoint; run backward on the "
                             "class logit before asking for adjoints")
        adjoints.append(rec.adjoint.copy())
    return adjoints


# ---------------------------------------------------------------------------
# checkpoints: little-endian binary, header + named float64 tensors


def save_checkpoint(path, params: dict[str, Tensor], config: ViTConfig) -> None:
    """Layout: magic (8 bytes), version (u32), config JSON (u32 length +
    utf-8 bytes), tensor count (u32), then per tensor: name (u32 length +
    utf-8), ndim (u8), dims (u32 each), row-major float64 payload.
    All integers little-endian."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(tensor.data).astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], ViTConfig]:
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config = ViTConfig.from_dict(json.loads(f.read(cfg_len).decode("utf-8")))
        (count,) = struct.unpack("<I", f.read(4))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = f.read(8 * size)
            if len(payload) != 8 * size:
                raise ContractError(f"{path}: truncated tensor payload for {name!r}")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
            params[name] = Tensor(arr, requires_grad=True)
        if f.read(1):
            raise ContractError(f"{path}: trailing bytes after last tensor")
    return params, config


def load_params_into(params: dict[str, Tensor], source: dict[str, Tensor]) -> None:
    """Copy tensor values by name (shapes must match)."""
    for name, tensor in params.items():
        if name not in source:
            raise ContractError(f"checkpoint is missing parameter {name!r}")
        if source[name].shape != tensor.shape:
            raise DimensionError(f"{name}: shape {source[name].shape} != {tensor.shape}")
        tensor.data = source[name].data.copy()


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())
