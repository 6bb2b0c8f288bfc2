"""Small vision transformer: patch embedding, pre-norm attention blocks, class
token readout, and a linear projection head. Used as both student and teacher
backbone during self-distillation and as the feature extractor downstream."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import BadMagicError, ConfigError, ShapeError, TruncatedFileError, VersionError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SVTC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    depth: int = 4
    heads: int = 4
    dim: int = 64
    mlp_ratio: float = 4.0
    out_dim: int = 128
    pos_interpolation: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("image_size", "patch_size", "channels", "depth", "heads", "dim", "out_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def hidden_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown ViTConfig keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered parameter manifest; checkpoint serialization follows this order."""
    d, h = config.dim, config.hidden_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("patch_embed.weight", (config.patch_dim, d)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (config.num_patches + 1, d)),
    ]
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes += [
            (p + "norm1.gamma", (d,)),
            (p + "norm1.beta", (d,)),
            (p + "attn.qkv.weight", (d, 3 * d)),
            (p + "attn.qkv.bias", (3 * d,)),
            (p + "attn.out.weight", (d, d)),
            (p + "attn.out.bias", (d,)),
            (p + "norm2.gamma", (d,)),
            (p + "norm2.beta", (d,)),
            (p + "mlp.fc1.weight", (d, h)),
            (p + "mlp.fc1.bias", (h,)),
            (p + "mlp.fc2.weight", (h, d)),
            (p + "mlp.fc2.bias", (d,)),
        ]
    shapes += [
        ("final_norm.gamma", (d,)),
        ("final_norm.beta", (d,)),
        ("head.weight", (d, config.out_dim)),
        ("head.bias", (config.out_dim,)),
    ]
    return shapes


def param_count(config: ViTConfig) -> int:
    """Closed-form learnable parameter count for a config."""
    d, h, k = config.dim, config.hidden_dim, config.out_dim
    per_block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h + h * d + d)
    return (config.patch_dim * d + d          # patch embed
            + d                               # cls token
            + (config.num_patches + 1) * d    # positions
            + config.depth * per_block
            + 2 * d                           # final norm
            + d * k + k)                      # projection head


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with samples beyond 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class ViTParams:
    """All learnable weights of one encoder + head, addressable by manifest name."""

    def __init__(self, config: ViTConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = tensors

    @classmethod
    def init(cls, config: ViTConfig, rng: np.random.Generator,
             requires_grad: bool = True) -> "ViTParams":
        tensors: dict[str, Tensor] = {}
        for name, shape in param_shapes(config):
            if name.endswith(".gamma"):
                data = np.ones(shape)
            elif name.endswith((".beta", ".bias")) or name == "cls_token":
                data = np.zeros(shape)
            else:
                data = truncated_normal(rng, shape)
            tensors[name] = Tensor(data, requires_grad=requires_grad)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def items(self) -> list[tuple[str, Tensor]]:
        return [(name, self._tensors[name]) for name, _ in param_shapes(self.config)]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.items()]

    def copy(self, requires_grad: bool = False) -> "ViTParams":
        return ViTParams(self.config, {
            name: Tensor(t.data.copy(), requires_grad=requires_grad)
            for name, t in self.items()})

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.grad = None


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a channels x H x W image into raster-order patch vectors.

    Each row is one patch flattened channel-major, so a single-patch image
    flattens to exactly the image's own C-order layout.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"patchify: expected channels x H x W, got shape {image.shape}")
    c, h, w = image.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ShapeError(f"patchify: H={h}, W={w} not divisible by patch_size={patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = (image.reshape(c, gh, patch_size, gw, patch_size)
               .transpose(1, 3, 0, 2, 4)
               .reshape(gh * gw, c * patch_size * patch_size))
    return patches


@lru_cache(maxsize=32)
def _bilinear_matrix(src_grid: int, dst_grid: int) -> np.ndarray:
    """(dst^2, src^2) interpolation weights between square patch grids."""
    m = np.zeros((dst_grid * dst_grid, src_grid * src_grid))

    def coords(i):
        if dst_grid == 1:
            return (src_grid - 1) / 2.0
        return i * (src_grid - 1) / (dst_grid - 1)

    for i in range(dst_grid):
        y = coords(i)
        y0, y1 = int(np.floor(y)), min(int(np.floor(y)) + 1, src_grid - 1)
        wy = y - np.floor(y)
        for j in range(dst_grid):
            x = coords(j)
            x0, x1 = int(np.floor(x)), min(int(np.floor(x)) + 1, src_grid - 1)
            wx = x - np.floor(x)
            r = i * dst_grid + j
            m[r, y0 * src_grid + x0] += (1 - wy) * (1 - wx)
            m[r, y0 * src_grid + x1] += (1 - wy) * wx
            m[r, y1 * src_grid + x0] += wy * (1 - wx)
            m[r, y1 * src_grid + x1] += wy * wx
    return m


def _positional(params: ViTParams, num_patches: int) -> Tensor:
    cfg = params.config
    pos = params["pos_embed"]
    if num_patches == cfg.num_patches:
        return pos
    if not cfg.pos_interpolation:
        raise ShapeError(
            f"encode: {num_patches} patches vs positional table for {cfg.num_patches}; "
            "positional interpolation is disabled")
    dst_grid = int(round(np.sqrt(num_patches)))
    if dst_grid * dst_grid != num_patches:
        raise ShapeError(f"encode: non-square patch count {num_patches} cannot be interpolated")
    m = Tensor(_bilinear_matrix(cfg.grid, dst_grid))
    return T.concat([pos[0:1, :], T.matmul(m, pos[1:, :])], axis=0)


def _affine_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return T.layer_norm(x) * gamma + beta


def _attention(params: ViTParams, prefix: str, h: Tensor) -> Tensor:
    cfg = params.config
    d = cfg.dim
    dh = d // cfg.heads
    scale = dh ** -0.5
    qkv = T.matmul(h, params[prefix + "attn.qkv.weight"]) + params[prefix + "attn.qkv.bias"]
    outs = []
    for i in range(cfg.heads):
        q = qkv[:, i * dh:(i + 1) * dh]
        k = qkv[:, d + i * dh:d + (i + 1) * dh]
        v = qkv[:, 2 * d + i * dh:2 * d + (i + 1) * dh]
        att = T.softmax(T.matmul(q, k.T) * scale, axis=-1)
        outs.append(T.matmul(att, v))
    merged = T.concat(outs, axis=1)
    return T.matmul(merged, params[prefix + "attn.out.weight"]) + params[prefix + "attn.out.bias"]


def _mlp(params: ViTParams, prefix: str, h: Tensor) -> Tensor:
    h = T.gelu(T.matmul(h, params[prefix + "mlp.fc1.weight"]) + params[prefix + "mlp.fc1.bias"])
    return T.matmul(h, params[prefix + "mlp.fc2.weight"]) + params[prefix + "mlp.fc2.bias"]


def encode(params: ViTParams, image: np.ndarray) -> Tensor:
    """Map an image to its class-token embedding (length dim) after the final norm."""
    cfg = params.config
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != cfg.channels:
        raise ShapeError(
            f"encode: expected {cfg.channels} x H x W image, got shape {image.shape}")
    patches = patchify(image, cfg.patch_size)
    tokens = T.matmul(Tensor(patches), params["patch_embed.weight"]) + params["patch_embed.bias"]
    seq = T.concat([T.reshape(params["cls_token"], (1, cfg.dim)), tokens], axis=0)
    seq = seq + _positional(params, patches.shape[0])
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        seq = seq + _attention(params, p, _affine_norm(seq, params[p + "norm1.gamma"],
                                                       params[p + "norm1.beta"]))
        seq = seq + _mlp(params, p, _affine_norm(seq, params[p + "norm2.gamma"],
                                                 params[p + "norm2.beta"]))
    seq = _affine_norm(seq, params["final_norm.gamma"], params["final_norm.beta"])
    return seq[0]


def head(params: ViTParams, embedding) -> Tensor:
    """Project a backbone embedding to length-K logits."""
    cfg = params.config
    emb = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
    if emb.shape != (cfg.dim,):
        raise ShapeError(f"head: expected embedding of shape ({cfg.dim},), got {emb.shape}")
    logits = T.matmul(T.reshape(emb, (1, cfg.dim)), params["head.weight"]) + params["head.bias"]
    return T.reshape(logits, (cfg.out_dim,))


# ---------------------------------------------------------------------------
# checkpoint file: magic "SVTC", u32 version, length-prefixed config JSON,
# then every parameter tensor in manifest order (tensor-core serialization)
# ---------------------------------------------------------------------------

def write_checkpoint(path: str, params: ViTParams) -> None:
    blob = json.dumps(params.config.to_dict()).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t in params.items():
            T.write_array(f, t.data)
    os.replace(tmp, path)


def read_checkpoint(path: str, requires_grad: bool = False) -> ViTParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, got {magic!r}")
        raw = f.read(4)
        if len(raw) != 4:
            raise TruncatedFileError(f"{path}: truncated version field")
        (version,) = struct.unpack("<I", raw)
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        raw = f.read(8)
        if len(raw) != 8:
            raise TruncatedFileError(f"{path}: truncated header")
        (blob_len,) = struct.unpack("<Q", raw)
        blob = f.read(blob_len)
        if len(blob) != blob_len:
            raise TruncatedFileError(f"{path}: truncated config blob")
        config = ViTConfig.from_dict(json.loads(blob.decode("utf-8")))
        tensors: dict[str, Tensor] = {}
        for name, shape in param_shapes(config):
            arr = T.read_array(f)
            if arr.shape != shape:
                raise ShapeError(f"{path}: parameter {name} has shape {arr.shape}, want {shape}")
            tensors[name] = Tensor(arr, requires_grad=requires_grad)
    return ViTParams(config, tensors)
