"""Desk-scale ViT and CNN classifiers on top of :mod:`patchfool.tensor`.

Images are NHWC float64 arrays in ``[0, 1]``. Both model kinds carry a
:class:`PatchGrid` so that patch-restricted attacks can address the same
pixel tiles regardless of architecture.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CKPT_MAGIC = b"PFML"
CKPT_VERSION = 1


@dataclass(frozen=True)
class PatchGrid:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch_size: int = 4

    def __post_init__(self):
        if min(self.image_h, self.image_w, self.channels, self.patch_size) <= 0:
            raise ValueError("PatchGrid extents must be positive")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} must divide "
                             f"{self.image_h}x{self.image_w}")

    @property
    def rows(self) -> int:
        return self.image_h // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_w // self.patch_size

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def d(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_h, self.image_w, self.channels)


@dataclass(frozen=True)
class TinyViTConfig:
    grid: PatchGrid = field(default_factory=PatchGrid)
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    mlp_ratio: int = 2
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


@dataclass(frozen=True)
class TinyCNNConfig:
    grid: PatchGrid = field(default_factory=PatchGrid)
    widths: tuple[int, ...] = (32, 64, 128)
    kernel_sizes: tuple[int, ...] = (3, 3, 3)
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != len(self.kernel_sizes):
            raise ValueError("widths and kernel_sizes must have equal length")
        h, w = self.grid.image_h, self.grid.image_w
        for _ in self.widths:
            if h % 2 or w % 2:
                raise ValueError(f"spatial dims {h}x{w} not divisible by the 2x2 pool")
            h, w = h // 2, w // 2
        if h <= 0 or w <= 0:
            raise ValueError("spatial dims collapse to zero through the conv stack")


# ---------------------------------------------------------------- patch geometry

def _check_image(x_shape, grid: PatchGrid, what="image"):
    if tuple(x_shape[-3:]) != grid.image_shape:
        raise ValueError(f"{what} dims {tuple(x_shape[-3:])} do not match grid {grid.image_shape}")


def patchify(image, grid: PatchGrid):
    """``[..., H, W, C]`` -> ``[..., n, d]``; rows ordered row-major over the grid."""
    if isinstance(image, Tensor):
        _check_image(image.shape, grid)
        lead = image.shape[:-3]
        x = T.reshape(image, (-1, grid.rows, grid.patch_size, grid.cols, grid.patch_size, grid.channels))
        x = T.permute(x, (0, 1, 3, 2, 4, 5))
        return T.reshape(x, lead + (grid.n, grid.d))
    image = np.asarray(image, dtype=np.float64)
    _check_image(image.shape, grid)
    lead = image.shape[:-3]
    p = grid.patch_size
    x = image.reshape((-1, grid.rows, p, grid.cols, p, grid.channels)).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(lead + (grid.n, grid.d))


def unpatchify(patches, grid: PatchGrid):
    """Inverse of :func:`patchify`."""
    p = grid.patch_size
    if tuple(patches.shape[-2:]) != (grid.n, grid.d):
        raise ValueError(f"patch matrix dims {tuple(patches.shape[-2:])} do not match "
                         f"grid ({grid.n}, {grid.d})")
    lead = patches.shape[:-2]
    if isinstance(patches, Tensor):
        x = T.reshape(patches, (-1, grid.rows, grid.cols, p, p, grid.channels))
        x = T.permute(x, (0, 1, 3, 2, 4, 5))
        return T.reshape(x, lead + grid.image_shape)
    x = np.asarray(patches).reshape((-1, grid.rows, grid.cols, p, p, grid.channels))
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(lead + grid.image_shape)


# ---------------------------------------------------------------- initialisers

def _trunc_normal(rng: np.random.Generator, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- models

class Model:
    """Parameter container shared by both model kinds."""

    kind = "base"

    def __init__(self, config, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def grid(self) -> PatchGrid:
        return self.config.grid

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def requires_grad_(self, flag: bool = True) -> "Model":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def forward(self, images) -> Tensor:  # pragma: no cover - overridden
        raise NotImplementedError

    def predict(self, images, batch_size: int = 250) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = [self.forward(images[i:i + batch_size]).data.argmax(axis=1)
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class TinyViT(Model):
    kind = "vit"

    def __init__(self, config: TinyViTConfig, params: dict[str, Tensor] | None = None):
        super().__init__(config, params if params is not None else self._init(config))

    @staticmethod
    def _init(cfg: TinyViTConfig) -> dict[str, Tensor]:
        rng = np.random.default_rng(cfg.seed)
        D, g = cfg.embed_dim, cfg.grid
        hid = D * cfg.mlp_ratio
        p: dict[str, np.ndarray] = {
            "patch_w": _trunc_normal(rng, (g.d, D)),
            "patch_b": np.zeros(D),
            "cls_token": _trunc_normal(rng, (1, 1, D)),
            "pos_embed": _trunc_normal(rng, (1, g.n + 1, D)),
        }
        for l in range(cfg.num_layers):
            p.update({
                f"blocks.{l}.ln1_w": np.ones(D), f"blocks.{l}.ln1_b": np.zeros(D),
                f"blocks.{l}.qkv_w": _trunc_normal(rng, (D, 3 * D)), f"blocks.{l}.qkv_b": np.zeros(3 * D),
                f"blocks.{l}.proj_w": _trunc_normal(rng, (D, D)), f"blocks.{l}.proj_b": np.zeros(D),
                f"blocks.{l}.ln2_w": np.ones(D), f"blocks.{l}.ln2_b": np.zeros(D),
                f"blocks.{l}.fc1_w": _trunc_normal(rng, (D, hid)), f"blocks.{l}.fc1_b": np.zeros(hid),
                f"blocks.{l}.fc2_w": _trunc_normal(rng, (hid, D)), f"blocks.{l}.fc2_b": np.zeros(D),
            })
        p.update({
            "norm_w": np.ones(D), "norm_b": np.zeros(D),
            "head_w": _trunc_normal(rng, (D, cfg.num_classes)), "head_b": np.zeros(cfg.num_classes),
        })
        return {k: Tensor(v) for k, v in p.items()}

    def forward_patches(self, patches) -> tuple[Tensor, list[Tensor]]:
        """Classify ``[B, n, d]`` patch matrices; also returns per-layer attention ``[B, H, T, T]``."""
        cfg, P = self.config, self.params
        x = T.as_tensor(patches)
        if x.data.ndim != 3 or x.shape[1:] != (cfg.grid.n, cfg.grid.d):
            raise ValueError(f"forward_patches: expected [B, {cfg.grid.n}, {cfg.grid.d}], got {x.shape}")
        B, n = x.shape[0], cfg.grid.n
        D, H = cfg.embed_dim, cfg.num_heads
        dh, tok = D // H, n + 1
        h = T.linear(x, P["patch_w"], P["patch_b"])
        cls = T.add(np.zeros((B, 1, D)), P["cls_token"])
        h = T.add(T.concat([cls, h], axis=1), P["pos_embed"])
        attns = []
        for l in range(cfg.num_layers):
            q = f"blocks.{l}."
            y = T.layer_norm(h, P[q + "ln1_w"], P[q + "ln1_b"])
            qkv = T.linear(y, P[q + "qkv_w"], P[q + "qkv_b"])
            qkv = T.permute(T.reshape(qkv, (B, tok, 3, H, dh)), (2, 0, 3, 1, 4))
            qh, kh, vh = qkv[0], qkv[1], qkv[2]
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
            att = T.softmax(scores)
            attns.append(att)
            ctx = T.reshape(T.permute(T.matmul(att, vh), (0, 2, 1, 3)), (B, tok, D))
            h = T.add(h, T.linear(ctx, P[q + "proj_w"], P[q + "proj_b"]))
            y = T.layer_norm(h, P[q + "ln2_w"], P[q + "ln2_b"])
            y = T.linear(T.gelu(T.linear(y, P[q + "fc1_w"], P[q + "fc1_b"])), P[q + "fc2_w"], P[q + "fc2_b"])
            h = T.add(h, y)
        h = T.layer_norm(h, P["norm_w"], P["norm_b"])
        logits = T.linear(h[:, 0, :], P["head_w"], P["head_b"])
        return logits, attns

    def forward(self, images) -> Tensor:
        return forward_with_attention(self, images)[0]


class TinyCNN(Model):
    kind = "cnn"

    def __init__(self, config: TinyCNNConfig, params: dict[str, Tensor] | None = None):
        super().__init__(config, params if params is not None else self._init(config))

    @staticmethod
    def _init(cfg: TinyCNNConfig) -> dict[str, Tensor]:
        rng = np.random.default_rng(cfg.seed)
        p = {}
        c_in = cfg.grid.channels
        h, w = cfg.grid.image_h, cfg.grid.image_w
        for i, (c_out, k) in enumerate(zip(cfg.widths, cfg.kernel_sizes)):
            p[f"conv{i}_w"] = _kaiming_uniform(rng, (k, k, c_in, c_out), k * k * c_in)
            p[f"conv{i}_b"] = np.zeros(c_out)
            c_in, h, w = c_out, h // 2, w // 2
        flat = h * w * c_in
        p["head_w"] = _kaiming_uniform(rng, (flat, cfg.num_classes), flat)
        p["head_b"] = np.zeros(cfg.num_classes)
        return {k: Tensor(v) for k, v in p.items()}

    def forward(self, images) -> Tensor:
        cfg, P = self.config, self.params
        x = T.as_tensor(images)
        if x.data.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        _check_image(x.shape, cfg.grid)
        for i, k in enumerate(cfg.kernel_sizes):
            x = T.conv2d(x, P[f"conv{i}_w"], P[f"conv{i}_b"], stride=1, padding=k // 2)
            x = T.max_pool2d(T.relu(x), 2)
        x = T.reshape(x, (x.shape[0], -1))
        return T.linear(x, P["head_w"], P["head_b"])


def build_model(config) -> Model:
    if isinstance(config, TinyViTConfig):
        return TinyViT(config)
    if isinstance(config, TinyCNNConfig):
        return TinyCNN(config)
    raise TypeError(f"unknown model config {type(config).__name__}")


# ---------------------------------------------------------------- forward passes

@dataclass
class AttentionStack:
    """Post-softmax attention per layer, each ``[H, T, T]`` (token 0 is the class token)."""

    layers: list[np.ndarray]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer(self, l: int) -> np.ndarray:
        """1-based layer access."""
        if not 1 <= l <= len(self.layers):
            raise IndexError(f"layer {l} outside [1, {len(self.layers)}]")
        return self.layers[l - 1]


def _as_batch(images, grid: PatchGrid) -> np.ndarray:
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    _check_image(x.shape, grid)
    return x


def forward_with_attention(model: Model, images) -> tuple[Tensor, list[AttentionStack]]:
    """Logits plus one :class:`AttentionStack` per image (the exact softmax outputs used)."""
    if model.kind != "vit":
        raise TypeError(f"forward_with_attention needs a vit model, got {model.kind}")
    if isinstance(images, Tensor) and images.requires_grad:
        logits, attns = model.forward_patches(patchify(images, model.grid))
    else:
        logits, attns = model.forward_patches(patchify(_as_batch(images, model.grid), model.grid))
    stacks = [AttentionStack([a.data[b] for a in attns]) for b in range(logits.shape[0])]
    return logits, stacks


def forward(model: Model, images) -> Tensor:
    return model.forward(images)


def input_gradients(model: Model, images, labels) -> np.ndarray:
    """Per-image ``d CE / d image`` for a batch (summed loss keeps images independent)."""
    x = Tensor(_as_batch(images, model.grid), requires_grad=True)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    logits = model.forward(x)
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("input_gradient: non-finite forward pass")
    loss = T.cross_entropy(logits, labels, reduction="sum")
    if loss.node is None:
        return np.zeros_like(x.data)
    g = T.grad(loss, [x])[0]
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("input_gradient: non-finite gradient")
    return g


def input_gradient(model: Model, image, label: int) -> np.ndarray:
    return input_gradients(model, np.asarray(image)[None], [label])[0]


# ---------------------------------------------------------------- checkpoints

def _config_to_json(model: Model) -> dict:
    cfg = asdict(model.config)
    return {"kind": model.kind, "config": cfg}


def _config_from_json(header: dict):
    cfg = dict(header["config"])
    cfg["grid"] = PatchGrid(**cfg["grid"])
    if header["kind"] == "vit":
        return TinyViTConfig(**cfg)
    if header["kind"] == "cnn":
        cfg["widths"] = tuple(cfg["widths"])
        cfg["kernel_sizes"] = tuple(cfg["kernel_sizes"])
        return TinyCNNConfig(**cfg)
    raise ValueError(f"unknown model kind {header['kind']!r}")


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(_config_to_json(model), sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(header)))
    buf.write(header)
    for t in model.params.values():
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> str:
    """Write a PFML checkpoint; returns its sha256."""
    raw = checkpoint_bytes(model)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} at offset 4")
    off = 12
    header = json.loads(raw[off:off + hlen])
    off += hlen
    model = build_model(_config_from_json(header))
    arrays = {}
    for name, t in model.params.items():
        if off + 4 > len(raw):
            raise ValueError(f"{path}: truncated before parameter {name} at offset {off}")
        (ndim,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
        off += 4 + 4 * ndim
        count = int(np.prod(shape))
        if off + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated in parameter {name} at offset {off}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    model.load_arrays(arrays)
    return model
