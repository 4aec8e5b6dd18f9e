"""Small patch transformer standing in for the VLA vision backbone and projector.

``encode`` is the backbone (image -> per-patch token matrix) and ``project``
is the linear map into the text-aligned feature space. Weights are random,
seeded and frozen: the attack only ever perturbs the input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

AGGREGATIONS = ("mean_heads_mean_queries", "mean_heads_cls_query")

_MAGIC = b"ADVLAENC"
_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    image_h: int = 64
    image_w: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    proj_dim: int = 96
    seed: int = 0
    mlp_ratio: int = 4
    proj_bias: bool = False
    sincos_pos: bool = True
    final_norm: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("proj_bias", "sincos_pos", "final_norm"):
                continue
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ValueError(f"{f.name} must be an integer, got {v!r}")
            if f.name != "seed" and v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")
            if f.name == "seed" and v < 0:
                raise ValueError("seed must be >= 0")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"image size {self.image_h}x{self.image_w} is not divisible by "
                f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.sincos_pos and self.embed_dim % 4:
            raise ValueError("sin-cos positional embeddings need embed_dim divisible by 4")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def grid_side(self) -> int:
        """Side of the square patch grid; raises for rectangular grids."""
        if self.grid_h != self.grid_w:
            raise ValueError(f"patch grid {self.grid_h}x{self.grid_w} is not square")
        return self.grid_h

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def sincos_2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin-cos positional table [grid_h*grid_w, dim]: x in the first half, y in the second."""
    ys, xs = np.divmod(np.arange(grid_h * grid_w), grid_w)
    q = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(q) / q)
    parts = []
    for coord in (xs, ys):
        ang = np.outer(coord, omega)
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def _weight_specs(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (= serialisation) order."""
    D, P = cfg.embed_dim, cfg.patch_size
    specs = [
        ("patch_w", (3 * P * P, D)),
        ("patch_b", (D,)),
        ("pos", (cfg.num_patches, D)),
    ]
    for i in range(cfg.num_blocks):
        specs += [
            (f"b{i}.ln1_g", (D,)), (f"b{i}.ln1_b", (D,)),
            (f"b{i}.qkv_w", (D, 3 * D)), (f"b{i}.qkv_b", (3 * D,)),
            (f"b{i}.out_w", (D, D)), (f"b{i}.out_b", (D,)),
            (f"b{i}.ln2_g", (D,)), (f"b{i}.ln2_b", (D,)),
            (f"b{i}.fc1_w", (D, cfg.mlp_ratio * D)), (f"b{i}.fc1_b", (cfg.mlp_ratio * D,)),
            (f"b{i}.fc2_w", (cfg.mlp_ratio * D, D)), (f"b{i}.fc2_b", (D,)),
        ]
    specs += [("lnf_g", (D,)), ("lnf_b", (D,)), ("proj_w", (D, cfg.proj_dim))]
    if cfg.proj_bias:
        specs.append(("proj_b", (cfg.proj_dim,)))
    return specs


@dataclass
class AttentionRecord:
    """Softmax attention of every block, each [heads, N, N] (or [B, heads, N, N])."""

    blocks: list[np.ndarray]


class VisionEncoder:
    def __init__(self, config: EncoderConfig, weights: dict[str, np.ndarray], dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        expected = _weight_specs(config)
        if [k for k, _ in expected] != list(weights):
            raise ValueError("weight names do not match the encoder configuration")
        self._w: dict[str, Tensor] = {}
        for name, shape in expected:
            arr = np.array(weights[name], dtype=self.dtype)
            if arr.shape != shape:
                raise ValueError(f"weight {name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            self._w[name] = Tensor(arr)

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._w.items()}

    def astype(self, dtype) -> "VisionEncoder":
        return VisionEncoder(self.config, self.weights, dtype=dtype)

    def patchify(self, image: Tensor) -> Tensor:
        """[B, 3, H, W] -> [B, N, 3*P*P], patches in row-major grid order."""
        cfg = self.config
        P, gh, gw = cfg.patch_size, cfg.grid_h, cfg.grid_w
        B = image.shape[0]
        x = image.reshape(B, 3, gh, P, gw, P)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(B, gh * gw, 3 * P * P)

    def encode(self, image) -> tuple[Tensor, AttentionRecord]:
        """Run the backbone on [3, H, W] or a batch [B, 3, H, W].

        Returns the final token matrix E ([N, D] or [B, N, D]) and the
        attention of every block. Batched samples never interact, and each
        sample's numbers are bit-identical to an unbatched call.
        """
        cfg = self.config
        image = image if isinstance(image, Tensor) else Tensor(image)
        single = image.ndim == 3
        if image.shape[-3:] != (3, cfg.image_h, cfg.image_w) or image.ndim not in (3, 4):
            raise T.ShapeError(
                f"image shape {image.shape} does not match (3, {cfg.image_h}, {cfg.image_w})")
        d = image.data
        if not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image pixels must be finite and in [0, 1]")
        if image.dtype != self.dtype:
            image = _cast(image, self.dtype)
        if single:
            image = image.reshape(1, *image.shape)

        w = self._w
        B = image.shape[0]
        N, D, h, hd = cfg.num_patches, cfg.embed_dim, cfg.num_heads, cfg.head_dim
        x = T.matmul(self.patchify(image), w["patch_w"]) + w["patch_b"] + w["pos"]
        attn_maps = []
        inv_sqrt = 1.0 / np.sqrt(hd)
        for i in range(cfg.num_blocks):
            p = f"b{i}."
            y = T.layernorm(x, w[p + "ln1_g"], w[p + "ln1_b"])
            qkv = T.matmul(y, w[p + "qkv_w"]) + w[p + "qkv_b"]
            qkv = qkv.reshape(B, N, 3, h, hd).transpose(2, 0, 3, 1, 4)  # [3, B, h, N, hd]
            q, k, v = _split3(qkv)
            att = T.softmax_rows(T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), inv_sqrt))
            attn_maps.append(att.data[0] if single else att.data)
            y = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, N, D)
            x = x + (T.matmul(y, w[p + "out_w"]) + w[p + "out_b"])
            y = T.layernorm(x, w[p + "ln2_g"], w[p + "ln2_b"])
            y = T.gelu(T.matmul(y, w[p + "fc1_w"]) + w[p + "fc1_b"])
            x = x + (T.matmul(y, w[p + "fc2_w"]) + w[p + "fc2_b"])
        if cfg.final_norm:
            x = T.layernorm(x, w["lnf_g"], w["lnf_b"])
        if single:
            x = x.reshape(N, D)
        return x, AttentionRecord(attn_maps)

    def project(self, E: Tensor) -> Tensor:
        """Linear per-patch map into the text-aligned space, [..., N, D] -> [..., N, D_text]."""
        cfg = self.config
        if E.shape[-2:] != (cfg.num_patches, cfg.embed_dim) or E.ndim not in (2, 3):
            raise T.ShapeError(
                f"token matrix shape {E.shape} does not match ({cfg.num_patches}, {cfg.embed_dim})")
        F = T.matmul(E, self._w["proj_w"])
        if cfg.proj_bias:
            F = F + self._w["proj_b"]
        return F

    def features(self, image) -> tuple[Tensor, AttentionRecord]:
        E, rec = self.encode(image)
        return self.project(E), rec

    def save(self, path) -> None:
        save_encoder(self, path)


def _cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype

    def bw(g):
        return (g.astype(src),)

    return T._make(x.data.astype(dtype), (x,), bw, "cast")


def _split3(qkv: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Split a [3, ...] tensor along axis 0 into three views with gradients."""
    shape = qkv.shape

    def piece(i):
        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[i] = g
            return (full,)
        return T._make(qkv.data[i], (qkv,), bw, "index")

    return piece(0), piece(1), piece(2)


def init_encoder(config: EncoderConfig, dtype=np.float64) -> VisionEncoder:
    """Seeded Glorot-uniform matrices; layernorm gains 1, biases 0.

    The positional table is the fixed sin-cos grid unless ``sincos_pos`` is
    off, in which case it is Glorot-uniform like the other matrices. (Random
    tables leave the tokens of this small untrained network nearly parallel,
    and mean-pooled features then barely encode where things are.)
    """
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name, shape in _weight_specs(config):
        leaf = name.split(".")[-1]
        if leaf == "pos" and config.sincos_pos:
            weights[name] = sincos_2d(config.grid_h, config.grid_w, config.embed_dim)
            rng.uniform(size=shape)  # keep the draw sequence independent of this flag
        elif leaf.endswith("_g"):
            weights[name] = np.ones(shape)
        elif leaf.endswith("_b"):
            weights[name] = np.zeros(shape)
        else:
            s = glorot_bound(shape[0], shape[1])
            weights[name] = rng.uniform(-s, s, size=shape)
    return VisionEncoder(config, weights, dtype=dtype)


def attention_scores(rec: AttentionRecord, block_index: int = -1,
                     aggregation: str = "mean_heads_mean_queries") -> np.ndarray:
    """Per-key-patch attention: mean over heads and query rows of one block.

    The result is nonnegative and sums to 1. There is no class token, so the
    ``mean_heads_cls_query`` aggregation is rejected.
    """
    n_blocks = len(rec.blocks)
    if not -n_blocks <= block_index < n_blocks:
        raise IndexError(f"block_index {block_index} out of range for {n_blocks} blocks")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}; choose from {AGGREGATIONS}")
    if aggregation == "mean_heads_cls_query":
        raise ValueError("encoder has no class token; use mean_heads_mean_queries")
    att = np.asarray(rec.blocks[block_index], dtype=np.float64)
    return att.mean(axis=(-3, -2))


# ---------------------------------------------------------------------------
# serialisation

_CONFIG_FIELDS = ("image_h", "image_w", "patch_size", "embed_dim", "num_blocks",
                  "num_heads", "proj_dim", "seed", "mlp_ratio", "proj_bias", "sincos_pos",
                  "final_norm")


def save_encoder(enc: VisionEncoder, path) -> None:
    """Little-endian: magic, u32 version, u32 field count, u32 config fields, f64 weights."""
    cfg = enc.config
    vals = [int(getattr(cfg, f)) for f in _CONFIG_FIELDS]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(vals)))
        fh.write(struct.pack(f"<{len(vals)}I", *vals))
        for name, _ in _weight_specs(cfg):
            fh.write(np.ascontiguousarray(enc.weights[name], dtype="<f8").tobytes())


def load_encoder(path, dtype=np.float64) -> VisionEncoder:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not an encoder weight file")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    vals = struct.unpack_from(f"<{n}I", raw, 16)
    kw = dict(zip(_CONFIG_FIELDS, vals))
    kw["proj_bias"] = bool(kw["proj_bias"])
    kw["sincos_pos"] = bool(kw["sincos_pos"])
    kw["final_norm"] = bool(kw["final_norm"])
    cfg = EncoderConfig(**kw)
    off = 16 + 4 * n
    weights = {}
    for name, shape in _weight_specs(cfg):
        count = int(np.prod(shape))
        weights[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    return VisionEncoder(cfg, weights, dtype=dtype)
