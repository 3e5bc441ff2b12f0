"""Encoder-decoder segmentation network and its checkpoint container.

Encoder: full-precision stem conv, then four residual stages that each halve
the resolution.  Decoder: four blocks, each four residual conv modules, one
binary attention module and one multi-branch x2 upsampling module; encoder
features join through 1x1 lateral convs added before the block's conv stack.
A full-precision 1x1 head produces per-pixel class logits.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import config as cfgtext
from .autodiff import ParamStore, Tape, Var
from .blocks import BinaryAttention, Context, ConvBN, MultiBranchUpsample
from .exceptions import ConfigError, FormatError, ShapeError
from .rng import SplitMix64
from .tensorcore import dump_btf, load_btf, pack_signs


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 3
    classes: int = 2
    K: int = 4
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    units_per_stage: int = 2
    binarize_encoder: bool = True
    binarize_decoder: bool = True
    attention: bool = True
    tau: float = 0.0
    pad_value: float = -1.0
    mix_exclude_self: bool = False
    ste_clip: bool = False
    binary_active: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.height % 16 or self.width % 16:
            raise ConfigError(f"input {self.height}x{self.width} must be positive multiples of 16")
        if self.in_channels < 1 or self.classes < 2:
            raise ConfigError("need in_channels >= 1 and classes >= 2")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ConfigError("widths must be four positive integers")
        if self.units_per_stage < 1:
            raise ConfigError("units_per_stage must be >= 1")
        if self.pad_value not in (-1.0, 1.0):
            raise ConfigError("pad_value must be -1 or 1")

    def to_text(self) -> str:
        return cfgtext.dump_text(self)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cfgtext.build(cls, cfgtext.parse_text(text))


@dataclass
class LayerInfo:
    """One row of the architecture table."""

    name: str
    kind: str            # "conv" or "attention"
    c_in: int
    c_out: int
    k: int
    h: int               # resolution the op is evaluated at (output side)
    w: int
    quantizable: bool
    branches: int = 1
    params: int = 0


class _Residual:
    """``shortcut(x) + ConvBN(x)``; a stride-2 unit pools the shortcut and projects it with a float 1x1 conv."""

    def __init__(self, store, name, c_in, c_out, stride, binary, rng):
        self.body = ConvBN(store, f"{name}.conv", c_in, c_out, 3, stride=stride, binary=binary, rng=rng)
        self.stride = stride
        self.proj = None
        if c_in != c_out:
            self.proj = ConvBN(store, f"{name}.short", c_in, c_out, 1, binary=False, rng=rng)

    def __call__(self, tape, store, ctx, x):
        short = tape.apply("avgpool", x, k=self.stride) if self.stride > 1 else x
        if self.proj is not None:
            short = self.proj(tape, store, ctx, short)
        return tape.apply("add", short, self.body(tape, store, ctx, x))


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ParamStore()
        rng = SplitMix64(cfg.seed)
        s, w = self.store, cfg.widths
        enc_bin, dec_bin = cfg.binarize_encoder, cfg.binarize_decoder
        self.stem = ConvBN(s, "stem", cfg.in_channels, w[0], 3, binary=False, rng=rng)
        self.stages = []
        c_prev = w[0]
        for i, c in enumerate(w):
            units = [_Residual(s, f"enc{i}.u0", c_prev, c, 2, enc_bin, rng)]
            units += [_Residual(s, f"enc{i}.u{u}", c, c, 1, enc_bin, rng)
                      for u in range(1, cfg.units_per_stage)]
            self.stages.append(units)
            c_prev = c
        self.decoder = []
        for d in range(4):
            c = w[3 - d]
            c_out = w[2 - d] if d < 3 else w[0]
            blk = {"lateral": None if d == 0 else ConvBN(s, f"dec{d}.lateral", c, c, 1, binary=False, rng=rng),
                   "convs": [_Residual(s, f"dec{d}.m{j}", c, c, 1, dec_bin, rng) for j in range(4)],
                   "attn": BinaryAttention(s, f"dec{d}.attn", c, cfg.tau, dec_bin, rng) if cfg.attention else None,
                   "up": MultiBranchUpsample(s, f"dec{d}.up", c, c_out, cfg.K, 2, dec_bin,
                                             cfg.mix_exclude_self, rng)}
            self.decoder.append(blk)
        self.head = ConvBN(s, "head", w[0], cfg.classes, 1, binary=False, rng=rng, norm=False)

    # -- forward -------------------------------------------------------------

    def context(self, training: bool) -> Context:
        return Context(training=training, binarize=self.cfg.binary_active,
                       pad_value=self.cfg.pad_value, ste_clip=self.cfg.ste_clip)

    def check_input(self, x) -> np.ndarray:
        x = np.asarray(x)
        cfg = self.cfg
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ShapeError(f"expected images (N, {cfg.in_channels}, {cfg.height}, {cfg.width}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("image contains NaN or Inf")
        return x

    def run(self, tape: Tape, images, ctx: Context, dtype=np.float32) -> Var:
        """Record the whole network on ``tape``; returns the ``(N, classes, H, W)`` logits."""
        s = self.store
        x = tape.constant(self.check_input(images).astype(dtype))
        x = self.stem(tape, s, ctx, x)
        feats = []
        for units in self.stages:
            for unit in units:
                x = unit(tape, s, ctx, x)
            feats.append(x)
        x = feats[3]
        for d, blk in enumerate(self.decoder):
            if blk["lateral"] is not None:
                x = tape.apply("add", x, blk["lateral"](tape, s, ctx, feats[3 - d]))
            for unit in blk["convs"]:
                x = unit(tape, s, ctx, x)
            maps = blk["attn"].maps(tape, s, ctx, x) if blk["attn"] is not None else None
            x = blk["up"](tape, s, ctx, x, blk["attn"], maps)
        return self.head(tape, s, ctx, x)

    def logits(self, images, dtype=np.float32) -> np.ndarray:
        """Inference-mode logits for a batch ``(N, C, H, W)`` or a single image."""
        single = np.ndim(images) == 3
        out = self.run(Tape(), images, self.context(training=False), dtype).value
        return out[0] if single else out

    def predict_proba(self, images, batch_size: int = 16) -> np.ndarray:
        images = self.check_input(images)
        chunks = []
        for i in range(0, len(images), batch_size):
            z = self.logits(images[i:i + batch_size]).astype(np.float64)
            z = np.exp(z - z.max(axis=1, keepdims=True))
            chunks.append(z / z.sum(axis=1, keepdims=True))
        return np.concatenate(chunks)

    def predict(self, images, batch_size: int = 16) -> np.ndarray:
        return self.predict_proba(images, batch_size).argmax(axis=1)

    def set_binary_active(self, active: bool):
        self.cfg = dataclasses.replace(self.cfg, binary_active=active)

    # -- introspection -------------------------------------------------------

    def conv_layers(self) -> List[ConvBN]:
        out = [self.stem]
        for units in self.stages:
            for u in units:
                out += [u.body] + ([u.proj] if u.proj else [])
        for blk in self.decoder:
            if blk["lateral"]:
                out.append(blk["lateral"])
            out += [u.body for u in blk["convs"]]
            if blk["attn"]:
                out.append(blk["attn"].proj)
            out += blk["up"].conv1 + blk["up"].conv2
        return out + [self.head]

    def describe(self) -> List[LayerInfo]:
        """Architecture table; multi-branch convs are grouped into one row with ``branches = K``."""
        cfg = self.cfg
        rows = []

        def conv_row(layer: ConvBN, h, w, name=None, branches=1):
            extra = 2 * layer.c_out if layer.norm else layer.c_out
            rows.append(LayerInfo(name or layer.name, "conv", layer.c_in, layer.c_out, layer.k, h, w,
                                  layer.binary, branches,
                                  branches * (layer.c_out * layer.c_in * layer.k ** 2 + extra)))

        h, w = cfg.height, cfg.width
        conv_row(self.stem, h, w)
        for units in self.stages:
            h, w = h // 2, w // 2
            for u in units:
                conv_row(u.body, h, w)
                if u.proj:
                    conv_row(u.proj, h, w)
        for d, blk in enumerate(self.decoder):
            if blk["lateral"]:
                conv_row(blk["lateral"], h, w)
            for u in blk["convs"]:
                conv_row(u.body, h, w)
            up = blk["up"]
            if blk["attn"]:
                a = blk["attn"]
                conv_row(a.proj, h, w)
                rows.append(LayerInfo(a.name, "attention", a.channels, a.channels, 0, h, w,
                                      a.proj.binary, cfg.K, 1))
            conv_row(up.conv1[0], h, w, f"{up.name}.conv1", cfg.K)
            h, w = 2 * h, 2 * w
            conv_row(up.conv2[0], h, w, f"{up.name}.conv2", cfg.K)
            rows[-1].params += 2 * cfg.K      # gate and merge logits
        conv_row(self.head, h, w)
        return rows

    def n_params(self) -> int:
        return int(sum(self.store[n].size for n in self.store.trainable_names()))

    def precision_audit(self) -> dict:
        """Which convs run binary vs float under the current configuration."""
        ctx = self.context(training=False)
        return {layer.name: ("binary" if layer.is_binary(ctx) else "float") for layer in self.conv_layers()}


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def forward(m: Model, image) -> np.ndarray:
    """Logits ``(classes, H, W)`` for one ``(C, H, W)`` image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError("forward expects a single (C, H, W) image")
    return m.logits(image)


# -- checkpoint container ----------------------------------------------------

CKPT_MAGIC = b"BNNC"
CKPT_VERSION = 1


def _container(entries, cfg: ModelConfig) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(entries))]
    for name, blob in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + blob)
    parts.append(cfg.to_text().encode("utf-8"))
    return b"".join(parts)


def save_checkpoint(m: Model) -> bytes:
    """Serialize every parameter slot (including norm running statistics) plus the config."""
    return _container([(name, dump_btf(value)) for name, value in m.store.items()], m.cfg)


def _read_container(data: bytes):
    data = bytes(data)
    if len(data) < 10 or data[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 10
    entries = []
    for _ in range(count):
        if pos + 2 > len(data):
            raise FormatError("truncated checkpoint entry")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n > len(data):
            raise FormatError("truncated checkpoint entry name")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        tensor, size = load_btf(data, pos, return_size=True)
        pos += size
        entries.append((name, tensor))
    try:
        text = data[pos:].decode("utf-8")
        cfg = ModelConfig.from_text(text)
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"bad checkpoint config: {exc}") from exc
    return entries, cfg


def load_checkpoint(data: bytes, expected: Optional[ModelConfig] = None) -> Model:
    entries, cfg = _read_container(data)
    if expected is not None:
        mismatch = [f.name for f in dataclasses.fields(cfg)
                    if f.name != "binary_active" and getattr(cfg, f.name) != getattr(expected, f.name)]
        if mismatch:
            raise ConfigError(f"checkpoint config differs in: {', '.join(mismatch)}")
    m = Model(cfg)
    names = [n for n, _ in entries]
    if names != list(m.store):
        raise FormatError("checkpoint parameters do not match the architecture")
    for name, tensor in entries:
        if not isinstance(tensor, np.ndarray) or tensor.dtype != np.float32:
            raise FormatError(f"{name}: expected float32 tensor")
        try:
            m.store[name] = tensor
        except ShapeError as exc:
            raise FormatError(str(exc)) from exc
    return m


def export_packed(m: Model) -> bytes:
    """Deployment container: quantizable conv weights as packed sign bits plus per-filter scales.

    Everything else (float layers, norms, gates) is stored as float32.
    """
    packed = {layer.name + ".w" for layer in m.conv_layers() if layer.binary}
    entries = []
    for name, value in m.store.items():
        if name in packed:
            q = pack_signs(value)
            scale = np.abs(value).reshape(value.shape[0], -1).mean(axis=1).astype(np.float32)
            entries.append((name + ".bits", dump_btf(q)))
            entries.append((name + ".scale", dump_btf(scale)))
        else:
            entries.append((name, dump_btf(value)))
    return _container(entries, m.cfg)


def read_packed(data: bytes):
    """Entries of a packed deployment container, as ``(name, tensor)`` pairs and the config."""
    return _read_container(data)
