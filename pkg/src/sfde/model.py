"""The full three-branch network and its configuration, plus checkpoint
serialization of the complete parameter/buffer state.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Parameter, Tensor
from .backbone import Backbone, BackboneConfig
from .fsab import FrequencyStabilityBranch
from .gscb import GlobalSemanticBranch
from .layers import Module
from .lgsb import LocalGeometricBranch

OPTIMIZER_NOTE = (
    "update rule: m=b1*m+(1-b1)*g; v=b2*v+(1-b2)*g^2; "
    "mh=m/(1-b1^t); vh=v/(1-b2^t); "
    "p -= lr*mh/(sqrt(vh)+eps) + lr*wd*p (decoupled weight decay); "
    "b1=0.9 b2=0.999 eps=1e-8")


@dataclass
class ModelConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    input_size: int = 128
    embed_dim: int = 256
    heads: int = 4
    num_classes: int = 0
    use_gscb: bool = True
    use_lgsb: bool = True
    use_fsab: bool = True
    dtype: str = "float32"

    def validate(self):
        bb = self.backbone_config()
        bb.validate()
        c, s = bb.out_channels, bb.out_size
        if self.use_lgsb:
            if c % 4 != 0:
                raise ops.ShapeError(f"local branch needs C divisible by 4, got {c}")
            if s < 4:
                raise ops.ShapeError(
                    f"local branch pyramid needs feature maps >= 4x4; input "
                    f"size {self.input_size} gives {s}x{s} (use >= 128)")
        if self.use_fsab:
            if s % 2 != 0:
                raise ops.ShapeError(
                    f"frequency branch needs even feature width, got {s}")
            if c % self.heads != 0:
                raise ops.ShapeError(
                    f"feature channels {c} not divisible by {self.heads} heads")

    def backbone_config(self):
        return BackboneConfig(tuple(self.stage_channels),
                              self.blocks_per_stage, self.input_size)

    @property
    def np_dtype(self):
        return {"float32": np.float32, "float64": np.float64}[self.dtype]

    @property
    def feature_channels(self):
        return self.stage_channels[-1]

    @property
    def descriptor_dim(self):
        d = 0
        if self.use_gscb:
            d += self.embed_dim
        if self.use_lgsb:
            d += self.feature_channels
        if self.use_fsab:
            d += self.feature_channels
        return d


@dataclass
class ModelOutputs:
    features: Tensor
    global_desc: object = None   # GlobalDescriptor or None
    local_map: Tensor = None
    freq_map: Tensor = None


class SFDEModel(Module):
    """Weight-shared backbone + up to three branches. Both views pass
    through this single module; sharing is structural."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dt = cfg.np_dtype
        c = cfg.feature_channels
        self.backbone = Backbone(cfg.backbone_config(), rng, dtype=dt)
        self.gscb = (GlobalSemanticBranch(c, cfg.embed_dim, cfg.num_classes,
                                          rng, dtype=dt)
                     if cfg.use_gscb else None)
        self.lgsb = LocalGeometricBranch(c, rng, dtype=dt) if cfg.use_lgsb else None
        self.fsab = (FrequencyStabilityBranch(c, rng, heads=cfg.heads, dtype=dt)
                     if cfg.use_fsab else None)
        # GeM exponents for descriptor/contrastive pooling of branch maps
        self.pool_p_local = Parameter(np.asarray(3.0, dtype=dt))
        self.pool_p_freq = Parameter(np.asarray(3.0, dtype=dt))
        for p in (self.pool_p_local, self.pool_p_freq):
            p.clamp_range = (1.0, 128.0)
            p.weight_decay = False
        # shared learnable contrastive log-temperature, exp(.) = 0.07 at init
        self.log_temperature = Parameter(np.asarray(np.log(0.07), dtype=dt))
        self.log_temperature.weight_decay = False

    def __call__(self, images, training=False, rng=None) -> ModelOutputs:
        f = self.backbone(images, training)
        out = ModelOutputs(features=f)
        if self.gscb is not None:
            out.global_desc = self.gscb(f, training, rng)
        if self.lgsb is not None:
            out.local_map = self.lgsb(f, training)
        if self.fsab is not None:
            out.freq_map = self.fsab(f, training, rng)
        return out


# ---------------------------------------------------------------------------
# checkpoint format: magic + version + JSON header + named float arrays
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SFDK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SFDEModel, meta: dict):
    """Binary, little-endian: magic, u32 version, u32 header length + JSON
    header, u32 array count, then per array {u16 name length, name, u8 dtype
    (0=f32, 1=f64), u8 ndim, u32 dims..., raw data}. Atomic via rename."""
    header = dict(meta)
    header["model_config"] = vars_config(model.cfg)
    header["optimizer"] = OPTIMIZER_NOTE
    hdr = json.dumps(header, sort_keys=True).encode()
    arrays = list(model.named_parameters()) + [
        (name, Tensor(buf)) for name, buf in model.named_buffers()]

    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    blob += struct.pack("<I", len(hdr)) + hdr
    blob += struct.pack("<I", len(arrays))
    for name, t in arrays:
        nb = name.encode()
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(t.data, order="C")
        code = 1 if arr.dtype == np.float64 else 0
        arr = arr.astype("<f8" if code else "<f4")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def vars_config(cfg: ModelConfig):
    d = dict(vars(cfg))
    d["stage_channels"] = list(cfg.stage_channels)
    return d


def load_checkpoint(path, rng=None):
    """Rebuild a model (fresh RNG init, then overwritten) plus the header."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode())
    cfg_d = dict(header["model_config"])
    cfg_d["stage_channels"] = tuple(cfg_d["stage_channels"])
    cfg = ModelConfig(**cfg_d)
    model = SFDEModel(cfg, rng or np.random.default_rng(0))

    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = "<f8" if code else "<f4"
        nbytes = int(np.prod(dims)) * (8 if code else 4)
        arrays[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(dims)

    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, arr in arrays.items():
        if name in params:
            if params[name].shape != arr.shape:
                raise CheckpointError(
                    f"checkpoint/model mismatch for {name}: "
                    f"{arr.shape} vs {params[name].shape}")
            params[name].data = arr.astype(params[name].dtype)
        elif name in buffers:
            buffers[name][...] = arr
        else:
            raise CheckpointError(f"unknown array {name!r} in checkpoint")
    missing = (set(params) | set(buffers)) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint missing arrays: {sorted(missing)}")
    return model, header
