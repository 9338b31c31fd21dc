"""Time-conditioned velocity / noise predictors.

Two trunks share one interface:

* ``mlp`` for vector data: dense layers with SiLU, the time (and class)
  embedding added after the first layer.
* ``conv`` for small images: a two-level encoder/decoder of 3x3 convolutions
  with additive skips.

Class conditioning adds a learned embedding row to the time embedding. Mask
conditioning runs a half-width mirror of the trunk over the mask and adds its
decoder features into the trunk through zero-initialised fusion layers, so the
branch is exactly inert until training moves those weights.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MAGIC = b"MOTF"
FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Condition:
    """Class and/or mask conditioning for a batch (or a single sample).

    ``class_onehot`` is (C,) or (B, C); ``mask`` has the data's spatial shape,
    optionally with a leading batch axis. An all-zero class row is the null
    token produced by condition dropout.
    """

    class_onehot: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.class_onehot is not None:
            oh = np.asarray(self.class_onehot, dtype=np.float64)
            rows = oh.reshape(-1, oh.shape[-1])
            if not np.all((rows == 0) | (rows == 1)) or not np.all(rows.sum(1) <= 1):
                raise ModelError("class_onehot rows must be one-hot (or all zero for the null token)")
            self.class_onehot = oh
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=np.float64)
            if np.any(m < 0) or np.any(m > 1):
                raise ModelError("mask entries must lie in [0, 1]")
            self.mask = m

    @classmethod
    def from_labels(cls, labels, num_classes: int, mask=None) -> "Condition":
        labels = np.asarray(labels, dtype=np.int64)
        if np.any(labels < 0) or np.any(labels >= num_classes):
            raise ModelError(f"labels must lie in [0, {num_classes})")
        return cls(np.eye(num_classes)[labels], mask)

    def take(self, idx) -> "Condition":
        return Condition(
            None if self.class_onehot is None else self.class_onehot[idx],
            None if self.mask is None else self.mask[idx],
        )


@dataclass
class ModelConfig:
    data_shape: tuple
    arch: str = ""
    hidden: tuple = (128, 128, 128)
    channels: int = 32
    time_dim: int = 32
    time_scale: float = 1000.0
    num_classes: int = 0
    mask_conditioning: bool = False
    seed: int = 0

    def __post_init__(self):
        self.data_shape = tuple(int(s) for s in self.data_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.arch:
            self.arch = "mlp" if len(self.data_shape) == 1 else "conv"
        if self.arch not in ("mlp", "conv"):
            raise ModelError(f"unknown architecture {self.arch!r}")
        if self.time_dim % 2:
            raise ModelError("time_dim must be even")
        if self.arch == "mlp":
            if len(self.data_shape) != 1 or not self.hidden:
                raise ModelError("mlp needs a 1-D data shape and at least one hidden layer")
        else:
            if len(self.data_shape) not in (2, 3):
                raise ModelError("conv needs (H, W) or (C, H, W) data")
            h, w = self.data_shape[-2:]
            if h % 4 or w % 4:
                raise ModelError("conv spatial size must be divisible by 4")
            if self.channels < 2 or self.channels % 2:
                raise ModelError("channels must be an even integer >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data_shape"] = list(self.data_shape)
        d["hidden"] = list(self.hidden)
        return d


def time_embedding(t, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal features ``[sin(w_k t)..., cos(w_k t)...]``, ``w_k = scale * 10000^(-2k/dim)``.

    Scalar ``t`` gives shape (dim,); an array of B times gives (B, dim).
    """
    if dim <= 0 or dim % 2:
        raise ModelError(f"time embedding dim must be a positive even integer, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = scale * 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class ConditionedModel:
    """Velocity (flow matching) or noise (diffusion) predictor.

    The role is decided by the loss used in training; the network is the same.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self._params: list[tuple[str, Tensor]] = []
        # (fan_in, fan_out) of every weight/bias layer, for parameter accounting
        self.layer_fans: list[tuple[int, int]] = []
        if config.arch == "mlp":
            self._build_mlp()
        else:
            self._build_conv()
        del self._rng

    # -- construction -------------------------------------------------------

    def _add(self, name: str, shape, fan_in: int, zero: bool = False) -> Tensor:
        if zero:
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True)
        self._params.append((name, t))
        return t

    def _dense(self, name, fan_in, fan_out, zero=False):
        w = self._add(f"{name}.w", (fan_in, fan_out), fan_in, zero)
        b = self._add(f"{name}.b", (fan_out,), fan_in, zero)
        self.layer_fans.append((fan_in, fan_out))
        return w, b

    def _conv(self, name, cin, cout, k=3, zero=False):
        fan_in = cin * k * k
        w = self._add(f"{name}.w", (cout, cin, k, k), fan_in, zero)
        b = self._add(f"{name}.b", (cout,), fan_in, zero)
        self.layer_fans.append((fan_in, cout))
        return w, b

    def _build_embedding(self, width):
        cfg = self.config
        self.te1 = self._dense("time.0", cfg.time_dim, width)
        self.te2 = self._dense("time.1", width, width)
        self.class_table = None
        if cfg.num_classes:
            self.class_table = self._add("class.table", (cfg.num_classes, width), cfg.num_classes)

    def _build_mlp(self):
        cfg = self.config
        D = cfg.data_shape[0]
        hs = cfg.hidden
        self._build_embedding(hs[0])
        self.layers = []
        prev = D
        for i, h in enumerate(hs):
            self.layers.append(self._dense(f"trunk.{i}", prev, h))
            prev = h
        self.out = self._dense("trunk.out", prev, D)
        self.enc = []
        self.fuse = []
        if cfg.mask_conditioning:
            prev = D
            for i, h in enumerate(hs):
                half = max(h // 2, 1)
                self.enc.append(self._dense(f"cond.{i}", prev, half))
                prev = half
            for i, h in enumerate(hs):
                self.fuse.append(self._dense(f"cond.zero.{i}", max(h // 2, 1), h, zero=True))

    def _build_conv(self):
        cfg = self.config
        cin = cfg.data_shape[0] if len(cfg.data_shape) == 3 else 1
        c = cfg.channels
        emb = 2 * c
        self._build_embedding(emb)
        self.proj = [self._dense(f"time.proj.{i}", emb, w) for i, w in enumerate((c, 2 * c, 2 * c))]
        self.conv_in = self._conv("trunk.in", cin, c)
        self.down0 = self._conv("trunk.down0", c, c)
        self.down1 = self._conv("trunk.down1", c, 2 * c)
        self.mid = self._conv("trunk.mid", 2 * c, 2 * c)
        self.up1 = self._conv("trunk.up1", 2 * c, 2 * c)
        self.up0 = self._conv("trunk.up0", 2 * c, c)
        self.conv_out = self._conv("trunk.out", c, cin)
        if cfg.mask_conditioning:
            h = c // 2
            self.c_in = self._conv("cond.in", 1, h)
            self.c_down0 = self._conv("cond.down0", h, h)
            self.c_down1 = self._conv("cond.down1", h, c)
            self.c_mid = self._conv("cond.mid", c, c)
            self.c_up1 = self._conv("cond.up1", c, c)
            self.c_up0 = self._conv("cond.up0", c, h)
            self.c_zero = [
                self._conv("cond.zero.0", h, c, k=1, zero=True),
                self._conv("cond.zero.1", c, 2 * c, k=1, zero=True),
                self._conv("cond.zero.2", c, 2 * c, k=1, zero=True),
            ]

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self._params]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def condition_encoder_parameters(self) -> list[Tensor]:
        return [t for n, t in self._params if n.startswith("cond.")]

    def num_parameters(self) -> int:
        return int(np.sum([t.size for _, t in self._params]))

    def zero_grad(self) -> None:
        for _, t in self._params:
            t.grad = None

    # -- forward ------------------------------------------------------------

    def _embedding(self, t: np.ndarray, cond: Condition | None) -> Tensor:
        cfg = self.config
        feats = Tensor(time_embedding(t, cfg.time_dim, cfg.time_scale))
        e = nx.linear(nx.silu(nx.linear(feats, *self.te1)), *self.te2)
        if self.class_table is not None and cond is not None and cond.class_onehot is not None:
            oh = cond.class_onehot.reshape(len(t), -1)
            if oh.shape[1] != cfg.num_classes:
                raise ModelError(f"class vector has {oh.shape[1]} entries, model expects {cfg.num_classes}")
            e = e + nx.matmul(Tensor(oh), self.class_table)
        return e

    def encode_condition(self, mask) -> list[Tensor]:
        """Fused contributions of the mask branch, one per trunk depth."""
        cfg = self.config
        if not cfg.mask_conditioning:
            raise ModelError("model was built without mask conditioning")
        m = np.asarray(mask, dtype=np.float64)
        spatial = cfg.data_shape if cfg.arch == "mlp" else cfg.data_shape[-2:]
        if m.shape == tuple(spatial):
            m = m[None]
        if m.shape[1:] != tuple(spatial):
            raise ModelError(f"mask shape {m.shape} does not match spatial shape {spatial}")
        if cfg.arch == "mlp":
            h = Tensor(m)
            out = []
            for layer, fuse in zip(self.enc, self.fuse):
                h = nx.silu(nx.linear(h, *layer))
                out.append(nx.linear(h, *fuse))
            return out
        x = Tensor(m[:, None])
        e0 = nx.silu(nx.conv2d(nx.silu(nx.conv2d(x, *self.c_in)), *self.c_down0))
        e1 = nx.silu(nx.conv2d(nx.avg_pool2(e0), *self.c_down1))
        d2 = nx.silu(nx.conv2d(nx.avg_pool2(e1), *self.c_mid))
        d1 = nx.silu(nx.conv2d(nx.upsample2(d2), *self.c_up1)) + e1
        d0 = nx.silu(nx.conv2d(nx.upsample2(d1), *self.c_up0)) + e0
        z0, z1, z2 = self.c_zero
        return [nx.conv2d(d0, *z0), nx.conv2d(d1, *z1), nx.conv2d(d2, *z2)]

    def forward(self, x, t, cond: Condition | None = None) -> Tensor:
        """Predict a field of the same shape as ``x``.

        ``x`` is one sample (``data_shape``) or a batch (``(B, *data_shape)``);
        ``t`` is a float or one time per sample.
        """
        cfg = self.config
        x = nx.as_tensor(x)
        single = x.shape == cfg.data_shape
        if single:
            x = nx.reshape(x, (1,) + cfg.data_shape)
        if x.shape[1:] != cfg.data_shape:
            raise ModelError(f"input shape {x.shape} does not match model data shape {cfg.data_shape}")
        B = x.shape[0]
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        if cond is not None and cond.class_onehot is not None and not cfg.num_classes:
            raise ModelError("class condition given to a model without class conditioning")
        if cond is not None and cond.mask is not None and not cfg.mask_conditioning:
            raise ModelError("mask condition given to a model without mask conditioning")
        if cond is not None and single:
            cond = Condition(
                None if cond.class_onehot is None else cond.class_onehot.reshape(1, -1),
                None if cond.mask is None else cond.mask[None],
            )
        emb = self._embedding(tt, cond)
        fused = None
        if cfg.mask_conditioning and cond is not None and cond.mask is not None:
            fused = self.encode_condition(cond.mask)
        out = self._mlp(x, emb, fused) if cfg.arch == "mlp" else self._convnet(x, emb, fused)
        if single:
            out = nx.reshape(out, cfg.data_shape)
        return out

    def _mlp(self, x, emb, fused):
        h = nx.linear(x, *self.layers[0]) + emb
        if fused is not None:
            h = h + fused[0]
        h = nx.silu(h)
        for i, layer in enumerate(self.layers[1:], start=1):
            h = nx.linear(h, *layer)
            if fused is not None:
                h = h + fused[i]
            h = nx.silu(h)
        return nx.linear(h, *self.out)

    def _convnet(self, x, emb, fused):
        cfg = self.config
        B = x.shape[0]
        if len(cfg.data_shape) == 2:
            x = nx.reshape(x, (B, 1) + cfg.data_shape)
        p0, p1, p2 = (nx.linear(emb, *p) for p in self.proj)
        h = nx.silu(nx.add_channel(nx.conv2d(x, *self.conv_in), p0))
        s0 = nx.silu(nx.conv2d(h, *self.down0))
        s1 = nx.silu(nx.add_channel(nx.conv2d(nx.avg_pool2(s0), *self.down1), p1))
        h = nx.silu(nx.add_channel(nx.conv2d(nx.avg_pool2(s1), *self.mid), p2))
        if fused is not None:
            h = h + fused[2]
        h = nx.silu(nx.conv2d(nx.upsample2(h), *self.up1)) + s1
        if fused is not None:
            h = h + fused[1]
        h = nx.silu(nx.conv2d(nx.upsample2(h), *self.up0)) + s0
        if fused is not None:
            h = h + fused[0]
        out = nx.conv2d(h, *self.conv_out)
        return nx.reshape(out, (B,) + cfg.data_shape)

    def predict(self, x: np.ndarray, t, cond: Condition | None = None) -> np.ndarray:
        """Gradient-free forward on raw arrays."""
        return self.forward(Tensor(x), t, cond).numpy()

    __call__ = predict

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> list[np.ndarray]:
        return [t.numpy() for _, t in self._params]

    def load_arrays(self, arrays) -> None:
        mine = self._params
        if len(arrays) != len(mine):
            raise CheckpointError(f"expected {len(mine)} parameter arrays, got {len(arrays)}")
        for (name, t), a in zip(mine, arrays):
            if tuple(np.shape(a)) != t.shape:
                raise CheckpointError(f"parameter {name}: shape {np.shape(a)} != {t.shape}")
        for (_, t), a in zip(mine, arrays):
            t.data = Tensor(a).data
            t.grad = None


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: ConditionedModel
    metadata: dict
    optimizer: dict | None = field(default=None)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: ConditionedModel, metadata: dict | None = None, optimizer: dict | None = None) -> bytes:
    """Serialise a model (and optionally Adam moments) to the binary format.

    Layout: ``MOTF``, u32 version, u64 JSON length, JSON metadata, then all
    parameters as little-endian f64 in parameter order, followed by the first
    and second moments when optimizer state is present.
    """
    meta = dict(metadata or {})
    meta["model"] = model.config.to_dict()
    meta["parameters"] = [[n, list(t.shape)] for n, t in model.named_parameters()]
    arrays = model.state_arrays()
    if optimizer is not None:
        meta["optimizer"] = {"step": int(optimizer["step"])}
        arrays = arrays + [np.asarray(a) for a in optimizer["m"]] + [np.asarray(a) for a in optimizer["v"]]
    header = _canonical_json(meta)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(header)), header]
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return b"".join(parts)


def save_checkpoint(path, model, metadata=None, optimizer=None) -> str:
    """Write a checkpoint; returns its sha256 digest."""
    blob = checkpoint_bytes(model, metadata, optimizer)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def _parse(blob: bytes):
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<Q", blob[8:16])
    meta = json.loads(blob[16:16 + n].decode("utf-8"))
    payload = np.frombuffer(blob[16 + n:], dtype="<f8")
    return meta, payload


def _split(payload, shapes):
    arrays, off = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        if off + size > payload.size:
            raise CheckpointError("checkpoint payload is truncated")
        arrays.append(payload[off:off + size].reshape(shape).astype(np.float64))
        off += size
    return arrays, off


def load_checkpoint(path) -> Checkpoint:
    """Rebuild the model described by a checkpoint and load its weights."""
    meta, payload = _parse(Path(path).read_bytes())
    model = ConditionedModel(ModelConfig(**meta["model"]))
    shapes = [tuple(s) for _, s in meta["parameters"]]
    arrays, off = _split(payload, shapes)
    model.load_arrays(arrays)
    opt = None
    if "optimizer" in meta:
        m, off2 = _split(payload[off:], shapes)
        v, _ = _split(payload[off + off2:], shapes)
        opt = {"step": meta["optimizer"]["step"], "m": m, "v": v}
    return Checkpoint(model, meta, opt)


def load_into(model: ConditionedModel, path) -> dict:
    """Load weights into an existing model; nothing changes on mismatch."""
    meta, payload = _parse(Path(path).read_bytes())
    theirs = meta["parameters"]
    mine = [[n, list(t.shape)] for n, t in model.named_parameters()]
    if len(theirs) != len(mine):
        raise CheckpointError(f"checkpoint has {len(theirs)} parameters, model has {len(mine)}")
    for (n1, s1), (n2, s2) in zip(theirs, mine):
        if n1 != n2 or list(s1) != list(s2):
            raise CheckpointError(f"parameter mismatch: checkpoint {n1}{s1} vs model {n2}{s2}")
    arrays, _ = _split(payload, [tuple(s) for _, s in theirs])
    model.load_arrays(arrays)
    return meta
