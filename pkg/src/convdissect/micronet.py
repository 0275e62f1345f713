"""A small trainable convolutional classifier with per-block freezing.

The network is a stack of K conv blocks, each ``3x3 conv (pad 1) -> ReLU ->
2x2 max-pool``, followed by global average pooling and a linear head.  All
arithmetic is plain numpy so the training trajectory is deterministic given
(seed, data order) and frozen blocks can be kept bit-identical by simply
reusing their parameter arrays.

Models are immutable values: ``train_step`` returns a new ``ModelState``
and shares the arrays of frozen parameter groups with its input.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensorio

MODEL_FORMAT_VERSION = 1

_DTYPES = {"f32": np.float32, "f64": np.float64}


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class Architecture:
    """Static shape of a micronet: input geometry and per-block channels."""

    in_channels: int = 3
    input_hw: int = 64
    channels: tuple[int, ...] = (8, 16, 32, 64)

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        if self.num_blocks < 2:
            raise ValueError(f"need at least 2 blocks, got {self.num_blocks}")
        if any(c <= 0 for c in self.channels):
            raise ValueError(f"zero or negative channel count in {self.channels}")
        if self.in_channels <= 0:
            raise ValueError("in_channels must be positive")
        if self.input_hw % (2 ** self.num_blocks) != 0:
            raise ValueError(
                f"input side {self.input_hw} not divisible by 2^{self.num_blocks}"
            )

    def to_config(self) -> str:
        """Plain-text key=value form consumed by :func:`parse_architecture`."""
        chans = ",".join(str(c) for c in self.channels)
        return f"in_channels={self.in_channels}\ninput_hw={self.input_hw}\nchannels={chans}\n"


def parse_architecture(text: str) -> Architecture:
    kv = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad architecture line {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    arch = Architecture(
        in_channels=int(kv.get("in_channels", 3)),
        input_hw=int(kv.get("input_hw", 64)),
        channels=tuple(int(c) for c in kv.get("channels", "8,16,32,64").split(",")),
    )
    arch.validate()
    return arch


@dataclass(frozen=True)
class ConvBlock:
    w: np.ndarray  # [out_c, in_c, 3, 3]
    b: np.ndarray  # [out_c]


@dataclass(frozen=True)
class ModelState:
    arch: Architecture
    blocks: tuple[ConvBlock, ...]
    head_w: np.ndarray  # [num_classes, channels[-1]]
    head_b: np.ndarray  # [num_classes]
    freeze_flags: tuple[bool, ...]
    head_frozen: bool
    num_classes: int
    seed: int
    dtype: str = "f32"
    # head rows below this index are kept verbatim by train_step; used in
    # class-incremental steps that only fit the newly added logits
    head_train_from: int = 0

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def np_dtype(self) -> np.dtype:
        return np.dtype(_DTYPES[self.dtype])

    def with_freeze(self, flags, head_frozen: bool | None = None) -> "ModelState":
        flags = tuple(bool(f) for f in flags)
        if len(flags) != self.num_blocks:
            raise ValueError(f"need {self.num_blocks} freeze flags, got {len(flags)}")
        if head_frozen is None:
            head_frozen = self.head_frozen
        return replace(self, freeze_flags=flags, head_frozen=bool(head_frozen))


@dataclass
class BlockActivations:
    """Per-block feature maps and final logits for one input image."""

    block_maps: list[np.ndarray]  # block j: [channels[j], h_j, w_j]
    logits: np.ndarray  # [num_classes]


def init_model(
    arch: Architecture, num_classes: int, seed: int, dtype: str = "f32"
) -> ModelState:
    """Deterministically initialize a model (He-scaled conv weights, zero biases)."""
    arch.validate()
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if dtype not in _DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]
    rng = np.random.default_rng(seed)
    blocks = []
    in_c = arch.in_channels
    for out_c in arch.channels:
        std = math.sqrt(2.0 / (in_c * 9))
        w = (rng.standard_normal((out_c, in_c, 3, 3)) * std).astype(np_dtype)
        b = np.zeros(out_c, dtype=np_dtype)
        blocks.append(ConvBlock(w=w, b=b))
        in_c = out_c
    feat = arch.channels[-1]
    head_w = (rng.standard_normal((num_classes, feat)) * math.sqrt(1.0 / feat)).astype(np_dtype)
    head_b = np.zeros(num_classes, dtype=np_dtype)
    return ModelState(
        arch=arch,
        blocks=tuple(blocks),
        head_w=head_w,
        head_b=head_b,
        freeze_flags=(False,) * arch.num_blocks,
        head_frozen=False,
        num_classes=num_classes,
        seed=seed,
        dtype=dtype,
    )


# ---------------------------------------------------------------------------
# layer primitives (forward + backward)
#
# Convolutions run internally in NHWC: the patch gather and the gradient
# reshape are then contiguous, which is 2-3x faster than NCHW im2col.  The
# public tensor contract stays channels-first; boundaries transpose.


def _weights_nhwc(w: np.ndarray) -> np.ndarray:
    # [out, in, 3, 3] -> [(di, dj, in), out]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, w.shape[0])


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 cross-correlation with padding 1; x is NHWC, w is [out, in, 3, 3]."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # [n, h, wd, c, 3, 3]
    cols2 = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * c)
    out = (cols2 @ _weights_nhwc(w)).reshape(n, h, wd, w.shape[0]) + b
    return out, cols2


def conv3x3_backward(gout: np.ndarray, cols2: np.ndarray, w: np.ndarray, x_shape):
    n, h, wd, c = x_shape
    out_c = w.shape[0]
    g2 = gout.reshape(n * h * wd, out_c)
    gw = (cols2.T @ g2).reshape(3, 3, c, out_c).transpose(3, 2, 0, 1)
    gb = g2.sum(axis=0)
    gcols = (g2 @ _weights_nhwc(w).T).reshape(n, h, wd, 3, 3, c)
    gxp = np.zeros((n, h + 2, wd + 2, c), dtype=gout.dtype)
    for di in range(3):
        for dj in range(3):
            gxp[:, di : di + h, dj : dj + wd, :] += gcols[:, :, :, di, dj, :]
    return np.ascontiguousarray(gw), gb, gxp[:, 1:-1, 1:-1, :]


def maxpool2_forward(x: np.ndarray):
    """2x2/stride-2 max pool on NHWC with argmax indices for backward."""
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    win = np.ascontiguousarray(win).reshape(n, h // 2, w // 2, 4, c)
    idx = win.argmax(axis=3)  # ties resolve to the first element: deterministic
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx


def maxpool2_fast(x: np.ndarray) -> np.ndarray:
    """Pool without tracking indices; bit-identical values, inference only."""
    a = np.maximum(x[:, 0::2, 0::2, :], x[:, 0::2, 1::2, :])
    b = np.maximum(x[:, 1::2, 0::2, :], x[:, 1::2, 1::2, :])
    return np.maximum(a, b)


def maxpool2_backward(gout: np.ndarray, idx: np.ndarray, x_shape):
    n, h, w, c = x_shape
    g = np.zeros((n, h // 2, w // 2, 4, c), dtype=gout.dtype)
    np.put_along_axis(g, idx[:, :, :, None, :], gout[:, :, :, None, :], axis=3)
    g = g.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(g).reshape(n, h, w, c)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, dlogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    p = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    eps = np.finfo(logits.dtype).tiny
    loss = float(-np.log(p[np.arange(n), labels] + eps).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


# ---------------------------------------------------------------------------
# model-level forward / backward


def _check_batch(model: ModelState, x: np.ndarray) -> None:
    want = (model.arch.in_channels, model.arch.input_hw, model.arch.input_hw)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ValueError(f"input shape {x.shape} does not match {('N',) + want}")


def _forward_nhwc(model: ModelState, x: np.ndarray) -> list[np.ndarray]:
    """Post-pool NHWC outputs of every block for an NHWC input batch."""
    outs = []
    for blk in model.blocks:
        x, _ = conv3x3_forward(x, blk.w, blk.b)
        x = np.maximum(x, 0)
        x = maxpool2_fast(x)
        outs.append(x)
    return outs


def _head(model: ModelState, feats: np.ndarray) -> np.ndarray:
    return feats @ model.head_w.T + model.head_b


def forward_batch(model: ModelState, x: np.ndarray):
    """Run a batch through the network.

    Returns (block_maps, feats, logits) where ``block_maps[j]`` holds the
    post-pool output of block j, shape [n, channels[j], h_j, w_j].
    """
    _check_batch(model, x)
    x = np.ascontiguousarray(
        x.astype(model.np_dtype(), copy=False).transpose(0, 2, 3, 1)
    )
    outs = _forward_nhwc(model, x)
    feats = outs[-1].mean(axis=(1, 2))
    maps = [np.ascontiguousarray(o.transpose(0, 3, 1, 2)) for o in outs]
    return maps, feats, _head(model, feats)


def forward_aggregates(model: ModelState, x: np.ndarray, how: str = "spatial-mean"):
    """Per-block spatially aggregated activations plus logits, batched.

    Hot path for occlusion sweeps: skips materializing channels-first maps.
    Returns (aggs, logits) with ``aggs[j]`` of shape [n, channels[j]].
    """
    _check_batch(model, x)
    x = np.ascontiguousarray(
        x.astype(model.np_dtype(), copy=False).transpose(0, 2, 3, 1)
    )
    outs = _forward_nhwc(model, x)
    if how == "spatial-mean":
        aggs = [o.mean(axis=(1, 2)) for o in outs]
    elif how == "spatial-max":
        aggs = [o.max(axis=(1, 2)) for o in outs]
    else:
        raise ValueError(f"unknown aggregation {how!r}")
    feats = outs[-1].mean(axis=(1, 2))
    return aggs, _head(model, feats)


def forward(model: ModelState, image: np.ndarray) -> BlockActivations:
    """Pure single-image forward pass exposing every block's feature maps."""
    want = (model.arch.in_channels, model.arch.input_hw, model.arch.input_hw)
    if image.shape != want:
        raise ValueError(f"image shape {image.shape} does not match {want}")
    maps, _, logits = forward_batch(model, image[None])
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged("non-finite logits in forward pass")
    return BlockActivations(block_maps=[m[0] for m in maps], logits=logits[0])


def loss_and_grads(model: ModelState, images: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and analytic gradients for every parameter.

    Gradients are returned as a dict with keys ``block{j}.w``, ``block{j}.b``,
    ``head.w`` and ``head.b`` regardless of freeze flags; freezing is applied
    by the optimizer, not here.
    """
    _check_batch(model, images)
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise ValueError("labels must be a vector matching the batch size")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(
            f"label out of range: max {int(labels.max())} for {model.num_classes} classes"
        )

    x = np.ascontiguousarray(
        images.astype(model.np_dtype(), copy=False).transpose(0, 2, 3, 1)
    )
    caches = []
    for blk in model.blocks:
        x_shape = x.shape
        pre, cols2 = conv3x3_forward(x, blk.w, blk.b)
        act = np.maximum(pre, 0)
        pooled, idx = maxpool2_forward(act)
        caches.append((x_shape, cols2, pre, act.shape, idx))
        x = pooled
    n, h, w, c = x.shape
    feats = x.mean(axis=(1, 2))
    logits = feats @ model.head_w.T + model.head_b
    loss, dlogits = softmax_cross_entropy(logits, labels)

    grads: dict[str, np.ndarray] = {
        "head.w": dlogits.T @ feats,
        "head.b": dlogits.sum(axis=0),
    }
    dfeats = dlogits @ model.head_w
    dx = np.broadcast_to(dfeats[:, None, None, :] / (h * w), x.shape).astype(x.dtype)
    for j in reversed(range(model.num_blocks)):
        x_shape, cols2, pre, act_shape, idx = caches[j]
        dact = maxpool2_backward(dx, idx, act_shape)
        dpre = dact * (pre > 0)
        gw, gb, dx = conv3x3_backward(dpre, cols2, model.blocks[j].w, x_shape)
        grads[f"block{j}.w"] = gw
        grads[f"block{j}.b"] = gb
    return loss, grads


def zero_velocity(model: ModelState) -> dict[str, np.ndarray]:
    vel = {}
    for j, blk in enumerate(model.blocks):
        vel[f"block{j}.w"] = np.zeros_like(blk.w)
        vel[f"block{j}.b"] = np.zeros_like(blk.b)
    vel["head.w"] = np.zeros_like(model.head_w)
    vel["head.b"] = np.zeros_like(model.head_b)
    return vel


def train_step(
    model: ModelState,
    images: np.ndarray,
    labels: np.ndarray,
    lr: float,
    momentum: float = 0.9,
    velocity: dict[str, np.ndarray] | None = None,
):
    """One SGD-with-momentum step on a batch.

    Returns ``(new_model, loss, velocity)``.  Momentum buffers persist
    across steps through the returned ``velocity`` dict; pass ``None`` to
    start fresh.  Frozen parameter groups keep their exact array objects,
    so their bytes are invariant by construction.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    loss, grads = loss_and_grads(model, images, labels)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss!r}; training aborted")
    if velocity is None:
        velocity = zero_velocity(model)

    new_blocks = []
    for j, blk in enumerate(model.blocks):
        if model.freeze_flags[j]:
            new_blocks.append(blk)
            continue
        vw = momentum * velocity[f"block{j}.w"] - lr * grads[f"block{j}.w"]
        vb = momentum * velocity[f"block{j}.b"] - lr * grads[f"block{j}.b"]
        velocity[f"block{j}.w"] = vw
        velocity[f"block{j}.b"] = vb
        new_blocks.append(ConvBlock(w=blk.w + vw, b=blk.b + vb))
    if model.head_frozen:
        head_w, head_b = model.head_w, model.head_b
    else:
        gw = grads["head.w"]
        if model.head_train_from > 0:
            # established row weights stay put; biases keep training so later
            # classes can still calibrate their logit offsets against old ones
            gw = gw.copy()
            gw[: model.head_train_from] = 0
        vw = momentum * velocity["head.w"] - lr * gw
        vb = momentum * velocity["head.b"] - lr * grads["head.b"]
        velocity["head.w"] = vw
        velocity["head.b"] = vb
        head_w, head_b = model.head_w + vw, model.head_b + vb
        if model.head_train_from > 0:
            head_w[: model.head_train_from] = model.head_w[: model.head_train_from]

    new_model = replace(model, blocks=tuple(new_blocks), head_w=head_w, head_b=head_b)
    return new_model, loss, velocity


def expand_head(model: ModelState, extra_classes: int, seed: int) -> ModelState:
    """Grow the head for newly introduced classes.

    Old rows are copied verbatim (bit-identical); new rows are drawn small
    (scale 0.01) from ``seed`` with zero bias.
    """
    if extra_classes < 1:
        raise ValueError("extra_classes must be >= 1")
    rng = np.random.default_rng(seed)
    np_dtype = model.np_dtype()
    feat = model.head_w.shape[1]
    new_rows = (rng.standard_normal((extra_classes, feat)) * 0.01).astype(np_dtype)
    head_w = np.concatenate([model.head_w, new_rows], axis=0)
    head_b = np.concatenate([model.head_b, np.zeros(extra_classes, dtype=np_dtype)])
    return replace(
        model,
        head_w=head_w,
        head_b=head_b,
        num_classes=model.num_classes + extra_classes,
    )


# ---------------------------------------------------------------------------
# persistence (model manifest + interchange tensors)


def save_model(model: ModelState, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "arch": {
            "in_channels": model.arch.in_channels,
            "input_hw": model.arch.input_hw,
            "channels": list(model.arch.channels),
        },
        "num_classes": model.num_classes,
        "seed": model.seed,
        "dtype": model.dtype,
        "freeze_flags": [bool(f) for f in model.freeze_flags],
        "head_frozen": model.head_frozen,
        "head_train_from": model.head_train_from,
    }
    (root / "model.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with tensorio.TensorDir(root) as td:
        for j, blk in enumerate(model.blocks):
            td.write(f"block{j}/w", blk.w)
            td.write(f"block{j}/b", blk.b)
        td.write("head/w", model.head_w)
        td.write("head/b", model.head_b)


def load_model(root) -> ModelState:
    root = Path(root)
    doc = json.loads((root / "model.json").read_text())
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise tensorio.FormatError(
            f"unsupported model version {doc.get('format_version')!r} (field: format_version)"
        )
    arch = Architecture(
        in_channels=doc["arch"]["in_channels"],
        input_hw=doc["arch"]["input_hw"],
        channels=tuple(doc["arch"]["channels"]),
    )
    td = tensorio.TensorDir(root)
    blocks = tuple(
        ConvBlock(w=td.read(f"block{j}/w"), b=td.read(f"block{j}/b"))
        for j in range(arch.num_blocks)
    )
    return ModelState(
        arch=arch,
        blocks=blocks,
        head_w=td.read("head/w"),
        head_b=td.read("head/b"),
        freeze_flags=tuple(bool(f) for f in doc["freeze_flags"]),
        head_frozen=bool(doc["head_frozen"]),
        num_classes=int(doc["num_classes"]),
        seed=int(doc["seed"]),
        dtype=doc["dtype"],
        head_train_from=int(doc.get("head_train_from", 0)),
    )


def params_bytes(model: ModelState) -> dict[str, bytes]:
    """Raw parameter bytes per group, for freeze-invariance auditing."""
    out = {}
    for j, blk in enumerate(model.blocks):
        out[f"block{j}.w"] = blk.w.tobytes()
        out[f"block{j}.b"] = blk.b.tobytes()
    out["head.w"] = model.head_w.tobytes()
    out["head.b"] = model.head_b.tobytes()
    return out
