"""Dice loss, shift augmentation, the training loop and checkpoint files."""

from __future__ import annotations

import csv
import io
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeError, ValidationError
from .layers import AdamState, ConvKernel, adam_step
from .model import ArchSpec, estan_forward, flatten_params, forward_backward, param_shapes
from .tensor import SeededRng

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# Dice loss


def _check_dice_inputs(p: np.ndarray, g: np.ndarray) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    if not np.isin(g, (0, 1)).all():
        raise ValidationError("ground truth must be binary (0/1)")
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValidationError("probabilities must lie in [0, 1]")


def _dice_terms(p: np.ndarray, g: np.ndarray):
    p64 = p.astype(np.float64, copy=False)
    g64 = g.astype(np.float64, copy=False)
    num = 1.0 + 2.0 * np.sum(p64 * g64)
    den = 1.0 + np.sum(p64 * p64) + np.sum(g64 * g64)
    return p64, g64, num, den


def dice_loss(p: np.ndarray, g: np.ndarray, per_image: bool = False) -> float:
    """``1 - (1 + 2 sum p g) / (1 + sum p^2 + sum g^2)``.

    By default the sums run jointly over every pixel of the batch. With
    ``per_image`` the loss is computed per leading-axis sample and averaged.
    """
    _check_dice_inputs(p, g)
    if per_image:
        return float(np.mean([dice_loss(p[i], g[i]) for i in range(p.shape[0])]))
    _, _, num, den = _dice_terms(p, g)
    return float(1.0 - num / den)


def dice_loss_backward(p: np.ndarray, g: np.ndarray, per_image: bool = False) -> np.ndarray:
    """Gradient of :func:`dice_loss` with respect to ``p`` (same dtype as ``p``)."""
    _check_dice_inputs(p, g)
    if per_image:
        n = p.shape[0]
        return np.stack([dice_loss_backward(p[i], g[i]) / n for i in range(n)]).astype(p.dtype)
    p64, g64, num, den = _dice_terms(p, g)
    grad = (2.0 * p64 * num - 2.0 * g64 * den) / (den * den)
    return grad.astype(p.dtype, copy=False)


# ----------------------------------------------------------------------------
# augmentation


def shift_tensor(t: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate the last two axes by ``dx`` columns and ``dy`` rows, zero-filling."""
    h, w = t.shape[-2:]
    out = np.zeros_like(t)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c] = t[..., src_r, src_c]
    return out


def draw_shift(rng: SeededRng, h: int, w: int, max_fraction: float) -> tuple[int, int]:
    max_dx = int(max_fraction * w)
    max_dy = int(max_fraction * h)
    dx = rng.integers(-max_dx, max_dx + 1)
    dy = rng.integers(-max_dy, max_dy + 1)
    return dx, dy


def augment_shift(image: np.ndarray, mask: np.ndarray, rng: SeededRng, max_fraction: float):
    """Shift image and mask by the same random integer offset."""
    if image.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} differ spatially")
    dx, dy = draw_shift(rng, *image.shape[-2:], max_fraction)
    return shift_tensor(image, dx, dy), shift_tensor(mask, dx, dy)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 50
    seed: int = 0
    shift_augment: bool = False
    max_shift_fraction: float = 0.1
    input_hw: int = 256
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    per_image_dice: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.max_shift_fraction < 0.5:
            raise ValidationError(f"max_shift_fraction must be in [0, 0.5), got {self.max_shift_fraction}")
        if self.max_epochs < 0:
            raise ValidationError(f"max_epochs must be >= 0, got {self.max_epochs}")


@dataclass
class TrainHistory:
    mean_loss: list = field(default_factory=list)
    val_dsc: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "val_dsc"])
        for i, loss in enumerate(self.mean_loss):
            dsc = self.val_dsc[i] if i < len(self.val_dsc) else None
            w.writerow([i + 1, repr(loss), "" if dsc is None else repr(dsc)])
        return buf.getvalue()


def mean_dsc(params, spec: ArchSpec, images: np.ndarray, masks: np.ndarray, batch_size: int = 4) -> float:
    """Mean per-image Dice coefficient of the binarized (>= 0.5) predictions."""
    from .metrics import dice_coefficient

    scores = []
    for start in range(0, len(images), batch_size):
        prob = estan_forward(images[start : start + batch_size], params, spec)
        for p, g in zip(prob, masks[start : start + batch_size]):
            scores.append(dice_coefficient(p[0] >= 0.5, g[0] > 0))
    return float(np.mean(scores))


def train(
    config: TrainConfig,
    dataset,
    params,
    spec: ArchSpec,
    out_dir: str | Path | None = None,
    validation=None,
):
    """Train ``params`` in place on ``dataset = (images, masks)``.

    ``images`` and ``masks`` have shape (N, 1, h, w). Returns
    ``(params, history)``. ``validation`` is an optional (images, masks)
    pair scored with :func:`mean_dsc` after each epoch.
    """
    images, masks = dataset
    if len(images) == 0:
        raise ValidationError("training set is empty")
    if images.shape != masks.shape:
        raise ShapeError(f"images {images.shape} and masks {masks.shape} differ")
    dtype = next(iter(params.values())).weights.dtype
    images = images.astype(dtype, copy=False)
    masks = masks.astype(dtype, copy=False)

    root = SeededRng(config.seed)
    shuffle_rng, aug_rng = root.spawn(1), root.spawn(2)
    state = AdamState(lr=config.learning_rate)
    flat = flatten_params(params)
    history = TrainHistory()
    out_dir = Path(out_dir) if out_dir is not None else None
    per_image = config.per_image_dice

    def loss_and_grad(g):
        return lambda p: (dice_loss(p, g, per_image), dice_loss_backward(p, g, per_image))

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x, g = images[idx], masks[idx]
            if config.shift_augment:
                pairs = [augment_shift(x[i], g[i], aug_rng, config.max_shift_fraction) for i in range(len(idx))]
                x = np.stack([a for a, _ in pairs])
                g = np.stack([b for _, b in pairs])
            loss, _, grads = forward_backward(x, params, spec, loss_and_grad(g))
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {state.t + 1}")
            flat_grads = {}
            for name, (gw, gb) in grads.items():
                flat_grads[f"{name}.weight"] = gw
                flat_grads[f"{name}.bias"] = gb
            adam_step(flat, flat_grads, state)
            losses.append(loss)
        history.mean_loss.append(float(np.mean(losses)))
        if validation is not None:
            history.val_dsc.append(mean_dsc(params, spec, *validation))
        log.info("epoch %d mean loss %.5f", epoch, history.mean_loss[-1])
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(params, out_dir / f"epoch_{epoch:04d}.ckpt")

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out_dir / "final.ckpt")
        (out_dir / "history.csv").write_text(history.to_csv())
    return params, history


# ----------------------------------------------------------------------------
# checkpoints
#
# layout (all little-endian):
#   b"ESTANCKPT"  u16 version  u32 entry count
#   per entry: u16 name length, UTF-8 name, 4 x u32 dims (out, in, kh, kw),
#              float32 weights (row-major), float32 bias (out values)

MAGIC = b"ESTANCKPT"
VERSION = 1


def checkpoint_bytes(params) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, k in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<4I", *k.weights.shape))
        parts.append(np.ascontiguousarray(k.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(k.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated while reading {what}", field=what)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def parse_checkpoint(data: bytes) -> "OrderedDict[str, ConvKernel]":
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic: not an ESTAN checkpoint", field="magic")
    version, count = struct.unpack("<HI", r.take(6, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", field="version")
    params = OrderedDict()
    for i in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, f"entry {i} name length"))
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i} name is not UTF-8", field="name") from exc
        dims = struct.unpack("<4I", r.take(16, f"{name} dims"))
        if min(dims) < 1:
            raise FormatError(f"{name} has zero dimension {dims}", field="dims")
        n_w = int(np.prod(dims))
        w = np.frombuffer(r.take(4 * n_w, f"{name} weights"), dtype="<f4").astype(np.float32).reshape(dims)
        b = np.frombuffer(r.take(4 * dims[0], f"{name} bias"), dtype="<f4").astype(np.float32)
        try:
            params[name] = ConvKernel(w, b)
        except ValueError as exc:
            raise FormatError(f"{name}: {exc}", field="dims") from exc
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last entry", field="count")
    return params


def check_params_match(params, spec: ArchSpec) -> None:
    """Raise ShapeError naming the first layer that disagrees with ``spec``."""
    expected = param_shapes(spec)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeError(f"layer {name}: missing from checkpoint")
        if tuple(params[name].weights.shape) != tuple(shape):
            raise ShapeError(f"layer {name}: checkpoint shape {params[name].weights.shape} != expected {shape}")
    extra = [n for n in params if n not in expected]
    if extra:
        raise ShapeError(f"layer {extra[0]}: not part of this architecture")


def load_checkpoint(path, spec: ArchSpec | None = None) -> "OrderedDict[str, ConvKernel]":
    params = parse_checkpoint(Path(path).read_bytes())
    if spec is not None:
        check_params_match(params, spec)
    return params
