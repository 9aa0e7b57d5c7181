"""The ESTAN network: two parallel encoders, a four-block decoder with
three skip sources per block, and a 1x1 + sigmoid head.

The wiring is written once (``_network``) against a small tape interface.
Three tapes interpret it:

* ``NumericTape`` runs the real layers and can backpropagate,
* ``ShapeTape`` propagates only shapes (the analytic shape trace),
* ``FieldTape`` propagates per-axis receptive fields and jumps.

Layer naming::

    basic.b{j}.conv1 / conv2 / pool          j = 1..5 (no pool in block 5)
    estan.e{j}.sq1 / sq2 / sq3               square branch (A1, A2, A5)
    estan.e{j}.rowcol.row / rowcol.col       A3 x 1 then 1 x A3
    estan.e{j}.sq4                           A4 after the row/column pair
    estan.e{j}                               branch sum (block output pre-pool)
    estan.e{j}.pool
    bottleneck.concat
    dec.u{j}.up / concat1 / conv1 / concat2 / conv2 / conv3
    head.conv
"""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import ShapeError
from .layers import ConvKernel
from .tensor import SeededRng, check_finite, elementwise_add


@dataclass(frozen=True)
class ArchSpec:
    K: tuple = (32, 64, 128, 256, 512)  # basic encoder kernels per block
    C: tuple = (32, 64, 128, 256, 512)  # ESTAN encoder kernels per block
    Y: tuple = (256, 128, 64, 32)  # decoder kernels per block
    S1: int = 3
    S2: int = 3
    A1: int = 3
    A2: int = 3
    A3: tuple = (15, 13, 11, 9, 7)
    A4: int = 3
    A5: tuple = (1, 5, 1, 1, 5)
    M1: int = 3
    M2: tuple = (1, 1, 1, 5)
    M3: int = 3
    input_hw: int = 256
    in_channels: int = 1

    def __post_init__(self):
        if len(self.K) != 5 or len(self.C) != 5 or len(self.A3) != 5 or len(self.A5) != 5:
            raise ShapeError("encoder tables K, C, A3, A5 need exactly 5 entries")
        if len(self.Y) != 4 or len(self.M2) != 4:
            raise ShapeError("decoder tables Y, M2 need exactly 4 entries")
        if tuple(self.K) != tuple(self.C):
            raise ShapeError(f"K {self.K} must equal C {self.C} for the decoder skip arithmetic")
        if any(a <= b for a, b in zip(self.A3, self.A3[1:])):
            raise ShapeError(f"A3 {self.A3} must strictly decrease with block index")
        if self.input_hw < 16 or self.input_hw % 16:
            raise ShapeError(f"input size {self.input_hw} is not a positive multiple of 16")

    @classmethod
    def tiny(cls, input_hw: int = 16) -> "ArchSpec":
        """Channel tables divided by 16: K = C = (2, 4, 8, 16, 32), Y = (16, 8, 4, 2)."""
        return cls.scaled(16, input_hw)

    @classmethod
    def scaled(cls, divisor: int, input_hw: int = 256) -> "ArchSpec":
        base = cls()
        k = tuple(max(1, c // divisor) for c in base.K)
        y = tuple(max(1, c // divisor) for c in base.Y)
        return cls(K=k, C=k, Y=y, input_hw=input_hw)

    def with_input(self, input_hw: int) -> "ArchSpec":
        return replace(self, input_hw=input_hw)


def param_shapes(spec: ArchSpec) -> "OrderedDict[str, tuple]":
    """Name -> (out, in, kh, kw) for every convolution, in canonical order."""
    shapes: OrderedDict[str, tuple] = OrderedDict()
    prev = spec.in_channels
    for j in range(1, 6):
        k = spec.K[j - 1]
        shapes[f"basic.b{j}.conv1"] = (k, prev, spec.S1, spec.S1)
        shapes[f"basic.b{j}.conv2"] = (k, k, spec.S2, spec.S2)
        prev = k
    prev = spec.in_channels
    for j in range(1, 6):
        c, a3, a5 = spec.C[j - 1], spec.A3[j - 1], spec.A5[j - 1]
        shapes[f"estan.e{j}.sq1"] = (c, prev, spec.A1, spec.A1)
        shapes[f"estan.e{j}.sq2"] = (c, c, spec.A2, spec.A2)
        shapes[f"estan.e{j}.sq3"] = (c, c, a5, a5)
        shapes[f"estan.e{j}.rowcol.row"] = (c, prev, a3, 1)
        shapes[f"estan.e{j}.rowcol.col"] = (c, c, 1, a3)
        shapes[f"estan.e{j}.sq4"] = (c, c, spec.A4, spec.A4)
        prev = c
    prev = spec.K[4] + spec.C[4]
    for j in range(1, 5):
        lvl = 5 - j
        y, kl, cl = spec.Y[j - 1], spec.K[lvl - 1], spec.C[lvl - 1]
        m2 = spec.M2[j - 1]
        shapes[f"dec.u{j}.conv1"] = (y, prev + kl + cl, spec.M1, spec.M1)
        shapes[f"dec.u{j}.conv2"] = (y, y + kl, m2, m2)
        shapes[f"dec.u{j}.conv3"] = (y, y, spec.M3, spec.M3)
        prev = y
    shapes["head.conv"] = (1, prev, 1, 1)
    return shapes


def init_params(spec: ArchSpec, seed: int = 0, dtype=None) -> "OrderedDict[str, ConvKernel]":
    """He-normal weights and zero biases for every layer of ``spec``."""
    rng = SeededRng(seed)
    return OrderedDict(
        (name, ConvKernel.init(*shape, rng=rng, dtype=dtype)) for name, shape in param_shapes(spec).items()
    )


def param_count(params) -> int:
    return sum(k.size for k in params.values())


def flatten_params(params) -> dict:
    """Named tensor view (``<layer>.weight`` / ``<layer>.bias``) sharing storage with ``params``."""
    flat = {}
    for name, k in params.items():
        flat[f"{name}.weight"] = k.weights
        flat[f"{name}.bias"] = k.bias
    return flat


# ----------------------------------------------------------------------------
# tapes


class Var:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=True):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    def accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g


class NumericTape:
    """Evaluates the network on arrays, optionally recording a backward pass."""

    def __init__(self, params, record=False):
        self.params = params
        self.record = record
        self.ops: list = []
        self.trace: list = []
        self.param_grads: dict = {}

    def _out(self, name, value, backward=None):
        if name is not None:
            self.trace.append((name, tuple(value.shape)))
        out = Var(value)
        if self.record and backward is not None:
            self.ops.append((out, backward))
        return out

    def conv(self, name, x):
        if name not in self.params:
            raise ShapeError(f"missing parameters for layer {name}")
        k = self.params[name]
        y = L.conv2d_forward(x.value, k)

        def backward(out):
            gx, gw, gb = L.conv2d_backward(x.value, k, out.grad, input_grad=x.requires_grad)
            self._add_param_grad(name, gw, gb)
            x.accumulate(gx)

        return self._out(name, y, backward)

    def _add_param_grad(self, name, gw, gb):
        if name in self.param_grads:
            pw, pb = self.param_grads[name]
            gw, gb = pw + gw, pb + gb
        self.param_grads[name] = (gw, gb)

    def relu(self, x):
        return self._out(None, L.relu(x.value), lambda out: x.accumulate(L.relu_backward(x.value, out.grad)))

    def pool(self, name, x):
        y, idx = L.maxpool2x2_forward(x.value)
        return self._out(name, y, lambda out: x.accumulate(L.maxpool2x2_backward(idx, out.grad)))

    def up(self, name, x):
        y = L.upsample_nearest2x(x.value)
        return self._out(name, y, lambda out: x.accumulate(L.upsample_nearest2x_backward(out.grad)))

    def concat(self, name, a, b):
        y = L.concat_channels(a.value, b.value)
        ca = a.value.shape[1]

        def backward(out):
            ga, gb = L.concat_backward(out.grad, ca)
            a.accumulate(ga)
            b.accumulate(gb)

        return self._out(name, y, backward)

    def add(self, name, a, b):
        y = elementwise_add(a.value, b.value)

        def backward(out):
            a.accumulate(out.grad)
            b.accumulate(out.grad)

        return self._out(name, y, backward)

    def sigmoid(self, x):
        y = L.sigmoid(x.value)
        return self._out(None, y, lambda out: x.accumulate(L.sigmoid_backward(y, out.grad)))

    def backward(self, out: Var, grad: np.ndarray):
        out.grad = grad
        for node, fn in reversed(self.ops):
            if node.grad is not None:
                fn(node)
                node.grad = None
        return self.param_grads


class ShapeTape:
    """Propagates (n, c, h, w) tuples; the analytic shape trace."""

    def __init__(self, spec: ArchSpec):
        self.shapes = param_shapes(spec)
        self.trace: list = []

    def _out(self, name, shape):
        if name is not None:
            self.trace.append((name, shape))
        return shape

    def conv(self, name, x):
        o, i, kh, kw = self.shapes[name]
        if x[1] != i:
            raise ShapeError(f"{name}: input has {x[1]} channels, kernel expects {i}")
        return self._out(name, (x[0], o, x[2], x[3]))

    def relu(self, x):
        return x

    def sigmoid(self, x):
        return x

    def pool(self, name, x):
        if x[2] % 2 or x[3] % 2:
            raise ShapeError(f"{name}: cannot pool odd spatial size {x[2:]}")
        return self._out(name, (x[0], x[1], x[2] // 2, x[3] // 2))

    def up(self, name, x):
        return self._out(name, (x[0], x[1], 2 * x[2], 2 * x[3]))

    def concat(self, name, a, b):
        if a[0] != b[0] or a[2:] != b[2:]:
            raise ShapeError(f"{name}: cannot concatenate {a} and {b}")
        return self._out(name, (a[0], a[1] + b[1], a[2], a[3]))

    def add(self, name, a, b):
        if a != b:
            raise ShapeError(f"{name}: cannot add {a} and {b}")
        return self._out(name, a)


class FieldTape:
    """Propagates (rf_h, rf_w, jump_h, jump_w) along every path.

    Merging nodes (concat, add) take the per-axis maximum; all branches are
    centred on the same pixel because padding is symmetric.
    """

    def __init__(self, spec: ArchSpec):
        self.shapes = param_shapes(spec)
        self.fields: OrderedDict[str, tuple] = OrderedDict()

    def _out(self, name, rf):
        if name is not None:
            self.fields[name] = rf
        return rf

    def conv(self, name, x):
        _, _, kh, kw = self.shapes[name]
        rh, rw, jh, jw = x
        return self._out(name, (rh + (kh - 1) * jh, rw + (kw - 1) * jw, jh, jw))

    def relu(self, x):
        return x

    def sigmoid(self, x):
        return x

    def pool(self, name, x):
        rh, rw, jh, jw = x
        return self._out(name, (rh + jh, rw + jw, 2 * jh, 2 * jw))

    def up(self, name, x):
        rh, rw, jh, jw = x
        return self._out(name, (rh, rw, jh / 2, jw / 2))

    def concat(self, name, a, b):
        return self._out(name, (max(a[0], b[0]), max(a[1], b[1]), a[2], a[3]))

    add = concat


# ----------------------------------------------------------------------------
# wiring


def _basic_block(tape, x, spec: ArchSpec, j: int):
    t1 = tape.relu(tape.conv(f"basic.b{j}.conv1", x))
    t2 = tape.relu(tape.conv(f"basic.b{j}.conv2", t1))
    out = tape.pool(f"basic.b{j}.pool", t2) if j < 5 else t2
    return out, t1, t2


def _estan_block(tape, x, spec: ArchSpec, j: int):
    p = f"estan.e{j}"
    b1 = tape.relu(tape.conv(f"{p}.sq1", x))
    b1 = tape.relu(tape.conv(f"{p}.sq2", b1))
    b1 = tape.relu(tape.conv(f"{p}.sq3", b1))
    b2 = tape.relu(tape.conv(f"{p}.rowcol.row", x))
    b2 = tape.relu(tape.conv(f"{p}.rowcol.col", b2))
    b2 = tape.relu(tape.conv(f"{p}.sq4", b2))
    fused = tape.add(p, b1, b2)
    out = tape.pool(f"{p}.pool", fused) if j < 5 else fused
    return out, b1


def _decoder_block(tape, u, skips, spec: ArchSpec, j: int):
    tap1, estan_tap, tap2 = skips
    p = f"dec.u{j}"
    u = tape.up(f"{p}.up", u)
    u = tape.concat(f"{p}.concat1", tape.concat(None, u, tap1), estan_tap)
    u = tape.relu(tape.conv(f"{p}.conv1", u))
    u = tape.concat(f"{p}.concat2", u, tap2)
    u = tape.relu(tape.conv(f"{p}.conv2", u))
    return tape.relu(tape.conv(f"{p}.conv3", u))


def _encoders(tape, x, spec: ArchSpec):
    b, e = x, x
    tap1, tap2, etap = {}, {}, {}
    for j in range(1, 6):
        b, tap1[j], tap2[j] = _basic_block(tape, b, spec, j)
    for j in range(1, 6):
        e, etap[j] = _estan_block(tape, e, spec, j)
    return b, e, tap1, etap, tap2


def _decoder(tape, bottleneck, skips, spec: ArchSpec):
    """``skips[level] = (tap1, estan_tap, tap2)`` for levels 1..4."""
    u = bottleneck
    for j in range(1, 5):
        lvl = 5 - j
        if lvl not in skips or len(skips[lvl]) != 3:
            raise ShapeError(f"decoder block {j} needs three skip sources from encoder level {lvl}")
        u = _decoder_block(tape, u, skips[lvl], spec, j)
    return tape.conv("head.conv", u)


def _network(tape, x, spec: ArchSpec):
    b5, e5, tap1, etap, tap2 = _encoders(tape, x, spec)
    bottleneck = tape.concat("bottleneck.concat", b5, e5)
    skips = {lvl: (tap1[lvl], etap[lvl], tap2[lvl]) for lvl in range(1, 5)}
    logits = _decoder(tape, bottleneck, skips, spec)
    return tape.sigmoid(logits)


# ----------------------------------------------------------------------------
# public forward API


def _check_input(x: np.ndarray, spec: ArchSpec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"input shape {x.shape} needs {spec.in_channels} channel(s)")
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ShapeError(f"input spatial size {x.shape[2:]} is not a multiple of 16")


def basic_encoder_forward(x, params, spec: ArchSpec):
    """Returns ``(B, tap1, tap2)``, each a dict keyed by block index 1..5."""
    _check_input(x, spec)
    tape = NumericTape(params)
    v = Var(x)
    blocks, tap1, tap2 = {}, {}, {}
    for j in range(1, 6):
        v, t1, t2 = _basic_block(tape, v, spec, j)
        blocks[j], tap1[j], tap2[j] = v.value, t1.value, t2.value
    return blocks, tap1, tap2


def estan_block_forward(x, params, spec: ArchSpec, j: int, return_tap: bool = False):
    expected = spec.in_channels if j == 1 else spec.C[j - 2]
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"ESTAN block {j} expects {expected} input channels, got shape {x.shape}")
    tape = NumericTape(params)
    out, tap = _estan_block(tape, Var(x), spec, j)
    return (out.value, tap.value) if return_tap else out.value


def decoder_forward(bottleneck, skips, params, spec: ArchSpec):
    """Logits from the fused bottleneck; ``skips[level] = (tap1, estan_tap, tap2)``."""
    tape = NumericTape(params)
    wrapped = {lvl: tuple(Var(s) for s in srcs) for lvl, srcs in skips.items()}
    return _decoder(tape, Var(bottleneck), wrapped, spec).value


def estan_forward(x, params, spec: ArchSpec, trace: list | None = None):
    """Probability map of shape (n, 1, h, w)."""
    _check_input(x, spec)
    tape = NumericTape(params)
    out = _network(tape, Var(x, requires_grad=False), spec)
    if trace is not None:
        trace.extend(tape.trace)
    return check_finite(out.value, "estan_forward")


def forward_backward(x, params, spec: ArchSpec, loss_grad_fn):
    """One forward and backward pass.

    ``loss_grad_fn(prob) -> (loss, dloss/dprob)``. Returns
    ``(loss, prob, grads)`` where ``grads`` maps layer name to
    ``(grad_weights, grad_bias)``.
    """
    _check_input(x, spec)
    tape = NumericTape(params, record=True)
    out = _network(tape, Var(x, requires_grad=False), spec)
    loss, g = loss_grad_fn(out.value)
    grads = tape.backward(out, g)
    return loss, out.value, grads


# ----------------------------------------------------------------------------
# introspection


@dataclass
class ShapeTrace:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, name: str) -> tuple:
        for entry, dims in self.entries:
            if entry == name:
                return dims
        raise KeyError(name)

    def names(self) -> list:
        return [name for name, _ in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_name", "n", "c", "h", "w"])
        for name, dims in self.entries:
            w.writerow([name, *dims])
        return buf.getvalue()


def shape_trace(spec: ArchSpec, batch: int = 1) -> ShapeTrace:
    tape = ShapeTape(spec)
    _network(tape, (batch, spec.in_channels, spec.input_hw, spec.input_hw), spec)
    return ShapeTrace(tape.trace)


def receptive_fields(spec: ArchSpec) -> "OrderedDict[str, tuple]":
    """Layer name -> (rf_h, rf_w) for every traced layer."""
    tape = FieldTape(spec)
    _network(tape, (1, 1, 1, 1), spec)
    return OrderedDict((name, (int(v[0]), int(v[1]))) for name, v in tape.fields.items())


def receptive_field(spec: ArchSpec, layer_name: str) -> tuple:
    fields = receptive_fields(spec)
    if layer_name not in fields:
        raise KeyError(f"unknown layer {layer_name!r}")
    return fields[layer_name]


def receptive_fields_csv(spec: ArchSpec) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_name", "rf_h", "rf_w"])
    for name, (rh, rw) in receptive_fields(spec).items():
        w.writerow([name, rh, rw])
    return buf.getvalue()
