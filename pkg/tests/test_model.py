from pathlib import Path

import numpy as np
import pytest

from gradcheck import network_gradient_errors, tiny_network_case
from shape_oracle import expected_trace
from estan.errors import ShapeError
from estan.layers import ConvKernel, conv2d_forward, maxpool2x2_forward, relu
from estan.model import (
    ArchSpec,
    basic_encoder_forward,
    decoder_forward,
    estan_block_forward,
    estan_forward,
    init_params,
    param_count,
    param_shapes,
    receptive_field,
    receptive_fields,
    shape_trace,
)
from estan.tensor import SeededRng

GOLDEN = Path(__file__).parent / "golden"


def closed_form_param_count():
    """Hand tally from the kernel tables (out*in*kh*kw + out per conv)."""
    K = (32, 64, 128, 256, 512)
    Y = (256, 128, 64, 32)
    A3 = (15, 13, 11, 9, 7)
    A5 = (1, 5, 1, 1, 5)
    M2 = (1, 1, 1, 5)
    conv = lambda o, i, kh, kw: o * i * kh * kw + o  # noqa: E731
    total = 0
    ins = (1,) + K[:4]
    for k, i in zip(K, ins):
        total += conv(k, i, 3, 3) + conv(k, k, 3, 3)
    for c, i, a3, a5 in zip(K, ins, A3, A5):
        total += conv(c, i, 3, 3) + conv(c, c, 3, 3) + conv(c, c, a5, a5)
        total += conv(c, i, a3, 1) + conv(c, c, 1, a3) + conv(c, c, 3, 3)
    prev = 1024
    for y, lvl, m2 in zip(Y, (3, 2, 1, 0), M2):
        total += conv(y, prev + 2 * K[lvl], 3, 3) + conv(y, y + K[lvl], m2, m2) + conv(y, y, 3, 3)
        prev = y
    return total + conv(1, 32, 1, 1)


def test_param_count_examples():
    assert param_count({}) == 0
    k = ConvKernel(np.zeros((8, 3, 3, 3), np.float32), np.zeros(8, np.float32))
    assert param_count({"k": k}) == 224


def test_default_param_count_near_thirty_million():
    shapes = param_shapes(ArchSpec())
    n = sum(o * i * kh * kw + o for o, i, kh, kw in shapes.values())
    assert n == closed_form_param_count()
    assert 24e6 <= n <= 36e6


def test_init_params_matches_shapes_and_count():
    spec = ArchSpec.scaled(8, 64)
    params = init_params(spec, seed=3)
    assert list(params) == list(param_shapes(spec))
    for name, shape in param_shapes(spec).items():
        assert params[name].weights.shape == shape
    assert param_count(params) == sum(o * i * kh * kw + o for o, i, kh, kw in param_shapes(spec).values())


def test_archspec_invariants():
    with pytest.raises(ShapeError):
        ArchSpec(input_hw=250)
    with pytest.raises(ShapeError):
        ArchSpec(A3=(15, 13, 13, 9, 7))
    with pytest.raises(ShapeError):
        ArchSpec(C=(32, 64, 128, 256, 256))
    assert ArchSpec.tiny().K == (2, 4, 8, 16, 32)
    assert ArchSpec.tiny().Y == (16, 8, 4, 2)


# ---------------------------------------------------------------- shapes


@pytest.mark.parametrize("hw", [64, 256])
def test_shape_trace_matches_golden(hw):
    trace = shape_trace(ArchSpec(input_hw=hw))
    assert trace.to_csv() == (GOLDEN / f"shape_trace_{hw}.csv").read_text()
    assert list(trace) == expected_trace(hw)


def test_shape_trace_key_entries():
    t256 = shape_trace(ArchSpec())
    assert t256["estan.e5"] == (1, 512, 16, 16)
    assert t256["basic.b5.conv2"] == (1, 512, 16, 16)
    assert t256["basic.b1.conv2"] == (1, 32, 256, 256)
    assert t256["dec.u1.concat1"] == (1, 1536, 32, 32)
    assert t256["head.conv"] == (1, 1, 256, 256)
    assert shape_trace(ArchSpec(input_hw=64))["estan.e5"] == (1, 512, 4, 4)
    n_params = len(param_shapes(ArchSpec()))
    structural = [n for n in t256.names() if n.endswith((".pool", ".up", ".concat1", ".concat2", "concat"))]
    adds = [f"estan.e{j}" for j in range(1, 6)]
    assert len(t256) == n_params + len(structural) + len(adds)


@pytest.mark.parametrize("hw", [16, 32, 48, 80])
def test_shape_closure(hw):
    assert shape_trace(ArchSpec(input_hw=hw))["head.conv"] == (1, 1, hw, hw)


def test_numeric_forward_trace_matches_golden_64():
    spec = ArchSpec(input_hw=64)
    params = init_params(spec, seed=0)
    trace = []
    estan_forward(np.zeros((1, 1, 64, 64), np.float32), params, spec, trace=trace)
    assert trace == expected_trace(64)


def test_three_skip_sources_per_decoder_block():
    spec = ArchSpec()
    shapes = param_shapes(spec)
    trace = shape_trace(spec)
    for j, lvl in zip(range(1, 5), (4, 3, 2, 1)):
        up_c = trace[f"dec.u{j}.up"][1]
        k = spec.K[lvl - 1]
        # conv1 sees upsampled + basic tap1 + ESTAN tap; conv2 sees its own output + basic tap2
        assert shapes[f"dec.u{j}.conv1"][1] - up_c == 2 * k
        assert shapes[f"dec.u{j}.conv2"][1] - spec.Y[j - 1] == k
    # with fewer than three sources the decoder refuses to run
    small = ArchSpec.tiny(16)
    params = init_params(small)
    z = lambda c, s: np.zeros((1, c, s, s), np.float32)  # noqa: E731
    skips = {lvl: (z(small.K[lvl - 1], 16 >> (lvl - 1)),) * 2 for lvl in range(1, 5)}
    with pytest.raises(ShapeError):
        decoder_forward(z(64, 1), skips, params, small)


# ---------------------------------------------------------------- numeric forwards


def test_basic_encoder_shapes():
    spec = ArchSpec.scaled(16, 256)
    params = init_params(spec)
    x = SeededRng(0).uniform((1, 1, 256, 256)).astype(np.float32)
    blocks, tap1, tap2 = basic_encoder_forward(x, params, spec)
    assert blocks[5].shape == (1, spec.K[4], 16, 16)
    assert tap2[1].shape == (1, spec.K[0], 256, 256)
    assert tap1[4].shape == (1, spec.K[3], 32, 32)
    with pytest.raises(ShapeError):
        basic_encoder_forward(np.zeros((1, 1, 250, 250), np.float32), params, spec)
    with pytest.raises(ShapeError):
        basic_encoder_forward(np.zeros((1, 2, 256, 256), np.float32), params, spec)


def test_estan_block_shapes_full_width():
    spec = ArchSpec()
    rng = SeededRng(1)
    names = [n for n in param_shapes(spec) if n.startswith(("estan.e5.", "estan.e1."))]
    shapes = param_shapes(spec)
    params = {n: ConvKernel.init(*shapes[n], rng=rng) for n in names}
    out = estan_block_forward(np.zeros((2, 256, 16, 16), np.float32), params, spec, 5)
    assert out.shape == (2, 512, 16, 16)
    out = estan_block_forward(rng.uniform((1, 1, 256, 256)).astype(np.float32), params, spec, 1)
    assert out.shape == (1, 32, 128, 128)
    with pytest.raises(ShapeError):
        estan_block_forward(np.zeros((1, 3, 16, 16), np.float32), params, spec, 5)


def test_estan_block_with_silent_row_column_branch():
    spec = ArchSpec.scaled(8, 32)
    params = init_params(spec, seed=2)
    for name in ("rowcol.row", "rowcol.col", "sq4"):
        k = params[f"estan.e2.{name}"]
        k.weights[:] = 0
        k.bias[:] = 0
    x = SeededRng(3).uniform((1, spec.C[0], 16, 16)).astype(np.float32)
    h = x
    for name in ("sq1", "sq2", "sq3"):
        h = relu(conv2d_forward(h, params[f"estan.e2.{name}"]))
    expected, _ = maxpool2x2_forward(h)
    out, tap = estan_block_forward(x, params, spec, 2, return_tap=True)
    assert np.array_equal(out, expected)
    assert np.array_equal(tap, h)


def test_decoder_with_zero_skips_is_well_formed():
    spec = ArchSpec.scaled(8, 64)
    params = init_params(spec)
    z = lambda c, s: np.zeros((1, c, s, s), np.float32)  # noqa: E731
    skips = {lvl: (z(spec.K[lvl - 1], 64 >> (lvl - 1)),) * 3 for lvl in range(1, 5)}
    bottleneck = SeededRng(0).uniform((1, 2 * spec.K[4], 4, 4)).astype(np.float32)
    logits = decoder_forward(bottleneck, skips, params, spec)
    assert logits.shape == (1, 1, 64, 64)


def test_estan_forward_range_batch_independence_determinism():
    spec = ArchSpec.scaled(4, 32)
    params = init_params(spec, seed=5)
    x = SeededRng(6).uniform((2, 1, 32, 32)).astype(np.float32)
    y = estan_forward(x, params, spec)
    assert y.shape == (2, 1, 32, 32)
    assert y.min() > 0 and y.max() < 1
    single = np.concatenate([estan_forward(x[i : i + 1], params, spec) for i in range(2)])
    assert np.allclose(y, single, rtol=0, atol=1e-6)
    assert estan_forward(x, params, spec).tobytes() == y.tobytes()


# ---------------------------------------------------------------- receptive fields


def fold_chain(layers):
    """Per-axis r <- r + (k - 1) j; j <- j * s over a plain chain of (kh, kw, stride)."""
    rh = rw = 1
    jh = jw = 1
    for kh, kw, s in layers:
        rh += (kh - 1) * jh
        rw += (kw - 1) * jw
        jh *= s
        jw *= s
    return rh, rw


def test_receptive_field_examples():
    spec = ArchSpec()
    assert receptive_field(spec, "basic.b1.conv1") == (3, 3) == fold_chain([(3, 3, 1)])
    assert receptive_field(spec, "basic.b1.conv2") == (5, 5) == fold_chain([(3, 3, 1)] * 2)
    chain = [(3, 3, 1), (3, 3, 1), (2, 2, 2), (3, 3, 1), (3, 3, 1)]
    assert receptive_field(spec, "basic.b2.conv2") == (14, 14) == fold_chain(chain)


def test_receptive_field_row_kernel_asymmetry():
    spec = ArchSpec()
    rh, rw = receptive_field(spec, "estan.e1.rowcol.row")
    assert (rh, rw) == (15, 1) and rh - rw == 14
    assert receptive_field(spec, "estan.e1.rowcol.col") == (15, 15)
    # E1 block output: max over the square branch (3,3,1 -> 5x5... ) and the row/col branch
    sq = fold_chain([(3, 3, 1), (3, 3, 1), (1, 1, 1)])
    rc = fold_chain([(15, 1, 1), (1, 15, 1), (3, 3, 1)])
    assert receptive_field(spec, "estan.e1") == (max(sq[0], rc[0]), max(sq[1], rc[1]))


def test_receptive_field_unknown_layer():
    with pytest.raises(KeyError):
        receptive_field(ArchSpec(), "no.such.layer")
    fields = receptive_fields(ArchSpec())
    assert set(fields) == {name for name, _ in shape_trace(ArchSpec())}


# ---------------------------------------------------------------- end-to-end gradient


def test_full_network_parameter_gradients(f64):
    worst = network_gradient_errors(*tiny_network_case())
    assert max(worst.values()) <= 1e-3, worst
