import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbnn.model import (
    BroadcastModule,
    CheckpointError,
    bn_channel_widths,
    block_input_channels,
    build,
    count_params,
    dense_inputs,
    infer_shapes,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    table_counts,
)
from bbnn.tensor import ShapeError
from bbnn.train import softmax_cross_entropy

from oracles import directional_derivative

TABLE1 = [320, 3168, 35936, 15456, 40032, 27744, 44128, 13344, 330]


# --- parameter counts ---------------------------------------------------------

def test_table_counts_ten_classes():
    model = build()
    assert table_counts(model) == TABLE1
    assert count_params(model)[1] == 180458


@pytest.mark.parametrize("n_classes, head", [(8, 264), (13, 429)])
def test_head_scales_with_classes(n_classes, head):
    counts = table_counts(build(n_classes))
    assert counts[:-1] == TABLE1[:-1]
    assert counts[-1] == head == 33 * n_classes


def test_full_mode_adds_bn_affine():
    model = build()
    _, table = count_params(model, "table")
    _, full = count_params(model, "full")
    assert full == table + 2 * sum(bn_channel_widths(model)) == 185516


def test_counts_match_live_parameters():
    model = build()
    _, full = count_params(model, "full")
    assert full == sum(p.size for _, p in model.named_parameters())


def test_count_params_rejects_mode():
    with pytest.raises(ValueError):
        count_params(build(), "weights")


def test_table_row_labels():
    rows, _ = count_params(build())
    assert [r.layer for r in rows][:4] == ["Convolution", "Max Pool", "Inception (a), top", "Inception (a), bottom"]
    assert [r.output for r in rows if r.params is not None][-1] == "1x1x10"


# --- shapes -------------------------------------------------------------------

@pytest.mark.parametrize("L", [1, 2, 3, 4, 5])
def test_channel_growth_law(L):
    bm = BroadcastModule(L, np.random.default_rng(0))
    assert [b.c_in for b in bm.blocks] == [32 + 128 * (l - 1) for l in range(1, L + 1)]
    assert bm.out_channels == 32 + 128 * L


@given(st.integers(1, 40))
def test_block_input_channels_formula(l):
    assert block_input_channels(l) == 32 + 128 * (l - 1)


@pytest.mark.parametrize("L", [1, 2, 3, 4, 5])
def test_forward_channel_growth(L):
    model = build(3, (16, 8), L=L)
    probes = {}
    model.forward(np.zeros((1, 16, 8, 1), np.float32), probes=probes)
    for l in range(1, L + 1):
        assert probes[f"bm.block{l}.input"][3] == 32 + 128 * (l - 1)
    assert probes["bm"] == (1, 4, 8, 32 + 128 * L)


def test_infer_shapes_full_size():
    s = infer_shapes(build())
    assert s["sl.pool"] == (161, 128, 32)
    assert [s[f"bm.block{l}"] for l in (1, 2, 3)] == [(161, 128, 160), (161, 128, 288), (161, 128, 416)]
    assert s["tl.pool"] == (80, 64, 32)


@given(h=st.integers(8, 40), w=st.integers(2, 12))
@settings(max_examples=15, deadline=None)
def test_broadcast_preserves_spatial(h, w):
    model = build(2, (h, w), L=2)
    probes = {}
    model.forward(np.zeros((1, h, w, 1), np.float32), probes=probes)
    assert probes["bm"][1:3] == probes["sl"][1:3]
    assert probes["dl.softmax"] == (1, 2)


def test_too_small_input_rejected():
    with pytest.raises(ShapeError):
        build(2, (3, 8))
    with pytest.raises(ShapeError):
        build(2, (4, 1))


def test_wrong_input_shape_rejected():
    model = build(2, (16, 8))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 16, 9, 1), np.float32))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 16, 8, 2), np.float32))


def test_bad_construction_args():
    with pytest.raises(ValueError):
        build(1)
    with pytest.raises(ValueError):
        build(2, L=0)
    with pytest.raises(ValueError):
        build(2, tl_pool="median")


# --- dense connectivity -------------------------------------------------------

def test_dense_inputs_are_upstream_features():
    model = build(2, (16, 8), L=3)
    model.forward(np.random.default_rng(0).random((1, 16, 8, 1), dtype=np.float32))
    bm = model.bm
    assert len(dense_inputs(bm, 1)) == 1
    ins = dense_inputs(bm, 3)
    assert [f.shape[3] for f in ins] == [32, 128, 128]
    assert ins[1] is bm.features[1]
    with pytest.raises(IndexError):
        dense_inputs(bm, 4)
    with pytest.raises(IndexError):
        dense_inputs(bm, 0)


# --- behaviour ----------------------------------------------------------------

def test_zero_head_is_uniform():
    model = build(10, (16, 8), zero_head=True)
    p = model.forward(np.random.default_rng(1).random((3, 16, 8, 1), dtype=np.float32))
    np.testing.assert_allclose(p, 0.1, atol=1e-7)


def test_inference_is_batch_independent():
    model = build(4, (16, 8))
    x = np.random.default_rng(2).random((3, 16, 8, 1), dtype=np.float32)
    batch = model.forward(x)
    for i in range(3):
        np.testing.assert_allclose(model.forward(x[i:i + 1])[0], batch[i], rtol=1e-5, atol=1e-7)


def test_build_is_deterministic():
    a, b = build(3, (16, 8), seed=5).state(), build(3, (16, 8), seed=5).state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = build(3, (16, 8), seed=6).state()
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


@pytest.mark.parametrize("tl_pool", ["avg", "max"])
def test_gradient_reaches_every_parameter(tl_pool):
    model = build(3, (16, 8), seed=1, tl_pool=tl_pool)
    rng = np.random.default_rng(3)
    # non-trivial BN shifts so every ReLU passes some signal
    for name, p in model.named_parameters():
        if name.endswith("bn.beta"):
            p[...] = rng.uniform(0.1, 0.5, p.shape)
    x = rng.random((4, 16, 8, 1), dtype=np.float32)
    _, g = softmax_cross_entropy(model.logits(x, training=True), np.array([0, 1, 2, 0]))
    model.backward(g)
    for name, grad in model.named_gradients():
        if name.endswith("conv.bias") and not name.startswith("tl"):
            continue  # every conv except the last one feeds a BN, which cancels its bias
        assert np.abs(grad).max() > 0, name


# --- end-to-end gradient check ------------------------------------------------

def _e2e_errors(seed, n_dirs=6):
    rng = np.random.default_rng(seed)
    model = build(2, (64, 32), seed=seed, dtype=np.float64)
    for name, p in model.named_parameters():
        if name.endswith("bn.beta"):
            p[...] = rng.normal(0, 0.3, p.shape)
    x = rng.standard_normal((2, 64, 32, 1))
    y = np.array([0, 1])
    state0 = {k: v.copy() for k, v in model.state().items()}
    params = dict(model.named_parameters())
    _, g = softmax_cross_entropy(model.logits(x, training=True), y)
    grad_x = model.backward(g)
    grads = {k: v.copy() for k, v in model.named_gradients()}

    def loss(direction, dx, t):
        model.load_state(state0)
        for k, d in direction.items():
            params[k] += t * d
        return softmax_cross_entropy(model.logits(x + t * dx, training=True), y)[0]

    groups = [("all", list(params))] + [(c, [k for k in params if k.startswith(c + ".")])
                                        for c in ("sl", "bm", "tl", "dl")]
    errors = {}
    for gname, keys in groups:
        for i in range(n_dirs if gname == "all" else 1):
            d = {k: rng.standard_normal(params[k].shape) for k in keys}
            dx = rng.standard_normal(x.shape) if gname == "all" else np.zeros_like(x)
            norm = np.sqrt(sum((v ** 2).sum() for v in d.values()) + (dx ** 2).sum())
            d = {k: v / norm for k, v in d.items()}
            dx = dx / norm
            analytic = sum((grads[k] * d[k]).sum() for k in keys) + (grad_x * dx).sum()
            numeric = directional_derivative(lambda t: loss(d, dx, t))
            errors[f"{gname}{i}"] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
    model.load_state(state0)
    return errors


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_gradient(seed):
    errors = _e2e_errors(seed)
    assert max(errors.values()) < 1e-3, errors


# --- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    model = build(5, (16, 8), L=2, seed=3)
    x = rng.random((2, 16, 8, 1), dtype=np.float32)
    model.forward(x, training=True)  # move BN buffers off their initial values
    save_checkpoint(model, tmp_path / "m.bbnn")
    loaded = load_checkpoint(tmp_path / "m.bbnn")
    assert loaded.n_classes == 5 and loaded.bm.L == 2
    a, b = model.state(), loaded.state()
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert model.forward(x).tobytes() == loaded.forward(x).tobytes()


def test_checkpoint_header(tmp_path):
    save_checkpoint(build(4, (16, 8), L=2), tmp_path / "m.bbnn")
    raw = (tmp_path / "m.bbnn").read_bytes()
    assert raw[:4] == b"BBNN"
    n_classes, L, tensors = read_checkpoint(tmp_path / "m.bbnn")
    assert (n_classes, L) == (4, 2)
    assert tensors["dl.weight"].shape == (1, 1, 32, 4)
    assert "sl.bn.running_mean" in tensors


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "m.bbnn"
    p.write_bytes(b"XXXX" + bytes(10))
    with pytest.raises(CheckpointError):
        read_checkpoint(p)
    save_checkpoint(build(2, (16, 8), L=1), p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        read_checkpoint(p)
