"""BBNN graph: shallow layers, broadcast module, transition and decision layers."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .layers import AvgPool2D, BnConvUnit, DenseHead, MaxPool2D, Module, softmax
from .tensor import DTYPE, ShapeError, concat_channels, global_avg_pool, global_avg_pool_backward, split_channels

SL_CHANNELS = 32  # k0
BRANCH_CHANNELS = 32
GROWTH_RATE = 4 * BRANCH_CHANNELS  # k
SL_POOL = ((4, 1), (4, 1))
TL_POOL = ((2, 2), (2, 2))
DEFAULT_INPUT = (647, 128)

CHECKPOINT_MAGIC = b"BBNN"
CHECKPOINT_VERSION = 1


def block_input_channels(l: int) -> int:
    """Channels entering block ``l`` (1-based) under dense connectivity."""
    return SL_CHANNELS + GROWTH_RATE * (l - 1)


class InceptionBlock(Module):
    """Four pre-activation branches over one input, concatenated to 128 channels.

    Branch order: 1x1 | 1x1 -> 3x3 | 1x1 -> 5x5 | 3x3 max-pool -> 1x1.
    """

    def __init__(self, c_in: int, rng=None, dtype=DTYPE):
        super().__init__()
        c = BRANCH_CHANNELS
        self.c_in = c_in
        self.b1 = BnConvUnit(1, c_in, c, rng, dtype)
        self.b2a = BnConvUnit(1, c_in, c, rng, dtype)
        self.b2b = BnConvUnit(3, c, c, rng, dtype)
        self.b3a = BnConvUnit(1, c_in, c, rng, dtype)
        self.b3b = BnConvUnit(5, c, c, rng, dtype)
        self.b4pool = MaxPool2D((3, 3), (1, 1), padding="same")
        self.b4 = BnConvUnit(1, c_in, c, rng, dtype)

    def children(self):
        return [("b1", self.b1), ("b2a", self.b2a), ("b2b", self.b2b),
                ("b3a", self.b3a), ("b3b", self.b3b), ("b4", self.b4)]

    def top_units(self):
        return [self.b1, self.b2a, self.b3a]

    def bottom_units(self):
        return [self.b2b, self.b3b, self.b4]

    def forward(self, x, training=False):
        if x.shape[3] != self.c_in:
            raise ShapeError(f"inception block expects {self.c_in} channels, got {x.shape}")
        y1 = self.b1.forward(x, training)
        y2 = self.b2b.forward(self.b2a.forward(x, training), training)
        y3 = self.b3b.forward(self.b3a.forward(x, training), training)
        y4 = self.b4.forward(self.b4pool.forward(x), training)
        return concat_channels([y1, y2, y3, y4])

    def backward(self, grad_out):
        g1, g2, g3, g4 = split_channels(grad_out, [BRANCH_CHANNELS] * 4)
        gx = self.b1.backward(g1)
        gx = gx + self.b2a.backward(self.b2b.backward(g2))
        gx = gx + self.b3a.backward(self.b3b.backward(g3))
        gx = gx + self.b4pool.backward(self.b4.backward(g4))
        return gx


class BroadcastModule(Module):
    """L Inception blocks; block l sees [X_SL, X_1, ..., X_{l-1}]."""

    def __init__(self, n_blocks: int = 3, rng=None, dtype=DTYPE):
        super().__init__()
        if n_blocks < 1:
            raise ValueError(f"need at least one block, got L={n_blocks}")
        self.blocks = [InceptionBlock(block_input_channels(l), rng, dtype) for l in range(1, n_blocks + 1)]
        self.features: list[np.ndarray] = []

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def out_channels(self) -> int:
        return SL_CHANNELS + GROWTH_RATE * self.L

    def children(self):
        return [(f"block{i + 1}", b) for i, b in enumerate(self.blocks)]

    def forward(self, x_sl, training=False, probes=None):
        self.features = [x_sl]
        for l, block in enumerate(self.blocks, start=1):
            inp = concat_channels(dense_inputs(self, l))
            if probes is not None:
                probes[f"bm.block{l}.input"] = inp.shape
            out = block.forward(inp, training)
            self.features.append(out)
            if probes is not None:
                probes[f"bm.block{l}"] = (*out.shape[:3], inp.shape[3] + out.shape[3])
        return concat_channels(self.features)

    def backward(self, grad_out):
        widths = [f.shape[3] for f in self.features]
        grads = split_channels(grad_out, widths)
        for l in range(self.L, 0, -1):
            g_in = self.blocks[l - 1].backward(grads[l])
            for i, g in enumerate(split_channels(g_in, widths[:l])):
                grads[i] = grads[i] + g
        return grads[0]


def dense_inputs(bm: BroadcastModule, l: int) -> list[np.ndarray]:
    """Upstream outputs feeding block ``l``: [X_SL, X_1, ..., X_{l-1}]."""
    if not 1 <= l <= bm.L:
        raise IndexError(f"block index {l} out of range 1..{bm.L}")
    if len(bm.features) < l:
        raise RuntimeError("dense_inputs needs a forward pass through the preceding blocks")
    return bm.features[:l]


class BbnnModel(Module):
    def __init__(self, n_classes=10, input_shape=DEFAULT_INPUT, n_blocks=3, tl_pool="avg", rng=None, dtype=DTYPE):
        super().__init__()
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        if tl_pool not in ("avg", "max"):
            raise ValueError(f"tl_pool must be 'avg' or 'max', got {tl_pool!r}")
        self.n_classes = n_classes
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.tl_pool_kind = tl_pool
        self.dtype = np.dtype(dtype)
        self.sl = BnConvUnit(3, 1, SL_CHANNELS, rng, dtype)
        self.sl_pool = MaxPool2D(*SL_POOL)
        self.bm = BroadcastModule(n_blocks, rng, dtype)
        self.tl = BnConvUnit(1, self.bm.out_channels, SL_CHANNELS, rng, dtype)
        self.tl_pool = AvgPool2D(*TL_POOL) if tl_pool == "avg" else MaxPool2D(*TL_POOL)
        self.head = DenseHead(SL_CHANNELS, n_classes, rng, dtype)
        self._pooled_shape = None
        if self.input_shape is not None:
            infer_shapes(self)  # raises early for inputs too small for the pooling chain

    def children(self):
        return [("sl", self.sl), ("bm", self.bm), ("tl", self.tl), ("dl", self.head)]

    def logits(self, x, training=False, probes=None):
        if x.ndim != 4 or x.shape[3] != 1:
            raise ShapeError(f"input: expected (N,H,W,1), got {x.shape}")
        if self.input_shape is not None and x.shape[1:3] != self.input_shape:
            raise ShapeError(f"input: spatial shape {x.shape[1:3]} != build shape {self.input_shape}")
        x = x.astype(self.dtype, copy=False)
        h = self.sl_pool.forward(self.sl.forward(x, training))
        if probes is not None:
            probes["sl"] = h.shape
        h = self.bm.forward(h, training, probes)
        if probes is not None:
            probes["bm"] = h.shape
        h = self.tl_pool.forward(self.tl.forward(h, training))
        if probes is not None:
            probes["tl"] = h.shape
        self._pooled_shape = h.shape
        h = global_avg_pool(h)
        if probes is not None:
            probes["dl.gap"] = h.shape
        out = self.head.forward(h)
        if probes is not None:
            probes["dl.softmax"] = out.shape
        return out

    def forward(self, x, training=False, probes=None):
        return softmax(self.logits(x, training, probes))

    def backward(self, grad_logits):
        self.zero_grad()
        g = self.head.backward(grad_logits)
        g = global_avg_pool_backward(self._pooled_shape, g)
        g = self.tl.backward(self.tl_pool.backward(g))
        g = self.bm.backward(g)
        return self.sl.backward(self.sl_pool.backward(g))

    def load_state(self, state: dict[str, np.ndarray]):
        own = self.state()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)[:5]}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != model shape {arr.shape}")
            arr[...] = state[name]


def build(n_classes=10, input_shape=DEFAULT_INPUT, L=3, seed=0, tl_pool="avg", dtype=DTYPE, zero_head=False):
    """Fresh BBNN with seeded fan-in uniform weights, zero biases, BN gamma=1 beta=0."""
    model = BbnnModel(n_classes, input_shape, L, tl_pool, np.random.default_rng(seed), dtype)
    if zero_head:
        model.head.params["weight"][...] = 0
    return model


def infer_shapes(model: BbnnModel, input_shape=None) -> dict[str, tuple]:
    """Per-stage (H, W, C) without running any kernels."""
    h, w = input_shape or model.input_shape
    (ph, pw), (sh, sw) = SL_POOL
    if h < ph or w < pw:
        raise ShapeError(f"input {h}x{w} too small for shallow max-pool {ph}x{pw}")
    h, w = (h - ph) // sh + 1, (w - pw) // sw + 1
    shapes = {"sl.conv": tuple(input_shape or model.input_shape) + (SL_CHANNELS,), "sl.pool": (h, w, SL_CHANNELS)}
    for l in range(1, model.bm.L + 1):
        shapes[f"bm.block{l}"] = (h, w, block_input_channels(l + 1))
    (ph, pw), (sh, sw) = TL_POOL
    shapes["tl.conv"] = (h, w, SL_CHANNELS)
    if h < ph or w < pw:
        raise ShapeError(f"broadcast output {h}x{w} too small for transition pool {ph}x{pw}")
    h, w = (h - ph) // sh + 1, (w - pw) // sw + 1
    shapes["tl.pool"] = (h, w, SL_CHANNELS)
    shapes["dl.gap"] = (1, 1, SL_CHANNELS)
    shapes["dl.softmax"] = (1, 1, model.n_classes)
    return shapes


@dataclass
class ParamRow:
    stage: str
    layer: str
    output: str
    filters: str
    params: int | None


def count_params(model: BbnnModel, mode="table"):
    """Per-layer rows laid out like the published configuration table, plus the total.

    ``table`` counts conv and dense weights+biases only; ``full`` adds BN gamma/beta.
    """
    if mode not in ("table", "full"):
        raise ValueError(f"mode must be 'table' or 'full', got {mode!r}")

    def units(us):
        n = sum(u.conv.n_params for u in us)
        if mode == "full":
            n += sum(2 * u.bn.channels for u in us)
        return n

    def fmt(s):
        return "x".join(str(v) for v in s)

    shapes = infer_shapes(model) if model.input_shape is not None else None
    out = (lambda key: fmt(shapes[key]) if shapes else "?")
    tl_name = "Avg Pool" if model.tl_pool_kind == "avg" else "Max Pool"
    rows = [
        ParamRow("SL", "Convolution", out("sl.conv"), "3x3/1(32)", units([model.sl])),
        ParamRow("SL", "Max Pool", out("sl.pool"), "4x1/4x1", None),
    ]
    for i, block in enumerate(model.bm.blocks):
        tag = chr(ord("a") + i) if i < 26 else str(i + 1)
        rows.append(ParamRow("BM", f"Inception ({tag}), top", "-", "[1x1/1(32) conv]*3, [3x3/1 max pool]*1",
                             units(block.top_units())))
        rows.append(ParamRow("BM", f"Inception ({tag}), bottom", out(f"bm.block{i + 1}"),
                             "[3x3/1(32) conv]*1, [5x5/1(32) conv]*1, [1x1/1(32) conv]*1",
                             units(block.bottom_units())))
    rows += [
        ParamRow("TL", "Convolution", out("tl.conv"), "1x1/1(32)", units([model.tl])),
        ParamRow("TL", tl_name, out("tl.pool"), "2x2/2", None),
        ParamRow("DL", "Global Average Pool", out("dl.gap"), "-", None),
        ParamRow("DL", "Softmax", out("dl.softmax"), "-", model.head.n_params),
    ]
    total = sum(r.params for r in rows if r.params is not None)
    return rows, total


def table_counts(model: BbnnModel, mode="table") -> list[int]:
    rows, _ = count_params(model, mode)
    return [r.params for r in rows if r.params is not None]


def bn_channel_widths(model: BbnnModel) -> list[int]:
    return [arr.size for name, arr in model.named_parameters() if name.endswith("bn.gamma")]


def save_checkpoint(model: BbnnModel, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HHH", CHECKPOINT_VERSION, model.n_classes, model.bm.L))
        for name, arr in model.state().items():
            raw = name.encode("utf-8")
            dims = (1,) * (4 - arr.ndim) + arr.shape
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<4I", *dims))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def read_checkpoint(path):
    """Returns (n_classes, L, {name: float32 array})."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a BBNN checkpoint (bad magic)")
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, n_classes, L = struct.unpack_from("<HHH", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos, tensors = 10, {}
    while pos < len(data):
        try:
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            dims = struct.unpack_from("<4I", data, pos)
            pos += 16
            count = int(np.prod(dims))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: tensor {name} truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
        except struct.error as e:
            raise CheckpointError(f"{path}: truncated tensor record at byte {pos}") from e
    return n_classes, L, tensors


def load_checkpoint(path, input_shape=None, tl_pool="avg") -> BbnnModel:
    n_classes, L, tensors = read_checkpoint(path)
    model = BbnnModel(n_classes, input_shape, L, tl_pool)
    state = {}
    for name, arr in model.state().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        state[name] = tensors[name].reshape(arr.shape)
    model.load_state(state)
    return model
