"""Dense NHWC tensor ops with reverse-mode gradients, and the conditional U-Net denoiser.

Only the layer set the denoiser needs is supported: 3x3/1x1 convolution, group
norm, SiLU, 2x2 average pooling, nearest upsampling, channel concat, linear,
embedding lookup and per-channel bias injection.  Public tensors are NCHW
numpy arrays; everything inside the network runs channels-last.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, ModelError, TrainingError

__all__ = [
    "Architecture",
    "DenoiserNet",
    "AdamState",
    "adam_step",
    "noise_loss",
    "gradient_check",
    "save_model",
    "load_model",
    "MAGIC",
    "FORMAT_VERSION",
]


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("value", "parents", "backward", "name")

    def __init__(self, value, parents=(), backward=None, name=None):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.name = name


def backprop(out: Node, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Run the tape backwards from ``out``; returns gradients of named leaves."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): grad_out}
    named: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward is None:
            if node.name is not None:
                named[node.name] = named[node.name] + g if node.name in named else g
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return named


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    # (B, H+k-1, W+k-1, C) -> (B*H*W, k*k*C), column order (ky, kx, c)
    v = sliding_window_view(xp, (k, k), axis=(1, 2))
    B, H, W, C = v.shape[:4]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, k * k * C)


def _spatial_sum(a: np.ndarray) -> np.ndarray:
    # (B, N, C) -> (B, C); a ones-vector matmul beats ndarray.sum(axis=1) here
    ones = np.ones((1, a.shape[1]), dtype=a.dtype)
    return np.matmul(ones, a)[:, 0, :]


def conv2d(x: Node, w: Node, b: Node) -> Node:
    X, Wt = x.value, w.value
    k = Wt.shape[0]
    p = k // 2
    B, H, W, C = X.shape
    O = Wt.shape[-1]
    pad = ((0, 0), (p, p), (p, p), (0, 0))
    cols = X.reshape(-1, C) if k == 1 else _im2col(np.pad(X, pad), k)
    W2 = Wt.reshape(k * k * C, O)
    y = (cols @ W2 + b.value).reshape(B, H, W, O)

    def back(g):
        g2 = g.reshape(-1, O)
        dw = (cols.T @ g2).reshape(Wt.shape)
        db = (np.ones((1, g2.shape[0]), dtype=g2.dtype) @ g2)[0]
        if k == 1:
            return (g2 @ W2.T).reshape(X.shape), dw, db
        # input gradient = correlation of the padded output gradient with the flipped kernel
        wf = Wt[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * O, C)
        dx = (_im2col(np.pad(g, pad), k) @ wf).reshape(X.shape)
        return dx, dw, db

    return Node(y, (x, w, b), back)


def group_norm(x: Node, gamma: Node, beta: Node, groups: int, eps: float = 1e-5) -> Node:
    X = x.value
    B, H, W, C = X.shape
    cg = C // groups
    n = H * W * cg
    xs = X.reshape(B, H * W, C)

    def per_group(s):
        # (B, C) channel sums -> (B, C) group sums broadcast back to channels
        return np.repeat(s.reshape(B, groups, cg).sum(axis=-1), cg, axis=1)

    mu = per_group(_spatial_sum(xs)) / n
    xc = xs - mu[:, None, :]
    var = per_group(_spatial_sum(xc * xc)) / n
    inv = (1.0 / np.sqrt(var + eps))[:, None, :]
    xhat = xc * inv
    y = (xhat * gamma.value + beta.value).reshape(X.shape)

    def back(g):
        gs = g.reshape(B, H * W, C)
        dgamma = _spatial_sum(gs * xhat).sum(axis=0)
        dbeta = _spatial_sum(gs).sum(axis=0)
        dxhat = gs * gamma.value
        s1 = per_group(_spatial_sum(dxhat))[:, None, :]
        s2 = per_group(_spatial_sum(dxhat * xhat))[:, None, :]
        dx = inv * (dxhat - s1 / n - xhat * s2 / n)
        return dx.reshape(X.shape), dgamma, dbeta

    return Node(y, (x, gamma, beta), back)


def silu(x: Node) -> Node:
    X = x.value
    s = 1.0 / (1.0 + np.exp(-X))
    y = X * s

    def back(g):
        return (g * (s + X * s * (1.0 - s)),)

    return Node(y, (x,), back)


def identity(x: Node) -> Node:
    return x


def channel_bias(x: Node, e: Node) -> Node:
    y = x.value + e.value[:, None, None, :]

    def back(g):
        B, H, W, C = g.shape
        return g, _spatial_sum(g.reshape(B, H * W, C))

    return Node(y, (x, e), back)


def avgpool2(x: Node) -> Node:
    X = x.value
    B, H, W, C = X.shape
    if H % 2 or W % 2:
        raise ConfigError(f"average pooling needs even spatial size, got {H}x{W}")
    y = X.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return Node(y, (x,), back)


def upsample2(x: Node) -> Node:
    X = x.value
    B, H, W, C = X.shape
    y = np.repeat(np.repeat(X, 2, axis=1), 2, axis=2)

    def back(g):
        return (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),)

    return Node(y, (x,), back)


def concat(a: Node, b: Node) -> Node:
    ca = a.value.shape[-1]
    y = np.concatenate([a.value, b.value], axis=-1)

    def back(g):
        return g[..., :ca], g[..., ca:]

    return Node(y, (a, b), back)


def add(a: Node, b: Node) -> Node:
    def back(g):
        return g, g

    return Node(a.value + b.value, (a, b), back)


def linear(x: Node, w: Node, b: Node) -> Node:
    y = x.value @ w.value + b.value

    def back(g):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)

    return Node(y, (x, w, b), back)


def embedding(table: Node, idx: np.ndarray) -> Node:
    y = table.value[idx]

    def back(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, idx, g)
        return (dt,)

    return Node(y, (table,), back)


def sinusoidal(alphabar: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * np.asarray(alphabar, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1).astype(dtype)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2
    emb_dim: int = 64
    groups: int = 8
    num_classes: int = 2
    activation: str = "silu"
    norm: str = "group"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.in_channels < 1 or not self.channels or min(self.channels) < 1:
            raise ConfigError("architecture needs positive channel counts")
        if self.blocks_per_level < 1 or self.emb_dim < 2 or self.emb_dim % 2:
            raise ConfigError("blocks_per_level >= 1 and an even emb_dim >= 2 are required")
        if self.activation not in ("silu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm not in ("group", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.norm == "group":
            for c in self.channels:
                if c % self.group_count(c):
                    raise ConfigError(f"channel count {c} not divisible into groups")

    def group_count(self, c: int) -> int:
        return max(1, min(self.groups, c))

    @property
    def levels(self) -> int:
        return len(self.channels)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter block shapes in declaration order."""
        E = self.emb_dim
        out: dict[str, tuple[int, ...]] = {
            "class_emb": (self.num_classes, E),
            "time_mlp.w": (E, E),
            "time_mlp.b": (E,),
            "in_conv.w": (3, 3, self.in_channels, self.channels[0]),
            "in_conv.b": (self.channels[0],),
        }

        def block(prefix: str, cin: int, cout: int):
            out[f"{prefix}.conv.w"] = (3, 3, cin, cout)
            out[f"{prefix}.conv.b"] = (cout,)
            if self.norm == "group":
                out[f"{prefix}.norm.g"] = (cout,)
                out[f"{prefix}.norm.b"] = (cout,)
            out[f"{prefix}.emb.w"] = (E, cout)
            out[f"{prefix}.emb.b"] = (cout,)

        cin = self.channels[0]
        for lvl, c in enumerate(self.channels):
            for k in range(self.blocks_per_level):
                block(f"enc{lvl}.block{k}", cin, c)
                cin = c
        for lvl in range(self.levels - 2, -1, -1):
            c = self.channels[lvl]
            out[f"dec{lvl}.up.w"] = (3, 3, self.channels[lvl + 1], c)
            out[f"dec{lvl}.up.b"] = (c,)
            cin = 2 * c
            for k in range(self.blocks_per_level):
                block(f"dec{lvl}.block{k}", cin, c)
                cin = c
        out["out_conv.w"] = (3, 3, self.channels[0], self.in_channels)
        out["out_conv.b"] = (self.in_channels,)
        return out

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))


def layer_type(name: str) -> str:
    if name == "class_emb":
        return "embedding"
    if ".norm." in name:
        return "norm"
    if name.startswith("time_mlp") or ".emb." in name:
        return "linear"
    return "conv"


@dataclass
class DenoiserNet:
    arch: Architecture
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, arch: Architecture, seed: int = 0, dtype=np.float32) -> "DenoiserNet":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.shapes().items():
            if name == "out_conv.w" or name.endswith(".b"):
                arr = np.zeros(shape)
            elif name.endswith("norm.g"):
                arr = np.ones(shape)
            elif name == "class_emb":
                arr = rng.uniform(-1.0, 1.0, size=shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                bound = 1.0 / np.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = arr.astype(dtype)
        return cls(arch, params)

    @property
    def dtype(self):
        return self.params["in_conv.w"].dtype

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "DenoiserNet":
        return DenoiserNet(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(self.arch, {k: v.copy() for k, v in self.params.items()})

    # -- forward ----------------------------------------------------------

    def _check_inputs(self, x, labels, alphabar):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ConfigError(
                f"expected input of shape (B, {self.arch.in_channels}, H, W), got {x.shape}"
            )
        div = 2 ** (self.arch.levels - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ConfigError(f"spatial size {x.shape[2:]} must be divisible by {div}")
        if not np.all(np.isfinite(x)):
            raise InputError("non-finite values in network input")
        B = x.shape[0]
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (B,))
        if labels.min() < 0 or labels.max() >= self.arch.num_classes:
            raise InputError(f"class label out of range: {labels}")
        alphabar = np.broadcast_to(np.asarray(alphabar, dtype=np.float64), (B,))
        if np.any(alphabar <= 0) or np.any(alphabar > 1):
            raise InputError("alphabar must lie in (0, 1]")
        return x, labels, alphabar

    def build(self, x, labels, alphabar):
        """Forward pass recording the tape. Returns (output node, leaf nodes)."""
        x, labels, alphabar = self._check_inputs(x, labels, alphabar)
        arch = self.arch
        leaves = {k: Node(v, name=k) for k, v in self.params.items()}
        act = silu if arch.activation == "silu" else identity
        dt = self.dtype

        temb = sinusoidal(alphabar, arch.emb_dim, dt)
        emb = add(Node(temb), embedding(leaves["class_emb"], labels))
        emb = act(linear(emb, leaves["time_mlp.w"], leaves["time_mlp.b"]))

        def block(prefix, h):
            h = conv2d(h, leaves[f"{prefix}.conv.w"], leaves[f"{prefix}.conv.b"])
            if arch.norm == "group":
                c = h.value.shape[-1]
                h = group_norm(
                    h, leaves[f"{prefix}.norm.g"], leaves[f"{prefix}.norm.b"], arch.group_count(c)
                )
            e = linear(emb, leaves[f"{prefix}.emb.w"], leaves[f"{prefix}.emb.b"])
            return act(channel_bias(h, e))

        h = Node(np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dt))
        h = conv2d(h, leaves["in_conv.w"], leaves["in_conv.b"])
        skips = []
        for lvl in range(arch.levels):
            for k in range(arch.blocks_per_level):
                h = block(f"enc{lvl}.block{k}", h)
            if lvl < arch.levels - 1:
                skips.append(h)
                h = avgpool2(h)
        for lvl in range(arch.levels - 2, -1, -1):
            h = upsample2(h)
            h = conv2d(h, leaves[f"dec{lvl}.up.w"], leaves[f"dec{lvl}.up.b"])
            h = concat(h, skips[lvl])
            for k in range(arch.blocks_per_level):
                h = block(f"dec{lvl}.block{k}", h)
        h = conv2d(h, leaves["out_conv.w"], leaves["out_conv.b"])
        return h, leaves

    def forward(self, x, labels, alphabar) -> np.ndarray:
        out, _ = self.build(x, labels, alphabar)
        return np.ascontiguousarray(out.value.transpose(0, 3, 1, 2))

    __call__ = forward


def noise_loss(
    net: DenoiserNet, x_t, labels, alphabar, eps, norm: str = "l2"
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean noise-prediction error and its parameter gradients."""
    out, _ = net.build(x_t, labels, alphabar)
    target = np.asarray(eps, dtype=net.dtype).transpose(0, 2, 3, 1)
    diff = out.value - target
    n = diff.size
    if norm == "l2":
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        g = (2.0 / n) * diff
    elif norm == "l1":
        loss = float(np.mean(np.abs(diff.astype(np.float64))))
        g = np.sign(diff) / n
    else:
        raise ConfigError(f"unknown loss norm {norm!r}")
    grads = backprop(out, g.astype(net.dtype))
    for name, p in net.params.items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(net: DenoiserNet, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One Adam update, applied to ``net.params`` in place."""
    for name, g in grads.items():
        if name not in net.params or g.shape != net.params[name].shape:
            raise InputError(f"gradient {name!r} does not match the parameter blocks")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(
                f"non-finite gradient in {name} ({bad} entries) at step {state.step + 1}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = net.params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def gradient_check(
    net: DenoiserNet, probe_count: int, seed: int = 0, size: int | None = None, h: float = 1e-5
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per layer type.

    Runs on a float64 copy. A zero-initialised output projection would make every
    upstream gradient vanish, so it is redrawn before probing.
    """
    if probe_count < 1:
        raise InputError("probe_count must be >= 1")
    rng = np.random.default_rng(seed)
    net = net.astype(np.float64)
    w = net.params["out_conv.w"]
    if not np.any(w):
        bound = 1.0 / np.sqrt(np.prod(w.shape[:-1]))
        net.params["out_conv.w"] = rng.uniform(-bound, bound, size=w.shape)
    arch = net.arch
    side = size or 2 ** (arch.levels - 1) * 2
    x = rng.standard_normal((2, arch.in_channels, side, side))
    labels = np.arange(2) % arch.num_classes
    alphabar = rng.uniform(0.1, 0.9, size=2)
    eps = rng.standard_normal(x.shape)

    def f() -> float:
        out, _ = net.build(x, labels, alphabar)
        return float(np.mean((out.value - eps.transpose(0, 2, 3, 1)) ** 2))

    _, grads = noise_loss(net, x, labels, alphabar, eps)
    by_type: dict[str, list[str]] = {}
    for name in net.params:
        by_type.setdefault(layer_type(name), []).append(name)

    report = {}
    for kind, names in by_type.items():
        sizes = np.array([net.params[n].size for n in names], dtype=float)
        worst = 0.0
        for _ in range(probe_count):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            p = net.params[name].reshape(-1)
            i = int(rng.integers(p.size))
            old = p[i]
            p[i] = old + h
            fp = f()
            p[i] = old - h
            fm = f()
            p[i] = old
            num = (fp - fm) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / denom)
        report[kind] = worst
    return report


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------

MAGIC = b"DSEG"
FORMAT_VERSION = 1


def save_model(path, nets: list[DenoiserNet], meta: dict | None = None) -> None:
    """Write one or more nets sharing an architecture to a model file."""
    if not nets:
        raise InputError("nothing to save")
    arch = nets[0].arch
    if any(n.arch != arch for n in nets):
        raise InputError("all nets in one model file must share the architecture")
    header = {"architecture": asdict(arch), "nets": len(nets), "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(hbytes)), hbytes]
    for net in nets:
        for name in arch.shapes():
            chunks.append(np.ascontiguousarray(net.params[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path) -> tuple[list[DenoiserNet], dict]:
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"model not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ModelError(f"{path} is not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    try:
        header = json.loads(buf[12 : 12 + hlen])
        arch = Architecture(**header["architecture"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelError(f"corrupt model header in {path}: {exc}") from exc
    off = 12 + hlen
    nets = []
    for _ in range(header["nets"]):
        params = {}
        for name, shape in arch.shapes().items():
            n = int(np.prod(shape))
            if off + 4 * n > len(buf):
                raise ModelError(f"truncated model file {path}")
            params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
        nets.append(DenoiserNet(arch, params))
    if off != len(buf):
        raise ModelError(f"trailing bytes in model file {path}")
    return nets, header["meta"]
