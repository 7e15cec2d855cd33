"""Small neural-network engine on numpy: exact analytic gradients only.

Layers implemented here: fully connected, 2-D convolution (cross-
correlation), 2-D transposed convolution, a single-layer LSTM, and the
ReLU / sigmoid / tanh activations.  Every layer does its math in float64;
each `forward` caches what `backward` needs, and `backward` returns the
input gradient while accumulating parameter gradients in `layer.g`.

Convolutions are built on an im2col / col2im pair.  The transposed
convolution is implemented as the exact adjoint of the matching forward
convolution, which makes its gradient the forward convolution again; the
two directions share the same lowering code, so a finite-difference check
of one validates both.

Optimizer: Adam with float64 moments.  Initialization: Xavier-uniform
bounds sqrt(6/(fan_in+fan_out)) per weight matrix, zero biases, except the
LSTM forget-gate bias which starts at 1.0 to keep early memory open.

Checkpoint container (little-endian)::

    offset  size  field
    0       4     magic "NNCK"
    4       1     version (1)
    5       4     metadata length, uint32
    9       m     metadata JSON: {"arrays": [{"name", "shape"}...],
                  "config": {...}}
    9+m     ...   arrays in listed order, float32 raw bytes

Runtime parameters stay float64; the file stores float32 copies, which is
the precision contract for anything reloaded from disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"NNCK"
CKPT_VERSION = 1

ADAM_LR = 5e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Knobs shared by both trainers; defaults favor reproducibility."""

    lr: float = ADAM_LR
    epochs: int = 60
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float64)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    """Interface: forward caches, backward returns d(input), grads in .g."""

    def __init__(self):
        self.p: dict[str, np.ndarray] = {}
        self.g: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for k in self.p:
            self.g[k] = np.zeros_like(self.p[k])


class Dense(Layer):
    """y = x @ W.T + b with W shaped (out, in); x is (N, in) or (in,)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.p["W"] = xavier_uniform(rng, (d_out, d_in), d_in, d_out)
        self.p["b"] = np.zeros(d_out)
        self.zero_grad()

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._flat = x.ndim == 1
        self._x = x.reshape(1, -1) if self._flat else x
        y = self._x @ self.p["W"].T + self.p["b"]
        return y[0] if self._flat else y

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        if self._flat:
            dy = dy.reshape(1, -1)
        self.g["W"] += dy.T @ self._x
        self.g["b"] += dy.sum(axis=0)
        dx = dy @ self.p["W"]
        return dx[0] if self._flat else dx


class ReLU(Layer):
    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return np.asarray(dy, dtype=np.float64) * self._mask


class Sigmoid(Layer):
    def forward(self, x):
        self._y = sigmoid(np.asarray(x, dtype=np.float64))
        return self._y

    def backward(self, dy):
        return np.asarray(dy, dtype=np.float64) * self._y * (1.0 - self._y)


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(np.asarray(x, dtype=np.float64))
        return self._y

    def backward(self, dy):
        return np.asarray(dy, dtype=np.float64) * (1.0 - self._y * self._y)


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv_transpose_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H_out*W_out) patch matrix."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kernel, stride, pad)
    wo = conv_out_size(w, kernel, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]  # (N, C, ho, wo, k, k)
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kernel * kernel, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back, shape (N, C, H, W)."""
    n, c, h, w = x_shape
    ho = conv_out_size(h, kernel, stride, pad)
    wo = conv_out_size(w, kernel, stride, pad)
    patches = cols.reshape(n, c, kernel, kernel, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w]


class Conv2d(Layer):
    """Cross-correlation, weight (C_out, C_in, k, k), input (N, C_in, H, W)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad
        rf = kernel * kernel
        self.p["W"] = xavier_uniform(rng, (c_out, c_in, kernel, kernel),
                                     c_in * rf, c_out * rf)
        self.p["b"] = np.zeros(c_out)
        self.zero_grad()

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        n, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        ho = conv_out_size(h, self.kernel, self.stride, self.pad)
        wo = conv_out_size(w, self.kernel, self.stride, self.pad)
        self._xshape = x.shape
        self._cols = im2col(x, self.kernel, self.stride, self.pad)
        wm = self.p["W"].reshape(self.c_out, -1)
        y = np.einsum("ok,nkl->nol", wm, self._cols, optimize=True)
        y += self.p["b"][None, :, None]
        return y.reshape(n, self.c_out, ho, wo)

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        n = dy.shape[0]
        dyf = dy.reshape(n, self.c_out, -1)
        wm = self.p["W"].reshape(self.c_out, -1)
        self.g["W"] += np.einsum("nol,nkl->ok", dyf, self._cols,
                                 optimize=True).reshape(self.p["W"].shape)
        self.g["b"] += dyf.sum(axis=(0, 2))
        dcols = np.einsum("ok,nol->nkl", wm, dyf, optimize=True)
        return col2im(dcols, self._xshape, self.kernel, self.stride, self.pad)


class ConvTranspose2d(Layer):
    """Adjoint of Conv2d with the same geometry; weight (C_in, C_out, k, k).

    forward(x) computes the scatter that Conv2d.backward would apply to an
    output gradient, so H_out = (H-1)*stride - 2*pad + kernel.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad
        rf = kernel * kernel
        self.p["W"] = xavier_uniform(rng, (c_in, c_out, kernel, kernel),
                                     c_in * rf, c_out * rf)
        self.p["b"] = np.zeros(c_out)
        self.zero_grad()

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        n, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        ho = conv_transpose_out_size(h, self.kernel, self.stride, self.pad)
        wo = conv_transpose_out_size(w, self.kernel, self.stride, self.pad)
        self._x = x
        self._zshape = (n, self.c_out, ho, wo)
        wm = self.p["W"].reshape(self.c_in, -1)  # (C_in, C_out*k*k)
        xf = x.reshape(n, self.c_in, h * w)
        cols = np.einsum("ik,nil->nkl", wm, xf, optimize=True)
        z = col2im(cols, self._zshape, self.kernel, self.stride, self.pad)
        return z + self.p["b"][None, :, None, None]

    def backward(self, dz):
        dz = np.asarray(dz, dtype=np.float64)
        n = dz.shape[0]
        dcols = im2col(dz, self.kernel, self.stride, self.pad)
        xf = self._x.reshape(n, self.c_in, -1)
        self.g["W"] += np.einsum("nil,nkl->ik", xf, dcols,
                                 optimize=True).reshape(self.p["W"].shape)
        self.g["b"] += dz.sum(axis=(0, 2, 3))
        wm = self.p["W"].reshape(self.c_in, -1)
        dxf = np.einsum("ik,nkl->nil", wm, dcols, optimize=True)
        return dxf.reshape(self._x.shape)


class LSTM(Layer):
    """Single-layer LSTM over a (T, D) sequence, returning (T, H).

    Gate order along the 4H axis is input, forget, cell candidate, output.
    Initial hidden and cell states are zero.  The input projection for the
    whole sequence is one matrix product; only the recurrent term loops.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.hidden = d_in, hidden
        self.p["Wx"] = xavier_uniform(rng, (4 * hidden, d_in), d_in, 4 * hidden)
        self.p["Wh"] = xavier_uniform(rng, (4 * hidden, hidden), hidden, 4 * hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate starts open
        self.p["b"] = b
        self.zero_grad()

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        t_len, d = x.shape
        if d != self.d_in:
            raise ValueError(f"expected input size {self.d_in}, got {d}")
        hn = self.hidden
        xp = x @ self.p["Wx"].T + self.p["b"]
        gi = np.empty((t_len, hn)); gf = np.empty((t_len, hn))
        gg = np.empty((t_len, hn)); go = np.empty((t_len, hn))
        cs = np.empty((t_len, hn)); tc = np.empty((t_len, hn))
        hs = np.empty((t_len, hn))
        h = np.zeros(hn)
        c = np.zeros(hn)
        wh = self.p["Wh"]
        for t in range(t_len):
            pre = xp[t] + wh @ h
            gi[t] = sigmoid(pre[:hn])
            gf[t] = sigmoid(pre[hn:2 * hn])
            gg[t] = np.tanh(pre[2 * hn:3 * hn])
            go[t] = sigmoid(pre[3 * hn:])
            c = gf[t] * c + gi[t] * gg[t]
            cs[t] = c
            tc[t] = np.tanh(c)
            h = go[t] * tc[t]
            hs[t] = h
        self._cache = (x, gi, gf, gg, go, cs, tc, hs)
        return hs.copy()

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        x, gi, gf, gg, go, cs, tc, hs = self._cache
        t_len = x.shape[0]
        hn = self.hidden
        wh = self.p["Wh"]
        dpre = np.empty((t_len, 4 * hn))
        dh_next = np.zeros(hn)
        dc_next = np.zeros(hn)
        for t in range(t_len - 1, -1, -1):
            dh = dy[t] + dh_next
            c_prev = cs[t - 1] if t > 0 else np.zeros(hn)
            do = dh * tc[t]
            dc = dh * go[t] * (1.0 - tc[t] * tc[t]) + dc_next
            di = dc * gg[t]
            df = dc * c_prev
            dg = dc * gi[t]
            dc_next = dc * gf[t]
            dpre[t, :hn] = di * gi[t] * (1.0 - gi[t])
            dpre[t, hn:2 * hn] = df * gf[t] * (1.0 - gf[t])
            dpre[t, 2 * hn:3 * hn] = dg * (1.0 - gg[t] * gg[t])
            dpre[t, 3 * hn:] = do * go[t] * (1.0 - go[t])
            dh_next = wh.T @ dpre[t]
        h_prev = np.vstack([np.zeros((1, hn)), hs[:-1]])
        self.g["Wx"] += dpre.T @ x
        self.g["Wh"] += dpre.T @ h_prev
        self.g["b"] += dpre.sum(axis=0)
        return dpre @ self.p["Wx"]


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Sequential):
                out.update(layer.named_params(f"{prefix}{i}."))
            else:
                for k, v in layer.p.items():
                    out[f"{prefix}{i}.{k}"] = v
        return out

    def named_grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Sequential):
                out.update(layer.named_grads(f"{prefix}{i}."))
            else:
                for k, v in layer.g.items():
                    out[f"{prefix}{i}.{k}"] = v
        return out


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient wrt pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


class Adam:
    """Adam over a fixed name -> array parameter dict, updates in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = ADAM_LR,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            gr = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gr
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gr * gr
            p -= self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict) -> None:
    """Write the NNCK container; array order follows the dict order."""
    arrays = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    meta = json.dumps({"arrays": arrays, "config": config},
                      sort_keys=True, separators=(",", ":")).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<BI", CKPT_VERSION, len(meta)))
        f.write(meta)
        for v in params.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an NNCK container: (name -> float64 array, config dict)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    version, meta_len = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(buf[9:9 + meta_len].decode())
    off = 9 + meta_len
    params = {}
    for spec_ in meta["arrays"]:
        shape = tuple(spec_["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = buf[off:off + 4 * n]
        if len(raw) != 4 * n:
            raise ValueError(f"{path}: truncated array {spec_['name']}")
        params[spec_["name"]] = np.frombuffer(raw, dtype="<f4").astype(
            np.float64).reshape(shape)
        off += 4 * n
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return params, meta["config"]


def set_params(dst: dict[str, np.ndarray], src: dict[str, np.ndarray]) -> None:
    """Copy src values into dst arrays in place; key sets must match."""
    if set(dst) != set(src):
        missing = set(dst) ^ set(src)
        raise ValueError(f"parameter name mismatch: {sorted(missing)}")
    for k, v in dst.items():
        arr = np.asarray(src[k], dtype=np.float64)
        if arr.shape != v.shape:
            raise ValueError(f"{k}: shape {arr.shape} != {v.shape}")
        v[...] = arr


STATE_MAGIC = b"NNST"


def save_train_state(path, params: dict[str, np.ndarray], opt: Adam,
                     meta: dict) -> None:
    """Persist an exact training state: float64 parameters, Adam moments,
    and a JSON metadata blob (epoch counters, history, rng-free).

    Layout mirrors the checkpoint container but with float64 payloads, so
    resuming continues the identical trajectory.
    """
    arrays: dict[str, np.ndarray] = {}
    for k, v in params.items():
        arrays[f"p.{k}"] = v
    for k in params:
        arrays[f"m.{k}"] = opt.m[k]
        arrays[f"v.{k}"] = opt.v[k]
    listing = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps({"arrays": listing, "meta": meta, "t": opt.t},
                      sort_keys=True, separators=(",", ":")).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(struct.pack("<BI", CKPT_VERSION, len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def load_train_state(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Read a training state: (params, {"m":…, "v":…, "t":…}, meta)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != STATE_MAGIC:
        raise ValueError(f"{path}: bad state magic {buf[:4]!r}")
    version, blob_len = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported state version {version}")
    head = json.loads(buf[9:9 + blob_len].decode())
    off = 9 + blob_len
    arrays = {}
    for item in head["arrays"]:
        shape = tuple(item["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arrays[item["name"]] = np.frombuffer(
            buf[off:off + 8 * n], dtype="<f8").reshape(shape).copy()
        off += 8 * n
    params = {k[2:]: v for k, v in arrays.items() if k.startswith("p.")}
    opt_state = {
        "t": head["t"],
        "m": {k[2:]: v for k, v in arrays.items() if k.startswith("m.")},
        "v": {k[2:]: v for k, v in arrays.items() if k.startswith("v.")},
    }
    return params, opt_state, head["meta"]


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = fn(x)
        flat[i] = keep - eps
        lo = fn(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * eps)
    return g
