"""3D residual U-Net with hand-written backward passes.

Activations are 5D arrays ``(batch, channel, x, y, z)``. Every layer is a
pair of functions: ``*_forward`` returns the output and a cache, and
``*_backward`` maps the upstream gradient (plus that cache) to gradients of
the inputs and parameters. The network computation runs in the dtype of the
input, so float64 inputs give a double-precision path for gradient checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- layers


def _offsets(k):
    return [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]


def _pad(x, p):
    """Zero-pad the three spatial axes (cheaper than np.pad for small arrays)."""
    bsz, c, nx, ny, nz = x.shape
    xp = np.zeros((bsz, c, nx + 2 * p, ny + 2 * p, nz + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + nx, p:p + ny, p:p + nz] = x
    return xp


def _correlate(x, w):
    """Same-padded correlation without bias.

    Two equivalent evaluation orders; the one that materialises k^3 copies of
    the thinner side (input or output channels) is used.
    """
    bsz, c_in, nx, ny, nz = x.shape
    c_out, k = w.shape[0], w.shape[2]
    p = k // 2
    out = np.empty((bsz, c_out, nx, ny, nz), dtype=x.dtype)
    if k == 1:
        for b in range(bsz):
            out[b] = (w[:, :, 0, 0, 0] @ x[b].reshape(c_in, -1)).reshape(c_out, nx, ny, nz)
        return out
    xp = _pad(x, p)
    offs = _offsets(k)
    if c_out <= c_in:
        # multiply on the padded grid first, then gather the k^3 shifted partial sums
        wk = w.transpose(2, 3, 4, 0, 1).reshape(len(offs) * c_out, c_in)
        for b in range(bsz):
            y = (wk @ xp[b].reshape(c_in, -1)).reshape(len(offs), c_out, *xp.shape[2:])
            o = out[b]
            o[...] = y[0, :, :nx, :ny, :nz]
            for n, (i, j, l) in enumerate(offs[1:], start=1):
                o += y[n, :, i:i + nx, j:j + ny, l:l + nz]
    else:
        wk = w.reshape(c_out, c_in * len(offs))
        cols = np.empty((c_in, len(offs), nx, ny, nz), dtype=x.dtype)
        for b in range(bsz):
            for n, (i, j, l) in enumerate(offs):
                cols[:, n] = xp[b, :, i:i + nx, j:j + ny, l:l + nz]
            out[b] = (wk @ cols.reshape(c_in * len(offs), -1)).reshape(c_out, nx, ny, nz)
    return out


def _kernel_grad(x, dout, k):
    """d(loss)/d(kernel) for a same-padded correlation of ``x`` producing ``dout``."""
    bsz, c_in, nx, ny, nz = x.shape
    c_out = dout.shape[1]
    p = k // 2
    offs = _offsets(k)
    dw = np.zeros((c_out, c_in, len(offs)), dtype=np.result_type(x, dout))
    if k == 1:
        for b in range(bsz):
            dw[:, :, 0] += dout[b].reshape(c_out, -1) @ x[b].reshape(c_in, -1).T
        return dw.reshape(c_out, c_in, 1, 1, 1)
    xp = _pad(x, p)
    if c_in <= c_out:
        cols = np.empty((c_in, len(offs), nx, ny, nz), dtype=x.dtype)
        for b in range(bsz):
            for n, (i, j, l) in enumerate(offs):
                cols[:, n] = xp[b, :, i:i + nx, j:j + ny, l:l + nz]
            dw += (dout[b].reshape(c_out, -1) @ cols.reshape(c_in * len(offs), -1).T).reshape(
                c_out, c_in, len(offs))
    else:
        # place shifted copies of dout on the padded grid and contract with the padded input
        shape = xp.shape[2:]
        dcols = np.zeros((len(offs), c_out) + shape, dtype=dout.dtype)
        for b in range(bsz):
            for n, (i, j, l) in enumerate(offs):
                dcols[n, :, i:i + nx, j:j + ny, l:l + nz] = dout[b]
            g = dcols.reshape(len(offs) * c_out, -1) @ xp[b].reshape(c_in, -1).T
            dw += g.reshape(len(offs), c_out, c_in).transpose(1, 2, 0)
    return dw.reshape(c_out, c_in, k, k, k)


def conv3d_forward(x, w, b):
    """Same-padded 3D cross-correlation; ``w`` is ``(c_out, c_in, k, k, k)`` with odd k."""
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be cubic with odd size, got {w.shape[2:]}")
    out = _correlate(x, w)
    out += b.reshape(1, -1, 1, 1, 1)
    return out, (x, w)


def conv3d_backward(dout, cache):
    x, w = cache
    dw = _kernel_grad(x, dout, w.shape[2])
    db = dout.sum(axis=(0, 2, 3, 4))
    # input gradient is a same-padded correlation with the flipped, transposed kernel
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dx = _correlate(dout, w_t)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def _blocks(x):
    bsz, c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ShapeError(f"2x2x2 pooling needs even spatial dims, got {x.shape[2:]}")
    v = x.reshape(bsz, c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    return v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(bsz, c, nx // 2, ny // 2, nz // 2, 8)


def maxpool2_forward(x):
    blocks = _blocks(x)
    # argmax takes the first maximum in (dx, dy, dz) lexicographic order
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    bsz, c, nx, ny, nz = shape
    blocks = np.zeros(dout.shape + (8,), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    v = blocks.reshape(bsz, c, nx // 2, ny // 2, nz // 2, 2, 2, 2)
    return v.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(shape)


def upconv2_forward(x, w, b):
    """Transposed 2x2x2 convolution, stride 2; ``w`` is ``(c_in, c_out, 2, 2, 2)``."""
    if x.ndim != 5 or w.shape[0] != x.shape[1] or w.shape[2:] != (2, 2, 2) or b.shape != (w.shape[1],):
        raise ShapeError(f"upconv2: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    bsz, _, nx, ny, nz = x.shape
    c_out = w.shape[1]
    # (b, x, y, z, c_out, i, j, k) -> interleave (x, i), (y, j), (z, k)
    t = np.tensordot(x, w, axes=([1], [0]))
    out = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(bsz, c_out, 2 * nx, 2 * ny, 2 * nz)
    out += b.reshape(1, -1, 1, 1, 1)
    return out, (x, w)


def upconv2_backward(dout, cache):
    x, w = cache
    bsz, c_out, mx, my, mz = dout.shape
    d = dout.reshape(bsz, c_out, mx // 2, 2, my // 2, 2, mz // 2, 2)
    # (b, c_out, x, i, y, j, z, k) against w (c_in, c_out, i, j, k)
    dx = np.tensordot(d, w, axes=([1, 3, 5, 7], [1, 2, 3, 4]))  # b, x, y, z, c_in
    dx = np.moveaxis(dx, -1, 1)
    dw = np.tensordot(x, d, axes=([0, 2, 3, 4], [0, 2, 4, 6]))  # c_in, c_out, i, j, k
    db = dout.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(dx), dw, db


def concat_forward(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dout, split):
    return dout[:, :split], dout[:, split:]


# ---------------------------------------------------------------- network


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 3
    base_channels: int = 16
    convs_per_level: int = 2
    residual: bool = True
    head_kernel: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.convs_per_level < 1:
            raise ValueError(f"invalid network config {self}")
        if self.head_kernel not in (1, 3):
            raise ValueError(f"head kernel must be 1 or 3, got {self.head_kernel}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_dims(self, dims) -> None:
        m = 2 ** (self.levels - 1)
        if any(int(d) % m for d in dims):
            raise ShapeError(
                f"spatial dims {tuple(dims)} must be divisible by 2^(levels-1) = {m} for levels={self.levels}"
            )

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration (and checkpoint) order."""
        shapes = []
        c_in = 1
        for lvl in range(self.levels):
            c = self.channels(lvl)
            for i in range(self.convs_per_level):
                shapes.append((f"enc{lvl}.conv{i}.w", (c, c_in, 3, 3, 3)))
                shapes.append((f"enc{lvl}.conv{i}.b", (c,)))
                c_in = c
        for lvl in range(self.levels - 2, -1, -1):
            c = self.channels(lvl)
            shapes.append((f"dec{lvl}.up.w", (self.channels(lvl + 1), c, 2, 2, 2)))
            shapes.append((f"dec{lvl}.up.b", (c,)))
            c_in = 2 * c
            for i in range(self.convs_per_level):
                shapes.append((f"dec{lvl}.conv{i}.w", (c, c_in, 3, 3, 3)))
                shapes.append((f"dec{lvl}.conv{i}.b", (c,)))
                c_in = c
        k = self.head_kernel
        shapes.append(("head.w", (1, self.base_channels, k, k, k)))
        shapes.append(("head.b", (1,)))
        return shapes


def init_weights(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.parameter_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        receptive = int(np.prod(shape[2:]))
        if ".up." in name:
            fan_in, fan_out = shape[0] * receptive, shape[1] * receptive
        else:
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, shape).astype(dtype)
    return params


def zero_weights(cfg: NetworkConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in cfg.parameter_shapes()}


class UNet3D:
    """Forward/backward driver holding the activation cache of the last forward call."""

    def __init__(self, cfg: NetworkConfig, params: dict[str, np.ndarray]):
        expected = dict(cfg.parameter_shapes())
        if set(params) != set(expected):
            raise ShapeError(f"parameter names do not match config: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = params
        self._tape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (batch, 1, x, y, z) input, got {x.shape}")
        cfg.check_dims(x.shape[2:])
        p = {k: v.astype(x.dtype, copy=False) for k, v in self.params.items()}
        tape = []
        h = x
        skips = []
        for lvl in range(cfg.levels):
            for i in range(cfg.convs_per_level):
                h, c1 = conv3d_forward(h, p[f"enc{lvl}.conv{i}.w"], p[f"enc{lvl}.conv{i}.b"])
                h, c2 = relu_forward(h)
                tape.append(("conv", f"enc{lvl}.conv{i}", c1, c2))
            if lvl < cfg.levels - 1:
                skips.append(h)
                h, c = maxpool2_forward(h)
                tape.append(("pool", lvl, c, None))
        for lvl in range(cfg.levels - 2, -1, -1):
            h, c = upconv2_forward(h, p[f"dec{lvl}.up.w"], p[f"dec{lvl}.up.b"])
            tape.append(("up", f"dec{lvl}.up", c, None))
            h, split = concat_forward(h, skips[lvl])
            tape.append(("concat", lvl, split, None))
            for i in range(cfg.convs_per_level):
                h, c1 = conv3d_forward(h, p[f"dec{lvl}.conv{i}.w"], p[f"dec{lvl}.conv{i}.b"])
                h, c2 = relu_forward(h)
                tape.append(("conv", f"dec{lvl}.conv{i}", c1, c2))
        r, c = conv3d_forward(h, p["head.w"], p["head.b"])
        tape.append(("head", "head", c, None))
        pre = x + r if cfg.residual else r
        out, c_out = relu_forward(pre)
        self._tape = (tape, c_out, x.dtype)
        return out

    def backward(self, dout: np.ndarray, return_input_grad: bool = False):
        """Parameter gradients (and optionally d/d input) for the cached forward pass."""
        if self._tape is None:
            raise StateError("backward called before forward")
        tape, c_out, dtype = self._tape
        cfg = self.cfg
        dout = np.asarray(dout, dtype=dtype)
        grads = {}
        dpre = relu_backward(dout, c_out)
        dx_input = dpre.copy() if cfg.residual else np.zeros_like(dpre)
        g = dpre
        skip_grads = {}
        for kind, name, c1, c2 in reversed(tape):
            if kind == "head":
                g, grads["head.w"], grads["head.b"] = conv3d_backward(g, c1)
            elif kind == "conv":
                g = relu_backward(g, c2)
                g, grads[f"{name}.w"], grads[f"{name}.b"] = conv3d_backward(g, c1)
            elif kind == "concat":
                g, dskip = concat_backward(g, c1)
                skip_grads[name] = dskip
            elif kind == "up":
                g, grads[f"{name}.w"], grads[f"{name}.b"] = upconv2_backward(g, c1)
            elif kind == "pool":
                # the pooled tensor also fed the skip connection of this level
                g = maxpool2_backward(g, c1) + skip_grads.pop(name)
        dx_input = dx_input + g
        if return_input_grad:
            return grads, dx_input
        return grads


def unet_forward(x: np.ndarray, params, cfg: NetworkConfig) -> np.ndarray:
    return UNet3D(cfg, params).forward(x)


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"SRW1"


def save_weights(path, cfg: NetworkConfig, params: dict[str, np.ndarray]) -> None:
    """SRW1: magic, config (5 x u32), tensor count, then per tensor ndim, dims, f32 data."""
    shapes = cfg.parameter_shapes()
    parts = [_CKPT_MAGIC,
             struct.pack("<5I", cfg.levels, cfg.base_channels, cfg.convs_per_level,
                         int(cfg.residual), cfg.head_kernel),
             struct.pack("<I", len(shapes))]
    for name, shape in shapes:
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        parts.append(arr.astype("<f4").tobytes(order="C"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_weights(path) -> tuple[NetworkConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        levels, base, convs, residual, head = struct.unpack_from("<5I", raw, 4)
        cfg = NetworkConfig(levels, base, convs, bool(residual), head)
        (count,) = struct.unpack_from("<I", raw, 24)
        off = 28
        shapes = cfg.parameter_shapes()
        if count != len(shapes):
            raise CheckpointError(f"{path}: {count} tensors, config implies {len(shapes)}")
        params = {}
        for name, shape in shapes:
            (ndim,) = struct.unpack_from("<I", raw, off)
            dims = struct.unpack_from(f"<{ndim}I", raw, off + 4)
            off += 4 + 4 * ndim
            if tuple(dims) != shape:
                raise CheckpointError(f"{path}: {name} stored as {dims}, config implies {shape}")
            n = int(np.prod(shape))
            if off + 4 * n > len(raw):
                raise CheckpointError(f"{path}: truncated in {name}")
            params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return cfg, params
