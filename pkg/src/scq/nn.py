"""Small differentiable building blocks with hand-written reverse passes.

Networks are plain numpy parameter lists.  ``Mlp`` optionally carries a
leading ensemble axis so twin critics run as one batched computation: weights
have shape ``(E, fan_in, fan_out)`` and activations ``(E, batch, width)``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_STD_MIN = -3.0
LOG_STD_MAX = 2.0
LN_EPS = 1e-5
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _row_sum(x):
    """Sum over the second-to-last axis as a matmul (much faster than ``sum`` for small widths)."""
    return np.ones((1, x.shape[-2]), dtype=x.dtype) @ x


def _last_mean(x):
    return x @ np.full((x.shape[-1], 1), 1.0 / x.shape[-1], dtype=x.dtype)


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize over the last axis, then scale and shift."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(float)
    xc = x - _last_mean(x)
    inv = 1.0 / np.sqrt(_last_mean(xc * xc) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(cache, grad_out):
    """Returns ``(grad_x, grad_gain, grad_bias)``; gain/bias grads are summed over the batch axis."""
    xhat, inv, gain = cache
    g = grad_out * gain
    grad_x = inv * (g - _last_mean(g) - xhat * _last_mean(g * xhat))
    return grad_x, _row_sum(grad_out * xhat), _row_sum(grad_out)


class Mlp:
    """ReLU multilayer perceptron with an affine output layer.

    ``params`` is a flat list ``[W0, b0, (g0, c0), W1, b1, ...]`` where the
    optional ``(g, c)`` pair is the layer-norm gain/bias of a hidden layer.
    """

    def __init__(self, sizes, rng=None, n_members=None, layer_norm=False, zero_output=False, dtype=np.float64):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.n_members = n_members
        self.layer_norm = bool(layer_norm)
        self.dtype = np.dtype(dtype)
        lead = () if n_members is None else (n_members,)
        rng = np.random.default_rng(0) if rng is None else rng
        n_layers = len(self.sizes) - 1
        init = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            last = i == n_layers - 1
            if last and zero_output:
                w = np.zeros(lead + (fan_in, fan_out))
                b = np.zeros(lead + (1, fan_out))
            else:
                w = rng.uniform(-bound, bound, size=lead + (fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=lead + (1, fan_out))
            init += [w, b]
            if self.layer_norm and not last:
                init += [np.ones(lead + (1, fan_out)), np.zeros(lead + (1, fan_out))]
        self._shapes = [p.shape for p in init]
        self.flat = np.concatenate([p.ravel() for p in init]).astype(self.dtype)
        self.params = self._views(self.flat)

    def _views(self, buf):
        out, o = GradList(), 0
        for shape in self._shapes:
            n = math.prod(shape)
            out.append(buf[o:o + n].reshape(shape))
            o += n
        out.flat = buf
        return out

    @property
    def _per_hidden(self):
        return 4 if self.layer_norm else 2

    def copy(self) -> "Mlp":
        clone = object.__new__(Mlp)
        clone.__dict__.update(self.__dict__)
        clone.flat = np.concatenate([np.asarray(p, dtype=self.dtype).ravel() for p in self.params])
        clone.params = clone._views(clone.flat)
        return clone

    def forward(self, x, params=None):
        params = self.params if params is None else params
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        inputs, ln_caches = [], []
        h = x
        k = 0
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            inputs.append(h)
            z = h @ params[k]
            z += params[k + 1]
            k += 2
            if i == n_layers - 1:
                return z, (x.ndim, inputs, ln_caches)
            if self.layer_norm:
                z, ln_cache = layer_norm(z, params[k], params[k + 1])
                ln_caches.append(ln_cache)
                k += 2
            h = np.maximum(z, 0.0, out=z)

    def __call__(self, x, params=None):
        return self.forward(x, params)[0]

    def backward(self, cache, grad_out, params=None, param_grads=True, input_grad=True):
        """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input.

        Parameter gradients come back as views into one flat buffer
        (``grads.flat``); with ``param_grads=False`` only the input gradient is
        computed and ``grads`` is None; with ``input_grad=False`` the returned
        input gradient is None.
        """
        params = self.params if params is None else params
        in_ndim, inputs, ln_caches = cache
        grads = self._views(np.empty(sum(math.prod(s) for s in self._shapes), dtype=self.dtype)) \
            if param_grads else None
        g = np.asarray(grad_out, dtype=self.dtype)
        n_layers = len(self.sizes) - 1
        idx = self._param_index()
        for i in reversed(range(n_layers)):
            h_in = inputs[i]
            if i < n_layers - 1:
                # the next layer's input is this layer's ReLU output
                g = g * (inputs[i + 1] > 0)
                if self.layer_norm:
                    g, gg, gb = layer_norm_backward(ln_caches[i], g)
                    if param_grads:
                        grads[idx[i] + 2][...] = gg
                        grads[idx[i] + 3][...] = gb
            wi = idx[i]
            if param_grads:
                np.matmul(np.swapaxes(h_in, -1, -2), g, out=grads[wi])
                np.matmul(np.ones((1, g.shape[-2]), dtype=g.dtype), g, out=grads[wi + 1])
            if i == 0 and not input_grad:
                return grads, None
            w_t = np.swapaxes(params[wi], -1, -2)
            # a width-1 layer makes the input gradient an outer product; broadcasting beats matmul there
            g = g * w_t if g.shape[-1] == 1 else g @ w_t
        if self.n_members is not None and in_ndim == 2:
            g = g.sum(axis=0)
        return grads, g

    def _param_index(self):
        out = []
        k = 0
        for i in range(len(self.sizes) - 1):
            out.append(k)
            k += self._per_hidden if i < len(self.sizes) - 2 else 2
        return out


class GradList(list):
    """List of parameter arrays that are views into the 1D buffer ``flat``."""

    flat: np.ndarray


@dataclass
class GaussianSample:
    action: np.ndarray
    log_prob: np.ndarray
    pre_tanh: np.ndarray
    tanh: np.ndarray
    std: np.ndarray
    noise: np.ndarray
    in_clamp: np.ndarray
    half_range: np.ndarray


def split_gaussian_head(out):
    """Split actor output into mean and clamped log-std halves."""
    k = out.shape[-1] // 2
    mean, raw = out[..., :k], out[..., k:]
    log_std = np.minimum(np.maximum(raw, LOG_STD_MIN), LOG_STD_MAX)
    in_clamp = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    return mean, log_std, in_clamp


def _float(x):
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(float)


def squashed_gaussian(mean, log_std, noise, low, high, in_clamp=None) -> GaussianSample:
    """Reparameterized tanh-Gaussian sample scaled to ``[low, high]`` and its log-density."""
    low, high = _float(low), _float(high)
    half = 0.5 * (high - low)
    center = 0.5 * (high + low)
    std = np.exp(log_std)
    u = mean + std * noise
    t = np.tanh(u)
    action = center + half * t
    # log(1 - tanh(u)^2) in a form that stays finite for large |u|
    log_det = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    log_prob = np.sum(-0.5 * noise ** 2 - log_std - _HALF_LOG_2PI - log_det - np.log(half), axis=-1)
    if in_clamp is None:
        in_clamp = np.ones_like(mean, dtype=bool)
    return GaussianSample(action, log_prob, u, t, std, noise, in_clamp, half)


def squashed_gaussian_backward(sample: GaussianSample, grad_action, grad_log_prob):
    """Map gradients w.r.t. (action, log_prob) to gradients w.r.t. the raw head output."""
    grad_log_prob = np.asarray(grad_log_prob, dtype=float)[..., None]
    grad_u = grad_action * sample.half_range * (1.0 - sample.tanh ** 2) + grad_log_prob * 2.0 * sample.tanh
    grad_mean = grad_u
    grad_log_std = (grad_u * sample.std * sample.noise - grad_log_prob) * sample.in_clamp
    return np.concatenate([grad_mean, grad_log_std], axis=-1)


def squashed_gaussian_log_prob(action, mean, log_std, low, high):
    """Log-density of a given action under the squashed Gaussian (no gradients)."""
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    half = 0.5 * (high - low)
    t = np.clip((np.asarray(action, dtype=float) - 0.5 * (high + low)) / half, -1 + 1e-12, 1 - 1e-12)
    u = np.arctanh(t)
    noise = (u - mean) / np.exp(log_std)
    return squashed_gaussian(mean, log_std, noise, low, high).log_prob


@dataclass
class AdamState:
    lr: float
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr) -> "AdamState":
        return cls(lr, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, lr=None):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def polyak_update(target, online, upsilon):
    """In place ``target <- (1 - upsilon) * target + upsilon * online``."""
    if not 0.0 <= upsilon <= 1.0:
        raise ValueError(f"upsilon must lie in [0, 1], got {upsilon}")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError("target and online shapes differ")
        if upsilon == 1.0:
            t[...] = o
        elif upsilon:
            t *= 1.0 - upsilon
            t += upsilon * o
    return target


@dataclass
class LrSchedule:
    kind: str = "constant"
    base: float = 3e-4
    total: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if schedule.kind == "constant":
        return schedule.base
    step = min(max(step, 0), schedule.total)
    return schedule.base * 0.5 * (1.0 + math.cos(math.pi * step / schedule.total))


_CKPT_MAGIC = b"SCQC"


def save_checkpoint(path, manifest: dict, tensors: dict):
    """Write a JSON manifest followed by length-prefixed little-endian float32 tensors.

    Tensor order is the manifest's ``tensors`` list, which this function fills
    in with names and shapes.
    """
    manifest = dict(manifest)
    manifest["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for v in tensors.values():
            raw = np.ascontiguousarray(v, dtype="<f4").tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(n))
        tensors = {}
        for entry in manifest["tensors"]:
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            arr = np.frombuffer(fh.read(nbytes), dtype="<f4").astype(float)
            tensors[entry["name"]] = arr.reshape(entry["shape"])
    return manifest, tensors


def mlp_tensors(prefix: str, net: Mlp) -> dict:
    return {f"{prefix}.{i}": p for i, p in enumerate(net.params)}


def load_mlp_tensors(prefix: str, net: Mlp, tensors: dict):
    for i in range(len(net.params)):
        net.params[i][...] = tensors[f"{prefix}.{i}"].reshape(net.params[i].shape)
