"""Conditional VAE behavior model used as an out-of-distribution action detector.

An action is flagged OOD when its reconstruction distance is at least the
threshold ``delta``, the dataset-mean reconstruction distance.  Reconstruction
feeds the encoder's posterior mean to the decoder, so the classification is a
deterministic function of (model, threshold, state, action).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0
DEFAULT_KL_WEIGHT = 0.5


@dataclass
class CvaeModel:
    encoder: nn.Mlp
    decoder: nn.Mlp
    low: np.ndarray
    high: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.encoder.sizes[0] - self.action_dim

    @property
    def action_dim(self) -> int:
        return self.decoder.sizes[-1]

    @property
    def latent_dim(self) -> int:
        return self.encoder.sizes[-1] // 2

    @property
    def params(self):
        return self.encoder.params + self.decoder.params

    def copy(self) -> "CvaeModel":
        return CvaeModel(self.encoder.copy(), self.decoder.copy(), self.low.copy(), self.high.copy())


def init_cvae(state_dim, action_dim, low, high, hidden=750, rng=None, dtype=np.float64) -> CvaeModel:
    """Encoder ``(s, a) -> (mu, logvar)``, decoder ``(s, z) -> a`` with a zero output layer."""
    rng = np.random.default_rng(0) if rng is None else rng
    latent = 2 * action_dim
    enc = nn.Mlp((state_dim + action_dim, hidden, 2 * latent), rng, dtype=dtype)
    dec = nn.Mlp((state_dim + latent, hidden, action_dim), rng, zero_output=True, dtype=dtype)
    low = np.broadcast_to(np.asarray(low, dtype=dtype), (action_dim,)).copy()
    high = np.broadcast_to(np.asarray(high, dtype=dtype), (action_dim,)).copy()
    return CvaeModel(enc, dec, low, high)


def _check(model: CvaeModel, state, action):
    s = np.asarray(state, dtype=model.encoder.dtype)
    a = np.asarray(action, dtype=model.encoder.dtype)
    if s.ndim == 1:
        s, a = s[None], a[None]
    if s.shape[-1] != model.state_dim or a.shape[-1] != model.action_dim:
        raise ValueError(f"expected state dim {model.state_dim} and action dim {model.action_dim}, "
                         f"got {s.shape[-1]} and {a.shape[-1]}")
    if len(s) != len(a):
        raise ValueError("state and action batches differ in length")
    return s, a


def _encode(model, s, a):
    out, cache = model.encoder.forward(np.concatenate([s, a], axis=-1))
    k = out.shape[-1] // 2
    mu, raw = out[..., :k], out[..., k:]
    logvar = np.minimum(np.maximum(raw, LOGVAR_MIN), LOGVAR_MAX)
    return mu, logvar, (raw > LOGVAR_MIN) & (raw < LOGVAR_MAX), cache


def _decode(model, s, z):
    out, cache = model.decoder.forward(np.concatenate([s, z], axis=-1))
    inside = (out > model.low) & (out < model.high)
    return np.minimum(np.maximum(out, model.low), model.high), inside, cache


def reconstruct(model: CvaeModel, state, action):
    s, a = _check(model, state, action)
    mu, _, _, _ = _encode(model, s, a)
    return _decode(model, s, mu)[0]


def reconstruction_distance(model: CvaeModel, state, action):
    s, a = _check(model, state, action)
    mu = _encode(model, s, a)[0]
    return np.linalg.norm(a - _decode(model, s, mu)[0], axis=-1)


def elbo_loss(model: CvaeModel, state, action, kl_weight=DEFAULT_KL_WEIGHT, noise=None, rng=None):
    """Negative ELBO: mean squared reconstruction error plus ``kl_weight`` times mean KL.

    The latent is ``mu + exp(logvar / 2) * noise``; pass ``noise`` explicitly for
    reproducible evaluation, or an ``rng`` to draw it.
    Returns ``(loss, grads, info)`` with grads ordered as ``model.params``.
    """
    s, a = _check(model, state, action)
    n = len(s)
    mu, logvar, lv_inside, enc_cache = _encode(model, s, a)
    if noise is None:
        noise = (np.random.default_rng() if rng is None else rng).standard_normal(mu.shape)
    std = np.exp(0.5 * logvar)
    z = mu + std * noise
    recon, inside, dec_cache = _decode(model, s, z)
    resid = recon - a
    rec = float(np.sum(resid * resid) / n)
    kl = float(0.5 * np.sum(mu * mu + std * std - 1.0 - logvar) / n)
    loss = rec + kl_weight * kl

    g_out = 2.0 * resid / n * inside
    dec_grads, g_in = model.decoder.backward(dec_cache, g_out)
    g_z = g_in[:, model.state_dim:]
    g_mu = g_z + kl_weight * mu / n
    g_logvar = (g_z * noise * 0.5 * std + kl_weight * 0.5 * (std * std - 1.0) / n) * lv_inside
    enc_grads, _ = model.encoder.backward(enc_cache, np.concatenate([g_mu, g_logvar], axis=-1),
                                          input_grad=False)
    grads = nn.GradList(enc_grads + dec_grads)
    grads.flat = (enc_grads.flat, dec_grads.flat)
    return loss, grads, {"reconstruction": rec, "kl": kl}


@dataclass(frozen=True)
class OodThreshold:
    """Running mean of reconstruction distances; ``delta`` is the current mean."""

    delta: float = 0.0
    total: float = 0.0
    count: int = 0


def update_delta(threshold: OodThreshold, distances) -> OodThreshold:
    d = np.asarray(distances, dtype=float).ravel()
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    if d.size == 0:
        return threshold
    total = threshold.total + float(np.sum(d))
    count = threshold.count + d.size
    return replace(threshold, total=total, count=count, delta=total / count)


def refresh_threshold(model: CvaeModel, states, actions, chunk=4096) -> OodThreshold:
    """Full frozen-model pass: ``delta`` becomes the dataset-mean reconstruction distance."""
    thr = OodThreshold()
    for i in range(0, len(states), chunk):
        thr = update_delta(thr, reconstruction_distance(model, states[i:i + chunk], actions[i:i + chunk]))
    return thr


def is_ood(model: CvaeModel, threshold: OodThreshold, state, action):
    """True where the reconstruction distance is at least ``delta``."""
    return reconstruction_distance(model, state, action) >= threshold.delta


class CvaeTrainer:
    """Model plus Adam state; one call to ``step`` is one minibatch update."""

    def __init__(self, model: CvaeModel, lr=1e-3, kl_weight=DEFAULT_KL_WEIGHT):
        self.model = model
        self.kl_weight = kl_weight
        self.opt = nn.AdamState.for_params(self._flat(), lr)

    def _flat(self):
        return [self.model.encoder.flat, self.model.decoder.flat]

    def step(self, states, actions, rng):
        loss, grads, info = elbo_loss(self.model, states, actions, self.kl_weight, rng=rng)
        nn.adam_step(self.opt, self._flat(), list(grads.flat))
        return loss, info


class CvaeOodDetector(BaseEstimator):
    """Estimator wrapper: ``fit(states, actions)`` then ``predict(states, actions)`` gives OOD flags."""

    def __init__(self, hidden=750, kl_weight=DEFAULT_KL_WEIGHT, lr=1e-3, batch_size=256,
                 n_steps=3000, action_low=-1.0, action_high=1.0, seed=0):
        self.hidden = hidden
        self.kl_weight = kl_weight
        self.lr = lr
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.action_low = action_low
        self.action_high = action_high
        self.seed = seed

    def _validate(self, states, actions):
        s = check_array(states, dtype=np.float64, ensure_2d=True)
        a = check_array(actions, dtype=np.float64, ensure_2d=True)
        if len(s) != len(a):
            raise ValueError("states and actions differ in length")
        return s, a

    def fit(self, states, actions):
        s, a = self._validate(states, actions)
        rng = np.random.default_rng(self.seed)
        model = init_cvae(s.shape[1], a.shape[1], self.action_low, self.action_high, self.hidden, rng)
        trainer = CvaeTrainer(model, self.lr, self.kl_weight)
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            idx = rng.integers(0, len(s), self.batch_size)
            loss, _ = trainer.step(s[idx], a[idx], rng)
            self.loss_curve_.append(loss)
        self.model_ = model
        self.threshold_ = refresh_threshold(model, s, a)
        return self

    def reconstruct(self, states, actions):
        check_is_fitted(self, "model_")
        return reconstruct(self.model_, *self._validate(states, actions))

    def score_samples(self, states, actions):
        """Reconstruction distance per row (larger means more out-of-distribution)."""
        check_is_fitted(self, "model_")
        return reconstruction_distance(self.model_, *self._validate(states, actions))

    def predict(self, states, actions):
        check_is_fitted(self, "model_")
        return is_ood(self.model_, self.threshold_, *self._validate(states, actions))
