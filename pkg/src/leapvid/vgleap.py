"""VG-LeAP: one latent process for the joint image-action state.

A posterior RNN sees ``(h_t, alpha_t)``, a learned prior RNN sees
``(h_{t-1}, alpha_{t-1})``, and two predictor RNNs advance on the shared
sample ``z_t`` to produce the next frame code and action code. With
``use_actions=False`` every action pathway is disconnected and the model is
the image-only learned-prior baseline (``svg-lp``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .base import NonFiniteLossError, SequenceEstimator, check_sequences
from .gaussian import GaussianParams, kl_diag_gauss, reparam_sample
from .nn import (ActionDecoder, ActionEncoder, FrameDecoder, FrameEncoder, Module, Recurrent,
                 decode_frame)


@dataclass(frozen=True)
class ElboWeights:
    beta: float = 1e-3
    beta_a: float = 1.0

    def __post_init__(self):
        for name in ("beta", "beta_a"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class StepRecord:
    """Everything one teacher-forced step produced; used for logging and audits."""

    t: int
    posterior: GaussianParams
    prior: GaussianParams
    z: ad.Value
    frame_pred: ad.Value | None = None
    action_pred: ad.Value | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class LossResult:
    loss: ad.Value
    components: dict
    steps: list
    per_step: dict


def recon_error(pred, target, mode="l2"):
    """Mean |pred - target|^p over batch and feature axes."""
    diff = pred - target
    if mode == "l2":
        return ad.mean(diff * diff)
    if mode == "l1":
        return ad.mean(ad.abs_(diff))
    raise ValueError(f"unknown reconstruction mode {mode!r}; expected 'l1' or 'l2'")


def _skip_sources(length, conditioning):
    # decoded frame t uses encoder features of frame min(t-1, c-1)
    return [min(t - 1, conditioning - 1) for t in range(1, length)]


class VgLeapNet(Module):
    def __init__(self, rng, frame_shape=(16, 16, 1), action_dim=2, code_width=64, action_code_width=16,
                 latent_dim=16, predictor_width=64, latent_width=32, use_actions=True, use_skips=True):
        g, ga, zd = code_width, action_code_width, latent_dim
        self.frame_enc = FrameEncoder(rng, frame_shape, g)
        self.frame_dec = FrameDecoder(rng, frame_shape, g, use_skips=use_skips)
        # action pathway exists even when ablated so both variants share a layout
        self.action_enc = ActionEncoder(rng, action_dim, ga)
        self.action_dec = ActionDecoder(rng, action_dim, ga)
        extra = ga if use_actions else 0
        self.posterior = Recurrent(rng, g + extra, latent_width, 2 * zd)
        self.prior = Recurrent(rng, g + extra, latent_width, 2 * zd)
        self.frame_pred = Recurrent(rng, g + zd, predictor_width, g, squash=True)
        self.action_pred = Recurrent(rng, ga + zd, predictor_width, ga, squash=True)
        self.use_actions = use_actions
        self.use_skips = use_skips
        self.latent_dim = latent_dim
        self.code_width, self.action_code_width = g, ga

    def action_parameters(self):
        """Parameters belonging only to the action pathway."""
        named = self.named_parameters()
        return {k: v for k, v in named.items() if k.split(".")[0] in ("action_enc", "action_dec", "action_pred")}


def _check_code(model, h, alpha):
    if h.shape[-1] != model.code_width:
        raise ValueError(f"frame code width {h.shape[-1]} != {model.code_width}")
    if model.use_actions and alpha.shape[-1] != model.action_code_width:
        raise ValueError(f"action code width {alpha.shape[-1]} != {model.action_code_width}")


def _latent_input(model, h, alpha):
    _check_code(model, h, alpha)
    return ad.concatenate([h, alpha], axis=1) if model.use_actions else h


def posterior_step(model: VgLeapNet, h_t, alpha_t, state):
    """Posterior over ``z_t`` given the current codes; history lives in ``state``."""
    out, state = model.posterior(state, _latent_input(model, h_t, alpha_t))
    return GaussianParams.from_head(out), state


def prior_step(model: VgLeapNet, h_prev, alpha_prev, state):
    """Learned prior over ``z_t`` from the previous step's codes."""
    out, state = model.prior(state, _latent_input(model, h_prev, alpha_prev))
    return GaussianParams.from_head(out), state


def predict_step(model: VgLeapNet, h_prev, alpha_prev, z_t, states):
    """Advance both predictors on the shared ``z_t``.

    ``states`` is ``(frame_state, action_state)``; the action prediction is
    ``None`` when the action pathway is ablated.
    """
    if states is None or states[0] is None or (model.use_actions and states[1] is None):
        raise ValueError("predict_step: missing recurrent state")
    h_pred, fs = model.frame_pred(states[0], ad.concatenate([h_prev, z_t], axis=1))
    if not model.use_actions:
        return h_pred, None, (fs, states[1])
    a_pred, as_ = model.action_pred(states[1], ad.concatenate([alpha_prev, z_t], axis=1))
    return h_pred, a_pred, (fs, as_)


def _initial_states(model, batch):
    return {
        "post": model.posterior.initial_state(batch),
        "prior": model.prior.initial_state(batch),
        "pred": (model.frame_pred.initial_state(batch), model.action_pred.initial_state(batch)),
    }


def elbo_loss(model: VgLeapNet, frames, actions, weights: ElboWeights = ElboWeights(), mode="l2",
              rng=None, conditioning=5, noise=None) -> LossResult:
    """Teacher-forced negative ELBO over ``t = 2..L`` of a batch of windows.

    ``loss = sum_t [recon_x(t) + beta_a * recon_a(t) + beta * KL(t)]``, where
    reconstruction errors are per-element means and the KL is summed over
    latent dimensions and averaged over the batch.
    """
    frames = frames if isinstance(frames, np.ndarray) else np.asarray(frames)
    b, length = frames.shape[:2]
    if length < 2 or length < conditioning + 1:
        raise ValueError(f"window of length {length} too short for conditioning {conditioning}")
    rng = rng if rng is not None else np.random.default_rng(0)
    fshape = frames.shape[2:]

    enc = model.frame_enc(ad.Value(frames.reshape(b * length, *fshape)))
    h_all = ad.reshape(enc.code, (b, length, -1))
    alpha_all = ad.reshape(model.action_enc(ad.Value(actions.reshape(b * length, -1))), (b, length, -1))
    st = _initial_states(model, b)
    steps, h_preds, a_preds = [], [], []
    zd = model.latent_dim
    for t in range(1, length):
        h_t, h_p = h_all[:, t], h_all[:, t - 1]
        a_t, a_p = alpha_all[:, t], alpha_all[:, t - 1]
        post, st["post"] = posterior_step(model, h_t, a_t, st["post"])
        prior, st["prior"] = prior_step(model, h_p, a_p, st["prior"])
        eps = noise[t] if noise is not None else rng.standard_normal((b, zd))
        z = reparam_sample(post, eps.astype(ad.get_dtype()))
        h_pred, a_pred, st["pred"] = predict_step(model, h_p, a_p, z, st["pred"])
        h_preds.append(h_pred)
        a_preds.append(a_pred)
        steps.append(StepRecord(t, post, prior, z))

    n_pred = length - 1
    codes = ad.reshape(ad.concatenate([ad.reshape(h, (b, 1, -1)) for h in h_preds], axis=1), (b * n_pred, -1))
    skips = None
    if model.use_skips:
        src = np.array(_skip_sources(length, conditioning))
        skips = []
        for f in enc.skips:
            f = ad.reshape(f, (b, length, *f.shape[1:]))
            skips.append(ad.reshape(ad.concatenate([f[:, s:s + 1] for s in src], axis=1),
                                    (b * n_pred, *f.shape[2:])))
    x_pred = ad.reshape(decode_frame(codes, model.frame_dec, skips), (b, n_pred, *fshape))
    if model.use_actions:
        a_codes = ad.reshape(ad.concatenate([ad.reshape(a, (b, 1, -1)) for a in a_preds], axis=1),
                             (b * n_pred, -1))
        a_pred_all = ad.reshape(model.action_dec(a_codes), (b, n_pred, -1))

    terms = {"recon_x": [], "recon_a": [], "kl": []}
    total = None
    for i, rec in enumerate(steps):
        t = rec.t
        rx = recon_error(x_pred[:, i], frames[:, t], mode)
        kl = kl_diag_gauss(rec.posterior, rec.prior)
        rec.frame_pred = x_pred[:, i]
        step_loss = rx + kl * weights.beta
        if model.use_actions:
            ra = recon_error(a_pred_all[:, i], actions[:, t], mode)
            rec.action_pred = a_pred_all[:, i]
            step_loss = step_loss + ra * weights.beta_a
        else:
            ra = ad.Value(0.0)
        for k, v in (("recon_x", rx), ("recon_a", ra), ("kl", kl)):
            terms[k].append(float(v.data))
        if not np.isfinite(step_loss.data):
            raise NonFiniteLossError(f"non-finite loss at timestep {t}", timestep=t)
        total = step_loss if total is None else total + step_loss
    per_step = {k: np.array(v) for k, v in terms.items()}
    comps = {k: float(v.sum()) for k, v in per_step.items()}
    comps["loss"] = float(total.data)
    return LossResult(total, comps, steps, per_step)


def rollout(model: VgLeapNet, frames_prefix, actions_prefix, horizon, rng=None):
    """Warm up on a ground-truth prefix, then generate ``horizon`` steps.

    During the prefix the latent comes from the posterior (the frames are
    observed); afterwards ``z_t`` is drawn from the learned prior and the
    model's own predictions are fed back. Returns ``(frames, actions)`` with
    actions ``None`` for the image-only variant.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    frames_prefix = np.asarray(frames_prefix, dtype=ad.get_dtype())
    actions_prefix = np.asarray(actions_prefix, dtype=ad.get_dtype())
    b, c = frames_prefix.shape[:2]
    if c < 1:
        raise ValueError("need at least one conditioning frame")
    fshape = frames_prefix.shape[2:]
    n = actions_prefix.shape[-1]
    out_x = np.zeros((b, horizon, *fshape), dtype=frames_prefix.dtype)
    out_a = np.zeros((b, horizon, n), dtype=frames_prefix.dtype)
    if horizon == 0:
        return out_x, (out_a if model.use_actions else None)
    rng = rng if rng is not None else np.random.default_rng(0)
    zd = model.latent_dim
    with ad.no_grad():
        enc = model.frame_enc(ad.Value(frames_prefix.reshape(b * c, *fshape)))
        h_all = enc.code.data.reshape(b, c, -1)
        alpha_all = model.action_enc(ad.Value(actions_prefix.reshape(b * c, n))).data.reshape(b, c, -1)
        skips = None
        if model.use_skips:
            skips = [ad.Value(f.data.reshape(b, c, *f.shape[1:])[:, c - 1]) for f in enc.skips]
        st = _initial_states(model, b)
        for t in range(1, c):
            h_p, a_p = ad.Value(h_all[:, t - 1]), ad.Value(alpha_all[:, t - 1])
            post, st["post"] = posterior_step(model, ad.Value(h_all[:, t]), ad.Value(alpha_all[:, t]), st["post"])
            _, st["prior"] = prior_step(model, h_p, a_p, st["prior"])
            z = reparam_sample(post, rng.standard_normal((b, zd)).astype(ad.get_dtype()))
            _, _, st["pred"] = predict_step(model, h_p, a_p, z, st["pred"])
        h_p, a_p = ad.Value(h_all[:, c - 1]), ad.Value(alpha_all[:, c - 1])
        for i in range(horizon):
            prior, st["prior"] = prior_step(model, h_p, a_p, st["prior"])
            z = reparam_sample(prior, rng.standard_normal((b, zd)).astype(ad.get_dtype()))
            h_pred, a_pred, st["pred"] = predict_step(model, h_p, a_p, z, st["pred"])
            x = decode_frame(h_pred, model.frame_dec, skips)
            out_x[:, i] = x.data
            h_p = model.frame_enc(x).code
            if model.use_actions:
                a = model.action_dec(a_pred)
                out_a[:, i] = a.data
                a_p = model.action_enc(a)
    return out_x, (out_a if model.use_actions else None)


class VGLeap(SequenceEstimator):
    """Action-augmented stochastic video predictor (VG-LeAP).

    Parameters
    ----------
    use_actions : bool
        ``False`` gives the image-only learned-prior baseline.
    conditioning, horizon : int
        Training windows span ``conditioning + horizon`` frames.
    beta, beta_a : float
        Weights of the KL term and of the action reconstruction term.
    recon : {"l2", "l1"}
        Reconstruction norm.
    """

    def __init__(self, use_actions=True, use_skips=True, latent_dim=16, code_width=64,
                 action_code_width=16, predictor_width=64, latent_width=32, beta=1e-3, beta_a=1.0,
                 recon="l2", conditioning=5, horizon=10, batch_size=16, n_steps=1000,
                 learning_rate=2e-3, clip_norm=10.0, random_state=0):
        self.use_actions = use_actions
        self.use_skips = use_skips
        self.latent_dim = latent_dim
        self.code_width = code_width
        self.action_code_width = action_code_width
        self.predictor_width = predictor_width
        self.latent_width = latent_width
        self.beta = beta
        self.beta_a = beta_a
        self.recon = recon
        self.conditioning = conditioning
        self.horizon = horizon
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.random_state = random_state

    _log_columns = ("loss", "recon_x", "recon_a", "kl")

    def _build(self, rng, frame_shape, action_dim):
        return VgLeapNet(rng, frame_shape, action_dim, self.code_width, self.action_code_width,
                         self.latent_dim, self.predictor_width, self.latent_width,
                         self.use_actions, self.use_skips)

    @property
    def weights(self):
        return ElboWeights(self.beta, self.beta_a)

    def _loss(self, net, frames, actions, rng):
        res = elbo_loss(net, frames, actions, self.weights, self.recon, rng, self.conditioning)
        return res.loss, res.components

    def predict(self, X, y=None, horizon=None, random_state=None):
        """Sample one future of ``horizon`` steps for each prefix in ``(X, y)``."""
        frames, actions = check_sequences(X, y)
        rng = np.random.default_rng(random_state)
        return rollout(self.net_, frames, actions, self.horizon if horizon is None else horizon, rng)

    def score(self, X, y=None):
        """Negative teacher-forced loss on ``(X, y)`` windows of the training length."""
        frames, actions = check_sequences(X, y, min_length=self._window())
        with ad.no_grad():
            res = elbo_loss(self.net_, frames[:, :self._window()], actions[:, :self._window()],
                            self.weights, self.recon, np.random.default_rng(0), self.conditioning)
        return -res.components["loss"]
