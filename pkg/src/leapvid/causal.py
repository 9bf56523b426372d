"""Causal-LeAP: an image latent ``z_t`` and an action latent ``u_t`` drawn after it.

Per step the image posterior sees only frame codes; the action posterior
sees the action code and the already-sampled ``z_t``. Two learned priors
mirror them one step behind. The frame predictor is action-conditioned
through ``alpha_{t-1}``; the action predictor never sees frame codes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .base import NonFiniteLossError, SequenceEstimator, check_sequences
from .gaussian import GaussianParams, kl_diag_gauss, reparam_sample
from .nn import ActionDecoder, ActionEncoder, FrameDecoder, FrameEncoder, Module, Recurrent, decode_frame
from .vgleap import LossResult, StepRecord, _skip_sources, recon_error


@dataclass(frozen=True)
class CausalElboWeights:
    beta: float = 1e-3
    beta_a: float = 1.0
    gamma: float = 1e-3

    def __post_init__(self):
        for name in ("beta", "beta_a", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


class CausalLeapNet(Module):
    def __init__(self, rng, frame_shape=(16, 16, 1), action_dim=2, code_width=64, action_code_width=16,
                 latent_dim=16, action_latent_dim=8, predictor_width=64, action_predictor_width=32,
                 latent_width=32, use_skips=True, prior_sees_current_z=False):
        g, ga, zd, ud = code_width, action_code_width, latent_dim, action_latent_dim
        self.frame_enc = FrameEncoder(rng, frame_shape, g)
        self.frame_dec = FrameDecoder(rng, frame_shape, g, use_skips=use_skips)
        self.action_enc = ActionEncoder(rng, action_dim, ga)
        self.action_dec = ActionDecoder(rng, action_dim, ga)
        self.image_posterior = Recurrent(rng, g, latent_width, 2 * zd)
        self.image_prior = Recurrent(rng, g, latent_width, 2 * zd)
        self.action_posterior = Recurrent(rng, ga + zd, latent_width, 2 * ud)
        self.action_prior = Recurrent(rng, ga + zd, latent_width, 2 * ud)
        self.frame_pred = Recurrent(rng, g + zd + ga, predictor_width, g, squash=True)
        self.action_pred = Recurrent(rng, ga + ud, action_predictor_width, ga, squash=True)
        self.use_skips = use_skips
        self.prior_sees_current_z = prior_sees_current_z
        self.latent_dim, self.action_latent_dim = zd, ud
        self.code_width, self.action_code_width = g, ga


def image_posterior_step(model: CausalLeapNet, h_t, state):
    if h_t.shape[-1] != model.code_width:
        raise ValueError(f"frame code width {h_t.shape[-1]} != {model.code_width}")
    out, state = model.image_posterior(state, h_t)
    return GaussianParams.from_head(out), state


def image_prior_step(model: CausalLeapNet, h_prev, state):
    if h_prev.shape[-1] != model.code_width:
        raise ValueError(f"frame code width {h_prev.shape[-1]} != {model.code_width}")
    out, state = model.image_prior(state, h_prev)
    return GaussianParams.from_head(out), state


def action_posterior_step(model: CausalLeapNet, alpha_t, z_t, state):
    """Posterior over ``u_t``; ``z_t`` must already be sampled for this step."""
    if z_t is None:
        raise ValueError("action_posterior_step needs the current image latent z_t")
    out, state = model.action_posterior(state, ad.concatenate([alpha_t, z_t], axis=1))
    return GaussianParams.from_head(out), state


def action_prior_step(model: CausalLeapNet, alpha_prev, z_cond, state):
    """Learned action prior from ``alpha_{t-1}`` and ``z_{t-1}`` (or ``z_t`` when so configured)."""
    if z_cond is None:
        raise ValueError("action_prior_step needs an image latent")
    out, state = model.action_prior(state, ad.concatenate([alpha_prev, z_cond], axis=1))
    return GaussianParams.from_head(out), state


def predict_steps(model: CausalLeapNet, h_prev, alpha_prev, z_t, u_t, states):
    """Frame predictor on ``(h_{t-1}, z_t, alpha_{t-1})``, action predictor on ``(alpha_{t-1}, u_t)``."""
    if states is None or len(states) != 2 or states[0] is None or states[1] is None:
        raise ValueError("predict_steps: missing recurrent state")
    if states[0].width != model.frame_pred.lstm.width or states[1].width != model.action_pred.lstm.width:
        raise ValueError("predict_steps: recurrent state width mismatch")
    h_pred, fs = model.frame_pred(states[0], ad.concatenate([h_prev, z_t, alpha_prev], axis=1))
    a_pred, as_ = model.action_pred(states[1], ad.concatenate([alpha_prev, u_t], axis=1))
    return h_pred, a_pred, (fs, as_)


def _initial_states(model, b):
    return {
        "zpost": model.image_posterior.initial_state(b),
        "zprior": model.image_prior.initial_state(b),
        "upost": model.action_posterior.initial_state(b),
        "uprior": model.action_prior.initial_state(b),
        "pred": (model.frame_pred.initial_state(b), model.action_pred.initial_state(b)),
    }


def causal_elbo_loss(model: CausalLeapNet, frames, actions, weights: CausalElboWeights = CausalElboWeights(),
                     mode="l2", rng=None, conditioning=5, noise=None) -> LossResult:
    """Teacher-forced negative causal ELBO.

    ``loss = sum_t [recon_x + beta * KL_z + beta_a * recon_a + gamma * KL_u]``.
    ``noise`` optionally supplies ``(z_noise, u_noise)`` arrays indexed by step.
    """
    b, length = frames.shape[:2]
    if length < 2 or length < conditioning + 1:
        raise ValueError(f"window of length {length} too short for conditioning {conditioning}")
    rng = rng if rng is not None else np.random.default_rng(0)
    fshape = frames.shape[2:]
    zd, ud = model.latent_dim, model.action_latent_dim
    dt = ad.get_dtype()

    enc = model.frame_enc(ad.Value(frames.reshape(b * length, *fshape)))
    h_all = ad.reshape(enc.code, (b, length, -1))
    alpha_all = ad.reshape(model.action_enc(ad.Value(actions.reshape(b * length, -1))), (b, length, -1))
    st = _initial_states(model, b)
    z_prev = ad.Value(np.zeros((b, zd)))
    steps, h_preds, a_preds = [], [], []
    for t in range(1, length):
        h_t, h_p = h_all[:, t], h_all[:, t - 1]
        a_t, a_p = alpha_all[:, t], alpha_all[:, t - 1]
        zpost, st["zpost"] = image_posterior_step(model, h_t, st["zpost"])
        zprior, st["zprior"] = image_prior_step(model, h_p, st["zprior"])
        ez = noise[0][t] if noise is not None else rng.standard_normal((b, zd))
        z = reparam_sample(zpost, ez.astype(dt))
        upost, st["upost"] = action_posterior_step(model, a_t, z, st["upost"])
        uprior, st["uprior"] = action_prior_step(model, a_p, z if model.prior_sees_current_z else z_prev,
                                                 st["uprior"])
        eu = noise[1][t] if noise is not None else rng.standard_normal((b, ud))
        u = reparam_sample(upost, eu.astype(dt))
        h_pred, a_pred, st["pred"] = predict_steps(model, h_p, a_p, z, u, st["pred"])
        h_preds.append(h_pred)
        a_preds.append(a_pred)
        rec = StepRecord(t, zpost, zprior, z)
        rec.extra.update(action_posterior=upost, action_prior=uprior, u=u)
        steps.append(rec)
        z_prev = z

    n_pred = length - 1
    codes = ad.reshape(ad.concatenate([ad.reshape(h, (b, 1, -1)) for h in h_preds], axis=1), (b * n_pred, -1))
    skips = None
    if model.use_skips:
        src = _skip_sources(length, conditioning)
        skips = []
        for f in enc.skips:
            f = ad.reshape(f, (b, length, *f.shape[1:]))
            skips.append(ad.reshape(ad.concatenate([f[:, s:s + 1] for s in src], axis=1),
                                    (b * n_pred, *f.shape[2:])))
    x_pred = ad.reshape(decode_frame(codes, model.frame_dec, skips), (b, n_pred, *fshape))
    a_codes = ad.reshape(ad.concatenate([ad.reshape(a, (b, 1, -1)) for a in a_preds], axis=1), (b * n_pred, -1))
    a_pred_all = ad.reshape(model.action_dec(a_codes), (b, n_pred, -1))

    terms = {"recon_x": [], "recon_a": [], "kl": [], "kl_u": []}
    total = None
    for i, rec in enumerate(steps):
        t = rec.t
        rx = recon_error(x_pred[:, i], frames[:, t], mode)
        ra = recon_error(a_pred_all[:, i], actions[:, t], mode)
        klz = kl_diag_gauss(rec.posterior, rec.prior)
        klu = kl_diag_gauss(rec.extra["action_posterior"], rec.extra["action_prior"])
        rec.frame_pred, rec.action_pred = x_pred[:, i], a_pred_all[:, i]
        step_loss = rx + klz * weights.beta + ra * weights.beta_a + klu * weights.gamma
        for k, v in (("recon_x", rx), ("recon_a", ra), ("kl", klz), ("kl_u", klu)):
            terms[k].append(float(v.data))
        if not np.isfinite(step_loss.data):
            raise NonFiniteLossError(f"non-finite loss at timestep {t}", timestep=t)
        total = step_loss if total is None else total + step_loss
    per_step = {k: np.array(v) for k, v in terms.items()}
    comps = {k: float(v.sum()) for k, v in per_step.items()}
    comps["loss"] = float(total.data)
    return LossResult(total, comps, steps, per_step)


def causal_rollout(model: CausalLeapNet, frames_prefix, actions_prefix, horizon, rng=None):
    """Prefix warm-up with posteriors, then prior sampling: ``z_t``, then ``u_t``, then predictions."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    dt = ad.get_dtype()
    frames_prefix = np.asarray(frames_prefix, dtype=dt)
    actions_prefix = np.asarray(actions_prefix, dtype=dt)
    b, c = frames_prefix.shape[:2]
    if c < 1:
        raise ValueError("need at least one conditioning frame")
    fshape, n = frames_prefix.shape[2:], actions_prefix.shape[-1]
    out_x = np.zeros((b, horizon, *fshape), dtype=dt)
    out_a = np.zeros((b, horizon, n), dtype=dt)
    if horizon == 0:
        return out_x, out_a
    rng = rng if rng is not None else np.random.default_rng(0)
    zd, ud = model.latent_dim, model.action_latent_dim
    with ad.no_grad():
        enc = model.frame_enc(ad.Value(frames_prefix.reshape(b * c, *fshape)))
        h_all = enc.code.data.reshape(b, c, -1)
        alpha_all = model.action_enc(ad.Value(actions_prefix.reshape(b * c, n))).data.reshape(b, c, -1)
        skips = None
        if model.use_skips:
            skips = [ad.Value(f.data.reshape(b, c, *f.shape[1:])[:, c - 1]) for f in enc.skips]
        st = _initial_states(model, b)
        z_prev = ad.Value(np.zeros((b, zd)))
        for t in range(1, c):
            h_p, a_p = ad.Value(h_all[:, t - 1]), ad.Value(alpha_all[:, t - 1])
            zpost, st["zpost"] = image_posterior_step(model, ad.Value(h_all[:, t]), st["zpost"])
            _, st["zprior"] = image_prior_step(model, h_p, st["zprior"])
            z = reparam_sample(zpost, rng.standard_normal((b, zd)).astype(dt))
            upost, st["upost"] = action_posterior_step(model, ad.Value(alpha_all[:, t]), z, st["upost"])
            _, st["uprior"] = action_prior_step(model, a_p, z if model.prior_sees_current_z else z_prev,
                                                st["uprior"])
            u = reparam_sample(upost, rng.standard_normal((b, ud)).astype(dt))
            _, _, st["pred"] = predict_steps(model, h_p, a_p, z, u, st["pred"])
            z_prev = z
        h_p, a_p = ad.Value(h_all[:, c - 1]), ad.Value(alpha_all[:, c - 1])
        for i in range(horizon):
            zprior, st["zprior"] = image_prior_step(model, h_p, st["zprior"])
            z = reparam_sample(zprior, rng.standard_normal((b, zd)).astype(dt))
            uprior, st["uprior"] = action_prior_step(model, a_p, z if model.prior_sees_current_z else z_prev,
                                                     st["uprior"])
            u = reparam_sample(uprior, rng.standard_normal((b, ud)).astype(dt))
            h_pred, a_pred, st["pred"] = predict_steps(model, h_p, a_p, z, u, st["pred"])
            x = decode_frame(h_pred, model.frame_dec, skips)
            a = model.action_dec(a_pred)
            out_x[:, i], out_a[:, i] = x.data, a.data
            h_p, a_p = model.frame_enc(x).code, model.action_enc(a)
            z_prev = z
    return out_x, out_a


class CausalLeap(SequenceEstimator):
    """Causal action-prior video predictor (Causal-LeAP).

    ``prior_sees_current_z`` switches the action prior from ``z_{t-1}``
    to the same-step ``z_t``.
    """

    def __init__(self, use_skips=True, latent_dim=16, action_latent_dim=8, code_width=64,
                 action_code_width=16, predictor_width=64, action_predictor_width=32, latent_width=32,
                 beta=1e-3, beta_a=1.0, gamma=1e-3, recon="l2", prior_sees_current_z=False,
                 conditioning=5, horizon=10, batch_size=16, n_steps=1000, learning_rate=2e-3,
                 clip_norm=10.0, random_state=0):
        self.use_skips = use_skips
        self.latent_dim = latent_dim
        self.action_latent_dim = action_latent_dim
        self.code_width = code_width
        self.action_code_width = action_code_width
        self.predictor_width = predictor_width
        self.action_predictor_width = action_predictor_width
        self.latent_width = latent_width
        self.beta = beta
        self.beta_a = beta_a
        self.gamma = gamma
        self.recon = recon
        self.prior_sees_current_z = prior_sees_current_z
        self.conditioning = conditioning
        self.horizon = horizon
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.random_state = random_state

    _log_columns = ("loss", "recon_x", "recon_a", "kl", "kl_u")

    def _build(self, rng, frame_shape, action_dim):
        return CausalLeapNet(rng, frame_shape, action_dim, self.code_width, self.action_code_width,
                             self.latent_dim, self.action_latent_dim, self.predictor_width,
                             self.action_predictor_width, self.latent_width, self.use_skips,
                             self.prior_sees_current_z)

    @property
    def weights(self):
        return CausalElboWeights(self.beta, self.beta_a, self.gamma)

    def _loss(self, net, frames, actions, rng):
        res = causal_elbo_loss(net, frames, actions, self.weights, self.recon, rng, self.conditioning)
        return res.loss, res.components

    def predict(self, X, y=None, horizon=None, random_state=None):
        frames, actions = check_sequences(X, y)
        rng = np.random.default_rng(random_state)
        return causal_rollout(self.net_, frames, actions, self.horizon if horizon is None else horizon, rng)

    def score(self, X, y=None):
        frames, actions = check_sequences(X, y, min_length=self._window())
        w = self._window()
        with ad.no_grad():
            res = causal_elbo_loss(self.net_, frames[:, :w], actions[:, :w], self.weights, self.recon,
                                   np.random.default_rng(0), self.conditioning)
        return -res.components["loss"]
