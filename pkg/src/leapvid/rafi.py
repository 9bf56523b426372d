"""RAFI: flow matching over autoencoder latents with action channels.

Frames are compressed by a small convolutional autoencoder; each latent
grid gets the action vector appended as spatially constant channels. A
U-shaped convolutional regressor learns the velocity of the
optimal-transport path from noise to the next augmented latent, given the
previous latent and an earlier one. Generation integrates that velocity
with Euler steps, one frame at a time.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .base import NonFiniteLossError, SequenceEstimator, TrainingLog, check_sequences
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Conv2d, Linear, Module, depth_to_space
from .optim import Adam

SIGMA_MIN = 0.1
DENOM_GUARD = 1e-6


class AutoencoderQualityError(RuntimeError):
    """The autoencoder missed its held-out PSNR target within the step budget."""

    def __init__(self, message, psnr):
        super().__init__(message)
        self.psnr = psnr


# ---------------------------------------------------------------------------
# autoencoder

class AutoencoderNet(Module):
    def __init__(self, rng, frame_shape=(16, 16, 1), latent_channels=8, width=32):
        c = frame_shape[2]
        self.enc1 = Conv2d(rng, c, width, 4, stride=2, padding=1)
        self.enc2 = Conv2d(rng, width, width, 4, stride=2, padding=1)
        self.enc3 = Conv2d(rng, width, latent_channels, 3, padding=1, gain=1.0)
        self.dec1 = Conv2d(rng, latent_channels, width, 3, padding=1)
        self.dec2 = Conv2d(rng, width, 4 * width, 3, padding=1)
        self.dec3 = Conv2d(rng, width, 4 * c, 3, padding=1, gain=1.0)

    def encode(self, x):
        return self.enc3(ad.relu(self.enc2(ad.relu(self.enc1(x)))))

    def decode(self, z):
        y = ad.relu(self.dec1(z))
        y = ad.relu(depth_to_space(self.dec2(y)))
        return ad.sigmoid(depth_to_space(self.dec3(y)))


def _psnr_batch(pred, gt):
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    return 100.0 if mse == 0 else min(100.0, 10.0 * np.log10(1.0 / mse))


def _flatten_frames(X):
    X = np.asarray(X, dtype=ad.get_dtype())
    if X.ndim == 5:
        X = X.reshape(-1, *X.shape[2:])
    if X.ndim != 4:
        raise ValueError(f"expected frames shaped (N, H, W, C) or (N, T, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no frames given")
    if not np.isfinite(X).all() or X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("frame pixels must be finite and lie in [0, 1]")
    return X


class FrameAutoencoder(TransformerMixin, BaseEstimator):
    """Convolutional autoencoder from ``H x W x C`` frames to ``H/4 x W/4 x k`` latents.

    ``transform`` returns latents standardised per channel (statistics from
    the training frames); ``inverse_transform`` undoes that and decodes.
    With ``min_psnr`` set, ``fit`` raises :class:`AutoencoderQualityError`
    when held-out PSNR on ``validation`` stays below it.
    """

    def __init__(self, latent_channels=8, width=32, n_steps=3000, batch_size=64, learning_rate=2e-3,
                 min_psnr=28.0, random_state=0):
        self.latent_channels = latent_channels
        self.width = width
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.min_psnr = min_psnr
        self.random_state = random_state

    def _build(self, frame_shape):
        h, w, _ = frame_shape
        if h % 4 or w % 4:
            raise ValueError("frame height and width must be divisible by 4")
        rng = np.random.default_rng(self.random_state)
        self.net_ = AutoencoderNet(rng, frame_shape, self.latent_channels, self.width)
        self.frame_shape_ = tuple(frame_shape)
        self.latent_shape_ = (h // 4, w // 4, self.latent_channels)

    def fit(self, X, y=None, validation=None):
        X = _flatten_frames(X)
        self._build(X.shape[1:])
        opt = Adam(self.net_.named_parameters(), lr=self.learning_rate)
        rng = np.random.default_rng([self.random_state, 2])
        self.log_ = TrainingLog(("loss",))
        decay_from = int(0.7 * self.n_steps)
        for step in range(1, self.n_steps + 1):
            if step > decay_from:
                opt.lr = self.learning_rate * 0.1
            xb = X[rng.integers(0, len(X), size=self.batch_size)]
            opt.zero_grad()
            diff = self.net_.decode(self.net_.encode(ad.Value(xb))) - xb
            loss = ad.mean(diff * diff)
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(f"autoencoder loss became non-finite at step {step}", timestep=None)
            ad.backward(loss)
            opt.step()
            self.log_.append(step, {"loss": loss.data})
        raw = self._encode_raw(X)
        self.latent_mean_ = raw.mean(axis=(0, 1, 2))
        self.latent_scale_ = raw.std(axis=(0, 1, 2)) + 1e-6
        if validation is not None:
            self.validation_psnr_ = self.score(validation)
            if self.min_psnr is not None and self.validation_psnr_ < self.min_psnr:
                raise AutoencoderQualityError(
                    f"autoencoder reached {self.validation_psnr_:.2f} dB held-out, below {self.min_psnr} dB",
                    self.validation_psnr_)
        return self

    def _encode_raw(self, X, chunk=1024):
        with ad.no_grad():
            return np.concatenate([self.net_.encode(ad.Value(X[i:i + chunk])).data
                                   for i in range(0, len(X), chunk)])

    def transform(self, X):
        """Standardised latents; accepts ``(N, H, W, C)`` or ``(N, T, H, W, C)``."""
        check_is_fitted(self, "net_")
        X = np.asarray(X)
        lead = X.shape[:-3]
        flat = _flatten_frames(X)
        if flat.shape[1:] != self.frame_shape_:
            raise ValueError(f"frame shape {flat.shape[1:]} does not match fitted {self.frame_shape_}")
        z = (self._encode_raw(flat) - self.latent_mean_) / self.latent_scale_
        return z.reshape(*lead, *self.latent_shape_).astype(ad.get_dtype())

    def inverse_transform(self, Z):
        check_is_fitted(self, "net_")
        Z = np.asarray(Z, dtype=ad.get_dtype())
        lead = Z.shape[:-3]
        flat = Z.reshape(-1, *self.latent_shape_) * self.latent_scale_ + self.latent_mean_
        with ad.no_grad():
            x = self.net_.decode(ad.Value(flat)).data
        return x.reshape(*lead, *self.frame_shape_)

    def score(self, X, y=None):
        """Reconstruction PSNR in dB."""
        X = _flatten_frames(X)
        return _psnr_batch(self.inverse_transform(self.transform(X)), X)

    def state_arrays(self):
        check_is_fitted(self, "net_")
        state = {f"net.{k}": v for k, v in self.net_.state_dict().items()}
        state["meta.frame_shape"] = np.array(self.frame_shape_, dtype=np.float32)
        state["meta.architecture"] = np.array([self.latent_channels, self.width], dtype=np.float32)
        state["meta.latent_mean"] = np.asarray(self.latent_mean_, dtype=np.float32)
        state["meta.latent_scale"] = np.asarray(self.latent_scale_, dtype=np.float32)
        return state

    def save(self, path):
        save_checkpoint(path, self.state_arrays())

    def load_state_arrays(self, state):
        self.latent_channels, self.width = (int(v) for v in state["meta.architecture"])
        self._build(tuple(int(v) for v in state["meta.frame_shape"]))
        self.net_.load_state_dict(state, prefix="net.")
        self.latent_mean_ = np.asarray(state["meta.latent_mean"], dtype=ad.get_dtype())
        self.latent_scale_ = np.asarray(state["meta.latent_scale"], dtype=ad.get_dtype())
        return self

    @classmethod
    def load(cls, path, **params):
        return cls(**params).load_state_arrays(load_checkpoint(path))


# ---------------------------------------------------------------------------
# augmented latents and the probability path

def augment_latent(z, a):
    """Append each action component as a constant channel: ``(..., H', W', C')`` -> ``C' + n``."""
    z = np.asarray(z)
    a = np.asarray(a, dtype=z.dtype)
    if a.shape[:-1] != z.shape[:-3]:
        raise ValueError(f"action batch shape {a.shape[:-1]} does not match latent batch {z.shape[:-3]}")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("actions must lie in [0, 1]")
    chans = np.broadcast_to(a[..., None, None, :], (*z.shape[:-1], a.shape[-1]))
    return np.concatenate([z, chans], axis=-1)


def extract_action(z_aug, action_dim=2, clamp=True):
    """Split an augmented latent into ``(latent, action)``; the action is the spatial channel mean."""
    z_aug = np.asarray(z_aug)
    if action_dim < 1 or z_aug.shape[-1] <= action_dim:
        raise ValueError(f"latent with {z_aug.shape[-1]} channels has no room for {action_dim} action channels")
    chans = z_aug[..., -action_dim:]
    # mean taken around the first pixel: exact for constant channels
    ref = chans[..., :1, :1, :]
    a = ref[..., 0, 0, :] + (chans - ref).mean(axis=(-3, -2))
    if clamp:
        a = np.clip(a, 0.0, 1.0)
    return z_aug[..., :-action_dim], a


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError("flow time must lie in [0, 1]")
    return t


def _time_axes(t, ndim):
    t = np.asarray(t)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim)) if t.ndim else t


def sample_probability_path(target, t, noise, sigma_min=SIGMA_MIN):
    """Point on the optimal-transport path: ``t * target + (1 - (1 - sigma_min) t) * noise``.

    ``t`` is a scalar or one value per leading batch entry.
    """
    t = _time_axes(_check_time(t), np.ndim(target))
    return t * target + (1.0 - (1.0 - sigma_min) * t) * noise


def target_vector_field(nu, target, t, sigma_min=SIGMA_MIN):
    """Conditional velocity ``(target - (1 - sigma_min) nu) / (1 - (1 - sigma_min) t)``."""
    t = _time_axes(_check_time(t), np.ndim(target))
    denom = 1.0 - (1.0 - sigma_min) * t
    if np.any(denom <= DENOM_GUARD):
        raise ValueError("path variance vanishes at this time (sigma_min = 0 and t = 1?)")
    return (target - (1.0 - sigma_min) * nu) / denom


@dataclass
class FlowSample:
    """One training draw. ``tau`` and ``c`` are 1-based frame positions."""

    sequence: np.ndarray
    tau: np.ndarray
    c: np.ndarray
    t: np.ndarray
    nu: np.ndarray
    target: np.ndarray


def draw_indices(length, size, rng):
    """Draw ``tau`` uniformly from ``{3..length}`` and ``c`` from ``{1..tau-2}``."""
    if length < 3:
        raise ValueError(f"sequences of length {length} have no valid target index (need >= 3)")
    tau = rng.integers(3, length + 1, size=size)
    c = 1 + (rng.random(size) * (tau - 2)).astype(np.int64)
    return tau, c


def draw_flow_samples(latents, rng, sigma_min=SIGMA_MIN, batch_size=32):
    """Assemble a training batch from augmented latent sequences ``(N, T, H', W', C)``.

    Returns the :class:`FlowSample` together with the conditioning latents
    at positions ``tau - 1`` and ``c``.
    """
    n, length = latents.shape[:2]
    if length < 5:
        raise ValueError(f"sequences of length {length} are too short for flow training (need >= 5)")
    seq = rng.integers(0, n, size=batch_size)
    tau, c = draw_indices(length, batch_size, rng)
    t = rng.random(batch_size)
    noise = rng.standard_normal((batch_size, *latents.shape[2:]))
    target = latents[seq, tau - 1]
    dt = ad.get_dtype()
    # the target field is evaluated at the stored (cast) point so an exact regressor scores zero
    nu = sample_probability_path(target, t, noise, sigma_min).astype(dt)
    u = target_vector_field(nu, target, t, sigma_min).astype(dt)
    sample = FlowSample(seq, tau, c, t, nu, u)
    return sample, latents[seq, tau - 2], latents[seq, c - 1]


# ---------------------------------------------------------------------------
# regressor

def sinusoidal_embedding(x, dim=16, max_period=100.0):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    freqs = np.exp(-np.log(max_period) * np.arange(dim // 2) / (dim // 2))
    ang = x[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class FlowRegressor(Module):
    """U-shaped conv net on ``(nu, previous, earlier)`` stacked channelwise.

    Time and frame-gap embeddings enter as per-channel biases at both scales.
    """

    def __init__(self, rng, channels, width=64, embed_dim=16):
        self.inp = Conv2d(rng, 3 * channels, width, 3, padding=1)
        self.emb = Linear(rng, 2 * embed_dim, 2 * width)
        self.down = Conv2d(rng, width, width, 2, stride=2)
        self.mid = Conv2d(rng, width, width, 3, padding=1)
        self.up = Conv2d(rng, width, 4 * width, 1)
        self.merge = Conv2d(rng, 2 * width, width, 3, padding=1)
        self.out = Conv2d(rng, width, channels, 3, padding=1, gain=0.1)
        self.width, self.embed_dim, self.channels = width, embed_dim, channels

    def __call__(self, nu, prev, earlier, t, gap):
        b = nu.shape[0]
        x = ad.concatenate([ad.Value(nu) if not isinstance(nu, ad.Value) else nu,
                            ad.Value(prev), ad.Value(earlier)], axis=-1)
        e = np.concatenate([sinusoidal_embedding(t, self.embed_dim, 2.0),
                            sinusoidal_embedding(gap, self.embed_dim, 100.0)], axis=1)
        e = ad.relu(self.emb(ad.Value(e)))
        e1 = ad.reshape(e[:, :self.width], (b, 1, 1, self.width))
        e2 = ad.reshape(e[:, self.width:], (b, 1, 1, self.width))
        h1 = ad.relu(self.inp(x) + e1)
        h2 = ad.relu(self.mid(ad.relu(self.down(h1))) + e2)
        u = ad.relu(depth_to_space(self.up(h2)))
        h = ad.relu(self.merge(ad.concatenate([u, h1], axis=-1)))
        return self.out(h)


def flow_loss(regressor, sample: FlowSample, prev, earlier):
    """Mean squared residual between the regressor and the target velocity."""
    v = regressor(sample.nu, prev, earlier, sample.t, sample.tau - sample.c)
    diff = v - sample.target
    return ad.mean(diff * diff)


def rafi_train_step(regressor, optimizer, latents, rng, sigma_min=SIGMA_MIN, batch_size=32):
    """Draw a flow batch, take one optimizer step, return the loss value."""
    sample, prev, earlier = draw_flow_samples(latents, rng, sigma_min, batch_size)
    optimizer.zero_grad()
    loss = flow_loss(regressor, sample, prev, earlier)
    if not np.isfinite(loss.data):
        raise NonFiniteLossError("flow loss became non-finite")
    ad.backward(loss)
    optimizer.step()
    return float(loss.data)


def integrate_flow(field, noise, euler_steps):
    """Euler-integrate ``d nu / dt = field(nu, t)`` over ``[0, 1]`` from ``noise``."""
    if euler_steps < 1:
        raise ValueError("euler_steps must be at least 1")
    nu = np.array(noise, copy=True)
    dt = 1.0 / euler_steps
    for k in range(euler_steps):
        nu = nu + dt * field(nu, k * dt)
    return nu


def sample_video(regressor, autoencoder, frames, actions, horizon, euler_steps=20, rng=None,
                 use_actions=True):
    """Autoregressive generation from the last two condition frames.

    Each new latent is conditioned on the previous one and the one before
    it (frame gap 2). Returns ``(frames, actions)``; actions are ``None``
    when the model carries no action channels.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    frames = np.asarray(frames, dtype=ad.get_dtype())
    b, c = frames.shape[:2]
    if c < 2:
        raise ValueError("RAFI needs at least 2 condition frames")
    n = 0 if actions is None else np.asarray(actions).shape[-1]
    out_x = np.zeros((b, horizon, *frames.shape[2:]), dtype=frames.dtype)
    out_a = np.zeros((b, horizon, n), dtype=frames.dtype) if use_actions else None
    if horizon == 0:
        return out_x, out_a
    rng = rng if rng is not None else np.random.default_rng(0)
    z = autoencoder.transform(frames[:, -2:])
    if use_actions:
        z = augment_latent(z, np.asarray(actions, dtype=frames.dtype)[:, -2:])
    earlier, prev = z[:, 0], z[:, 1]
    gap = np.full(b, 2)
    with ad.no_grad():
        for i in range(horizon):
            def field(nu, t):
                return regressor(nu.astype(frames.dtype), prev, earlier, np.full(b, t), gap).data

            new = integrate_flow(field, rng.standard_normal(prev.shape), euler_steps).astype(frames.dtype)
            if use_actions:
                lat, a = extract_action(new, n)
                out_a[:, i] = a
                # feed back the clamped action as exact constant channels
                new = augment_latent(lat, a)
            else:
                lat = new
            out_x[:, i] = autoencoder.inverse_transform(lat)
            earlier, prev = prev, new
    return out_x, out_a


# ---------------------------------------------------------------------------
# estimator

class Rafi(SequenceEstimator):
    """Action-augmented flow-matching video predictor.

    ``use_actions=False`` drops the action channels (image-only flow
    model). ``autoencoder`` may be a fitted :class:`FrameAutoencoder`;
    otherwise one is trained at the start of ``fit``.
    """

    def __init__(self, use_actions=True, autoencoder=None, latent_channels=8, ae_steps=1500,
                 width=64, sigma_min=SIGMA_MIN, euler_steps=20, conditioning=2, horizon=10,
                 batch_size=32, n_steps=2000, learning_rate=1e-3, clip_norm=10.0, random_state=0):
        self.use_actions = use_actions
        self.autoencoder = autoencoder
        self.latent_channels = latent_channels
        self.ae_steps = ae_steps
        self.width = width
        self.sigma_min = sigma_min
        self.euler_steps = euler_steps
        self.conditioning = conditioning
        self.horizon = horizon
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.random_state = random_state

    _log_columns = ("loss",)

    def _build(self, rng, frame_shape, action_dim):
        ch = self.latent_channels + (action_dim if self.use_actions else 0)
        return FlowRegressor(rng, ch, self.width)

    def _fit_autoencoder(self, frames):
        ae = self.autoencoder
        if ae is not None:
            check_is_fitted(ae, "net_")
            self.autoencoder_ = ae
            return
        flat = frames.reshape(-1, *frames.shape[2:])
        order = np.random.default_rng([self.random_state, 3]).permutation(len(flat))
        n_val = max(1, len(flat) // 10)
        ae = FrameAutoencoder(latent_channels=self.latent_channels, n_steps=self.ae_steps,
                              random_state=self.random_state)
        self.autoencoder_ = ae.fit(flat[order[n_val:]], validation=flat[order[:n_val]])

    def _latents(self, frames, actions):
        z = self.autoencoder_.transform(frames)
        return augment_latent(z, actions) if self.use_actions else z

    def fit(self, X, y=None, *, n_steps=None, checkpoint_path=None, checkpoint_every=0, callback=None):
        frames, actions = check_sequences(X, y, min_length=5)
        if actions is None:
            raise ValueError("actions are required")
        if not hasattr(self, "net_"):
            self._fit_autoencoder(frames)
            self._init_fit(frames.shape[2:], actions.shape[2])
        latents = self._latents(frames, actions)
        total = self.n_steps if n_steps is None else n_steps
        while self.n_steps_done_ < total:
            loss = rafi_train_step(self.net_, self.optimizer_, latents, self._rng, self.sigma_min,
                                   self.batch_size)
            self.n_steps_done_ += 1
            self.log_.append(self.n_steps_done_, {"loss": loss})
            if checkpoint_path and checkpoint_every and self.n_steps_done_ % checkpoint_every == 0:
                self.save(checkpoint_path)
            if callback is not None:
                callback(self)
        return self

    def predict(self, X, y=None, horizon=None, random_state=None):
        frames, actions = check_sequences(X, y, min_length=2)
        if self.use_actions and actions is None:
            raise ValueError("actions are required for the action-augmented model")
        return sample_video(self.net_, self.autoencoder_, frames, actions,
                            self.horizon if horizon is None else horizon, self.euler_steps,
                            np.random.default_rng(random_state), self.use_actions)

    def score(self, X, y=None):
        """Negative mean flow loss on a fixed-seed batch drawn from ``(X, y)``."""
        frames, actions = check_sequences(X, y, min_length=5)
        rng = np.random.default_rng(0)
        sample, prev, earlier = draw_flow_samples(self._latents(frames, actions), rng, self.sigma_min, 256)
        with ad.no_grad():
            return -float(flow_loss(self.net_, sample, prev, earlier).data)

    @staticmethod
    def autoencoder_path(path):
        path = Path(path)
        return path.with_name(path.stem + ".ae" + path.suffix)

    def save(self, path):
        """Write the regressor to ``path`` and the autoencoder next to it."""
        super().save(path)
        self.autoencoder_.save(self.autoencoder_path(path))

    def load_state_arrays(self, state, autoencoder=None):
        if autoencoder is None:
            raise ValueError("a fitted autoencoder is required")
        self.autoencoder_ = autoencoder
        return super().load_state_arrays(state)

    @classmethod
    def load(cls, path, **params):
        ae = FrameAutoencoder.load(cls.autoencoder_path(path))
        return cls(**params).load_state_arrays(load_checkpoint(path), autoencoder=ae)
