"""Estimator plumbing shared by the sequence models.

The estimators follow the scikit-learn conventions: constructor arguments
are stored verbatim (so ``get_params``/``set_params``/``clone`` work),
``fit`` learns attributes with a trailing underscore and returns ``self``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import Adam
from .world import SequenceDataset


class NonFiniteLossError(ArithmeticError):
    """Raised when a loss term becomes NaN/inf; carries the offending timestep."""

    def __init__(self, message, timestep=None):
        super().__init__(message)
        self.timestep = timestep


def check_sequences(frames, actions=None, *, min_length=1, action_dim=None):
    """Validate a batch of sequences and return float arrays.

    Accepts a :class:`SequenceDataset` as ``frames`` (actions are then taken
    from it), or arrays shaped ``(N, T, H, W, C)`` and ``(N, T, n)``.
    """
    if isinstance(frames, SequenceDataset):
        frames, actions = frames.frames, frames.actions
    frames = np.asarray(frames, dtype=ad.get_dtype())
    if frames.ndim != 5:
        raise ValueError(f"frames must be 5-D (N, T, H, W, C), got shape {frames.shape}")
    if frames.shape[0] == 0:
        raise ValueError("no sequences given")
    if frames.shape[1] < min_length:
        raise ValueError(f"sequences of length {frames.shape[1]} are shorter than the required {min_length}")
    if not np.isfinite(frames).all() or frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError("frame pixels must be finite and lie in [0, 1]")
    if actions is None:
        return frames, None
    actions = np.asarray(actions, dtype=ad.get_dtype())
    if actions.ndim != 3 or actions.shape[:2] != frames.shape[:2]:
        raise ValueError(f"actions shape {actions.shape} does not match frames {frames.shape[:2]}")
    if action_dim is not None and actions.shape[2] != action_dim:
        raise ValueError(f"expected {action_dim} action components, got {actions.shape[2]}")
    if actions.min() < 0.0 or actions.max() > 1.0:
        raise ValueError("actions must lie in [0, 1]")
    return frames, actions


def sample_windows(frames, actions, length, batch_size, rng):
    """Random contiguous windows of ``length`` steps from random sequences."""
    n, t = frames.shape[:2]
    if length > t:
        raise ValueError(f"window of {length} steps does not fit sequences of length {t}")
    idx = rng.integers(0, n, size=batch_size)
    start = rng.integers(0, t - length + 1, size=batch_size)
    steps = start[:, None] + np.arange(length)
    return frames[idx[:, None], steps], actions[idx[:, None], steps]


class TrainingLog:
    """Per-step loss components, exported as CSV rows."""

    def __init__(self, columns):
        self.columns = ["step", *columns]
        self.rows = []

    def append(self, step, values):
        self.rows.append([step, *[float(values[c]) for c in self.columns[1:]]])

    def losses(self):
        return np.array([r[1] for r in self.rows])

    @classmethod
    def from_csv(cls, path, up_to=None):
        """Read a log written by :meth:`to_csv`, keeping steps ``<= up_to``."""
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            log = cls(header[1:])
            for line in fh:
                vals = line.strip().split(",")
                if not line.strip():
                    continue
                step = int(vals[0])
                if up_to is None or step <= up_to:
                    log.rows.append([step, *map(float, vals[1:])])
        return log

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join([str(row[0])] + [repr(float(v)) for v in row[1:]]) + "\n")


def loss_reduction(losses, head=10, tail=None):
    """Fractional drop from the mean of the first ``head`` losses to the mean of the tail."""
    losses = np.asarray(losses, dtype=np.float64)
    tail = tail or max(head, len(losses) // 10)
    first, last = losses[:head].mean(), losses[-tail:].mean()
    return 1.0 - last / first


class SequenceEstimator(BaseEstimator):
    """Common fit loop: windowed mini-batches, Adam, optional checkpoints.

    Subclasses provide ``_build(rng, frame_shape, action_dim)`` returning the
    network, ``_loss(net, frames, actions, rng)`` returning ``(Value, dict)``,
    and ``_log_columns``.
    """

    _log_columns = ("loss",)

    def _window(self):
        return self.conditioning + self.horizon

    def _init_fit(self, frame_shape, action_dim):
        rng = np.random.default_rng(self.random_state)
        self.net_ = self._build(rng, tuple(frame_shape), action_dim)
        self.optimizer_ = Adam(self.net_.named_parameters(), lr=self.learning_rate, clip_norm=self.clip_norm)
        self.log_ = TrainingLog(self._log_columns)
        self.n_steps_done_ = 0
        self.frame_shape_ = tuple(frame_shape)
        self.action_dim_ = action_dim
        self._rng = np.random.default_rng([self.random_state, 1])

    def fit(self, X, y=None, *, n_steps=None, checkpoint_path=None, checkpoint_every=0, callback=None):
        """Train on sequences ``X`` (frames) and ``y`` (actions).

        Calling ``fit`` again continues training from the current state
        (warm start); use :func:`sklearn.base.clone` for a fresh model.
        """
        frames, actions = check_sequences(X, y, min_length=self._window())
        if actions is None:
            raise ValueError("actions are required")
        if not hasattr(self, "net_"):
            self._init_fit(frames.shape[2:], actions.shape[2])
        elif frames.shape[2:] != self.frame_shape_:
            raise ValueError(f"frame shape {frames.shape[2:]} differs from fitted {self.frame_shape_}")
        total = self.n_steps if n_steps is None else n_steps
        while self.n_steps_done_ < total:
            xb, ab = sample_windows(frames, actions, self._window(), self.batch_size, self._rng)
            self.optimizer_.zero_grad()
            loss, parts = self._loss(self.net_, xb, ab, self._rng)
            ad.backward(loss)
            self.optimizer_.step()
            self.n_steps_done_ += 1
            self.log_.append(self.n_steps_done_, parts)
            if checkpoint_path and checkpoint_every and self.n_steps_done_ % checkpoint_every == 0:
                self.save(checkpoint_path)
            if callback is not None:
                callback(self)
        return self

    # -- persistence --------------------------------------------------------
    def state_arrays(self):
        check_is_fitted(self, "net_")
        state = {f"net.{k}": v for k, v in self.net_.state_dict().items()}
        state.update(self.optimizer_.state_dict())
        # the data-sampling RNG is restored so that resumed runs replay exactly
        rng_state = self._rng.bit_generator.state
        words = np.array([rng_state["state"]["state"], rng_state["state"]["inc"]], dtype=object)
        state["meta.rng"] = np.array([float(b) for w in words for b in int(w).to_bytes(16, "little")],
                                     dtype=np.float32)
        state["meta.rng_extra"] = np.array([rng_state["has_uint32"], rng_state["uinteger"] & 0xFFFF,
                                            rng_state["uinteger"] >> 16], dtype=np.float32)
        state["meta.steps"] = np.array([self.n_steps_done_], dtype=np.float32)
        state["meta.frame_shape"] = np.array(self.frame_shape_, dtype=np.float32)
        state["meta.action_dim"] = np.array([self.action_dim_], dtype=np.float32)
        return state

    def save(self, path):
        save_checkpoint(path, self.state_arrays())

    def load_state_arrays(self, state):
        frame_shape = tuple(int(v) for v in state["meta.frame_shape"])
        self._init_fit(frame_shape, int(state["meta.action_dim"][0]))
        self.net_.load_state_dict(state, prefix="net.")
        if "adam.step" in state:
            self.optimizer_.load_state_dict(state)
        self.n_steps_done_ = int(state["meta.steps"][0])
        raw = bytes(int(b) for b in state["meta.rng"])
        extra = state["meta.rng_extra"]
        self._rng.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int.from_bytes(raw[:16], "little"), "inc": int.from_bytes(raw[16:], "little")},
            "has_uint32": int(extra[0]),
            "uinteger": int(extra[1]) | (int(extra[2]) << 16),
        }
        return self

    @classmethod
    def load(cls, path, **params):
        return cls(**params).load_state_arrays(load_checkpoint(path))
