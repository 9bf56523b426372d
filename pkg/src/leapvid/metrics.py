"""Frame and action metrics, best-of-k evaluation and report CSVs."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 100.0


def psnr(pred, gt, max_val=1.0):
    """Peak signal-to-noise ratio in dB over all axes; capped at 100 dB."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val ** 2 / mse)))


def psnr_per_frame(pred, gt, max_val=1.0):
    """PSNR over the last three axes: ``(..., H, W, C)`` -> ``(...)``."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2, axis=(-3, -2, -1))
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(max_val ** 2 / mse)
    return np.minimum(out, PSNR_CAP)


def cosine_rows(f, g):
    """Row-wise cosine of two feature batches; zero-norm rows give 0 with a warning."""
    f = np.asarray(f, np.float64).reshape(len(f), -1)
    g = np.asarray(g, np.float64).reshape(len(g), -1)
    if f.shape != g.shape:
        raise ValueError(f"feature shape mismatch: {f.shape} vs {g.shape}")
    nf, ng = np.linalg.norm(f, axis=1), np.linalg.norm(g, axis=1)
    zero = (nf == 0) | (ng == 0)
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm feature vectors; cosine set to 0", RuntimeWarning)
    denom = np.where(zero, 1.0, nf * ng)
    return np.where(zero, 0.0, np.sum(f * g, axis=1) / denom)


def feature_cosine(pred, gt, feature_encoder):
    """Cosine similarity of ``feature_encoder`` outputs for single frames or batches."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    single = pred.ndim == 3
    if single:
        pred, gt = pred[None], gt[None]
    out = cosine_rows(feature_encoder(pred), feature_encoder(gt))
    return float(out[0]) if single else out


def action_l2(pred, gt, per_component=False):
    """Per-timestep Euclidean error of action sequences ``(T, n)``.

    With ``per_component`` the absolute error of each component is
    returned as well, as ``(total, components)``.
    """
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    total = np.linalg.norm(diff, axis=-1)
    return (total, np.abs(diff)) if per_component else total


@dataclass
class MetricReport:
    """Per-timestep curves for one model.

    ``average`` holds mean-of-k curves, ``best`` best-of-k curves; each maps
    a metric name to an ``(n_sequences, horizon)`` array.
    """

    horizon: int
    k_samples: int
    n_sequences: int
    average: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k_samples < 1 or self.n_sequences < 1:
            raise ValueError("a report needs at least one sample and one sequence")
        for curves in (self.average, self.best):
            for name, arr in curves.items():
                if np.shape(arr)[-1] != self.horizon:
                    raise ValueError(f"{name}: curve length {np.shape(arr)[-1]} != horizon {self.horizon}")

    @property
    def metrics(self):
        return list(self.average)

    def mean(self, metric, best=True):
        return np.mean((self.best if best else self.average)[metric], axis=0)

    def std(self, metric, best=True):
        return np.std((self.best if best else self.average)[metric], axis=0)

    def rows(self):
        """``(t, metric, mean, std, best)`` with mean/std of mean-of-k and the best-of-k mean."""
        out = []
        for name in self.metrics:
            m, s, b = self.mean(name, best=False), self.std(name, best=False), self.mean(name, best=True)
            out.extend((t + 1, name, float(m[t]), float(s[t]), float(b[t])) for t in range(self.horizon))
        return out

    def to_csv(self, path):
        write_report_csv(path, self.rows())


REPORT_COLUMNS = ("t", "metric", "mean", "std", "best")


def write_report_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for t, name, m, s, b in rows:
            w.writerow([t, name, repr(float(m)), repr(float(s)), repr(float(b))])


def read_report_csv(path):
    """Return ``{metric: {column: array over t}}`` from a report CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(REPORT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    out = {}
    for r in rows:
        d = out.setdefault(r["metric"], {"t": [], "mean": [], "std": [], "best": []})
        d["t"].append(int(r["t"]))
        for k in ("mean", "std", "best"):
            d[k].append(float(r[k]))
    return {m: {k: np.array(v) for k, v in d.items()} for m, d in out.items()}


def copy_last_rollout(frames, actions, horizon, random_state=None):
    """Deterministic baseline: repeat the last condition frame and action."""
    frames = np.asarray(frames)
    x = np.repeat(frames[:, -1:], horizon, axis=1)
    a = None if actions is None else np.repeat(np.asarray(actions)[:, -1:], horizon, axis=1)
    return x, a


def _select(values, higher_is_better):
    # best sample per sequence, judged by its horizon average
    score = values.mean(axis=2)
    idx = score.argmax(axis=0) if higher_is_better else score.argmin(axis=0)
    return values[idx, np.arange(values.shape[1])]


def evaluate_model(rollout, frames, actions, k_samples=20, horizon=10, conditioning=5,
                   feature_encoder=None, seed=0):
    """Draw ``k_samples`` rollouts per test sequence and collect per-timestep metrics.

    ``rollout(frames_prefix, actions_prefix, horizon, random_state)`` returns
    ``(frames, actions)`` with actions possibly ``None``. Best-of-k picks, per
    sequence and per metric, the sample with the best horizon average.
    """
    frames = np.asarray(frames)
    actions = None if actions is None else np.asarray(actions)
    if k_samples < 1:
        raise ValueError("k_samples must be at least 1")
    if len(frames) == 0:
        raise ValueError("empty test set")
    if conditioning + horizon > frames.shape[1]:
        raise ValueError(f"conditioning {conditioning} + horizon {horizon} exceeds length {frames.shape[1]}")
    prefix_x = frames[:, :conditioning]
    prefix_a = None if actions is None else actions[:, :conditioning]
    gt_x = frames[:, conditioning:conditioning + horizon]
    gt_a = None if actions is None else actions[:, conditioning:conditioning + horizon]
    gt_feat = None
    if feature_encoder is not None:
        gt_feat = feature_encoder(gt_x.reshape(-1, *gt_x.shape[2:]))
    curves = {"psnr": [], "feature_cosine": [], "action_l2": [], "action_l2_velocity": [],
              "action_l2_turn": []}
    for k in range(k_samples):
        x, a = rollout(prefix_x, prefix_a, horizon, seed * 100003 + k)
        curves["psnr"].append(psnr_per_frame(x, gt_x))
        if feature_encoder is not None:
            f = feature_encoder(np.asarray(x).reshape(-1, *gt_x.shape[2:]))
            curves["feature_cosine"].append(cosine_rows(f, gt_feat).reshape(gt_x.shape[:2]))
        if a is not None and gt_a is not None:
            total, comp = action_l2(a, gt_a, per_component=True)
            curves["action_l2"].append(total)
            curves["action_l2_velocity"].append(comp[..., 0])
            if comp.shape[-1] > 1:
                curves["action_l2_turn"].append(comp[..., 1])
    higher = {"psnr": True, "feature_cosine": True}
    average, best = {}, {}
    for name, vals in curves.items():
        if not vals:
            continue
        vals = np.stack(vals)
        average[name] = vals.mean(axis=0)
        best[name] = _select(vals, higher.get(name, False))
    return MetricReport(horizon, k_samples, len(frames), average, best)
