"""Small fixtures shared by the model tests."""
import numpy as np

from leapvid import autodiff as ad
from leapvid.gaussian import kl_numpy
from leapvid.world import WorldConfig, generate_dataset, generate_sequence


def tiny_data(n=6, length=8, seed=0):
    ds = generate_dataset(WorldConfig(sequence_length=max(length, 7), seed=seed), n)
    return ds.frames[:, :length], ds.actions[:, :length]


def static_batch(b=2, length=6):
    seq = generate_sequence(WorldConfig(sprite_count=0, sequence_length=max(length, 7)), 0,
                            policy=lambda f: (0.0, 0.0))
    frames = np.repeat(seq.frames[None, :length], b, axis=0)
    actions = np.repeat(seq.actions[None, :length], b, axis=0)
    return frames, actions


def independent_components(result, frames, actions, action_keys=("action_posterior", "action_prior")):
    """Recompute per-step terms from the recorded predictions and distributions in numpy."""
    out = {"recon_x": [], "recon_a": [], "kl": [], "kl_u": []}
    for rec in result.steps:
        t = rec.t
        out["recon_x"].append(np.mean((rec.frame_pred.data.astype(np.float64) - frames[:, t]) ** 2))
        if rec.action_pred is not None:
            out["recon_a"].append(np.mean((rec.action_pred.data.astype(np.float64) - actions[:, t]) ** 2))
        p, q = rec.posterior, rec.prior
        out["kl"].append(kl_numpy(p.mean.data, p.log_variance.data, q.mean.data, q.log_variance.data).mean())
        if action_keys[0] in rec.extra:
            pu, qu = rec.extra[action_keys[0]], rec.extra[action_keys[1]]
            out["kl_u"].append(kl_numpy(pu.mean.data, pu.log_variance.data,
                                        qu.mean.data, qu.log_variance.data).mean())
    return {k: np.array(v) for k, v in out.items()}


def copy_module(src, dst):
    dst.load_state_dict(src.state_dict())


def param_grads(loss, params):
    return ad.backward(loss, params=list(params))
