"""Acceptance suite: each test prints one PASS/FAIL line for its criterion.

The learning criteria train every model family on the default 500-sequence
dataset for three seeds; expect the whole module to take around 30 minutes
on one CPU core. Set ``LEAPVID_ACCEPTANCE_CACHE`` to a directory to keep the
trained models (and their measured training times) between runs.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from leapvid import autodiff as ad
from leapvid.autodiff import Value, grad_check
from leapvid.base import TrainingLog, loss_reduction
from leapvid.causal import CausalElboWeights, CausalLeap, CausalLeapNet, causal_elbo_loss
from leapvid.checkpoint import load_checkpoint
from leapvid.cli import main as cli_main
from leapvid.gaussian import GaussianParams, kl_diag_gauss, reparam_sample
from leapvid.metrics import copy_last_rollout, evaluate_model
from leapvid.nn import LstmCell, LstmState, lstm_step
from leapvid.rafi import (Rafi, draw_flow_samples, draw_indices, flow_loss, integrate_flow,
                          sample_probability_path, target_vector_field)
from leapvid.vgleap import ElboWeights, VGLeap, VgLeapNet, elbo_loss
from leapvid.world import WorldConfig, generate_dataset, read_dataset, split_dataset, write_dataset

from helpers import copy_module, independent_components, param_grads, static_batch, tiny_data

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
STEPS = {"vg-leap": 2000, "causal-leap": 2000, "svg-lp": 2000, "rafi": 2000}
STEP_BUDGET = {"vg-leap": 20_000, "causal-leap": 20_000, "rafi": 2_000}
REDUCTION = {"vg-leap": 0.50, "causal-leap": 0.50, "rafi": 0.40}
TRAIN_BUDGET_SECONDS = 45 * 60
K_SAMPLES = 20
CONDITIONING = 5


@pytest.fixture
def verdict(capsys):
    def report(criterion, passed, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")
        return passed
    return report


def majority(flags):
    return sum(bool(f) for f in flags) * 2 > len(flags)


# ---------------------------------------------------------------------------
# 1. gradient checks

def _shape(rng, ndim=None):
    ndim = ndim or int(rng.integers(1, 3))
    return tuple(int(s) for s in rng.integers(1, 5, size=ndim))


def _away_from(rng, shape, points, margin=0.1, low=-2.0, high=2.0):
    x = rng.uniform(low, high, size=shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.sign(x[near] - p + 1e-12) * (margin + rng.uniform(0.0, 0.5, size=near.sum()))
    return x


def _projection(rng, shape):
    w = Value(rng.normal(size=shape))
    return lambda y: ad.sum_(y * w)


def _check_all(fn, args, rng, out_shape):
    """Largest gradient error of ``sum(w * fn(*args))`` over every array argument."""
    proj = _projection(rng, out_shape)
    worst = 0.0
    for i in range(len(args)):
        def f(v, i=i):
            vals = [v if j == i else Value(a) for j, a in enumerate(args)]
            return proj(fn(*vals))
        worst = max(worst, grad_check(f, Value(np.array(args[i], dtype=np.float64))))
    return worst


def _elementwise(fn, sampler=None):
    def case(rng):
        shape = _shape(rng)
        x = sampler(rng, shape) if sampler else rng.normal(size=shape)
        return fn, [x], shape
    return case


def _binary(fn, b_sampler=None):
    def case(rng):
        shape = _shape(rng, 2)
        b_shape = shape if rng.uniform() < 0.5 else shape[1:]
        b = b_sampler(rng, b_shape) if b_sampler else rng.normal(size=b_shape)
        return fn, [rng.normal(size=shape), b], shape
    return case


def _nonzero(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _matmul_case(rng):
    m, k, n = rng.integers(1, 5, size=3)
    return ad.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))], (m, n)


def _linear_case(rng):
    b, i, o = rng.integers(1, 5, size=3)
    return ad.linear, [rng.normal(size=(b, i)), rng.normal(size=(i, o)), rng.normal(size=o)], (b, o)


def _conv_case(rng):
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    k = int(rng.choice([1, 3]))
    h = int(rng.integers(k, 6))
    cin, cout = rng.integers(1, 4, size=2)
    ho = (h + 2 * padding - k) // stride + 1
    fn = lambda x, w, b: ad.conv2d(x, w, b, stride, padding)
    return fn, [rng.normal(size=(2, h, h, cin)), rng.normal(size=(k, k, cin, cout)), rng.normal(size=cout)], \
        (2, ho, ho, cout)


def _upsample_case(rng):
    shape = (1, *rng.integers(1, 4, size=2), int(rng.integers(1, 3)))
    return (lambda x: ad.upsample2d(x, 2)), [rng.normal(size=shape)], (1, shape[1] * 2, shape[2] * 2, shape[3])


def _reshape_case(rng):
    a, b = rng.integers(1, 5, size=2)
    return (lambda x: ad.reshape(x, (b, a))), [rng.normal(size=(a, b))], (b, a)


def _transpose_case(rng):
    shape = _shape(rng, 3)
    axes = tuple(int(i) for i in rng.permutation(3))
    return (lambda x: ad.transpose(x, axes)), [rng.normal(size=shape)], tuple(shape[i] for i in axes)


def _concat_case(rng):
    r, c1, c2 = rng.integers(1, 4, size=3)
    fn = lambda a, b: ad.concatenate([a, b], axis=1)
    return fn, [rng.normal(size=(r, c1)), rng.normal(size=(r, c2))], (r, c1 + c2)


def _getitem_case(rng):
    r, c = rng.integers(2, 6, size=2)
    lo = int(rng.integers(0, c - 1))
    return (lambda x: x[:, lo:]), [rng.normal(size=(r, c))], (r, c - lo)


def _reduce_case(op):
    def case(rng):
        shape = _shape(rng, 2)
        if rng.uniform() < 0.5:
            return (lambda x: op(x, axis=1)), [rng.normal(size=shape)], (shape[0],)
        return (lambda x: ad.reshape(op(x), (1,))), [rng.normal(size=shape)], (1,)
    return case


def _kl_case(rng):
    b, d = rng.integers(1, 4, size=2)
    fn = lambda mp, lp, mq, lq: ad.reshape(kl_diag_gauss(GaussianParams(mp, lp), GaussianParams(mq, lq)), (1,))
    return fn, [rng.normal(size=(b, d)) for _ in range(4)], (1,)


def _reparam_case(rng):
    b, d = rng.integers(1, 4, size=2)
    noise = rng.normal(size=(b, d))
    fn = lambda m, lv: reparam_sample(GaussianParams(m, lv), noise)
    return fn, [rng.normal(size=(b, d)), rng.normal(size=(b, d))], (b, d)


def _lstm_case(rng):
    b, n, w = rng.integers(1, 4, size=3)
    cell = LstmCell(rng, n, w)

    def fn(x, h, c, weight):
        cell.weight = weight
        out = lstm_step(LstmState(h, c), x, cell)
        return ad.concatenate([out.hidden, out.cell], axis=1)

    args = [rng.normal(size=(b, n)), rng.normal(size=(b, w)), rng.normal(size=(b, w)),
            cell.weight.data.astype(np.float64)]
    return fn, args, (b, 2 * w)


GRAD_CASES = {
    "add": _binary(ad.add), "sub": _binary(ad.sub), "mul": _binary(ad.mul),
    "div": _binary(ad.div, _nonzero), "neg": _elementwise(ad.neg),
    "matmul": _matmul_case, "linear": _linear_case, "conv2d": _conv_case, "upsample2d": _upsample_case,
    "sigmoid": _elementwise(ad.sigmoid), "tanh": _elementwise(ad.tanh),
    "relu": _elementwise(ad.relu, lambda r, s: _away_from(r, s, [0.0])),
    "exp": _elementwise(ad.exp), "log": _elementwise(ad.log, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "abs": _elementwise(ad.abs_, lambda r, s: _away_from(r, s, [0.0])), "square": _elementwise(ad.square),
    "clip": _elementwise(lambda x: ad.clip(x, -1.0, 1.0), lambda r, s: _away_from(r, s, [-1.0, 1.0])),
    "reshape": _reshape_case, "transpose": _transpose_case, "concatenate": _concat_case,
    "getitem": _getitem_case, "sum": _reduce_case(ad.sum_), "mean": _reduce_case(ad.mean),
    "kl_diag_gauss": _kl_case, "reparam_sample": _reparam_case, "lstm_step": _lstm_case,
}


def test_gradient_checks(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}
    with ad.precision("float64"):
        for name, case in GRAD_CASES.items():
            errs = []
            for _ in range(20):
                fn, args, out_shape = case(rng)
                errs.append(_check_all(fn, args, rng, out_shape))
            worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    failing = {k: v for k, v in worst.items() if not v < 1e-5}
    ok = not failing and elapsed < 120
    verdict(1, ok, f"{len(worst)} ops x 20 instances, worst rel. error {max(worst.values()):.2e} "
                   f"({max(worst, key=worst.get)}), {elapsed:.1f}s; failing: {failing or 'none'}")
    assert ok


# ---------------------------------------------------------------------------
# 2. Gaussian machinery

def _log_normal(x, mu, lv):
    return -0.5 * np.sum(np.log(2 * np.pi) + lv + (x - mu) ** 2 / np.exp(lv), axis=-1)


def test_gaussian_machinery(verdict):
    rng = np.random.default_rng(7)
    n = 1_000_000
    within = []
    with ad.precision("float64"):
        for _ in range(20):
            d = int(rng.integers(1, 5))
            mp, mq = rng.normal(size=d), rng.normal(size=d)
            lp, lq = rng.uniform(-1.5, 1.5, size=d), rng.uniform(-1.5, 1.5, size=d)
            kl = float(kl_diag_gauss(GaussianParams(mp[None], lp[None]), GaussianParams(mq[None], lq[None])).data)
            x = mp + np.exp(lp / 2) * rng.normal(size=(n, d))
            ratio = _log_normal(x, mp, lp) - _log_normal(x, mq, lq)
            se = ratio.std() / np.sqrt(n)
            within.append(abs(ratio.mean() - kl) <= 3 * se)

        m = rng.normal(0, 3, size=(1000, 6))
        lv = rng.uniform(-8, 8, size=(1000, 6))
        m2 = rng.normal(0, 3, size=(1000, 6))
        lv2 = rng.uniform(-8, 8, size=(1000, 6))
        kls = kl_diag_gauss(GaussianParams(m, lv), GaussianParams(m2, lv2), reduce=False).data
        nonneg = bool(np.all(kls >= 0))

        mu, logvar = rng.normal(size=(1, 3)), rng.uniform(-1, 1, size=(1, 3))
        k = 200_000
        draws = reparam_sample(GaussianParams(np.repeat(mu, k, 0), np.repeat(logvar, k, 0)),
                               rng.normal(size=(k, 3))).data
        sd = np.exp(logvar[0] / 2)
        mean_ok = np.all(np.abs(draws.mean(0) - mu[0]) <= 4 * sd / np.sqrt(k))
        var_ok = np.all(np.abs(draws.var(0) - sd ** 2) <= 4 * sd ** 2 * np.sqrt(2.0 / k))
    ok = all(within) and nonneg and mean_ok and var_ok
    verdict(2, ok, f"MC within 3 SE on {sum(within)}/20 pairs; KL >= 0 on 1000 pairs: {nonneg}; "
                   f"reparam moments: mean {bool(mean_ok)}, variance {bool(var_ok)}")
    assert ok


# ---------------------------------------------------------------------------
# 3. ELBO identities

def _vg_net():
    return VgLeapNet(np.random.default_rng(0), code_width=16, action_code_width=8, latent_dim=4,
                     predictor_width=16, latent_width=8)


def _causal_net(**kw):
    return CausalLeapNet(np.random.default_rng(0), code_width=16, action_code_width=8, latent_dim=4,
                         action_latent_dim=3, predictor_width=16, action_predictor_width=8, latent_width=8, **kw)


def _relative_gap(loss, expect):
    return abs(float(loss.data) - expect) / abs(expect)


def test_elbo_identities(verdict):
    checks = {}
    with ad.precision("float64"):
        frames, actions = tiny_data(3, 8)
        w = ElboWeights(beta=0.3, beta_a=0.7)
        res = elbo_loss(_vg_net(), frames, actions, w, conditioning=3, rng=np.random.default_rng(1))
        ind = independent_components(res, frames, actions)
        expect = ind["recon_x"].sum() + w.beta * ind["kl"].sum() + w.beta_a * ind["recon_a"].sum()
        checks["vg sum"] = _relative_gap(res.loss, expect) <= 1e-6

        cw = CausalElboWeights(beta=0.2, beta_a=0.6, gamma=0.4)
        res = causal_elbo_loss(_causal_net(), frames, actions, cw, conditioning=3, rng=np.random.default_rng(1))
        ind = independent_components(res, frames, actions)
        expect = (ind["recon_x"].sum() + cw.beta * ind["kl"].sum() + cw.beta_a * ind["recon_a"].sum()
                  + cw.gamma * ind["kl_u"].sum())
        checks["causal sum"] = _relative_gap(res.loss, expect) <= 1e-6

        still_x, still_a = static_batch(2, 6)
        model = _vg_net()
        copy_module(model.posterior, model.prior)
        checks["vg copied prior"] = np.all(elbo_loss(model, still_x, still_a, conditioning=2).per_step["kl"] == 0)

        for variant in (True, False):
            model = _causal_net(prior_sees_current_z=variant)
            copy_module(model.image_posterior, model.image_prior)
            copy_module(model.action_posterior, model.action_prior)
            if not variant:
                # the default action prior sees z_{t-1}; silence the z inputs on both sides
                ga = model.action_enc.code_width
                for net in (model.action_posterior, model.action_prior):
                    net.lstm.weight.data[ga:net.lstm.n_in] = 0.0
            res = causal_elbo_loss(model, still_x, still_a, conditioning=2)
            checks[f"causal copied priors ({'current' if variant else 'previous'} z)"] = (
                np.all(res.per_step["kl"] == 0) and np.all(res.per_step["kl_u"] == 0))

        model = _vg_net()
        res = elbo_loss(model, frames, actions, ElboWeights(1e-3, 0.0), conditioning=3)
        grads = param_grads(res.loss, model.action_pred.parameters())
        checks["vg beta_a=0"] = all(np.all(g == 0) for g in grads.values())
        model = _causal_net()
        res = causal_elbo_loss(model, frames, actions, CausalElboWeights(1e-3, 0.0, 1e-3), conditioning=3)
        grads = param_grads(res.loss, model.action_pred.parameters())
        checks["causal beta_a=0"] = all(np.all(g == 0) for g in grads.values())
    ok = all(checks.values())
    verdict(3, ok, ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. flow matching

def test_flow_matching_consistency(verdict):
    rng = np.random.default_rng(11)
    with ad.precision("float64"):
        target = rng.normal(size=(8, 4, 4, 10))
        noise = rng.normal(size=target.shape)
        # with sigma_min = 0 the path ends exactly on the target
        end = integrate_flow(lambda nu, t: target_vector_field(nu, target, t, sigma_min=0.0), noise, 100)
        reach = np.linalg.norm(end - target) / np.linalg.norm(target)
        # at the default sigma_min the field carries noise to the path's own endpoint
        end = integrate_flow(lambda nu, t: target_vector_field(nu, target, t), noise, 100)
        path_end = sample_probability_path(target, 1.0, noise)
        transport = np.linalg.norm(end - path_end) / np.linalg.norm(path_end)

        latents = rng.normal(size=(6, 25, 4, 4, 10))
        sample, prev, earlier = draw_flow_samples(latents, rng, batch_size=64)
        goal = latents[sample.sequence, sample.tau - 1]
        oracle = lambda nu, p, e, t, gap: Value(target_vector_field(nu, goal, t))
        oracle_loss = float(flow_loss(oracle, sample, prev, earlier).data)

    tau, c = draw_indices(25, 10_000, rng)
    violations = int(np.sum((tau < 3) | (tau > 25) | (c < 1) | (c > tau - 2)))
    ok = reach < 1e-2 and transport < 1e-2 and oracle_loss == 0.0 and violations == 0
    verdict(4, ok, f"Euler(100) reaches target rel. {reach:.1e}, path endpoint rel. {transport:.1e}; "
                   f"oracle loss {oracle_loss}; (tau, c) violations {violations}/10000")
    assert ok


# ---------------------------------------------------------------------------
# 5-8. training and evaluation on the default dataset

def _build(kind, seed):
    if kind == "vg-leap":
        return VGLeap(n_steps=STEPS[kind], random_state=seed)
    if kind == "svg-lp":
        return VGLeap(use_actions=False, n_steps=STEPS[kind], random_state=seed)
    if kind == "causal-leap":
        return CausalLeap(n_steps=STEPS[kind], random_state=seed)
    return Rafi(n_steps=STEPS[kind], random_state=seed)


def _train(kind, seed, train, cache):
    est = _build(kind, seed)
    if cache is not None:
        ckpt = cache / f"{kind}-s{seed}.ckpt"
        if ckpt.exists():
            params = {k: v for k, v in est.get_params(deep=False).items() if k != "autoencoder"}
            est = type(est).load(ckpt, **params)
            est.log_ = TrainingLog.from_csv(cache / f"{kind}-s{seed}.csv")
            return est, json.loads((cache / f"{kind}-s{seed}.json").read_text())["seconds"]
    start = time.perf_counter()
    est.fit(train.frames, train.actions)
    seconds = time.perf_counter() - start
    if cache is not None:
        est.save(ckpt)
        est.log_.to_csv(cache / f"{kind}-s{seed}.csv")
        (cache / f"{kind}-s{seed}.json").write_text(json.dumps({"seconds": seconds}))
    return est, seconds


@pytest.fixture(scope="module")
def default_data():
    ds = generate_dataset(WorldConfig(), 500)
    return split_dataset(ds, 0.9, seed=0)


@pytest.fixture(scope="module")
def trained(default_data):
    train, _ = default_data
    cache = os.environ.get("LEAPVID_ACCEPTANCE_CACHE")
    cache = Path(cache) if cache else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    out = {}
    for seed in SEEDS:
        for kind in ("rafi", "vg-leap", "causal-leap", "svg-lp"):
            out[kind, seed] = _train(kind, seed, train, cache)
    return out


def _rollout(model):
    return lambda x, a, horizon, seed: model.predict(x, a, horizon=horizon, random_state=seed)


@pytest.fixture(scope="module")
def reports(trained, default_data):
    _, test = default_data
    out = {}
    for seed in SEEDS:
        features = trained["rafi", seed][0].autoencoder_.transform
        out["copy-last", seed, 10] = evaluate_model(copy_last_rollout, test.frames, test.actions, 1, 10,
                                                    CONDITIONING, features, seed=seed)
        for kind in ("vg-leap", "causal-leap", "svg-lp", "rafi"):
            model = trained[kind, seed][0]
            out[kind, seed, 10] = evaluate_model(_rollout(model), test.frames, test.actions, K_SAMPLES, 10,
                                                 CONDITIONING, features, seed=seed)
        for kind in ("vg-leap", "causal-leap"):
            model = trained[kind, seed][0]
            out[kind, seed, 20] = evaluate_model(_rollout(model), test.frames, test.actions, K_SAMPLES, 20,
                                                 CONDITIONING, None, seed=seed)
    return out


def test_loss_reduction_within_budget(verdict, trained):
    lines, per_kind = [], {}
    seconds = sum(trained[k, s][1] for k in REDUCTION for s in SEEDS)
    for kind, need in REDUCTION.items():
        flags = []
        for seed in SEEDS:
            est = trained[kind, seed][0]
            head = 50 if kind == "rafi" else 10
            red = loss_reduction(est.log_.losses(), head=head)
            flags.append(red >= need and est.n_steps_done_ <= STEP_BUDGET[kind])
            lines.append(f"{kind}/s{seed} {red:.0%} in {est.n_steps_done_} steps")
        per_kind[kind] = majority(flags)
    ok = all(per_kind.values()) and seconds < TRAIN_BUDGET_SECONDS
    verdict(5, ok, f"{'; '.join(lines)}; training time {seconds / 60:.1f} min")
    assert ok


def test_vg_leap_feature_cosine_beats_ablation(verdict, reports):
    flags, lines = [], []
    for seed in SEEDS:
        vg = reports["vg-leap", seed, 10].mean("feature_cosine").mean()
        svg = reports["svg-lp", seed, 10].mean("feature_cosine").mean()
        flags.append(vg >= svg)
        lines.append(f"s{seed} vg-leap {vg:.4f} vs svg-lp {svg:.4f}")
    ok = majority(flags)
    verdict(6, ok, "; ".join(lines))
    assert ok


def test_causal_action_error_tail(verdict, reports):
    flags, lines = [], []
    for seed in SEEDS:
        tail = slice(15, 20)
        causal = reports["causal-leap", seed, 20].mean("action_l2", best=False)[tail].mean()
        vg = reports["vg-leap", seed, 20].mean("action_l2", best=False)[tail].mean()
        flags.append(causal <= vg)
        lines.append(f"s{seed} causal-leap {causal:.4f} vs vg-leap {vg:.4f}")
    ok = majority(flags)
    verdict(7, ok, "; ".join(lines))
    assert ok


def test_models_beat_copy_last(verdict, reports):
    margins = {}
    for seed in SEEDS:
        base = reports["copy-last", seed, 10].mean("psnr")[:5]
        for kind in ("vg-leap", "causal-leap", "svg-lp", "rafi"):
            margins[kind, seed] = reports[kind, seed, 10].mean("psnr")[:5] - base
    worst = min(margins, key=lambda k: margins[k].min())
    ok = all(np.all(m >= 1.0) for m in margins.values())
    detail = "; ".join(f"{k}/s{s} min {m.min():+.2f} dB" for (k, s), m in margins.items())
    verdict(8, ok, f"{detail}; worst {worst[0]}/s{worst[1]} at step {int(margins[worst].argmin()) + 1}")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism and formats

def _pipeline(root, tag):
    d, t, e = f"data-{tag}", f"train-{tag}", f"eval-{tag}"
    assert cli_main(["--run-name", d, "dataset", "--sequences", "12", "--length", "12", "--seed", "4"]) == 0
    assert cli_main(["--run-name", t, "train", "--model", "causal-leap", "--dataset", str(root / d),
                     "--steps", "6", "--conditioning", "3", "--horizon", "4", "--batch-size", "4",
                     "--latent-dim", "4", "--code-width", "16", "--predictor-width", "16", "--seed", "2"]) == 0
    assert cli_main(["--run-name", e, "eval", "--checkpoint", str(root / t / "model.ckpt"),
                     "--dataset", str(root / d), "--samples", "3", "--horizon", "5", "--conditioning", "3",
                     "--baseline", "--seed", "1"]) == 0
    return [root / t / "train_log.csv", root / e / "causal-leap.csv", root / e / "copy-last.csv"]


def test_determinism_and_formats(verdict, tmp_path, monkeypatch):
    ds = generate_dataset(WorldConfig(sequence_length=10), 5)
    write_dataset(tmp_path / "a.lpds", ds)
    back = read_dataset(tmp_path / "a.lpds")
    write_dataset(tmp_path / "b.lpds", back)
    dataset_ok = (back.frames.tobytes() == ds.frames.tobytes() and back.actions.tobytes() == ds.actions.tobytes()
                  and (tmp_path / "a.lpds").read_bytes() == (tmp_path / "b.lpds").read_bytes())

    frames, actions = tiny_data(4, 8)
    est = CausalLeap(latent_dim=4, code_width=16, predictor_width=16, conditioning=3, horizon=4,
                     batch_size=4, n_steps=3).fit(frames, actions)
    est.save(tmp_path / "m.ckpt")
    params = est.get_params(deep=False)
    loaded = CausalLeap.load(tmp_path / "m.ckpt", **params)
    loaded.save(tmp_path / "m2.ckpt")
    before, after = est.state_arrays(), load_checkpoint(tmp_path / "m.ckpt")
    ckpt_ok = (all(before[k].tobytes() == after[k].tobytes() for k in before)
               and (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes())

    monkeypatch.setenv("LEAPVID_OUTPUT_ROOT", str(tmp_path / "runs"))
    with pytest.warns(RuntimeWarning, match="feature"):
        first = _pipeline(tmp_path / "runs", "a")
        second = _pipeline(tmp_path / "runs", "b")
    pipeline_ok = all(a.read_bytes() == b.read_bytes() for a, b in zip(first, second))
    ok = dataset_ok and ckpt_ok and pipeline_ok
    verdict(9, ok, f"dataset round-trip {dataset_ok}, checkpoint round-trip {ckpt_ok}, "
                   f"pipeline CSVs identical {pipeline_ok}")
    assert ok
