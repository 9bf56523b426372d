"""Command-line front end: ``leapvid dataset|train|eval|generate|report``.

Every command writes into a fresh run directory below ``$LEAPVID_OUTPUT_ROOT``
(default ``./runs``). Options can come from a flat ``key = value`` file
given with ``--config``; flags on the command line win.

Exit codes: 1 usage, 2 I/O, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .base import NonFiniteLossError, TrainingLog
from .causal import CausalLeap
from .checkpoint import CheckpointError
from .metrics import copy_last_rollout, evaluate_model, read_report_csv
from .rafi import AutoencoderQualityError, FrameAutoencoder, Rafi
from .vgleap import VGLeap
from .world import DatasetFormatError, WorldConfig, generate_dataset, read_dataset, split_dataset, write_dataset

OUTPUT_ROOT_ENV = "LEAPVID_OUTPUT_ROOT"
EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
MODEL_KINDS = ("vg-leap", "causal-leap", "rafi", "svg-lp", "rafi-no-action")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files and run directories

def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path, values):
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k} = {values[k]}\n")


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def make_run_dir(command, seed, run_name=None):
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    name = run_name or f"{command}-{_dt.datetime.now().strftime('%Y%m%d-%H%M%S')}-s{seed}"
    path = root / name
    k = 1
    while path.exists():
        path = root / f"{name}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------------------
# model construction

_MODEL_FLAGS = {
    "vg-leap": ("beta", "beta_a", "latent_dim", "code_width", "predictor_width", "use_skips"),
    "causal-leap": ("beta", "beta_a", "gamma", "latent_dim", "action_latent_dim", "code_width",
                    "predictor_width", "use_skips", "prior_sees_current_z"),
    "rafi": ("sigma_min", "euler_steps", "ae_steps", "latent_channels", "width"),
}


def build_estimator(kind, params):
    """Estimator for ``kind`` from a flat parameter mapping."""
    common = {k: params[k] for k in ("conditioning", "horizon", "batch_size", "learning_rate", "random_state")
              if params.get(k) is not None}
    if kind in ("vg-leap", "svg-lp"):
        extra = {k: params[k] for k in _MODEL_FLAGS["vg-leap"] if params.get(k) is not None}
        use_actions = kind == "vg-leap" and not params.get("no_actions", False)
        return VGLeap(use_actions=use_actions, **common, **extra)
    if kind == "causal-leap":
        extra = {k: params[k] for k in _MODEL_FLAGS["causal-leap"] if params.get(k) is not None}
        return CausalLeap(**common, **extra)
    if kind in ("rafi", "rafi-no-action"):
        extra = {k: params[k] for k in _MODEL_FLAGS["rafi"] if params.get(k) is not None}
        use_actions = kind == "rafi" and not params.get("no_actions", False)
        return Rafi(use_actions=use_actions, **common, **extra)
    raise UsageError(f"unknown model {kind!r}; choose from {', '.join(MODEL_KINDS)}")


def sidecar_path(checkpoint):
    return Path(checkpoint).with_suffix(".cfg")


def save_model(est, kind, path):
    est.save(path)
    params = {k: v for k, v in est.get_params(deep=False).items() if k != "autoencoder"}
    write_config(sidecar_path(path), {"model": kind, **params})


def _typed(value):
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            pass
    if value in ("True", "False"):
        return value == "True"
    return None if value == "None" else value


def load_model(path):
    """Load a checkpoint written by ``train`` together with its ``.cfg`` sidecar."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"missing model description {side}")
    cfg = {k: _typed(v) for k, v in read_config(side).items()}
    kind = cfg.pop("model")
    cls = {"vg-leap": VGLeap, "svg-lp": VGLeap, "causal-leap": CausalLeap,
           "rafi": Rafi, "rafi-no-action": Rafi}.get(kind)
    if cls is None:
        raise UsageError(f"{side}: unknown model {kind!r}")
    return kind, cls.load(path, **cfg)


def _dataset_file(path, split):
    path = Path(path)
    return path / f"{split}.lpds" if path.is_dir() else path


# ---------------------------------------------------------------------------
# commands

def cmd_dataset(args, run_dir):
    cfg = WorldConfig(scene_size=args.scene_size, view_size=args.view_size, channels=args.channels,
                      obstacle_count=args.obstacles, sprite_count=args.sprites,
                      sequence_length=args.length, seed=args.seed)
    ds = generate_dataset(cfg, args.sequences)
    train, test = split_dataset(ds, args.split, seed=args.seed)
    write_dataset(run_dir / "train.lpds", train)
    write_dataset(run_dir / "test.lpds", test)
    print(f"sequences={len(ds)} train={len(train)} test={len(test)} T={cfg.sequence_length} "
          f"frame={cfg.frame_shape} actions={ds.actions.shape[2]}")
    print(f"wrote {run_dir}")
    return 0


def cmd_train(args, run_dir):
    ds = read_dataset(_dataset_file(args.dataset, "train"))
    params = vars(args)
    kind = args.model
    if args.resume:
        kind, est = load_model(args.resume)
        old_log = Path(args.resume).parent / "train_log.csv"
    else:
        if kind is None:
            raise UsageError("--model is required")
        if kind.startswith("rafi") and params.get("conditioning") is None:
            params["conditioning"] = 2
        est = build_estimator(kind, params)
        old_log = None
    ckpt = run_dir / "model.ckpt"
    log_path = run_dir / "train_log.csv"
    if not hasattr(est, "net_"):
        est.fit(ds.frames, ds.actions, n_steps=0)
    elif old_log is not None and old_log.exists():
        est.log_ = TrainingLog.from_csv(old_log, up_to=est.n_steps_done_)
    save_model(est, kind, ckpt)

    def checkpoint(e):
        if args.checkpoint_every and e.n_steps_done_ % args.checkpoint_every == 0:
            save_model(e, kind, ckpt)
            e.log_.to_csv(log_path)

    try:
        est.fit(ds.frames, ds.actions, n_steps=args.steps, callback=checkpoint)
    except NonFiniteLossError:
        est.log_.to_csv(log_path)
        raise
    save_model(est, kind, ckpt)
    est.log_.to_csv(log_path)
    losses = est.log_.losses()
    if len(losses):
        print(f"model={kind} steps={est.n_steps_done_} first_loss={losses[0]:.5g} last_loss={losses[-1]:.5g}")
    print(f"wrote {ckpt}")
    return 0


def _feature_encoder(path, model):
    if path:
        return FrameAutoencoder.load(path).transform
    if isinstance(model, Rafi):
        return model.autoencoder_.transform
    warnings.warn("no feature autoencoder given (--features); feature cosine is skipped", RuntimeWarning)
    return None


def cmd_eval(args, run_dir):
    kind, model = load_model(args.checkpoint)
    ds = read_dataset(_dataset_file(args.dataset, "test"))
    feats = _feature_encoder(args.features, model)

    def rollout(x, a, horizon, seed):
        return model.predict(x, a, horizon=horizon, random_state=seed)

    report = evaluate_model(rollout, ds.frames, ds.actions, args.samples, args.horizon, args.conditioning,
                            feats, seed=args.seed)
    report.to_csv(run_dir / f"{kind}.csv")
    if args.baseline:
        base = evaluate_model(copy_last_rollout, ds.frames, ds.actions, 1, args.horizon, args.conditioning,
                              feats, seed=args.seed)
        base.to_csv(run_dir / "copy-last.csv")
    for name in report.metrics:
        print(f"{kind} {name}: best-of-{args.samples} mean over horizon {report.mean(name).mean():.4f}")
    print(f"wrote {run_dir}")
    return 0


def _to_uint8(img):
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _write_image(path, img):
    img = _to_uint8(img)
    if path.suffix == ".pgm":
        if img.shape[-1] != 1:
            raise UsageError("PGM output needs single-channel frames; use --format png")
        h, w = img.shape[:2]
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img[..., 0].tobytes())
    else:
        from PIL import Image

        Image.fromarray(img[..., 0] if img.shape[-1] == 1 else img).save(path)


def frame_grid(rows, pad=1):
    """Tile ``(R, N, H, W, C)`` frames into one image, one row per entry of ``rows``."""
    rows = np.asarray(rows)
    r, n, h, w, c = rows.shape
    out = np.ones((r * (h + pad) - pad, n * (w + pad) - pad, c), dtype=np.float64)
    for i in range(r):
        for j in range(n):
            out[i * (h + pad):i * (h + pad) + h, j * (w + pad):j * (w + pad) + w] = rows[i, j]
    return out


def cmd_generate(args, run_dir):
    if args.count <= 0:
        raise UsageError("--count must be positive")
    kind, model = load_model(args.checkpoint)
    ds = read_dataset(_dataset_file(args.dataset, "test"))
    c, h = args.conditioning, args.horizon
    if c + h > ds.sequence_length:
        raise UsageError(f"conditioning + horizon = {c + h} exceeds sequence length {ds.sequence_length}")
    n = min(args.count, len(ds))
    frames, actions = ds.frames[:n], ds.actions[:n]
    x, a = model.predict(frames[:, :c], actions[:, :c], horizon=h, random_state=args.seed)
    ext = ".pgm" if args.format == "pgm" else ".png"
    with open(run_dir / "actions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "t", "pred_velocity", "pred_turn", "true_velocity", "true_turn"])
        for i in range(n):
            truth = frames[i, :c + h]
            pred = np.concatenate([frames[i, :c], x[i]])
            _write_image(run_dir / f"sequence_{i:03d}{ext}", frame_grid(np.stack([truth, pred])))
            for t in range(h):
                p = a[i, t] if a is not None else (float("nan"), float("nan"))
                g = actions[i, c + t]
                w.writerow([i, c + t + 1, repr(float(p[0])), repr(float(p[1])),
                            repr(float(g[0])), repr(float(g[1]))])
    print(f"model={kind} wrote {n} grids to {run_dir}")
    return 0


def cmd_report(args, run_dir):
    names = args.names.split(",") if args.names else [Path(p).stem for p in args.reports]
    if len(names) != len(args.reports):
        raise UsageError(f"{len(names)} names for {len(args.reports)} reports")
    tables = [read_report_csv(p) for p in args.reports]
    metrics = [m for m in tables[0] if all(m in t for t in tables[1:])]
    if not metrics:
        raise UsageError("the reports share no metric")
    for m in metrics:
        lens = {name: len(t[m]["t"]) for name, t in zip(names, tables)}
        if len(set(lens.values())) != 1:
            raise UsageError(f"horizons differ for {m}: {lens}")
    summary = []
    for m in metrics:
        with open(run_dir / f"curve_{m}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *names, *[f"{n}-{names[0]}" for n in names[1:]]])
            ref = tables[0][m]["best"]
            for i, t in enumerate(tables[0][m]["t"]):
                vals = [tab[m]["best"][i] for tab in tables]
                w.writerow([int(t), *[repr(float(v)) for v in vals], *[repr(float(v - ref[i])) for v in vals[1:]]])
        for name, tab in zip(names, tables):
            summary.append((name, m, tab[m]["best"].mean(), tab[m]["mean"].mean()))
    with open(run_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "metric", "best", "mean"])
        for row in summary:
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])
    width = max(len(n) for n in names)
    for name, m, best, mean in summary:
        print(f"{name:<{width}}  {m:<20} best={best:.4f} mean={mean:.4f}")
    print(f"wrote {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    p = _Parser(prog="leapvid", description="Action-conditioned stochastic video prediction lab.")
    p.add_argument("--config", help="flat key = value file with option defaults")
    p.add_argument("--run-name", help="fixed name for the run directory")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("dataset", help="generate a synthetic train/test dataset")
    d.add_argument("--sequences", type=int, default=50)
    d.add_argument("--split", type=float, default=0.9)
    d.add_argument("--length", type=int, default=25)
    d.add_argument("--view-size", type=int, default=16)
    d.add_argument("--scene-size", type=int, default=64)
    d.add_argument("--channels", type=int, default=1)
    d.add_argument("--obstacles", type=int, default=7)
    d.add_argument("--sprites", type=int, default=1)
    d.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--dataset", required=True, help="dataset file or directory holding train.lpds")
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--seed", dest="random_state", type=int, default=0)
    t.add_argument("--conditioning", type=int)
    t.add_argument("--horizon", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--beta-a", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--action-latent-dim", type=int)
    t.add_argument("--code-width", type=int)
    t.add_argument("--predictor-width", type=int)
    t.add_argument("--no-actions", action="store_true", default=False)
    t.add_argument("--no-skips", dest="use_skips", action="store_false", default=None)
    t.add_argument("--prior-sees-current-z", action="store_true", default=None)
    t.add_argument("--sigma-min", type=float)
    t.add_argument("--euler-steps", type=int)
    t.add_argument("--ae-steps", type=int)
    t.add_argument("--latent-channels", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--checkpoint-every", type=int, default=100)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--samples", type=int, default=20)
    e.add_argument("--horizon", type=int, default=20)
    e.add_argument("--conditioning", type=int, default=5)
    e.add_argument("--features", help="autoencoder checkpoint for feature cosine")
    e.add_argument("--baseline", action="store_true", default=False, help="also report copy-last-frame")
    e.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("generate", help="write frame grids and predicted actions")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--dataset", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--horizon", type=int, default=10)
    g.add_argument("--conditioning", type=int, default=5)
    g.add_argument("--format", choices=("png", "pgm"), default="png")
    g.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="compare eval CSVs across models")
    r.add_argument("reports", nargs="+")
    r.add_argument("--names", help="comma-separated model names, in report order")
    return p


_COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval,
             "generate": cmd_generate, "report": cmd_report}
_BOOL_KEYS = {"no_actions", "use_skips", "prior_sees_current_z", "baseline"}


def _apply_config(parser, argv, path):
    conf = read_config(path)
    # the command is the first token outside the global options
    rest, command = list(argv), None
    while rest:
        tok = rest.pop(0)
        if tok in ("--config", "--run-name"):
            rest = rest[1:]
        elif not tok.startswith("-"):
            command = tok
            break
    if command not in _COMMANDS:
        raise UsageError(f"expected a command, one of {', '.join(_COMMANDS)}")
    sub = parser._subparsers._group_actions[0].choices[command]
    known = {a.dest for a in sub._actions} | {"run_name"}
    unknown = set(conf) - known
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    defaults = {k: (_parse_bool(v) if k in _BOOL_KEYS else v) for k, v in conf.items()}
    # argparse applies ``type`` to string defaults, so typed values come for free
    for a in sub._actions:
        if a.dest in defaults and a.required:
            a.required = False
    sub.set_defaults(**{k: v for k, v in defaults.items() if k != "run_name"})
    args = parser.parse_args(argv)
    if args.run_name is None and "run_name" in defaults:
        args.run_name = defaults["run_name"]
    for a in sub._actions:
        if a.dest in defaults and a.type is not None and isinstance(getattr(args, a.dest), str):
            setattr(args, a.dest, a.type(getattr(args, a.dest)))
    return args


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv) if "--config" not in argv else None
        if args is None:
            pre = argparse.ArgumentParser(add_help=False)
            pre.add_argument("--config")
            known, _ = pre.parse_known_args(argv)
            args = _apply_config(parser, argv, known.config)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        seed = getattr(args, "seed", getattr(args, "random_state", 0))
        run_dir = make_run_dir(args.command, seed, args.run_name)
        return _COMMANDS[args.command](args, run_dir)
    except UsageError as exc:
        print(f"leapvid: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, AutoencoderQualityError, FloatingPointError) as exc:
        print(f"leapvid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"leapvid: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"leapvid: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
