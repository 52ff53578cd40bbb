"""``contactdyn`` command line.

Exit codes: 0 success, 1 selfcheck failure, 2 usage error, 3 missing file,
4 configuration error, 5 artifact format or domain mismatch, 6 training
divergence, 7 any other runtime failure. Failures print one JSON object
on stderr: ``{"error": <kind>, "code": <int>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import evaluation as ev
from . import formats as fm
from .config import ConfigError, RunConfig, load_config
from .model import KINDS, DynamicsModel, init_params
from .selfcheck import run_selfcheck
from .simenv import generate_dataset, windows_from_dataset
from .training import DivergenceError, TrainConfig, train_phase

EXIT_SELFCHECK = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_FORMAT = 5
EXIT_DIVERGED = 6
EXIT_RUNTIME = 7


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON run configuration (unknown keys rejected)")
    p.add_argument("--seed", type=int, help="root seed (overrides config and CONTACTDYN_SEED)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contactdyn", description="Contact-aware dynamics: data, training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="simulate a dataset (sim or real-twin)")
    _add_common(p)
    p.add_argument("--domain", choices=["sim", "real-twin"], required=True)
    p.add_argument("--n", type=int, help="number of trajectories")
    p.add_argument("--T", type=int, help="steps per trajectory")
    p.add_argument("--out", required=True)

    for name, help_ in (("train", "train from scratch"), ("finetune", "fine-tune a checkpoint on real-twin data")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--log", help="training log path (default: <out>.log.jsonl)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        if name == "train":
            p.add_argument("--kind", choices=KINDS)
        else:
            p.add_argument("--init", required=True, help="pretrained checkpoint")

    for name, help_ in (("rollout", "receding-horizon predictions"), ("eval", "metrics on a test dataset")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--T-roll", dest="T_roll", type=int)
        p.add_argument("--h-apply", dest="h_apply", type=int)
        p.add_argument("--feedback", choices=["self", "oracle"])
        p.add_argument("--samples", type=int, help="sampler draws averaged per prediction")
        if name == "eval":
            p.add_argument("--csv", help="per-trajectory CSV (default: <out> with .csv)")

    p = sub.add_parser("baselines", help="train and score the baseline ladder")
    _add_common(p)
    p.add_argument("--sim", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--kinds", default="all", help="'all' or comma-separated subset of " + ",".join(KINDS))
    p.add_argument("--seeds", help="comma-separated seeds (default from config)")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")

    p = sub.add_parser("selfcheck", help="gradient, geometry and statistics checks")
    _add_common(p)
    p.add_argument("--out", help="optional JSON report")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _csv_path(out: str, given: str | None) -> str:
    return given or (out[:-5] if out.endswith(".json") else out) + ".csv"


def _check_kh(manifest: dict, cfg: RunConfig, path: str):
    if (manifest["K"], manifest["H"]) != (cfg.model.K, cfg.model.H):
        raise fm.FormatError(f"{path}: windows were declared for K={manifest['K']}, H={manifest['H']}, model uses K={cfg.model.K}, H={cfg.model.H}")


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg: RunConfig) -> dict:
    if args.n is not None:
        cfg.data.n_traj = args.n
    if args.T is not None:
        cfg.data.T = args.T
    env = cfg.env if cfg.env.domain == args.domain else cfg.env.with_domain(args.domain)
    cfg.env = env
    trajs = generate_dataset(env, cfg.data.n_traj, cfg.data.T, seed=cfg.seed, K=cfg.model.K, H=cfg.model.H, tactile=cfg.tactile)
    env_dict = json.loads(json.dumps(dataclasses.asdict(env)))
    manifest = fm.dataset_manifest(args.domain, len(trajs), env_dict, cfg.model.K, cfg.model.H, cfg.to_dict(), cfg.seed)
    fm.write_dataset(args.out, manifest, trajs)
    return {"out": args.out, "count": len(trajs), "domain": args.domain}


def _train_common(args, cfg: RunConfig, phase: str, params, parent: str | None):
    data = fm.read_dataset(args.data)
    _check_kh(data.manifest, cfg, args.data)
    if phase == "finetune" and data.domain != "real-twin":
        raise fm.DomainMismatchError(f"finetune expects a real-twin dataset, {args.data} has domain {data.domain!r}")
    windows = windows_from_dataset(data.trajectories, cfg.model.K, cfg.model.H, cfg.data.stride)
    if len(windows) == 0:
        raise fm.FormatError(f"{args.data}: no training windows")
    t = cfg.train
    if phase == "pretrain":
        epochs = args.epochs if args.epochs is not None else t.epochs
        lr = args.lr if args.lr is not None else t.pretrain_lr
    else:
        epochs = args.epochs if args.epochs is not None else t.finetune_epochs
        lr = args.lr if args.lr is not None else t.finetune_lr
    try:
        tcfg = TrainConfig(phase=phase, lr=lr, lam=t.lam, batch_size=t.batch_size, epochs=epochs, seed=cfg.seed,
                           val_fraction=t.val_fraction, pretrain_lr=t.pretrain_lr)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    log = [{"header": {"phase": phase, "data": args.data, "parent_hash": parent, "train": dataclasses.asdict(tcfg),
                       "seed": cfg.seed, "run_config": cfg.to_dict()}}]
    params, reports = train_phase(tcfg, cfg.model, params, windows, on_epoch=lambda r, _: log.append(r.to_dict()))
    model_dict = json.loads(json.dumps(dataclasses.asdict(cfg.model)))
    digest = fm.write_checkpoint(args.out, params, model_dict, phase, len(reports), cfg.seed, parent, cfg.to_dict(),
                                 extra={"data_env_hash": data.manifest["env_hash"], "data_domain": data.domain})
    fm.write_jsonl(args.log or args.out + ".log.jsonl", log)
    return {"out": args.out, "hash": digest, "epochs": len(reports), "final_loss": reports[-1].L if reports else None}


def cmd_train(args, cfg: RunConfig) -> dict:
    if args.kind is not None:
        cfg.model = dataclasses.replace(cfg.model, kind=args.kind)
    return _train_common(args, cfg, "pretrain", init_params(cfg.model, cfg.seed), None)


def cmd_finetune(args, cfg: RunConfig) -> dict:
    ck = fm.read_checkpoint(args.init)
    cfg.model = ck.model_config
    return _train_common(args, cfg, "finetune", ck.params, fm.file_hash(args.init))


def _rollout_setup(args, cfg: RunConfig):
    ck = fm.read_checkpoint(args.ckpt)
    cfg.model = ck.model_config
    data = fm.read_dataset(args.data)
    _check_kh(data.manifest, cfg, args.data)
    e = cfg.eval
    rcfg = ev.RolloutConfig(
        T_roll=args.T_roll if args.T_roll is not None else e.T_roll,
        h_apply=args.h_apply if args.h_apply is not None else e.h_apply,
        contact_feedback=args.feedback or e.contact_feedback,
        seed=cfg.seed,
        samples=args.samples if args.samples is not None else e.samples,
    )
    try:
        rcfg = rcfg.resolve(cfg.model.H)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not data.trajectories:
        raise fm.FormatError(f"{args.data}: dataset is empty")
    return DynamicsModel(cfg.model, ck.params), data, rcfg, ck


def cmd_rollout(args, cfg: RunConfig) -> dict:
    model, data, rcfg, ck = _rollout_setup(args, cfg)
    K, H = cfg.model.K, cfg.model.H
    res = ev.rollout_batch(model, data.trajectories, K, H, rcfg)
    n = res.pred.p.shape[1]
    header = {"header": {"ckpt": args.ckpt, "ckpt_hash": fm.file_hash(args.ckpt), "data": args.data,
                         "rollout": dataclasses.asdict(rcfg), "first_step": K + 1, "seed": cfg.seed,
                         "run_config": cfg.to_dict()}}
    rows = [header]
    for b, tr in enumerate(data.trajectories):
        s = np.concatenate([res.pred.p[b], res.pred.R[b].reshape(n, 9)], axis=1)
        rows.append({"seed": tr.seed, "s": s.tolist(), "c": [int(v) for v in res.contacts[b]]})
    fm.write_jsonl(args.out, rows)
    return {"out": args.out, "trajectories": len(data.trajectories), "steps": n}


def cmd_eval(args, cfg: RunConfig) -> dict:
    model, data, rcfg, ck = _rollout_setup(args, cfg)
    K, H = cfg.model.K, cfg.model.H
    ws = cfg.env.workspace
    d_max, succ = cfg.eval.d_max_frac * ws, cfg.eval.success_frac * ws
    roll = ev.rollout_metrics(model, data.trajectories, K, H, rcfg, d_max, succ)
    ol = ev.open_loop_metrics(model, windows_from_dataset(data.trajectories, K, H, cfg.data.stride), d_max, succ, seed=cfg.seed,
                              samples=rcfg.samples)
    report = {"rollout": roll.to_dict(), "open_loop": ol.to_dict(), "cell": roll.cell(), "ckpt": args.ckpt,
              "ckpt_hash": fm.file_hash(args.ckpt), "data": args.data, "seed": cfg.seed, "run_config": cfg.to_dict()}
    fm.write_json(args.out, report)
    rows = [["seed", "mse", "add_s_auc", "endpoint_error", "success"]]
    rows += [[tr.seed, r["mse"], r["add_s_auc"], r["endpoint_error"], int(r["success"])]
             for tr, r in zip(data.trajectories, roll.per_trajectory)]
    fm.write_csv(_csv_path(args.out, args.csv), rows)
    return {"out": args.out, "cell": roll.cell(), "success": roll.success}


def cmd_baselines(args, cfg: RunConfig) -> dict:
    kinds = list(KINDS) if args.kinds == "all" else [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise ConfigError(f"unknown kinds {bad}; choose from {list(KINDS)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.baselines.seeds)
    except ValueError as exc:
        raise ConfigError(f"--seeds: {exc}") from exc
    ds = {}
    for role, path, domain in (("sim", args.sim, "sim"), ("real", args.real, "real-twin"), ("test", args.test, "real-twin")):
        d = fm.read_dataset(path)
        if d.domain != domain:
            raise fm.DomainMismatchError(f"--{role} expects a {domain} dataset, {path} has domain {d.domain!r}")
        _check_kh(d.manifest, cfg, path)
        ds[role] = d.trajectories
    tables = [ev.baseline_suite(ds["sim"], ds["real"], ds["test"], kinds, suite_config(cfg), seed=s) for s in seeds]
    med = ev.median_table(tables)
    report = {"median": med, "per_seed": tables, "rows": ev.table_rows(med), "mse_convention": ev.MSE_CONVENTION,
              "seeds": seeds, "run_config": cfg.to_dict()}
    fm.write_json(args.out, report)
    fm.write_csv(_csv_path(args.out, args.csv), ev.table_rows(med))
    return {"out": args.out, "kinds": kinds, "seeds": seeds}


def suite_config(cfg: RunConfig) -> ev.SuiteConfig:
    ws = cfg.env.workspace
    return ev.SuiteConfig(
        model=cfg.model, sim_epochs=cfg.baselines.sim_epochs, real_epochs=cfg.baselines.real_epochs,
        batch_size=cfg.train.batch_size, lam=cfg.train.lam, pretrain_lr=cfg.train.pretrain_lr,
        finetune_lr=cfg.train.finetune_lr, stride=cfg.data.stride,
        rollout=ev.RolloutConfig(T_roll=cfg.eval.T_roll, h_apply=cfg.eval.h_apply, contact_feedback=cfg.eval.contact_feedback,
                                 samples=cfg.eval.samples),
        d_max=cfg.eval.d_max_frac * ws, success_threshold=cfg.eval.success_frac * ws, val_fraction=0.0,
    )


def cmd_selfcheck(args, cfg: RunConfig) -> dict:
    results = run_selfcheck(cfg.seed)
    for r in results:
        print(json.dumps(r.to_dict()))
    if args.out:
        fm.write_json(args.out, {"checks": [r.to_dict() for r in results], "seed": cfg.seed})
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise SelfcheckFailed(f"failed checks: {failed}")
    return {"checks": len(results), "passed": True}


class SelfcheckFailed(Exception):
    pass


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "baselines": cmd_baselines,
    "selfcheck": cmd_selfcheck,
}


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        result = COMMANDS[args.command](args, cfg)
    except SelfcheckFailed as exc:
        return _fail("selfcheck", EXIT_SELFCHECK, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing-file", EXIT_MISSING, str(exc))
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except fm.DomainMismatchError as exc:
        return _fail("domain-mismatch", EXIT_FORMAT, str(exc))
    except fm.FormatError as exc:
        return _fail("format", EXIT_FORMAT, str(exc))
    except DivergenceError as exc:
        return _fail("divergence", EXIT_DIVERGED, str(exc))
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail("runtime", EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    print(json.dumps({"command": args.command, **result}))
    return 0


def main() -> None:
    sys.exit(run_command())
