"""Command-line pipeline: gen, train, validate, certify, simulate, compare.

Exit codes: 0 success, 1 runtime failure, 2 usage error or missing input,
3 a certificate check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import certify as cert
from .config import build_architecture, build_model, build_mpc, config_hash, file_hash, load_config
from .dynamics import STATE_NAMES
from .dataset import DatasetGenerationError, GenConfig, generate_dataset, load_dataset, save_dataset
from .nn import load_model, save_model
from .sim import (ExactMpcPolicy, NetworkPolicy, SimConfig, compare_policies, comparison_table,
                  report_json, run_closed_loop, violation_stats)
from .train import TrainConfig, train_constrained, train_normal
from .validate import ValidationConfig, validate_policy

log = logging.getLogger("deepempc")

EXIT_USAGE = 2
EXIT_CERT = 3


class InputError(Exception):
    """A required input file is missing or unreadable."""


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"missing input file: {p}")
    return p


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def _manifest(args, cfg, stage, **extra):
    return {"stage": stage, "seed": args.seed, "config_hash": config_hash(cfg),
            "config": cfg, **extra}


# ---------------------------------------------------------------------------


def cmd_gen(args, cfg):
    model = build_model(cfg)
    g = cfg["generation"]
    mpc_cfg = build_mpc(cfg, model).with_terminal_mode(g.get("terminal_mode", "cost_only"))
    out = args.out_dir
    files = {}
    info = {}
    for name, n, stream in (("train", args.n_train or g["n_train"], 0), ("test", args.n_test or g["n_test"], 1)):
        gen = GenConfig.from_section(g, int(n), args.seed, stream)
        ds = generate_dataset(model, mpc_cfg, gen, threads=args.threads)
        path = out / f"{name}.csv"
        save_dataset(ds, path)
        files[name] = {"path": path.name, "rows": len(ds), "sha256": file_hash(path)}
        info[name] = ds.info
        log.info("%s: %d samples, acceptance %.3f", name, len(ds), ds.info["acceptance_rate"])
    _write_json(out / "gen_manifest.json", _manifest(args, cfg, "gen", files=files, generation=info,
                                                     mpc=mpc_cfg.to_dict()))
    return 0


def _train_config(args, cfg):
    section = dict(cfg["training"])
    for name in TrainConfig.__dataclass_fields__:
        v = getattr(args, f"t_{name}", None)
        if v is not None:
            section[name] = v
    return TrainConfig.from_section(section, seed=args.seed)


def cmd_train(args, cfg):
    data = load_dataset(_require(args.data or args.out_dir / "train.csv"))
    model = build_model(cfg)
    mpc_cfg = build_mpc(cfg, model)
    arch = build_architecture(cfg)
    tc = _train_config(args, cfg)
    t0 = time.perf_counter()
    extra = {}
    if args.mode == "normal":
        params, report = train_normal(data, arch, tc, model, mpc_cfg)
    else:
        params, state, report = train_constrained(data, arch, tc, model, mpc_cfg)
        extra["lagrange"] = state.to_dict()
        extra["row_names"] = mpc_cfg.constraints.row_names
    params.meta["config_hash"] = config_hash(cfg)
    path = Path(args.model_out or args.out_dir / f"model_{args.mode}.bin")
    save_model(path, params)
    _write_json(path.with_suffix(".json"), _manifest(
        args, cfg, "train", mode=args.mode, train_config=tc.to_dict(), model_sha256=file_hash(path),
        data_sha256=file_hash(args.data or args.out_dir / "train.csv"), samples=len(data),
        wall_time=time.perf_counter() - t0, losses=report.to_dict(), **extra))
    log.info("final loss %.5f -> %s", report.loss[-1], path)
    return 0


def _load_params(args, mode_default="constrained"):
    return load_model(_require(args.model or args.out_dir / f"model_{mode_default}.bin"))


def _eval_data_path(args, cfg):
    if args.data:
        return _require(args.data)
    name = "train.csv" if cfg["validation"].get("use_training_set") else "test.csv"
    return _require(args.out_dir / name)


def cmd_validate(args, cfg):
    params = _load_params(args)
    data = load_dataset(_eval_data_path(args, cfg))
    model = build_model(cfg)
    mpc_cfg = build_mpc(cfg, model)
    vc = ValidationConfig.from_section(cfg["validation"])
    rep = validate_policy(data, params.arch, params, model, mpc_cfg, vc)
    stem = args.out_dir / f"validation_{Path(args.model or 'model_constrained').stem}"
    _write_json(stem.with_suffix(".json"), {**rep.to_dict(), "config_hash": config_hash(cfg),
                                            "seed": args.seed})
    text = rep.table(Path(args.model or "model_constrained").stem)
    stem.with_suffix(".txt").write_text(text + "\n")
    print(text)
    return 0


def _box(cfg):
    box = cfg["generation"]["box"]
    lo = np.array([box[k][0] for k in STATE_NAMES], dtype=float)
    hi = np.array([box[k][1] for k in STATE_NAMES], dtype=float)
    return lo, hi


def cmd_certify(args, cfg):
    params = _load_params(args)
    data = load_dataset(_eval_data_path(args, cfg))
    model = build_model(cfg)
    mpc_cfg = build_mpc(cfg, model).with_terminal_mode("hard")
    e_hat, n_e = cert.estimate_policy_error(data, params.arch, params)
    pol = NetworkPolicy(params)
    cc = cert.CertificateConfig.from_section({**cfg["certification"], "seed": args.seed})
    lo, hi = _box(cfg)
    report, geo, descent = cert.certify_policy(model, mpc_cfg, cc, lo, hi, e_hat, n_e,
                                               lambda x: pol(x)[0])
    out = report.to_dict()
    out["geometry"] = geo.to_dict()
    out["descent"] = [d.__dict__ for d in descent]
    out["config_hash"] = config_hash(cfg)
    stem = args.out_dir / f"certificate_{Path(args.model or 'model_constrained').stem}"
    _write_json(stem.with_suffix(".json"), out)
    stem.with_suffix(".txt").write_text(report.table() + "\n")
    print(report.table())
    return 0 if report.all_passed else EXIT_CERT


def _sim_setup(args, cfg):
    model = build_model(cfg)
    sc = SimConfig.from_section(cfg["simulation"], seed=args.seed)
    mpc_cfg = build_mpc(cfg, model).with_terminal_mode(sc.terminal_mode)
    return model, sc, mpc_cfg


def cmd_simulate(args, cfg):
    model, sc, mpc_cfg = _sim_setup(args, cfg)
    if args.policy == "exact":
        pol = ExactMpcPolicy(model, mpc_cfg)
    else:
        params = load_model(_require(args.model))
        clamp = mpc_cfg.control_bound if args.policy == "clamped" else None
        pol = NetworkPolicy(params, clamp, args.policy)
    logs = []
    for r, x0 in enumerate(sc.initial_states(mpc_cfg)):
        lg = run_closed_loop(model, pol, mpc_cfg, sc, x0)
        lg.to_csv(args.out_dir / f"sim_{args.policy}_{r:02d}.csv")
        logs.append(lg)
    stats = violation_stats(logs, mpc_cfg)
    _write_json(args.out_dir / f"sim_{args.policy}.json",
                {"policy": args.policy, "terminal_mode": sc.terminal_mode, "violations": stats.to_dict(),
                 "terminations": [l.termination for l in logs], "config_hash": config_hash(cfg),
                 "seed": args.seed})
    print(f"{args.policy}: mean violations {stats.mean_count:.2f}, max amplitude "
          f"{stats.max_amplitude_pct:.3f}%")
    return 0


def cmd_compare(args, cfg):
    model, sc, mpc_cfg = _sim_setup(args, cfg)
    policies = {"exact": ExactMpcPolicy(model, mpc_cfg)}
    for spec in args.models:
        name, _, path = spec.partition("=")
        if not path:
            raise InputError(f"expected NAME=PATH, got {spec!r}")
        policies[name] = NetworkPolicy(load_model(_require(path)), name=name)
    rep = compare_policies(model, mpc_cfg, sc, policies)
    (args.out_dir / "compare.json").write_text(report_json(rep) + "\n")
    text = comparison_table(rep)
    (args.out_dir / "compare.txt").write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(suppress):
        # the sub-command copy must not overwrite values given before the command
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        gp = argparse.ArgumentParser(add_help=False)
        gp.add_argument("--config", type=Path, default=d(None), help="TOML file overriding the packaged defaults")
        gp.add_argument("--seed", type=int, default=d(0))
        gp.add_argument("--threads", type=int, default=d(1), help="worker process cap")
        gp.add_argument("--out-dir", type=Path, default=d(Path(".")), help="workspace for all files")
        gp.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return gp

    common = globals_parser(True)

    p = argparse.ArgumentParser(prog="deepempc", description=__doc__.splitlines()[0],
                                parents=[globals_parser(False)])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate train/test datasets with exact MPC")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)

    t = sub.add_parser("train", parents=[common], help="train a policy network")
    t.add_argument("--mode", choices=("normal", "constrained"), default="constrained")
    t.add_argument("--data", type=Path, help="training CSV (default OUT_DIR/train.csv)")
    t.add_argument("--model-out", type=Path)
    for name, f in TrainConfig.__dataclass_fields__.items():
        if name == "seed":
            continue
        typ = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str}[f.type]
        t.add_argument(f"--{name.replace('_', '-')}", dest=f"t_{name}", type=typ)

    for name, hlp in (("validate", "indicator statistics on labelled data"),
                      ("certify", "sampled robustness checks; exit 3 when any fails")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--model", type=Path, help="model file (default OUT_DIR/model_constrained.bin)")
        s.add_argument("--data", type=Path, help="labelled CSV (default OUT_DIR/test.csv)")

    s = sub.add_parser("simulate", parents=[common], help="closed-loop runs, one CSV log each")
    s.add_argument("--policy", choices=("exact", "network", "clamped"), default="exact")
    s.add_argument("--model", type=Path)

    c = sub.add_parser("compare", parents=[common], help="exact MPC versus trained networks")
    c.add_argument("models", nargs="+", metavar="NAME=PATH")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "validate": cmd_validate, "certify": cmd_certify,
            "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate" and args.policy != "exact" and args.model is None:
        parser.error("--model is required for network policies")
    try:
        if args.config is not None:
            _require(args.config)
        cfg = load_config(args.config)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except InputError as e:
        print(f"deepempc: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except DatasetGenerationError as e:
        print(f"deepempc: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
