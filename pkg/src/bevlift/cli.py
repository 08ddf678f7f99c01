"""Command-line entry point.

Subcommands cover the whole experiment lifecycle: dataset generation, the
two training stages, scenario evaluation, the freeze/tune ablation grid, the
prompt-rank sweep, parameter/FLOP accounting, and the gradient checker.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure.
Every failure also writes a machine-readable JSON object to stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import subprocess
import sys

import numpy as np

from .config import (ConfigError, DEFAULT_CONFIG, config_hash, load_config,
                     paper_scale_config, validate_config)
from .tensor import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

SWEEP_RANKS = [4, 8, 16, 32, 64]


def git_describe():
    """Best-effort describe string for report provenance."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


def _schema():
    path = os.path.join(os.path.dirname(__file__), "schemas", "report.schema.json")
    with open(path) as f:
        return json.load(f)


def write_report(path, report_type, config, seed, payload):
    """Validated JSON report with provenance (no timestamps: reports must be
    byte-identical across reruns of the same seed)."""
    doc = {
        "report": report_type,
        "config_hash": config_hash(config),
        "git": git_describe(),
        "seed": seed,
        "payload": payload,
    }
    import jsonschema
    jsonschema.validate(doc, _schema())
    if path == "-":
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    else:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    return doc


def _load_cfg(args):
    if getattr(args, "paper_scale", False):
        return validate_config(paper_scale_config())
    if args.config:
        return load_config(args.config)
    return validate_config(copy.deepcopy(DEFAULT_CONFIG))


def _load_samples(data_dir, split):
    from .pipeline import dataset_paths
    from .scenegen import load_sample
    paths = dataset_paths(data_dir, split)
    if not paths:
        raise FileNotFoundError(f"no {split} samples under {data_dir}")
    return [load_sample(p) for p in paths]


# -- subcommands ----------------------------------------------------------

def cmd_gen_data(args):
    from .pipeline import generate_dataset
    cfg = _load_cfg(args)
    histogram = {}
    for split in ("train", "eval"):
        _, counts = generate_dataset(cfg, args.out, seed=args.seed, split=split)
        for c in counts:
            histogram[str(c)] = histogram.get(str(c), 0) + 1
    payload = {"out": args.out,
               "train_scenes": cfg["data"]["train_scenes"],
               "eval_scenes": cfg["data"]["eval_scenes"],
               "object_count_histogram": histogram}
    write_report(args.report, "gen-data", cfg, args.seed, payload)
    return EXIT_OK


def cmd_train_base(args):
    from .pipeline import train_base
    cfg = _load_cfg(args)
    samples = _load_samples(args.data, "train")
    log = args.log or os.path.splitext(args.out)[0] + ".csv"
    model = train_base(cfg, samples, seed=args.seed, ckpt_path=args.out, log_path=log)
    payload = {"checkpoint": args.out, "log": log,
               "trainable_params": int(model.store.num_trainable())}
    write_report(args.report, "train-base", cfg, args.seed, payload)
    return EXIT_OK


def cmd_train_lift(args):
    from .pipeline import train_lift
    cfg = _load_cfg(args)
    samples = _load_samples(args.data, "train")
    log = args.log or os.path.splitext(args.out)[0] + ".csv"
    model = train_lift(cfg, samples, args.family, seed=args.seed,
                       base_ckpt=args.base, ckpt_path=args.out, row=args.row,
                       log_path=log, extra_epochs=args.finetune_epochs,
                       use_prompt=not args.no_prompt)
    payload = {"checkpoint": args.out, "log": log, "family": args.family,
               "row": args.row, "use_prompt": not args.no_prompt,
               "trainable_params": int(model.store.num_trainable())}
    write_report(args.report, "train-lift", cfg, args.seed, payload)
    return EXIT_OK


def _parse_scenario(text):
    """"+m2,+m3,+m4" -> ["m2", "m3", "m4"] (progressive additions)."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        out.append(part[1:] if part.startswith("+") else part)
    return out


def cmd_eval(args):
    from .pipeline import evaluate, load_model
    cfg = _load_cfg(args)
    eval_s = _load_samples(args.data, "eval")
    model = load_model(cfg, args.seed, args.ckpt)
    additions = _parse_scenario(args.scenario) if args.scenario else []
    steps = []
    if args.mode in ("no_fusion", "homogeneous"):
        r = evaluate(model, eval_s, [], mode=args.mode)
        steps.append({"agents": [], "ap": r})
    else:
        for i in range(1, len(additions) + 1):
            sc = additions[:i]
            r = evaluate(model, eval_s, sc, mode="fusion",
                         use_prompt=not args.no_prompt)
            steps.append({"agents": sc, "ap": r})
        if not additions:
            raise ConfigError("fusion mode needs --scenario (e.g. '+m2,+m3')")
    payload = {"mode": args.mode, "use_prompt": not args.no_prompt,
               "scenario": additions, "results": steps}
    write_report(args.report, "eval", cfg, args.seed, payload)
    return EXIT_OK


def _ablate_row(cfg, data_dir, seed, base, family, row, out_dir):
    """One freeze/tune grid row: train the row's plan, evaluate fusion AP."""
    from .pipeline import evaluate, load_model, train_lift
    samples = _load_samples(data_dir, "train")
    eval_s = _load_samples(data_dir, "eval")
    ckpt = os.path.join(out_dir, f"ablate_{row.replace('+', '_')}.ckpt")
    model = train_lift(cfg, samples, family, seed=seed, base_ckpt=base,
                       ckpt_path=ckpt, row=row,
                       log_path=os.path.splitext(ckpt)[0] + ".csv")
    trainable = int(model.store.num_trainable())
    ev = load_model(cfg, seed, [base, ckpt])
    r = evaluate(ev, eval_s, [family], mode="fusion")
    return {"row": row, "trainable_params": trainable,
            "checkpoint": ckpt, "ap": r}


def _sweep_one(cfg, data_dir, seed, base, family, rank, out_dir):
    from .pipeline import evaluate, load_model, train_lift
    from .prompt import prompt_param_count
    cfg = copy.deepcopy(cfg)
    cfg["prompt"]["rank"] = rank
    samples = _load_samples(data_dir, "train")
    eval_s = _load_samples(data_dir, "eval")
    ckpt = os.path.join(out_dir, f"rank{rank}.ckpt")
    model = train_lift(cfg, samples, family, seed=seed, base_ckpt=base,
                       ckpt_path=ckpt, log_path=os.path.splitext(ckpt)[0] + ".csv")
    g = cfg["grid"]
    return {"rank": rank,
            "prompt_params": prompt_param_count(cfg["unified_channels"],
                                                g["h"], g["w"], rank),
            "trainable_params": int(model.store.num_trainable()),
            "checkpoint": ckpt,
            "ap": evaluate(load_model(cfg, seed, [base, ckpt]), eval_s,
                           [family], mode="fusion")}


def _n_workers(n_tasks):
    cap = os.environ.get("FH_THREADS", "")
    try:
        cap = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"FH_THREADS must be an integer, got {cap!r}")
    return max(1, min(cap, n_tasks))


def _run_parallel(fn, tasks):
    """Run tasks across worker processes, capped by FH_THREADS."""
    workers = _n_workers(len(tasks))
    if workers == 1:
        return [fn(*t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*tasks)))


def cmd_ablate(args):
    from .pipeline import ABLATION_ROWS
    cfg = _load_cfg(args)
    os.makedirs(args.out_dir, exist_ok=True)
    tasks = [(cfg, args.data, args.seed, args.base, args.family, row, args.out_dir)
             for row in ABLATION_ROWS]
    rows = _run_parallel(_ablate_row, tasks)
    payload = {"family": args.family, "rows": rows}
    write_report(args.report, "ablate", cfg, args.seed, payload)
    return EXIT_OK


def cmd_sweep_rank(args):
    cfg = _load_cfg(args)
    os.makedirs(args.out_dir, exist_ok=True)
    tasks = [(cfg, args.data, args.seed, args.base, args.family, r, args.out_dir)
             for r in SWEEP_RANKS]
    rows = _run_parallel(_sweep_one, tasks)
    payload = {"family": args.family, "ranks": rows}
    write_report(args.report, "sweep-rank", cfg, args.seed, payload)
    return EXIT_OK


def cmd_params_report(args):
    from .model import account
    from .prompt import prompt_param_count
    cfg = _load_cfg(args)
    acct = account(cfg)
    g = cfg["grid"]
    payload = {
        "params": acct["params"],
        "flops": acct["flops"],
        "total_params": acct["total_params"],
        "total_flops": acct["total_flops"],
        "prompt_low_rank": prompt_param_count(cfg["unified_channels"], g["h"],
                                              g["w"], cfg["prompt"]["rank"]),
        "prompt_full": prompt_param_count(cfg["unified_channels"], g["h"],
                                          g["w"], cfg["prompt"]["rank"],
                                          low_rank=False),
    }
    write_report(args.report, "params-report", cfg, args.seed, payload)
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import run_op_checks, run_end_to_end_check
    cfg = _load_cfg(args)
    ops = run_op_checks(seed=args.seed)
    e2e = run_end_to_end_check(seed=args.seed)
    worst_op = max(r["rel_err"] for r in ops)
    ok = worst_op < 1e-3 and e2e["rel_err"] < 1e-2
    payload = {"ops": ops, "end_to_end": e2e,
               "worst_op_rel_err": worst_op, "passed": ok}
    write_report(args.report, "grad-check", cfg, args.seed, payload)
    if not ok:
        raise NumericError(
            f"gradient check failed: worst op rel err {worst_op:.3e}, "
            f"end-to-end {e2e['rel_err']:.3e}")
    return EXIT_OK


# -- argument plumbing ----------------------------------------------------

def _add_common(p, config=True, seed=True, report=True):
    if config:
        p.add_argument("--config", default=None, help="JSON config file (defaults used if omitted)")
        p.add_argument("--paper-scale", action="store_true",
                       help="use the paper-scale architecture preset")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    if report:
        p.add_argument("--report", default="-", help="report JSON path ('-' = stdout)")


def build_parser():
    ap = argparse.ArgumentParser(prog="bevlift",
                                 description="Heterogeneous collaborative BEV "
                                             "perception at desk scale")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-base", help="stage 1: homogeneous base training")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("train-lift", help="stage 2: adapt one family")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--family", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--row", default="lift", help="freeze/tune grid row")
    p.add_argument("--no-prompt", action="store_true",
                   help="aligner-only baseline (prompt frozen at init)")
    p.add_argument("--finetune-epochs", type=int, default=0,
                   help="extra stage-2 epochs")
    p.add_argument("--log", default=None)
    p.set_defaults(fn=cmd_train_lift)

    p = sub.add_parser("eval", help="scenario evaluation")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint (repeatable: base, then lift ckpts)")
    p.add_argument("--scenario", default="",
                   help="progressive additions, e.g. '+m2,+m3,+m4'")
    p.add_argument("--mode", default="fusion",
                   choices=["fusion", "no_fusion", "homogeneous"])
    p.add_argument("--no-prompt", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="freeze/tune ablation grid (5 rows)")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--family", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep-rank", help="prompt rank sweep R in {4,8,16,32,64}")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--family", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_sweep_rank)

    p = sub.add_parser("params-report", help="parameter and FLOP accounting")
    _add_common(p)
    p.set_defaults(fn=cmd_params_report)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    _add_common(p)
    p.set_defaults(fn=cmd_grad_check)

    return ap


def _fail(code, err):
    sys.stderr.write(json.dumps({
        "error": type(err).__name__, "message": str(err), "exit_code": code,
    }) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, e)
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as e:
        return _fail(EXIT_IO, e)
    except NumericError as e:
        return _fail(EXIT_NUMERIC, e)
    except Exception as e:  # frozen-parameter violations count as numeric failures
        from .pipeline import FrozenParameterError
        if isinstance(e, FrozenParameterError):
            return _fail(EXIT_NUMERIC, e)
        raise


if __name__ == "__main__":
    sys.exit(main())
