"""``shadowmark`` command line: pretrain, protect, verify, attack, serve, report.

Run directory layout (``--out``)::

    pretrain/  protected/ pretrain.json runconfig.json
    protect/   pipeline/ owner.key owner.key.json grid.png runconfig.json
    attack/    surrogate/ transfer_curve.{csv,png} ambush_report.json runconfig.json
    verify/<mode>/  report.json runconfig.json
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as forge
from .attacks import QueryBudget, brute_force_ambiguity, harvest_queries, train_surrogate, transfer_curve
from .errors import ShadowMarkError
from .keys import keygen, load_key, sample_wrong_key, save_key
from .train import TrainConfig, TrainedPipeline, encode, heldout_queries
from .verdict import VerificationPolicy, VerificationReport, verify_original, verify_surrogate
from .zoo import (
    KEY_DIM,
    arch_name,
    build_network,
    load_blackbox,
    load_protected,
    pretrain_protected_model,
    save_checkpoint,
)

log = logging.getLogger("shadowmark")

SUBCOMMANDS = ("pretrain", "protect", "verify", "attack", "serve", "report")
HELP = {
    "pretrain": "train and freeze the protected model",
    "protect": "generate a key and train the key encoder and decoder around the frozen model",
    "verify": "extract the mark and decide ownership (original or surrogate rule)",
    "attack": "distil a surrogate and/or run brute-force key guessing",
    "serve": "run the two-channel HTTP service",
    "report": "tabulate every run below --out",
}
REPORT_COLUMNS = ("Type", "M", "G", "D", "S", "m", "NCC", "NCCD", "SR_A")


class CLIError(Exception):
    """Operator-facing failure with an actionable message."""


# -- paths --------------------------------------------------------------------------


def _out(args) -> Path:
    return Path(args.out or f"runs/{args.modality}")


def _protected_dir(args) -> Path:
    return Path(args.protected) if args.protected else _out(args) / "pretrain" / "protected"


def _pipeline_dir(args) -> Path:
    return _out(args) / "protect" / "pipeline"


def _key_path(args) -> Path:
    return Path(args.key) if args.key else _out(args) / "protect" / "owner.key"


def _suspect_dir(args) -> Path:
    return Path(args.suspect) if args.suspect else _out(args) / "attack" / "surrogate"


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise CLIError(f"{what} not found at {path}; {hint}")
    return path


def _load_protected(args):
    manifest = _protected_dir(args) / "manifest.json"
    _require(
        manifest,
        "pretrained protected model",
        f"run `shadowmark pretrain --modality {args.modality} --out {_out(args)}` first",
    )
    return load_protected(_protected_dir(args))


def _load_pipeline(args):
    protected = _load_protected(args)
    _require(
        _pipeline_dir(args) / "pipeline.json",
        "trained watermark pipeline",
        f"run `shadowmark protect --modality {args.modality} --out {_out(args)}` first",
    )
    return TrainedPipeline.load(_pipeline_dir(args), protected)


def _load_key(args):
    path = _key_path(args)
    _require(path, "key file", "pass --key or run `shadowmark protect` to create one")
    return load_key(path)


def _mark(args, shape):
    spec = args.mark
    if spec.lower().endswith(".png"):
        _require(Path(spec), "mark image", "pass a PNG path, 'binary', 'pepper', 'pink' or text")
        return forge.load_mark(spec)
    return forge.make_mark(spec, shape, seed=args.seed)


def _write_runconfig(args, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    cfg["version"] = __version__
    path = directory / "runconfig.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return path


def _train_config(args) -> TrainConfig:
    overlay = dict(args.train or {})
    overlay.setdefault("seed", args.seed)
    return TrainConfig(**overlay)


def _policy(args) -> VerificationPolicy:
    return VerificationPolicy(**(args.policy or {}))


# -- subcommands --------------------------------------------------------------------


def cmd_pretrain(args) -> dict:
    out = _out(args) / "pretrain"
    t0 = time.perf_counter()
    handle = pretrain_protected_model(args.modality, epochs=args.epochs, seed=args.seed)
    save_checkpoint(handle, out / "protected", role="protected", seed=args.seed, extra={"task_error": handle.task_error})
    summary = {
        "modality": args.modality,
        "task_error": handle.task_error,
        "digest": handle.digest(),
        "elapsed_s": time.perf_counter() - t0,
    }
    (out / "pretrain.json").write_text(json.dumps(summary, indent=2))
    _write_runconfig(args, out)
    return summary


def cmd_protect(args) -> dict:
    protected = _load_protected(args)
    out = _out(args) / "protect"
    out.mkdir(parents=True, exist_ok=True)
    if args.key:
        key = load_key(args.key)
    else:
        key = keygen(args.key_dim, seed=args.seed + 1)
        save_key(key, out / "owner.key")
    mark = _mark(args, protected.output_shape)
    G = build_network("key-encoder", args.modality, key.dim, seed=args.seed + 2)
    D = build_network("decoder", args.modality, seed=args.seed + 3)
    pipeline = encode(G, D, protected, key, mark, _train_config(args))
    pipeline.save(out / "pipeline")

    from .viz import qualitative_grid

    rng = np.random.default_rng(args.seed + 4)
    wrong = np.stack([sample_wrong_key(key, rng).vector for _ in range(3)])
    qualitative_grid(pipeline, key, wrong, heldout_queries(args.modality, 3, args.seed + 5), out / "grid.png")
    _write_runconfig(args, out)
    final = pipeline.log[-1] if pipeline.log else {}
    return {
        "converged": pipeline.converged,
        "epochs": len(pipeline.log),
        "ncc_correct": final.get("ncc_correct"),
        "ncc_wrong_mean": final.get("ncc_wrong_mean"),
        "digests": pipeline.digests(),
        "elapsed_s": pipeline.elapsed_s,
    }


def cmd_verify(args) -> dict:
    pipeline = _load_pipeline(args)
    key = _load_key(args)
    policy = _policy(args)
    if args.mode == "original":
        blackbox = load_blackbox(args.suspect) if args.suspect else pipeline.protected
        report = verify_original(pipeline, blackbox, key, pipeline.mark, policy)
    else:
        suspect = _require(
            _suspect_dir(args), "suspect model", f"pass --suspect or run `shadowmark attack --surrogate --out {_out(args)}`"
        )
        report = verify_surrogate(pipeline, load_blackbox(suspect), key, pipeline.mark, policy)
    out = _out(args) / "verify" / args.mode
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    _write_runconfig(args, out)
    return {"mode": report.mode, "ncc": report.ncc, "nccd": report.nccd, "decision": report.decision}


def cmd_attack(args) -> dict:
    pipeline = _load_pipeline(args)
    out = _out(args) / "attack"
    out.mkdir(parents=True, exist_ok=True)
    run_surrogate = args.surrogate or not args.bruteforce
    run_brute = args.bruteforce or not args.surrogate
    result = {}
    if run_surrogate:
        key = _load_key(args)
        dist = harvest_queries(pipeline.protected, QueryBudget(args.queries, args.seed + 11, args.modality))
        held = harvest_queries(pipeline.protected, QueryBudget(128, args.seed + 12, args.modality))
        sur = train_surrogate(
            dist, epochs=args.surrogate_epochs, seed=args.seed + 13, pipeline=pipeline, key=key, heldout=held
        )
        save_checkpoint(sur.surrogate, out / "surrogate", role="surrogate", seed=args.seed + 13)
        if sur.log:
            transfer_curve(pipeline, sur.log, out, title=f"{args.modality} surrogate, {args.queries} queries")
        result["surrogate"] = {"heldout_mse": sur.heldout_mse, "final": sur.log[-1] if sur.log else None}
    if run_brute:
        ambush = brute_force_ambiguity(pipeline, pipeline.protected, pipeline.mark, args.trials, seed=args.seed + 21)
        ambush.save(out / "ambush_report.json")
        result["bruteforce"] = {"sr_a": ambush.sr_a, "wilson_high": ambush.wilson_high, "n_trials": ambush.n_trials}
    _write_runconfig(args, out)
    return result


def cmd_serve(args) -> dict:
    from .gate import GateConfig, serve

    _load_pipeline(args)  # fail early with an actionable message
    serve(
        GateConfig(
            protected_checkpoint=str(_protected_dir(args)),
            pipeline_dir=str(_pipeline_dir(args)),
            host=args.host,
            port=args.port,
            audit_path=str(_out(args) / "audit.jsonl"),
            policy=_policy(args),
        )
    )
    return {}


def _read_json(path: Path):
    return json.loads(path.read_text()) if path.exists() else None


def collect_rows(root: Path) -> list[dict]:
    """One table row per run directory below ``root`` that holds a protect runconfig."""
    rows = []
    for rc_path in sorted(root.rglob("protect/runconfig.json")):
        run = rc_path.parent.parent
        rc = json.loads(rc_path.read_text())
        modality = rc["modality"]
        row = {
            "Type": modality,
            "M": arch_name("protected", modality),
            "G": arch_name("key-encoder", modality),
            "D": arch_name("decoder", modality),
            "S": "-",
            "m": rc.get("mark", "-"),
            "NCC": None,
            "NCCD": None,
            "SR_A": None,
            "run": str(run),
        }
        for mode, column in (("original", "NCC"), ("surrogate", "NCCD")):
            stored = _read_json(run / "verify" / mode / "report.json")
            if stored is None:
                continue
            report = VerificationReport.from_dict(stored)
            if report.rederive_decision() != report.decision:
                raise CLIError(f"stored decision in {run}/verify/{mode} does not match its metrics and policy")
            row[column] = report.ncc if mode == "original" else report.nccd
            row[f"decision_{mode}"] = report.decision
        if (run / "attack" / "surrogate" / "manifest.json").exists():
            row["S"] = arch_name("surrogate", modality)
        ambush = _read_json(run / "attack" / "ambush_report.json")
        if ambush is not None:
            row["SR_A"] = ambush["sr_a"]
            row["SR_A_wilson_high"] = ambush["wilson_high"]
            row["SR_A_trials"] = ambush["n_trials"]
        rows.append(row)
    return rows


def _fmt(v, digits=4):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def render_markdown(rows: list[dict]) -> str:
    head = "| " + " | ".join(REPORT_COLUMNS) + " |"
    sep = "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|"
    lines = [head, sep]
    for r in rows:
        cells = [_fmt(r[c]) for c in REPORT_COLUMNS]
        if r.get("SR_A") is not None:
            cells[-1] = f"{r['SR_A']:.4f} (95% upper {r['SR_A_wilson_high']:.2e}, n={r['SR_A_trials']})"
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> dict:
    root = Path(args.out or "runs")
    rows = collect_rows(root)
    if not rows:
        raise CLIError(f"no protected runs found under {root}; run `shadowmark protect` first")
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(render_markdown(rows))
    with (out / "report.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(REPORT_COLUMNS) + ["run"], extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in list(REPORT_COLUMNS) + ["run"]})
    _write_runconfig(args, out)
    return {"rows": len(rows), "markdown": str(out / "report.md")}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "protect": cmd_protect,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "serve": cmd_serve,
    "report": cmd_report,
}


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys override defaults (flags override it)")
    common.add_argument("--modality", choices=forge.MODALITIES, default="I2I")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="run directory (default runs/<modality>; report: root to scan)")
    common.add_argument("--key", help="key file path")
    common.add_argument("--mark", default="COPYRIGHT", help="text, 'binary', 'pepper', 'pink' or a PNG path")
    common.add_argument("--trials", type=int, default=10_000, help="brute-force trials")
    common.add_argument("--mode", choices=("original", "surrogate"), default="original")
    common.add_argument("--protected", help="protected checkpoint dir (default <out>/pretrain/protected)")
    common.add_argument("--suspect", help="suspect checkpoint dir (default <out>/attack/surrogate)")
    common.add_argument("--epochs", type=int, default=50, help="pretraining epochs")
    common.add_argument("--key-dim", type=int, default=KEY_DIM)
    common.add_argument("--queries", type=int, default=2048, help="distillation query budget")
    common.add_argument("--surrogate-epochs", type=int, default=20)
    common.add_argument("--surrogate", action="store_true", help="attack: run surrogate distillation")
    common.add_argument("--bruteforce", action="store_true", help="attack: run brute-force key ambiguity")
    common.add_argument("--host", default="127.0.0.1")
    common.add_argument("--port", type=int, default=8765)
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="shadowmark", description="Key-driven nonintrusive watermarking: " + ", ".join(SUBCOMMANDS) + ".")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    overlays = {"train": None, "policy": None}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        for name in overlays:
            overlays[name] = cfg.pop(name, None)
        cfg.pop("command", None)
        cfg.pop("version", None)
        known = {a.dest for a in parser._subparsers._group_actions[0].choices[args.command]._actions}
        unknown = set(cfg) - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    for name, value in overlays.items():
        setattr(args, name, value)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (CLIError, ShadowMarkError) as exc:
        print(f"shadowmark {args.command}: {exc}", file=sys.stderr)
        return 2
    if result:
        print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
