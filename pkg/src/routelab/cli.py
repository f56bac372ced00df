"""Command-line pipeline: corpus, pretraining, harvest, route audit, EPO, pass@K and reports.

Effective settings come from a named profile, then an optional JSON config
file, then flags (flags win). Every artifact gets a ``<file>.manifest.json``
sidecar with its sha256, the config section(s) that produced it and the
hashes of its inputs; commands refuse inputs whose sidecars disagree
unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .corpus import (DecodeConfig, Trajectory, build_corpus, harvest_trajectories, load_corpus,
                     load_trajectories, save_corpus, save_trajectories, write_jsonl)
from .counterfactual import AnalysisConfig, BINS, dumps_summary, reports_to_csv, row_key, run_analysis
from .epo import EPOConfig, epo_train
from .errors import InternalInvariantError, InvalidConfigError, RoutelabError
from .model import ModelConfig, init_params
from .numerics import RngState
from .passk import curves_to_csv, eval_passk, outcomes_to_csv
from .pretrain import TrainConfig, train

SECTIONS = ("model", "corpus", "train", "harvest", "analysis", "epo", "passk")

PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "default": {
        "model": ModelConfig().to_dict(),
        "corpus": {"seed": 42, "problems": 2000, "difficulty_range": [1, 6], "eval_fraction": 0.2, "modulus": 11},
        "train": TrainConfig().to_dict(),
        "harvest": {"split": "train", "problems": 200, "samples": 4, "temperature": 1.0, "max_new_tokens": 6,
                    "seed": 42},
        "analysis": AnalysisConfig().to_dict(),
        "epo": EPOConfig().to_dict(),
        "passk": {"split": "eval", "problems": 50, "n": 160, "ks": [1, 2, 4, 8, 16, 32, 64, 128], "B": 2000,
                  "temperature": 1.0, "max_new_tokens": 6, "seed": 42},
    },
}
PROFILES["smoke"] = copy.deepcopy(PROFILES["default"])
PROFILES["smoke"]["model"].update(width=32, blocks=1, expert_hidden=64)
PROFILES["smoke"]["train"].update(steps=200)
PROFILES["smoke"]["harvest"].update(problems=50)
PROFILES["smoke"]["analysis"].update(G=8)
PROFILES["smoke"]["epo"].update(G=8)
PROFILES["smoke"]["passk"].update(problems=20, n=32, ks=[1, 2, 4, 8, 16, 32])


# ---------------------------------------------------------------------------
# config and manifests
# ---------------------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def resolve_config(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    cfg = copy.deepcopy(PROFILES[args.profile])
    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise InvalidConfigError(f"unknown config sections: {sorted(unknown)}")
        for sec, vals in data.items():
            bad = set(vals) - set(cfg[sec])
            if bad:
                raise InvalidConfigError(f"unknown keys in [{sec}]: {sorted(bad)}")
            cfg[sec].update(vals)
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            sec, key = dest.split(".", 1)
            cfg[sec][key] = value
    return cfg


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".manifest.json")


def write_text(path, text: str) -> str:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(text.encode("utf-8"))
    return file_sha256(p)


def write_manifest(path, kind: str, config: dict, inputs: dict[str, str] | None = None,
                   extra: dict | None = None) -> dict:
    doc = {
        "kind": kind,
        "file": Path(path).name,
        "sha256": file_sha256(path),
        "config": config,
        "config_hash": config_hash(config),
        "inputs": dict(sorted((inputs or {}).items())),
        "version": __version__,
    }
    if extra:
        doc["extra"] = extra
    write_text(manifest_path(path), json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc


def read_input(path, kind: str, force: bool) -> dict:
    """Check ``path`` exists and matches its manifest; return the manifest (empty if forced past one)."""
    p = Path(path)
    if not p.is_file():
        raise InvalidConfigError(f"missing input {kind}: {p}")
    mp = manifest_path(p)
    if not mp.is_file():
        if force:
            return {}
        raise InvalidConfigError(f"input {p} has no manifest {mp.name}; pass --force to accept it")
    doc = json.loads(mp.read_text(encoding="utf-8"))
    if doc.get("kind") != kind:
        if not force:
            raise InvalidConfigError(f"input {p} is a {doc.get('kind')!r} artifact, expected {kind!r}")
    if doc.get("sha256") != file_sha256(p) and not force:
        raise InvalidConfigError(f"input {p} does not match the sha256 recorded in its manifest")
    return doc


def check_link(consumer: dict, role: str, producer_sha: str, what: str, force: bool) -> None:
    recorded = consumer.get("inputs", {}).get(role)
    if recorded is not None and recorded != producer_sha and not force:
        raise InvalidConfigError(f"{what} was produced from a different {role} ({recorded[:12]}...); "
                                 "pass --force to override")


def config_header(kind: str, config: dict) -> str:
    return f"{kind} routelab {__version__}\nconfig {canonical_json(config)}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args, cfg) -> dict:
    c = cfg["corpus"]
    if c["problems"] < 1:
        raise InvalidConfigError("corpus must contain at least one problem")
    corpus = build_corpus(c["seed"], c["problems"], tuple(c["difficulty_range"]), c["eval_fraction"], c["modulus"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(out, corpus, header={"config": c})
    splits = {s: sum(1 for _, sp in corpus if sp == s) for s in ("train", "eval")}
    write_manifest(out, "corpus", {"corpus": c}, extra={"splits": splits})
    return {"corpus": str(out), "splits": splits}


def cmd_pretrain(args, cfg) -> dict:
    read_input(args.corpus, "corpus", args.force)
    corpus_sha = file_sha256(args.corpus)
    problems_all = load_corpus(args.corpus)
    train_seqs = [p.prompt + p.solution for p in load_corpus(args.corpus, "train")]
    heldout = [p.prompt + p.solution for p in load_corpus(args.corpus, "eval")]
    if not train_seqs:
        raise InvalidConfigError("corpus has no train split")
    mcfg = ModelConfig.from_dict(cfg["model"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    params = init_params(mcfg, RngState(tcfg.seed).child("model"))
    params, log = train(params, train_seqs, tcfg, heldout=heldout or None, progress=_progress(args, tcfg.steps))
    save_checkpoint(params, args.out)
    summary = {"initial_heldout_ce": log.initial_heldout_ce, "final_heldout_ce": log.final_heldout_ce,
               "steps": len(log.records), "problems": len(problems_all)}
    if args.log:
        write_jsonl(args.log, log.records, header={"config": {"model": cfg["model"], "train": cfg["train"]}})
    write_manifest(args.out, "checkpoint", {"model": cfg["model"], "train": cfg["train"]},
                   {"corpus": corpus_sha}, extra=summary)
    return {"checkpoint": str(args.out), **summary}


def _progress(args, total: int):
    if not getattr(args, "verbose", False):
        return None

    def report(rec: dict) -> None:
        if rec["step"] % 50 == 0 or rec["step"] == total - 1:
            print(f"step {rec['step']} lm {rec['lm_loss']:.4f} lb {rec['lb_loss']:.4f}", file=sys.stderr)
    return report


def cmd_harvest(args, cfg) -> dict:
    read_input(args.checkpoint, "checkpoint", args.force)
    read_input(args.corpus, "corpus", args.force)
    h = cfg["harvest"]
    params, _ = load_checkpoint(args.checkpoint)
    problems = load_corpus(args.corpus, h["split"])[: h["problems"]]
    if not problems:
        raise InvalidConfigError(f"no problems in split {h['split']!r}")
    trajs, stats = harvest_trajectories(params, problems, h["samples"], RngState(h["seed"]),
                                        DecodeConfig(h["temperature"], h["max_new_tokens"]))
    save_trajectories(args.out, trajs, header={"config": h, "stats": stats.to_dict()})
    write_manifest(args.out, "trajectories", {"harvest": h},
                   {"checkpoint": file_sha256(args.checkpoint), "corpus": file_sha256(args.corpus)},
                   extra=stats.to_dict())
    return {"trajectories": str(args.out), **stats.to_dict()}


def _load_pair(args) -> tuple:
    read_input(args.checkpoint, "checkpoint", args.force)
    tdoc = read_input(args.trajectories, "trajectories", args.force)
    ck_sha = file_sha256(args.checkpoint)
    params, _ = load_checkpoint(args.checkpoint)
    trajs = load_trajectories(args.trajectories)
    if not trajs:
        raise InvalidConfigError(f"no trajectories in {args.trajectories}")
    return params, trajs, ck_sha, tdoc


def parse_layer(value: str | int, blocks: int) -> int:
    if value in ("first", "last"):
        return 0 if value == "first" else blocks - 1
    try:
        layer = int(value)
    except (TypeError, ValueError):
        raise InvalidConfigError(f"--layer must be 'first', 'last' or an integer, got {value!r}") from None
    layer = layer + blocks if layer < 0 else layer
    if not 0 <= layer < blocks:
        raise InvalidConfigError(f"layer {value} outside [0, {blocks})")
    return layer


def run_analyze(params, trajs, ck_sha: str, traj_sha: str, a: dict, layer_flag, out_json, out_csv,
                threads: int) -> dict:
    layer = parse_layer(layer_flag if layer_flag is not None else a["layer"], params.config.blocks)
    acfg = AnalysisConfig.from_dict({**a, "layer": layer})
    summary, reports = run_analysis(params, trajs, acfg, threads=threads)
    section = {"analysis": acfg.to_dict()}
    inputs = {"checkpoint": ck_sha, "trajectories": traj_sha}
    write_text(out_csv, reports_to_csv(reports, config_header("per-token route audit", section)))
    write_manifest(out_csv, "analysis-records", section, inputs)
    write_text(out_json, dumps_summary(summary, acfg, layer, len(reports)))
    write_manifest(out_json, "analysis-summary", section, inputs)
    return {"summary": str(out_json), "records": str(out_csv), "layer": layer, "tokens": len(reports)}


def cmd_analyze(args, cfg) -> dict:
    params, trajs, ck_sha, tdoc = _load_pair(args)
    check_link(tdoc, "checkpoint", ck_sha, "trajectory file", args.force)
    out_json = Path(args.out)
    out_csv = Path(args.records) if args.records else out_json.with_suffix(".csv")
    return run_analyze(params, trajs, ck_sha, file_sha256(args.trajectories), cfg["analysis"], args.layer,
                       out_json, out_csv, args.threads)


def run_epo(params, trajs, ck_sha: str, traj_sha: str, e: dict, out, log_path, threads: int) -> dict:
    ecfg = EPOConfig.from_dict(e)
    new, log = epo_train(params, trajs, ecfg, threads=threads)
    save_checkpoint(new, out)
    section = {"epo": ecfg.to_dict()}
    inputs = {"checkpoint": ck_sha, "trajectories": traj_sha}
    summary = log.summary()
    diff_path = Path(out).with_name(Path(out).name + ".diff.json")
    write_text(diff_path, json.dumps({"changed": log.changed, "base": ck_sha}, sort_keys=True, indent=2) + "\n")
    if log_path:
        write_jsonl(log_path, log.records, header={"config": section, "summary": summary})
    write_manifest(out, "checkpoint", section, inputs, extra=summary)
    return {"checkpoint": str(out), "diff": str(diff_path), **summary}


def cmd_epo(args, cfg) -> dict:
    params, trajs, ck_sha, tdoc = _load_pair(args)
    check_link(tdoc, "checkpoint", ck_sha, "trajectory file", args.force)
    return run_epo(params, trajs, ck_sha, file_sha256(args.trajectories), cfg["epo"], args.out, args.log,
                   args.threads)


def _tagged(values: Sequence[str]) -> dict[str, str]:
    out = {}
    for v in values:
        if "=" not in v:
            raise InvalidConfigError(f"expected TAG=PATH, got {v!r}")
        tag, path = v.split("=", 1)
        if not tag or tag in out:
            raise InvalidConfigError(f"empty or repeated tag {tag!r}")
        out[tag] = path
    return out


def run_passk(checkpoints: dict[str, str], corpus_path, p: dict, out_dir, force: bool) -> dict:
    read_input(corpus_path, "corpus", force)
    problems = load_corpus(corpus_path, p["split"])[: p["problems"]]
    if not problems:
        raise InvalidConfigError(f"no problems in split {p['split']!r}")
    out_dir = Path(out_dir)
    section = {"passk": p}
    curves, inputs = {}, {"corpus": file_sha256(corpus_path)}
    for tag, path in checkpoints.items():
        read_input(path, "checkpoint", force)
        params, _ = load_checkpoint(path)
        curve, outcomes = eval_passk(params, problems, p["n"], DecodeConfig(p["temperature"], p["max_new_tokens"]),
                                     p["ks"], p["B"], p["seed"])
        curves[tag] = curve
        inputs[f"checkpoint:{tag}"] = file_sha256(path)
        oc = out_dir / f"outcomes_{tag}.csv"
        write_text(oc, outcomes_to_csv(outcomes))
        write_manifest(oc, "passk-outcomes", section,
                       {"corpus": inputs["corpus"], "checkpoint": inputs[f"checkpoint:{tag}"]})
    cpath = out_dir / "curves.csv"
    write_text(cpath, "".join(f"# {ln}\n" for ln in config_header("pass@K curves", section).splitlines())
               + curves_to_csv(curves))
    write_manifest(cpath, "passk-curves", section, inputs)
    return {"curves": str(cpath), "tags": list(curves),
            "mean": {t: dict(zip(c.ks, c.mean)) for t, c in curves.items()}}


def cmd_passk(args, cfg) -> dict:
    if not args.checkpoint:
        raise InvalidConfigError("at least one --checkpoint TAG=PATH is required")
    return run_passk(_tagged(args.checkpoint), args.corpus, cfg["passk"], args.out_dir, args.force)


def bin_table(summary: dict) -> str:
    """Bin table in the fixed row order; empty bins read ``absent``."""
    ks = summary["config"]["ks"]
    labels = ["Tokens"] + [f"Top-{K}" for K in ks] + ["p_std", "p_best", "Gap"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", *BINS])
    for lab in labels:
        cells = []
        for b in BINS:
            stats = summary["bins"][b]
            cells.append("absent" if stats is None else f"{stats[row_key(lab)]:.4f}")
        w.writerow([row_key(lab), *cells])
    w.writerow(["count", *("absent" if summary["bins"][b] is None else summary["bins"][b]["count"] for b in BINS)])
    return buf.getvalue()


def run_report(analyses: dict[str, str], curves: Sequence[str], out_dir, force: bool) -> dict:
    out_dir = Path(out_dir)
    written = []
    for tag, path in analyses.items():
        read_input(path, "analysis-summary", force)
        summary = json.loads(Path(path).read_text(encoding="utf-8"))
        dest = out_dir / f"bins_{tag}.csv"
        write_text(dest, bin_table(summary))
        written.append(dest.name)
    rows: list[list[str]] = []
    for path in curves:
        read_input(path, "passk-curves", force)
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
        rows.extend(csv.reader(lines[1:]))
    if curves:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tag", "K", "mean", "ci_lo", "ci_hi"])
        w.writerows(rows)
        write_text(out_dir / "passk_curves.csv", buf.getvalue())
        written.append("passk_curves.csv")
    if not written:
        raise InvalidConfigError("report needs at least one --analysis or --curves input")
    return {"report_dir": str(out_dir), "files": written}


def cmd_report(args, cfg) -> dict:
    return run_report(_tagged(args.analysis or []), args.curves or [], args.out_dir, args.force)


def cmd_pipeline(args, cfg) -> dict:
    """Run every stage into ``--out-dir`` with the resolved config."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ns = argparse.Namespace(force=False, threads=args.threads, verbose=args.verbose)
    corpus = out / "corpus.jsonl"
    cmd_gen_corpus(argparse.Namespace(out=corpus), cfg)
    std = out / "standard.ckpt"
    pre = cmd_pretrain(argparse.Namespace(**vars(ns), corpus=corpus, out=std, log=out / "pretrain_log.jsonl"), cfg)
    trajs_path = out / "trajectories.jsonl"
    cmd_harvest(argparse.Namespace(**vars(ns), checkpoint=std, corpus=corpus, out=trajs_path), cfg)
    params, trajs, ck_sha, _ = _load_pair(argparse.Namespace(**vars(ns), checkpoint=std, trajectories=trajs_path))
    traj_sha = file_sha256(trajs_path)
    analyses = {}
    for which in ("first", "last"):
        res = run_analyze(params, trajs, ck_sha, traj_sha, cfg["analysis"], which,
                          out / f"analysis_{which}.json", out / f"analysis_{which}.csv", args.threads)
        analyses[which] = str(res["summary"])
    epo_path = out / "epo.ckpt"
    epo = run_epo(params, trajs, ck_sha, traj_sha, cfg["epo"], epo_path, out / "epo_log.jsonl", args.threads)
    pk = run_passk({"standard": str(std), "epo": str(epo_path)}, corpus, cfg["passk"], out / "passk", False)
    rep = run_report(analyses, [pk["curves"]], out / "report", False)
    manifest = {
        "profile": args.profile,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": {sec: cfg[sec]["seed"] for sec in SECTIONS if "seed" in cfg[sec]},
        "artifacts": {
            name: {"path": str(Path(p).relative_to(out)), "sha256": file_sha256(p)}
            for name, p in [("corpus", corpus), ("standard_checkpoint", std), ("epo_checkpoint", epo_path),
                            ("trajectories", trajs_path), ("analysis_first", out / "analysis_first.json"),
                            ("analysis_last", out / "analysis_last.json"), ("passk_curves", pk["curves"])]
        },
        "reports": sorted(rep["files"]),
        "pretrain": {k: pre[k] for k in ("initial_heldout_ce", "final_heldout_ce")},
        "epo": {k: epo[k] for k in ("pairs_built", "pairs_skipped", "hard_ce_before", "hard_ce_after",
                                    "changed_tensors")},
    }
    write_text(out / "pipeline.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return {"out_dir": str(out), "manifest": str(out / "pipeline.json")}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_section_flags(p: argparse.ArgumentParser, sec: str, spec: Sequence[tuple[str, type]]) -> None:
    g = p.add_argument_group(f"{sec} settings")
    for key, typ in spec:
        flag = "--" + key.replace("_", "-")
        if typ is list:
            g.add_argument(flag, dest=f"{sec}.{key}", type=int, nargs="+", default=None)
        else:
            g.add_argument(flag, dest=f"{sec}.{key}", type=typ, default=None)


MODEL_FLAGS = [("vocab_size", int), ("width", int), ("blocks", int), ("experts", int), ("active", int),
               ("shared_experts", int), ("expert_hidden", int), ("max_context", int)]
TRAIN_FLAGS = [("lr", float), ("weight_decay", float), ("batch_size", int), ("steps", int), ("lb_coef", float),
               ("clip", float), ("seed", int)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routelab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"routelab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", choices=sorted(PROFILES), default="default")
    common.add_argument("--config", help="JSON file with per-section overrides")
    common.add_argument("--threads", type=int, default=1, help="worker cap for per-token parallelism")
    common.add_argument("--force", action="store_true", help="accept inputs whose manifests disagree")
    common.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write the synthetic problem corpus")
    p.add_argument("--out", required=True)
    _add_section_flags(p, "corpus", [("seed", int), ("problems", int), ("eval_fraction", float), ("modulus", int)])
    p.add_argument("--difficulty-range", dest="corpus.difficulty_range", type=int, nargs=2, default=None)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the MoE model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    _add_section_flags(p, "model", MODEL_FLAGS)
    _add_section_flags(p, "train", TRAIN_FLAGS)

    p = sub.add_parser("harvest", parents=[common], help="sample and keep verified trajectories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_section_flags(p, "harvest", [("split", str), ("problems", int), ("samples", int), ("temperature", float),
                                      ("max_new_tokens", int), ("seed", int)])

    p = sub.add_parser("analyze", parents=[common], help="counterfactual route audit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out", required=True, help="bin-summary JSON")
    p.add_argument("--records", help="per-token CSV (default: summary path with .csv)")
    p.add_argument("--layer", help="first, last or a block index")
    _add_section_flags(p, "analysis", [("G", int), ("pool", int), ("noise", float), ("hi", float), ("lo", float),
                                       ("seed", int)])
    p.add_argument("--ks", dest="analysis.ks", type=int, nargs="+", default=None)

    p = sub.add_parser("epo", parents=[common], help="router-only preference optimization")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    _add_section_flags(p, "epo", [("layer", int), ("tau", float), ("G", int), ("pool", int), ("noise", float),
                                  ("beta", float), ("lr", float), ("weight_decay", float), ("clip", float),
                                  ("batch_size", int), ("epochs", int), ("seed", int)])

    p = sub.add_parser("passk", parents=[common], help="pass@K curves with bootstrap intervals")
    p.add_argument("--checkpoint", action="append", metavar="TAG=PATH")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    _add_section_flags(p, "passk", [("split", str), ("problems", int), ("n", int), ("B", int),
                                    ("temperature", float), ("max_new_tokens", int), ("seed", int)])
    p.add_argument("--ks", dest="passk.ks", type=int, nargs="+", default=None)

    p = sub.add_parser("report", parents=[common], help="bin tables and curve data files")
    p.add_argument("--analysis", action="append", metavar="TAG=SUMMARY_JSON")
    p.add_argument("--curves", action="append", metavar="CURVES_CSV")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    p.add_argument("--out-dir", required=True)
    for sec, flags in (("model", MODEL_FLAGS), ("train", TRAIN_FLAGS)):
        _add_section_flags(p, sec, flags)
    return parser


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "harvest": cmd_harvest, "analyze": cmd_analyze,
    "epo": cmd_epo, "passk": cmd_passk, "report": cmd_report, "pipeline": cmd_pipeline,
}


def error_record(exc: BaseException, command: str | None) -> dict:
    return {"error": {"type": type(exc).__name__, "message": str(exc), "command": command}}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise InvalidConfigError("--threads must be >= 1")
        cfg = resolve_config(args)
        result = COMMANDS[args.command](args, cfg)
    except InternalInvariantError as exc:
        print(json.dumps(error_record(exc, args.command), sort_keys=True), file=sys.stderr)
        return 3
    except (RoutelabError, ValueError, OSError, KeyError) as exc:
        print(json.dumps(error_record(exc, args.command), sort_keys=True), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
