"""Command-line entry points.

Relative output paths are resolved under $SKILLADAPT_OUT (default ./runs).
Metrics stream to stdout as JSON lines.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import container
from .adaptation import ABLATION_MODES, adapt_and_eval
from .config import ConfigError, load_config
from .data import Dataset, DatasetError, ExpertFailure, generate_fewshot
from .envs import DISPARITIES, FACTORS, SOURCE, TaskSpec, make_tasks
from .experiments import (RESULT_FIELDS, data_availability_sweep, evaluation_tasks, export_embeddings,
                          matched_distances, offline_dataset, run_matrix, target_domain, train_skills,
                          train_source_policy, write_csv)
from .models import ModelSet
from .policy import load_policy

OUT_ENV = "SKILLADAPT_OUT"

log = logging.getLogger("skilladapt")


def out_path(p) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUT_ENV, "runs")) / p


def emit(record: dict):
    print(json.dumps(record, sort_keys=True), flush=True)


def parse_domain(text: str, cfg):
    """``source`` or ``factor:level`` such as ``wind:high``."""
    if text == "source":
        return SOURCE, "source", "source"
    try:
        factor, level = text.split(":")
    except ValueError:
        raise argparse.ArgumentTypeError(f"domain must be 'source' or factor:level, got {text!r}")
    if factor not in FACTORS or level not in DISPARITIES:
        raise argparse.ArgumentTypeError(f"unknown domain {text!r}")
    return target_domain(cfg, factor, level), factor, level


def load_tasks(spec: str, cfg) -> list:
    """An integer count of generated tasks, or a JSON file holding a list of task dicts."""
    if spec.isdigit():
        return make_tasks(int(spec), cfg.data.n_waypoints, seed=cfg.data.policy_task_seed)
    return [TaskSpec.from_dict(d) for d in json.loads(Path(spec).read_text())]


# commands --------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    if args.domains:
        cfg.data.factors = [f.strip() for f in args.domains.split(",") if f.strip()]
    if args.tasks is not None:
        cfg.data.n_tasks = args.tasks
    if args.episodes is not None:
        cfg.data.episodes_per_pair = args.episodes
    if args.seed is not None:
        cfg.data.data_seed = args.seed
    cfg.validate()
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.target:
        base = Dataset.load(args.normalize_with) if args.normalize_with else None
        dom, factor, level = parse_domain(args.target, cfg)
        tasks = evaluation_tasks(cfg)
        ds = generate_fewshot(dom, tasks, args.shots, cfg.data.data_seed, out, cfg.data.H, cfg.env_params(),
                              normalizer=base.normalizer if base else None)
    else:
        ds = offline_dataset(cfg, out)
    emit({"command": "gen-data", "out": str(out), "trajectories": len(ds), "domains": ds.domain_ids,
          "sha256": container.file_digest(out)})


def cmd_train_skills(args, cfg):
    ds = Dataset.load(args.data)
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models = train_skills(cfg, ds, args.seed, args.variant, out)
    emit({"command": "train-skills", "out": str(out), "sha256": container.file_digest(out),
          "data_sha256": container.file_digest(args.data), "variant": args.variant})
    return models


def cmd_train_policy(args, cfg):
    models = ModelSet.load(args.skills_checkpoint)
    models.eval()
    ds = Dataset.load(args.data)
    if args.task:
        cfg.data.policy_tasks = len(load_tasks(args.task, cfg))
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.policy.log_every = cfg.policy.log_every or 1000
    policy, history = train_source_policy(cfg, models, ds, args.seed, out)
    for rec in history:
        emit({"command": "train-policy", **rec})
    emit({"command": "train-policy", "out": str(out), "sha256": container.file_digest(out)})


def cmd_adapt(args, cfg):
    models = ModelSet.load(args.skills_checkpoint)
    models.eval()
    policy = load_policy(args.policy_checkpoint, models)
    policy.eval()
    demos = Dataset.load(args.demos)
    dom, factor, level = parse_domain(args.domain, cfg)
    tasks = [demos.tasks[k] for k in demos.task_ids] if args.tasks is None else load_tasks(args.tasks, cfg)
    res = adapt_and_eval(policy, models, dom, tasks, demos, args.episodes, args.mode, cfg.eval.m,
                         cfg.eval.temperature, args.seed, cfg.env_params())
    row = {"mode": args.mode, "factor": factor, "disparity": level, "seed": args.seed, **res}
    emit({"command": "adapt", **row})
    if args.out:
        out = out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, [row], RESULT_FIELDS)


def _matrix(args, cfg, modes):
    out = out_path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows, summary = run_matrix(cfg, out, args.work_dir and out_path(args.work_dir), modes=modes, seeds=seeds,
                               progress=lambda r: emit({"command": args.command,
                                                        **{k: r[k] for k in RESULT_FIELDS}}))
    for cell in summary:
        emit({"command": args.command, "summary": cell})


def cmd_eval(args, cfg):
    _matrix(args, cfg, args.modes.split(",") if args.modes else None)


def cmd_ablate(args, cfg):
    _matrix(args, cfg, args.modes.split(",") if args.modes else list(ABLATION_MODES))


def cmd_sweep(args, cfg):
    out = out_path(args.out)
    fractions = [float(x) for x in args.fractions.split(",")] if args.fractions else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    modes = args.modes.split(",") if args.modes else None
    rows, summary = data_availability_sweep(cfg, out, args.work_dir and out_path(args.work_dir), fractions,
                                            modes, args.factor, args.disparity, seeds,
                                            progress=lambda r: emit({"command": "sweep-availability",
                                                                     "mode": r["mode"], "fraction": r["fraction"],
                                                                     "seed": r["seed"],
                                                                     "success_rate": r["success_rate"]}))
    for cell in summary:
        emit({"command": "sweep-availability", "summary": cell})


def cmd_export(args, cfg):
    models = ModelSet.load(args.skills_checkpoint)
    ds = Dataset.load(args.data)
    out = out_path(args.out)
    prov = {"skills_sha256": container.file_digest(args.skills_checkpoint),
            "data_sha256": container.file_digest(args.data), "config": cfg.to_dict()}
    rows = export_embeddings(models, ds, out, args.windows, args.seed, prov)
    emit({"command": "export-embeddings", "out": str(out), "rows": len(rows), **matched_distances(rows)})


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skilladapt", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    p.add_argument("-v", "--verbose", action="store_true")
    # --config is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    g = add("gen-data", help="generate an offline dataset or a few-shot target set")
    g.add_argument("--domains", help="comma-separated factors for the training grid, e.g. wind,noise")
    g.add_argument("--tasks", type=int)
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--target", help="write few-shot demos for this domain instead (source or factor:level)")
    g.add_argument("--shots", type=int, default=5)
    g.add_argument("--normalize-with", help="offline dataset whose statistics the demos should carry")
    g.set_defaults(fn=cmd_gen_data)

    t = add("train-skills", help="offline training of encoders, prior and adapter")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--variant", choices=("full", "no_crossA", "no_diffusion"), default="full")
    t.set_defaults(fn=cmd_train_skills)

    tp = add("train-policy", help="train the skill policy in the source domain")
    tp.add_argument("--skills-checkpoint", required=True)
    tp.add_argument("--data", required=True, help="offline dataset providing source-domain prompts")
    tp.add_argument("--task", help="number of generated tasks or a JSON task list")
    tp.add_argument("--out", required=True)
    tp.add_argument("--seed", type=int, default=0)
    tp.set_defaults(fn=cmd_train_policy)

    a = add("adapt", help="in-context adaptation to a target domain")
    a.add_argument("--policy-checkpoint", required=True)
    a.add_argument("--skills-checkpoint", required=True)
    a.add_argument("--demos", required=True)
    a.add_argument("--domain", required=True, help="source or factor:level")
    a.add_argument("--episodes", type=int, default=50)
    a.add_argument("--mode", choices=ABLATION_MODES, default="full",
                   help="prompting mode; ablation variants prompt as full with their own checkpoints")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--tasks", help="evaluation tasks (default: the tasks covered by the demos)")
    a.add_argument("--out", help="optional one-row CSV")
    a.set_defaults(fn=cmd_adapt)

    for name, fn, helptext in (("eval", cmd_eval, "result matrix over factors, disparities and seeds"),
                               ("ablate", cmd_ablate, "result matrix over ablation modes")):
        e = add(name, help=helptext)
        e.add_argument("--out", required=True, help="output directory")
        e.add_argument("--work-dir", help="checkpoint cache (default <out>/work)")
        e.add_argument("--modes")
        e.add_argument("--seeds")
        e.set_defaults(fn=fn)

    s = add("sweep-availability", help="success against demonstration task coverage")
    s.add_argument("--out", required=True)
    s.add_argument("--work-dir")
    s.add_argument("--fractions")
    s.add_argument("--modes")
    s.add_argument("--seeds")
    s.add_argument("--factor")
    s.add_argument("--disparity", default="high", choices=DISPARITIES)
    s.set_defaults(fn=cmd_sweep)

    x = add("export-embeddings", help="skill-embedding CSV with a 2-D PCA projection")
    x.add_argument("--skills-checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--windows", type=int)
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        args.fn(args, cfg)
    except (ConfigError, DatasetError, ExpertFailure, container.ContainerError, FileNotFoundError,
            argparse.ArgumentTypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
