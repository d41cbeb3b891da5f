"""Experiment orchestration: training as needed, result tables, sweeps and embedding export."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import container
from .adaptation import ablation_variants, adapt_and_eval
from .config import ExperimentConfig
from .data import Dataset, generate_dataset, generate_fewshot, task_substitution
from .envs import SOURCE, DomainSpec, TaskSpec, make_domain, make_tasks, training_domains
from .models import ModelConfig, ModelSet
from .offline import OfflineConfig, OfflineTrainer
from .policy import PolicyTrainer, SkillPolicy, load_policy, save_policy, source_pool

log = logging.getLogger(__name__)

RESULT_FIELDS = ("mode", "factor", "disparity", "seed", "episodes", "success_rate", "subtask_success",
                 "normalized_return", "attention_entropy")
SWEEP_FIELDS = ("mode", "factor", "disparity", "fraction", "tasks_retained", "seed", "episodes",
                "success_rate", "normalized_return")


# building blocks -------------------------------------------------------------

def offline_dataset(cfg: ExperimentConfig, path=None) -> Dataset:
    dc = cfg.data
    params = cfg.env_params()
    domains = training_domains(tuple(dc.factors), dc.train_magnitudes or None, dc.orientations,
                               dc.include_source, params)
    tasks = make_tasks(dc.n_tasks, dc.n_waypoints, seed=dc.task_seed)
    return generate_dataset(domains, tasks, dc.episodes_per_pair, dc.data_seed, path, dc.H, params)


def policy_tasks(cfg: ExperimentConfig) -> list:
    return make_tasks(cfg.data.policy_tasks, cfg.data.n_waypoints, seed=cfg.data.policy_task_seed)


def evaluation_tasks(cfg: ExperimentConfig, n: Optional[int] = None) -> list:
    return make_tasks(n or cfg.eval.eval_tasks, cfg.data.n_waypoints, seed=cfg.eval.eval_task_seed)


def target_domain(cfg: ExperimentConfig, factor: str, disparity: str) -> DomainSpec:
    if disparity == "source":
        return SOURCE
    return make_domain(factor, disparity, seed=cfg.eval.domain_seed, params=cfg.env_params())


def demo_seed(seed: int, factor: str, disparity: str) -> int:
    key = [int(seed), sum(map(ord, factor)), sum(map(ord, disparity))]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def fewshot_demos(cfg: ExperimentConfig, domain: DomainSpec, tasks, seed: int, normalizer,
                  per_task: bool = False, factor: str = "", disparity: str = "") -> Dataset:
    """Target demonstrations: ``shots`` in total, or ``shots`` for every task when ``per_task``."""
    params = cfg.env_params()
    s = demo_seed(seed, factor, disparity)
    if not per_task:
        return generate_fewshot(domain, tasks, cfg.eval.shots, s, H=cfg.data.H, params=params, normalizer=normalizer)
    parts = [generate_fewshot(domain, [t], cfg.eval.shots, s + j, H=cfg.data.H, params=params, normalizer=normalizer)
             for j, t in enumerate(tasks)]
    trajs = [t for p in parts for t in p.trajectories()]
    return Dataset.from_trajectories(trajs, {t.name: t for t in tasks}, H=cfg.data.H,
                                     meta={"seed": int(seed), "role": "fewshot", "per_task_shots": cfg.eval.shots},
                                     normalizer=normalizer)


def train_skills(cfg: ExperimentConfig, dataset: Dataset, seed: int, mode: str = "full", out=None) -> ModelSet:
    v = ablation_variants(mode)
    model_cfg = replace(cfg.model, **v.model_overrides)
    off_cfg = replace(cfg.offline, **v.offline_overrides)
    trainer = OfflineTrainer(dataset, model_cfg, off_cfg, seed)
    trainer.train()
    if out is not None:
        trainer.save(out, {"variant": v.mode, "experiment_config": cfg.to_dict()})
    return trainer.models


def train_source_policy(cfg: ExperimentConfig, models: ModelSet, dataset: Dataset, seed: int,
                        out=None) -> tuple[SkillPolicy, list]:
    tasks = policy_tasks(cfg)
    trainer = PolicyTrainer(models, tasks, source_pool(dataset, models), cfg.policy, seed,
                            params=cfg.env_params())
    policy = trainer.train()
    if out is not None:
        save_policy(out, policy, models, {"seed": int(seed), "log": trainer.log,
                                          "experiment_config": cfg.to_dict()})
    return policy, trainer.log


class Workspace:
    """Directory of cached datasets and checkpoints keyed by variant and seed."""

    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)
        self._dataset: Optional[Dataset] = None
        self._models: dict = {}
        self._policies: dict = {}
        self.hashes: dict = {}

    def _tag(self) -> str:
        return self.cfg.digest()[:12]

    def dataset(self) -> Dataset:
        if self._dataset is None:
            path = self.root / f"dataset-{self._tag()}.skad"
            if path.exists():
                self._dataset = Dataset.load(path)
            else:
                self._dataset = offline_dataset(self.cfg, path)
            self.hashes[path.name] = container.file_digest(path)
        return self._dataset

    def models(self, seed: int, mode: str = "full") -> ModelSet:
        variant = "no_diffusion" if mode == "no_diffusion" else "no_crossA" if mode == "no_crossA" else "full"
        key = (variant, int(seed))
        if key not in self._models:
            path = self.root / f"skills-{variant}-s{seed}-{self._tag()}.skad"
            if path.exists():
                models = ModelSet.load(path)
            else:
                models = train_skills(self.cfg, self.dataset(), seed, variant, path)
            models.eval()
            self.hashes[path.name] = container.file_digest(path)
            self._models[key] = models
        return self._models[key]

    def policy(self, seed: int, mode: str = "full") -> SkillPolicy:
        models = self.models(seed, mode)
        variant = "no_diffusion" if mode == "no_diffusion" else "no_crossA" if mode == "no_crossA" else "full"
        key = (variant, int(seed))
        if key not in self._policies:
            path = self.root / f"policy-{variant}-s{seed}-{self._tag()}.skad"
            if path.exists():
                policy = load_policy(path, models)
            else:
                policy, _ = train_source_policy(self.cfg, models, self.dataset(), seed, path)
            policy.eval()
            self.hashes[path.name] = container.file_digest(path)
            self._policies[key] = policy
        return self._policies[key]


# tables ----------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path, rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(f)) for f in fields])
    Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def ci95(values) -> float:
    """Half-width 1.96 * s / sqrt(n) with the sample standard deviation; 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / math.sqrt(len(v)))


def summarize(rows: Sequence[dict], keys=("mode", "factor", "disparity"), metric="success_rate") -> list:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        rs = groups[key]
        vals = [r[metric] for r in rs]
        nr = [r["normalized_return"] for r in rs if r.get("normalized_return") is not None]
        out.append({**dict(zip(keys, key)), "n_seeds": len(rs), f"mean_{metric}": float(np.mean(vals)),
                    f"ci95_{metric}": ci95(vals), "mean_normalized_return": float(np.mean(nr)) if nr else None})
    return out


def _provenance(cfg: ExperimentConfig, ws: Workspace) -> dict:
    return {"config": cfg.to_dict(), "config_digest": cfg.digest(), "inputs": dict(sorted(ws.hashes.items()))}


def _plot(summary: list, path, metric="mean_success_rate"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    levels = ["low", "medium", "high"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in sorted({r["mode"] for r in summary}):
        for factor in sorted({r["factor"] for r in summary}):
            pts = {r["disparity"]: r[metric] for r in summary if r["mode"] == mode and r["factor"] == factor}
            xs = [lv for lv in levels if lv in pts]
            ax.plot(xs, [pts[x] for x in xs], marker="o", label=f"{mode}/{factor}")
    ax.set_xlabel("disparity")
    ax.set_ylabel("success rate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_matrix(cfg: ExperimentConfig, out_dir, work_dir=None, modes=None, factors=None, disparities=None,
               seeds=None, progress=None) -> tuple[list, list]:
    """Evaluate every (mode, factor, disparity, seed) cell; writes results.csv and summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ws = Workspace(work_dir or out_dir / "work", cfg)
    ec = cfg.eval
    modes = list(modes or ec.modes)
    factors = list(factors or ec.eval_factors)
    disparities = list(disparities or ec.disparities)
    seeds = list(ec.seeds if seeds is None else seeds)
    tasks = evaluation_tasks(cfg)
    rows = []
    for seed in seeds:
        for mode in modes:
            policy = ws.policy(seed, mode)
            models = ws.models(seed, mode)
            for factor in factors:
                for lv in disparities:
                    dom = target_domain(cfg, factor, lv)
                    demos = fewshot_demos(cfg, dom, tasks, seed, models.normalizer, factor=factor, disparity=lv)
                    res = adapt_and_eval(policy, models, dom, tasks, demos, ec.episodes, mode, ec.m,
                                         ec.temperature, seed, cfg.env_params())
                    row = {"mode": mode, "factor": factor, "disparity": lv, "seed": seed, **res}
                    rows.append(row)
                    if progress is not None:
                        progress(row)
    rows.sort(key=lambda r: (r["mode"], r["factor"], r["disparity"], r["seed"]))
    write_csv(out_dir / "results.csv", rows, RESULT_FIELDS)
    summary = summarize(rows)
    write_csv(out_dir / "summary.csv", summary, ("mode", "factor", "disparity", "n_seeds", "mean_success_rate",
                                                  "ci95_success_rate", "mean_normalized_return"))
    (out_dir / "summary.json").write_text(json.dumps({"cells": summary, **_provenance(cfg, ws)},
                                                     indent=2, sort_keys=True))
    if ec.plots:
        _plot(summary, out_dir / "success_vs_disparity.png")
    return rows, summary


def data_availability_sweep(cfg: ExperimentConfig, out_dir, work_dir=None, fractions=None, modes=None,
                            factor: Optional[str] = None, disparity: str = "high", seeds=None,
                            progress=None) -> tuple[list, list]:
    """Success as the share of tasks with demonstrations shrinks (removed tasks fall back to neighbours)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ws = Workspace(work_dir or out_dir / "work", cfg)
    ec = cfg.eval
    fractions = list(fractions or ec.fractions)
    modes = list(modes or ec.modes)
    factor = factor or ec.eval_factors[0]
    seeds = list(ec.seeds if seeds is None else seeds)
    tasks = evaluation_tasks(cfg, ec.sweep_tasks)
    dom = target_domain(cfg, factor, disparity)
    rows = []
    for seed in seeds:
        for mode in modes:
            policy, models = ws.policy(seed, mode), ws.models(seed, mode)
            demos = fewshot_demos(cfg, dom, tasks, seed, models.normalizer, per_task=True,
                                  factor=factor, disparity=disparity)
            for frac in fractions:
                reduced, mapping = task_substitution(demos, frac, tasks, seed)
                res = adapt_and_eval(policy, models, dom, tasks, reduced, ec.episodes, mode, ec.m,
                                     ec.temperature, seed, cfg.env_params(), task_map=mapping)
                row = {"mode": mode, "factor": factor, "disparity": disparity, "fraction": float(frac),
                       "tasks_retained": len(reduced.tasks), "seed": seed, **res}
                rows.append(row)
                if progress is not None:
                    progress(row)
    rows.sort(key=lambda r: (r["mode"], r["fraction"], r["seed"]))
    write_csv(out_dir / "availability.csv", rows, SWEEP_FIELDS)
    summary = summarize(rows, keys=("mode", "fraction"))
    (out_dir / "availability.json").write_text(json.dumps({"cells": summary, **_provenance(cfg, ws)},
                                                          indent=2, sort_keys=True))
    return rows, summary


# embeddings ------------------------------------------------------------------

EMBED_FIELDS_HEAD = ("window", "domain_id", "task_id", "trajectory", "start")


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Projection onto the top two principal components, with a deterministic sign convention."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean(0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    comps = vt[:2]
    for i in range(len(comps)):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    proj = c @ comps.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 2 - proj.shape[1]))])
    return proj


def export_embeddings(models: ModelSet, dataset: Dataset, out, n_windows: Optional[int] = None,
                      seed: int = 0, provenance: Optional[dict] = None) -> list:
    """Write skill-embedding means of dataset windows, with a 2-D principal-component projection."""
    idx = dataset.window_index(models.cfg.H)
    order = np.arange(len(idx))
    if n_windows is not None and n_windows < len(idx):
        order = np.sort(np.random.default_rng([int(seed), 55]).choice(len(idx), n_windows, replace=False))
    batch = idx.gather(order)
    z = models.skill_means(batch.states, batch.actions)
    proj = pca_2d(z)
    domains, tasks = dataset.domain_ids, dataset.task_ids
    rows = []
    for i, w in enumerate(order):
        row = {"window": int(w), "domain_id": domains[batch.domain[i]], "task_id": tasks[batch.task[i]],
               "trajectory": int(batch.traj[i]), "start": int(batch.start[i])}
        row.update({f"z{j}": float(z[i, j]) for j in range(z.shape[1])})
        row["pc1"], row["pc2"] = float(proj[i, 0]), float(proj[i, 1])
        rows.append(row)
    fields = list(EMBED_FIELDS_HEAD) + [f"z{j}" for j in range(z.shape[1])] + ["pc1", "pc2"]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, rows, fields)
    if provenance is not None:
        out.with_suffix(".json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    return rows


def matched_distances(rows: Sequence[dict]) -> dict:
    """Mean z distance for windows sharing (task, start) across domains vs sharing (domain, start) across tasks."""
    zcols = sorted(k for k in rows[0] if k.startswith("z") and k[1:].isdigit())
    z = np.array([[r[c] for c in zcols] for r in rows], dtype=np.float64)
    dom = np.array([r["domain_id"] for r in rows])
    task = np.array([r["task_id"] for r in rows])
    start = np.array([r["start"] for r in rows])
    cross_domain, cross_task = [], []
    for t0 in np.unique(start):
        sel = np.flatnonzero(start == t0)
        if len(sel) < 2:
            continue
        zz = z[sel]
        dist = np.linalg.norm(zz[:, None] - zz[None], axis=-1)
        same_task = task[sel][:, None] == task[sel][None]
        same_dom = dom[sel][:, None] == dom[sel][None]
        upper = np.triu(np.ones_like(dist, dtype=bool), 1)
        cross_domain.extend(dist[upper & same_task & ~same_dom])
        cross_task.extend(dist[upper & same_dom & ~same_task])
    return {"cross_domain": float(np.mean(cross_domain)) if cross_domain else float("nan"),
            "cross_task": float(np.mean(cross_task)) if cross_task else float("nan"),
            "n_cross_domain": len(cross_domain), "n_cross_task": len(cross_task)}


# embedding diagnostics -------------------------------------------------------

def triplet_accuracy(models: ModelSet, dataset: Dataset, n: int = 2000, seed: int = 0) -> float:
    """Fraction of (anchor, same-domain, other-domain) window triples whose domain-embedding means
    put the positive strictly closer to the anchor than the negative."""
    t = dataset.window_index(models.cfg.H).sample_BC(n, np.random.default_rng([int(seed), 61]))
    d = models.domain_means(t.anchor.states, t.anchor.actions)
    dp = models.domain_means(t.positive.states, t.positive.actions)
    dn = models.domain_means(t.negative.states, t.negative.actions)
    return float(np.mean(np.linalg.norm(d - dp, axis=1) < np.linalg.norm(d - dn, axis=1)))


def probe_accuracy(x: np.ndarray, y: np.ndarray, seed: int = 0) -> float:
    """Held-out accuracy of a multinomial logistic probe predicting ``y`` from standardized ``x``."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    xtr, xte, ytr, yte = train_test_split(x, y, test_size=0.3, random_state=seed, stratify=y)
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    clf.fit(xtr, ytr)
    return float(clf.score(xte, yte))


def domain_probes(models: ModelSet, dataset: Dataset, n_windows: int = 3000, seed: int = 0) -> dict:
    """Domain-classification accuracy from skill means and from domain means of dataset windows."""
    idx = dataset.window_index(models.cfg.H)
    rng = np.random.default_rng([int(seed), 67])
    order = rng.choice(len(idx), min(n_windows, len(idx)), replace=False)
    b = idx.gather(np.sort(order))
    labels = b.domain
    counts = np.bincount(labels)
    return {"z_accuracy": probe_accuracy(models.skill_means(b.states, b.actions), labels, seed),
            "d_accuracy": probe_accuracy(models.domain_means(b.states, b.actions), labels, seed),
            "chance": float(counts.max() / counts.sum()), "n_domains": int((counts > 0).sum())}
