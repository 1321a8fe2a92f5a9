"""Run orchestration: datasets, training modes, fine-tuning, filtering, reports.

The four training modes mirror the published configuration table
(individual / parallel / general / fine_tune); presets can be overridden by
a flat key=value config file and by CLI flags.  Outputs per run: a metrics
CSV (one row per episode and molecule), a final checkpoint, and a
best-molecule CSV recording both the episode-end state and the best state
visited.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .actions import ActionConfig
from .agent import EpsilonSchedule, ModelParams, load_checkpoint, save_checkpoint
from .distrib import (
    LoopConfig,
    run_distributed,
    run_sequential,
    shard_molecules,
)
from .molgraph import MolError, has_oh_bond, parse_smiles, write_smiles
from .predictors import SurrogateBackend, make_backend
from .reward import RewardConfig


class DatasetError(ValueError):
    pass


class EmptyDataset(DatasetError):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

MODE_PRESETS = {
    "individual": dict(
        episodes=8000, epsilon_initial=1.0, epsilon_decay=0.999,
        train_batch=128, workers=1, modification_batch=1,
    ),
    "parallel": dict(
        episodes=8000, epsilon_initial=1.0, epsilon_decay=0.999,
        train_batch=128, workers=1, modification_batch=8,
    ),
    "general": dict(
        episodes=250, epsilon_initial=1.0, epsilon_decay=0.970,
        train_batch=512, workers=4, modification_batch=4,
    ),
    "fine_tune": dict(
        episodes=200, epsilon_initial=0.5, epsilon_decay=0.961,
        train_batch=128, workers=1, modification_batch=1,
    ),
}


@dataclass
class RunConfig:
    mode: str = "general"
    episodes: int = 250
    workers: int = 4
    modification_batch: int = 4
    max_steps: int = 10
    epsilon_initial: float = 1.0
    epsilon_decay: float = 0.970
    epsilon_floor: float = 0.01
    train_batch: int = 512
    replay_capacity: int = 4000
    learning_rate: float = 1e-4
    discount: float = 1.0
    bde_weight: float = 0.8
    ip_weight: float = 0.2
    gamma_weight: float = 0.5
    bde_factor: float = 0.9
    ip_factor: float = 0.8
    invalid_penalty: float = -1000.0
    bde_bounds: tuple = None  # computed from the dataset when absent
    ip_bounds: tuple = None
    successor_cap: int = 256
    cache_capacity: int = 100_000
    predictor: str = "surrogate"
    predictor_timeout: float = 30.0
    sync_mode: str = "lockstep"
    straggler_timeout: float = 120.0
    seed: int = 0
    sequential: bool = False  # force the in-process reference trainer
    output_dir: str = "runs/out"

    @staticmethod
    def preset(mode, **overrides):
        if mode not in MODE_PRESETS:
            raise ValueError(f"unknown mode {mode!r}")
        cfg = RunConfig(mode=mode, **MODE_PRESETS[mode])
        return replace(cfg, **overrides) if overrides else cfg

    def epsilon_schedule(self):
        return EpsilonSchedule(self.epsilon_initial, self.epsilon_decay,
                               self.epsilon_floor)

    def reward_config(self, dataset=None):
        bde_bounds = self.bde_bounds
        ip_bounds = self.ip_bounds
        if (bde_bounds is None or ip_bounds is None) and dataset:
            lo_b, hi_b, lo_i, hi_i = dataset_bounds(dataset)
            bde_bounds = bde_bounds or (lo_b, hi_b)
            ip_bounds = ip_bounds or (lo_i, hi_i)
        return RewardConfig(
            w_bde=self.bde_weight, w_ip=self.ip_weight, w_gamma=self.gamma_weight,
            bde_bounds=bde_bounds or (55.0, 110.0),
            ip_bounds=ip_bounds or (95.0, 220.0),
            bde_factor=self.bde_factor, ip_factor=self.ip_factor,
            invalid_penalty=self.invalid_penalty,
        )

    def loop_config(self, dataset=None):
        return LoopConfig(
            max_steps=self.max_steps,
            epsilon=self.epsilon_schedule(),
            reward=self.reward_config(dataset),
            actions=ActionConfig(),
            train_batch=self.train_batch,
            replay_capacity=self.replay_capacity,
            learning_rate=self.learning_rate,
            discount=self.discount,
            successor_cap=self.successor_cap,
            cache_capacity=self.cache_capacity,
        )


def load_config_file(path):
    """Flat key=value config with optional ``preset=<mode>`` inheritance."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DatasetError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value
    preset = raw.pop("preset", None)
    cfg = RunConfig.preset(preset) if preset else RunConfig()
    return apply_overrides(cfg, raw)


def apply_overrides(cfg, overrides):
    valid = {f.name: f for f in fields(RunConfig)}
    updates = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in valid:
            raise DatasetError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(value, str):
            value = _coerce(key, value, current)
        updates[key] = value
    cfg = replace(cfg, **updates)
    if "DAMQ_SEED" in os.environ:
        cfg = replace(cfg, seed=int(os.environ["DAMQ_SEED"]))
    return cfg


def _coerce(key, text, current):
    if key in ("bde_bounds", "ip_bounds"):
        lo, hi = text.split(",")
        return (float(lo), float(hi))
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def load_dataset(path):
    """One SMILES per line; '#' comments; every molecule must carry an O-H.

    '#' only starts a comment at the beginning of a line or after whitespace,
    since it is also the SMILES triple-bond symbol.
    """
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split(" #", 1)[0].split("\t#", 1)[0].strip()
            if not line or line.startswith("#"):
                continue
            try:
                mol = parse_smiles(line)
            except MolError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if not has_oh_bond(mol):
                raise DatasetError(
                    f"{path}:{lineno}: NoOhBond: {line!r} has no O-H bond"
                )
            entries.append(write_smiles(mol))
    if not entries:
        raise EmptyDataset(f"{path}: no molecules")
    return entries


def dataset_bounds(dataset, backend=None):
    """(bde_min, bde_max, ip_min, ip_max) over the dataset via the
    configured predictor (surrogates by default)."""
    backend = backend or SurrogateBackend()
    results = backend.predict(list(dataset))
    bdes = [r.bde for r in results if r.bde is not None]
    ips = [r.ip for r in results]
    lo_b, hi_b = min(bdes), max(bdes)
    lo_i, hi_i = min(ips), max(ips)
    if lo_b == hi_b:
        lo_b, hi_b = lo_b - 1.0, hi_b + 1.0
    if lo_i == hi_i:
        lo_i, hi_i = lo_i - 1.0, hi_i + 1.0
    return lo_b, hi_b, lo_i, hi_i


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

METRICS_FIELDS = (
    "episode", "worker", "molecule_id", "step", "action_kind", "reward",
    "episode_best", "bde", "ip", "valid3d", "epsilon", "loss",
)


@dataclass
class RunReport:
    config: RunConfig
    metrics_path: str
    checkpoint_path: str
    best_path: str
    best: dict  # molecule smiles -> record dict
    final_checksum: int
    episode_checksums: list


def run_training(cfg: RunConfig, dataset=None, initial_params=None) -> RunReport:
    """Train per the config; writes metrics CSV, checkpoint, best-molecule CSV."""
    if dataset is None:
        raise DatasetError("run_training needs a dataset (list of SMILES)")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    loop_cfg = cfg.loop_config(dataset)
    params = initial_params or ModelParams.init(np.random.default_rng(cfg.seed))

    episode_checksums = []
    if cfg.sequential or cfg.workers == 1:
        if cfg.sequential:
            loop = run_sequential(
                dataset, params, loop_cfg, make_backend(cfg.predictor,
                                                        cfg.predictor_timeout),
                cfg.episodes, cfg.seed,
            )
            loops = [loop]
        else:
            assignments = shard_molecules(dataset, 1, base_seed=cfg.seed)
            coord, loops = run_distributed(
                assignments, params, loop_cfg,
                lambda: make_backend(cfg.predictor, cfg.predictor_timeout),
                cfg.episodes, cfg.sync_mode, cfg.straggler_timeout,
            )
            episode_checksums = [s.checksums for s in coord.sync_log]
    else:
        assignments = shard_molecules(dataset, cfg.workers, base_seed=cfg.seed)
        coord, loops = run_distributed(
            assignments, params, loop_cfg,
            lambda: make_backend(cfg.predictor, cfg.predictor_timeout),
            cfg.episodes, cfg.sync_mode, cfg.straggler_timeout,
        )
        episode_checksums = [s.checksums for s in coord.sync_log]

    rows = []
    for loop in loops:
        rows.extend(loop.metrics)
    rows.sort(key=lambda r: (r["episode"], r["worker"], r["molecule_id"]))
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        writer.writerows(rows)

    checkpoint_path = out / "final.ckpt"
    final_params = loops[0].params
    save_checkpoint(checkpoint_path, final_params)

    best = {}
    for loop in loops:
        for mol_id, rec in loop.best.items():
            smiles = loop.smiles_list[mol_id]
            best[smiles] = dict(rec)
    best_path = out / "best.csv"
    with open(best_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["initial_smiles", "best_smiles", "best_reward", "best_bde",
             "best_ip", "end_smiles", "end_reward"]
        )
        for smiles in sorted(best):
            rec = best[smiles]
            writer.writerow(
                [smiles, rec["best_smiles"], rec["best_reward"],
                 rec["best_bde"], rec["best_ip"], rec["end_smiles"],
                 rec["end_reward"]]
            )

    return RunReport(
        config=cfg,
        metrics_path=str(metrics_path),
        checkpoint_path=str(checkpoint_path),
        best_path=str(best_path),
        best=best,
        final_checksum=final_params.checksum(),
        episode_checksums=episode_checksums,
    )


def fine_tune(checkpoint_path, molecule, cfg=None, **overrides) -> RunReport:
    """Short per-molecule continuation from a pre-trained checkpoint."""
    if cfg is None:
        cfg = RunConfig.preset("fine_tune", **overrides)
    params = load_checkpoint(checkpoint_path)
    if cfg.episodes == 0:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "final.ckpt"
        save_checkpoint(ckpt, params)
        return RunReport(cfg, "", str(ckpt), "", {}, params.checksum(), [])
    return run_training(cfg, dataset=[molecule], initial_params=params)


# ---------------------------------------------------------------------------
# Filtering and summary statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterCriteria:
    bde_max: float = 76.0
    ip_min: float = 145.0
    sa_max: float = 3.5
    exclude_identical: bool = True


def apply_filter(results, dataset, criteria=FilterCriteria()):
    """Split optimized molecules into accepted / rejected (with reasons).

    ``results`` is a list of dicts with keys smiles, bde, ip, sa.
    """
    known = {write_smiles(parse_smiles(s)) for s in dataset}
    accepted, rejected = [], []
    for rec in results:
        reasons = []
        if rec["bde"] is None or rec["bde"] >= criteria.bde_max:
            reasons.append("bde_max")
        if rec["ip"] <= criteria.ip_min:
            reasons.append("ip_min")
        if rec["sa"] > criteria.sa_max:
            reasons.append("sa_max")
        if criteria.exclude_identical:
            canon = write_smiles(parse_smiles(rec["smiles"]))
            if canon in known:
                reasons.append("identical")
        if reasons:
            rejected.append((rec, reasons))
        else:
            accepted.append(rec)
    return accepted, rejected


def compute_ofr(successes, attempts):
    """Optimization failure rate, 1 - S/A."""
    if attempts == 0:
        raise ValueError("attempts must be positive")
    return 1.0 - successes / attempts


def success_predicate(bde, ip, criteria=FilterCriteria()):
    return bde is not None and bde < criteria.bde_max and ip > criteria.ip_min


# ---------------------------------------------------------------------------
# Report generation
# ---------------------------------------------------------------------------


def report(run_dirs, out_dir, svg=False, criteria=FilterCriteria(),
           n_bins=15):
    """Summarize run outputs as CSV tables (reward histogram, OFR, BDE/IP
    scatter, similarity/SA scatter); optionally render SVG plots."""
    from .fingerprint import morgan_fp, tanimoto
    from .predictors import surrogate_sa

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for run_dir in run_dirs:
        best_path = Path(run_dir) / "best.csv"
        with open(best_path, newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(row)
    if not records:
        raise DatasetError("no best.csv rows found in the given run dirs")

    rewards = [float(r["best_reward"]) for r in records]
    lo, hi = min(rewards), max(rewards)
    span = (hi - lo) or 1.0
    counts = [0] * n_bins
    for r in rewards:
        b = min(int((r - lo) / span * n_bins), n_bins - 1)
        counts[b] += 1
    with open(out / "reward_histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for b, c in enumerate(counts):
            writer.writerow([lo + span * b / n_bins, lo + span * (b + 1) / n_bins, c])

    successes = sum(
        1 for r in records
        if success_predicate(_opt_float(r["best_bde"]), float(r["best_ip"]),
                             criteria)
    )
    ofr = compute_ofr(successes, len(records))
    with open(out / "ofr.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["successes", "attempts", "ofr"])
        writer.writerow([successes, len(records), ofr])

    scatter_rows = []
    sim_rows = []
    for r in records:
        bde = _opt_float(r["best_bde"])
        ip = float(r["best_ip"])
        if not success_predicate(bde, ip, criteria):
            continue
        scatter_rows.append([r["best_smiles"], bde, ip])
        init_mol = parse_smiles(r["initial_smiles"])
        best_mol = parse_smiles(r["best_smiles"])
        sim = tanimoto(morgan_fp(init_mol), morgan_fp(best_mol))
        sim_rows.append([r["best_smiles"], sim, surrogate_sa(best_mol)])
    with open(out / "bde_ip_scatter.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["smiles", "bde", "ip"])
        writer.writerows(scatter_rows)
    with open(out / "similarity_sa_scatter.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["smiles", "similarity", "sa"])
        writer.writerows(sim_rows)

    if svg:
        _render_svg(out, counts, lo, span, n_bins, scatter_rows)
    return {"ofr": ofr, "successes": successes, "attempts": len(records),
            "accepted_scatter": len(scatter_rows)}


def _opt_float(text):
    return None if text in ("", "None", None) else float(text)


def _render_svg(out, counts, lo, span, n_bins, scatter_rows):
    try:
        import matplotlib

        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots()
    edges = [lo + span * b / n_bins for b in range(n_bins)]
    ax.bar(edges, counts, width=span / n_bins, align="edge")
    ax.set_xlabel("best reward")
    ax.set_ylabel("molecules")
    fig.savefig(out / "reward_histogram.svg")
    plt.close(fig)
    if scatter_rows:
        fig, ax = plt.subplots()
        ax.scatter([r[1] for r in scatter_rows], [r[2] for r in scatter_rows])
        ax.set_xlabel("BDE (kcal/mol)")
        ax.set_ylabel("IP (kcal/mol)")
        fig.savefig(out / "bde_ip_scatter.svg")
        plt.close(fig)
