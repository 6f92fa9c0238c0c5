"""Run configured experiments and summarise their CSV outputs.

Per run directory::

    config.resolved      effective configuration
    metrics.csv          one row per (seed, round)
    cues.csv             one row per (seed, round, sampled client), when cues are computed
    timing.csv           round wall time next to the per-stage times
    policy_seed<S>.bin   defence policy checkpoint (adaagg only)
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from . import aggregators, attacks, cues, data, engine, models
from .config import ExperimentConfig, resolved_text
from .defense import AdaAggConfig, AdaAggDefense, CuePipeline, InversionConfig, derive_seed
from .td3 import TD3Config

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "round", "seed", "attack", "defense", "test_acc", "test_loss", "reward", "excluded_ids",
    "t_local_ms", "t_invert_ms", "t_cues_ms", "t_policy_ms", "t_agg_ms",
]
CUES_HEADER = ["round", "seed", "client_id", "is_malicious", "S_R", "S_cl", "S_cg", "S_lg", "w_tilde", "excluded", "h"]
TIMING_HEADER = ["round", "seed", "t_round_ms"]


@dataclass
class Splits:
    train: data.Batch
    test: data.Batch
    root: data.Batch
    trust: data.Batch
    val: data.Batch


@lru_cache(maxsize=4)
def _load_pool(dataset: str, root: str | None):
    return data.load_idx_dataset(dataset, "train", root), data.load_idx_dataset(dataset, "test", root)


def build_splits(cfg: ExperimentConfig, root=None) -> Splits:
    """Client pool, test set and the three disjoint server-held splits."""
    d = cfg.data
    server = d.root_size + d.trust_size + d.val_size
    if d.dataset == "synthetic":
        side = 16
        pool = data.make_blobs(d.train_size + server, sigma=d.blob_sigma, side=side, seed=d.data_seed, layout_seed=d.data_seed)
        test = data.make_blobs(d.test_size, sigma=d.blob_sigma, side=side, seed=d.data_seed + 1, layout_seed=d.data_seed)
    else:
        full_train, full_test = _load_pool(d.dataset, None if root is None else str(root))
        need = d.train_size + server
        if need > len(full_train) or d.test_size > len(full_test):
            raise ValueError(f"{d.dataset}: requested {need} training / {d.test_size} test samples")
        rng = np.random.default_rng(d.data_seed)
        pool = full_train.subset(rng.permutation(len(full_train))[:need])
        test = full_test.subset(rng.permutation(len(full_test))[: d.test_size])
    a = d.train_size
    b = a + d.root_size
    c = b + d.trust_size
    return Splits(
        train=pool.subset(np.arange(0, a)),
        test=test,
        root=pool.subset(np.arange(a, b)),
        trust=pool.subset(np.arange(b, c)),
        val=pool.subset(np.arange(c, c + d.val_size)),
    )


def td3_config(cfg: ExperimentConfig) -> TD3Config:
    t = cfg.td3
    return TD3Config(
        hidden=tuple(int(h) for h in t.hidden.split(",")), lr=t.lr, batch_size=t.batch_size,
        gamma=t.gamma, tau=t.tau, policy_delay=t.policy_delay, target_noise=t.target_noise,
        noise_clip=t.noise_clip, explore_noise=t.explore_noise, warmup=t.warmup,
        capacity=t.capacity, raw_bound=t.raw_bound,
    )


def cue_mask(cfg: ExperimentConfig) -> tuple[bool, ...]:
    chosen = {m.strip() for m in cfg.adaagg.cue_mask.split(",")}
    return tuple(k in chosen for k in ("R", "cl", "cg", "lg"))


def make_attack(cfg: ExperimentConfig, seed: int) -> attacks.Attack:
    a = cfg.attack
    if a.name == "ipm":
        return attacks.IPMAttack(a.ipm_eps)
    if a.name == "lmp":
        return attacks.LMPAttack(a.lmp_lambda0, a.lmp_halvings)
    if a.name == "eb":
        return attacks.EBAttack()
    if a.name == "rl":
        return attacks.RLAttack(td3_config(cfg), seed=derive_seed(seed, 31), train=a.rl_train)
    return attacks.NoAttack()


class Simulation:
    """One seed of one configuration."""

    def __init__(self, cfg: ExperimentConfig, seed: int, splits: Splits | None = None, dtype=torch.float32):
        self.cfg, self.seed = cfg, seed
        self.splits = splits or build_splits(cfg)
        s = self.splits
        spec = models.ModelSpec(cfg.fl.model, s.train.image_shape, s.train.num_classes)
        self.model = models.Model(spec, dtype)
        assignment = engine.partition_noniid(
            s.train.y.numpy(), cfg.fl.clients, cfg.data.q, s.train.num_classes,
            seed=derive_seed(seed, 1), n_malicious=cfg.fl.malicious,
        )
        self.fed = engine.Federation(
            self.model, s.train, assignment, s.test, lr=cfg.fl.lr, local_steps=cfg.fl.local_steps,
            batch_size=cfg.fl.batch_size, rounds=cfg.fl.rounds,
        )
        self.attack = make_attack(cfg, seed)
        self.inv = InversionConfig(cfg.adaagg.num_images, cfg.adaagg.max_iters, cfg.adaagg.inv_lr, cfg.adaagg.beta)
        needs_cues = cfg.defense.name == "adaagg" or cfg.run.log_cues
        self.extractor = None
        if needs_cues:
            ext_model = models.Model(models.ModelSpec("small-cnn", s.train.image_shape, s.train.num_classes), dtype)
            self.extractor = cues.train_feature_extractor(
                ext_model, s.root, seed=derive_seed(seed, 2), epochs=cfg.adaagg.extractor_epochs,
                lr=cfg.adaagg.extractor_lr,
            )
        self.defense = self._make_defense()
        self.passive = None
        if cfg.run.log_cues and cfg.defense.name != "adaagg":
            self.passive = CuePipeline(self.model, self.extractor, self.inv)

    def _make_defense(self) -> aggregators.Defense:
        name, d = self.cfg.defense.name, self.cfg.defense
        if name == "fedavg":
            return aggregators.FedAvg()
        if name == "krum":
            return aggregators.KrumDefense(d.krum_f)
        if name == "median":
            return aggregators.MedianDefense()
        if name == "cmedian":
            return aggregators.CMedianDefense(d.clip_tau)
        if name == "clipping":
            return aggregators.ClippingDefense(d.clip_tau)
        if name == "fltrust":
            return aggregators.FLTrustDefense(self.model, self.splits.trust, self.cfg.fl.local_steps, self.cfg.fl.batch_size)
        a = self.cfg.adaagg
        acfg = AdaAggConfig(lam=a.lam, kappa=a.kappa, cue_mask=cue_mask(self.cfg), train_policy=a.train_policy, td3=td3_config(self.cfg))
        return AdaAggDefense(self.model, self.extractor, self.splits.val, self.cfg.n_sampled, acfg, self.inv, seed=derive_seed(self.seed, 3))

    def rounds(self, defense=None, passive=None):
        """Yield ``(round, global params, RoundRecord)`` for the configured number of rounds."""
        defense = defense or self.defense
        g = self.model.init_params(derive_seed(self.seed, 0))
        prev = None
        for t in range(self.cfg.fl.rounds):
            plan = engine.sample_round(self.cfg.fl.clients, self.cfg.fl.fraction, t, derive_seed(self.seed, 4))
            new, record = engine.run_round(self.fed, g, plan, self.attack, defense, passive, prev)
            prev, g = g, new
            yield t, g, record
        if hasattr(defense, "finish"):
            defense.finish()
        self.attack.finish()

    def pretrain_attacker(self) -> None:
        """Let an RL adversary learn against plain FedAvg for one full run."""
        for _ in self.rounds(defense=aggregators.FedAvg(), passive=None):
            pass


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(round(x, 6)) if math.isfinite(x) else str(x)
    return str(x)


class _Writer:
    """Append-only CSV with a flush after every row batch."""

    def __init__(self, path: Path, header: list[str]):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(header)
        self.fh.flush()

    def rows(self, rows) -> None:
        self.w.writerows(rows)
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def run_experiment(cfg: ExperimentConfig, out_dir=None, data_root=None, progress=None) -> Path:
    """Run every seed of ``cfg``; returns the output directory."""
    torch.set_num_threads(max(1, cfg.run.threads))
    out = Path(out_dir) if out_dir is not None else Path(cfg.run.output) / cfg.run.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(resolved_text(cfg))
    splits = build_splits(cfg, data_root)
    logs_cues = cfg.defense.name == "adaagg" or cfg.run.log_cues
    metrics = _Writer(out / "metrics.csv", METRICS_HEADER)
    timing = _Writer(out / "timing.csv", TIMING_HEADER)
    cue_w = _Writer(out / "cues.csv", CUES_HEADER) if logs_cues else None
    try:
        for seed in cfg.seed_list:
            sim = Simulation(cfg, seed, splits)
            if cfg.attack.name == "rl" and cfg.attack.rl_pretrain:
                sim.pretrain_attacker()
            for t, _, rec in sim.rounds(passive=sim.passive):
                times = rec.times_ms if cfg.run.timing else {k: 0.0 for k in rec.times_ms}
                metrics.rows([[
                    t, seed, cfg.attack.name, cfg.defense.name, _fmt(rec.test_acc), _fmt(rec.test_loss),
                    _fmt(rec.reward), ";".join(map(str, rec.excluded)),
                    *(_fmt(round(times[s], 3)) for s in engine.RoundRecord.STAGES),
                ]])
                timing.rows([[t, seed, _fmt(round(rec.round_ms if cfg.run.timing else 0.0, 3))]])
                if cue_w is not None:
                    cue_w.rows([
                        [t, seed, c["client_id"], _fmt(c["is_malicious"]),
                         *(_fmt(v) for v in c.get("cues", (None,) * 4)),
                         _fmt(c.get("w_tilde")), _fmt(c.get("excluded")), _fmt(c.get("h"))]
                        for c in rec.clients
                    ])
                if progress is not None:
                    progress(seed, rec)
            if isinstance(sim.defense, AdaAggDefense):
                sim.defense.agent.save(out / f"policy_seed{seed}.bin")
            if isinstance(sim.attack, attacks.RLAttack):
                sim.attack.agent.save(out / f"attacker_seed{seed}.bin")
    finally:
        metrics.close()
        timing.close()
        if cue_w is not None:
            cue_w.close()
    return out


def cue_statistics(cfg: ExperimentConfig, out_dir=None, data_root=None, progress=None) -> Path:
    """Run with passive cue logging switched on; returns the directory holding cues.csv."""
    cfg.run.log_cues = True
    return run_experiment(cfg, out_dir, data_root, progress)


# ------------------------------------------------------------------- reports
def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def final_accuracies(metrics: list[dict]) -> dict[int, float]:
    """Test accuracy of the last round of every seed."""
    last: dict[int, tuple[int, float]] = {}
    for row in metrics:
        seed, t = int(row["seed"]), int(row["round"])
        if seed not in last or t >= last[seed][0]:
            last[seed] = (t, float(row["test_acc"]))
    return {s: v for s, (_, v) in last.items()}


def cue_gap(rows: list[dict], cue: str = "S_cl") -> dict[int, float]:
    """Per seed: mean benign cue minus mean malicious cue."""
    acc = defaultdict(lambda: {"0": [], "1": []})
    for r in rows:
        if r[cue] != "":
            acc[int(r["seed"])][r["is_malicious"]].append(float(r[cue]))
    return {
        s: float(np.mean(v["0"]) - np.mean(v["1"]))
        for s, v in acc.items() if v["0"] and v["1"]
    }


@dataclass
class Report:
    accuracy: dict[tuple[str, str], float]  # (defense, attack) -> mean final accuracy
    per_seed: dict[tuple[str, str], dict[int, float]]
    timing: dict[str, dict[str, float]]  # defense -> stage -> mean ms per round
    round_ms: dict[str, float]
    series: dict[tuple[str, str], list[float]]
    skipped: list[str]

    def text(self) -> str:
        defenses = sorted({d for d, _ in self.accuracy})
        attacks_ = sorted({a for _, a in self.accuracy})
        lines = ["final test accuracy (mean over seeds)", "defense".ljust(10) + "".join(a.rjust(10) for a in attacks_)]
        for d in defenses:
            cells = [f"{self.accuracy[(d, a)]:.4f}" if (d, a) in self.accuracy else "-" for a in attacks_]
            lines.append(d.ljust(10) + "".join(c.rjust(10) for c in cells))
        lines += ["", "mean time per round (ms)", "defense".ljust(10) + "".join(s.rjust(10) for s in engine.RoundRecord.STAGES) + "round".rjust(10)]
        for d in sorted(self.timing):
            row = "".join(f"{self.timing[d][s]:10.1f}" for s in engine.RoundRecord.STAGES)
            lines.append(d.ljust(10) + row + f"{self.round_ms.get(d, float('nan')):10.1f}")
        if self.skipped:
            lines += ["", "skipped: " + ", ".join(self.skipped)]
        return "\n".join(lines)


def report(dirs, out_dir=None) -> Report:
    """Summarise run directories. Raises ``FileNotFoundError`` if none are readable."""
    accuracy: dict = defaultdict(dict)
    stage_sum: dict = defaultdict(lambda: defaultdict(list))
    round_sum: dict = defaultdict(list)
    series: dict = defaultdict(lambda: defaultdict(list))
    skipped = []
    for d in dirs:
        d = Path(d)
        candidates = [d] if (d / "metrics.csv").exists() else sorted(p.parent for p in d.glob("*/metrics.csv"))
        if not candidates:
            skipped.append(str(d))
            continue
        for run in candidates:
            try:
                rows = read_csv(run / "metrics.csv")
                if not rows:
                    raise ValueError("no rows")
                key = (rows[0]["defense"], rows[0]["attack"])
                for s, v in final_accuracies(rows).items():
                    accuracy[key][(str(run), s)] = v
                for r in rows:
                    for s in engine.RoundRecord.STAGES:
                        stage_sum[key[0]][s].append(float(r[f"t_{s}_ms"]))
                    series[key][int(r["round"])].append(float(r["test_acc"]))
                if (run / "timing.csv").exists():
                    round_sum[key[0]] += [float(r["t_round_ms"]) for r in read_csv(run / "timing.csv")]
            except (OSError, KeyError, ValueError, csv.Error) as exc:
                log.warning("skipping %s: %s", run, exc)
                skipped.append(str(run))
    if not accuracy:
        raise FileNotFoundError("no readable metrics.csv under " + ", ".join(map(str, dirs)))
    rep = Report(
        accuracy={k: float(np.mean(list(v.values()))) for k, v in accuracy.items()},
        per_seed={k: {s: a for (_, s), a in v.items()} for k, v in accuracy.items()},
        timing={d: {s: float(np.mean(v)) for s, v in st.items()} for d, st in stage_sum.items()},
        round_ms={d: float(np.mean(v)) for d, v in round_sum.items() if v},
        series={k: [float(np.mean(v[t])) for t in sorted(v)] for k, v in series.items()},
        skipped=skipped,
    )
    if out_dir is not None:
        _write_report(rep, Path(out_dir))
    return rep


def _write_report(rep: Report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text(rep.text() + "\n")
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["defense", "attack", "final_acc_mean", "n_seeds"])
        for (d, a), v in sorted(rep.accuracy.items()):
            w.writerow([d, a, f"{v:.6f}", len(rep.per_seed[(d, a)])])
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["defense", *(f"t_{s}_ms" for s in engine.RoundRecord.STAGES), "t_round_ms"])
        for d, st in sorted(rep.timing.items()):
            w.writerow([d, *(f"{st[s]:.3f}" for s in engine.RoundRecord.STAGES), f"{rep.round_ms.get(d, float('nan')):.3f}"])
    with open(out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["defense", "attack", "round", "test_acc_mean"])
        for (d, a), ys in sorted(rep.series.items()):
            w.writerows([d, a, t, f"{y:.6f}"] for t, y in enumerate(ys))
