"""Desk-scale comparison of training modes on the synthetic corpus."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

from .corpus import SyntheticConfig, generate_synthetic_corpus, split_corpus
from .evaluation import change_turn_accuracy, joint_goal_accuracy, noise_probe
from .inference import rollout_corpus
from .training import TrainConfig, train

log = logging.getLogger(__name__)

FULL_MODES = ("baseline", "monet")
SMOKE_MODES = ("baseline_no_state", "monet_st", "monet_cm")


@dataclass(frozen=True)
class DeskConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    corpus: SyntheticConfig = field(default_factory=SyntheticConfig)
    split: tuple[float, float, float] = (0.75, 0.125, 0.125)
    split_seed: int = 0
    epochs: int = 15
    smoke_epochs: int = 3
    probe_ratios: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    # shared by every mode; only the mode switches differ between runs
    train: dict = field(default_factory=lambda: dict(
        n_layers=2, n_heads=2, d_model=64, d_ff=128, slot_heads=2, max_len=256,
        dropout=0.0, lr_encoder=1e-3, lr_heads=1e-3, batch_size=8,
        noise_threshold=0.3, temperature=0.1,
    ))


def run_desk_experiment(config: DeskConfig = DeskConfig()) -> dict:
    """Train every mode for every seed and collect the comparison numbers.

    Baseline and MoNET run the full schedule with validation-based selection
    and are then evaluated on the test split (rollout, change turns, noise
    probe). The three ablations only run ``smoke_epochs`` epochs so that their
    loss curves can be checked.
    """
    ontology, corpus = generate_synthetic_corpus(config.corpus)
    train_set, valid_set, test_set = split_corpus(corpus, config.split, config.split_seed)
    runs = []
    started = time.perf_counter()
    for seed in config.seeds:
        for mode in FULL_MODES + SMOKE_MODES:
            full = mode in FULL_MODES
            cfg = TrainConfig(mode=mode, seed=seed, epochs=config.epochs if full else config.smoke_epochs,
                              **config.train)
            t0 = time.perf_counter()
            ckpt = train(cfg, train_set, ontology, valid_set if full else None)
            run = {"mode": mode, "seed": seed, "losses": [h["loss"] for h in ckpt.history]}
            if full:
                records = rollout_corpus(ckpt.model, test_set)
                oracle = rollout_corpus(ckpt.model, test_set, oracle_prev_state=True)
                run.update(
                    best_epoch=ckpt.best_epoch,
                    valid_joint=ckpt.best_valid_joint,
                    test_joint=joint_goal_accuracy(records),
                    change_joint=change_turn_accuracy(records, test_set),
                    oracle_joint=joint_goal_accuracy(oracle),
                    probe=noise_probe(ckpt.model, test_set, config.probe_ratios, seed=seed),
                )
            run["seconds"] = time.perf_counter() - t0
            log.info("%s", {k: v for k, v in run.items() if k != "probe"})
            runs.append(run)
    return {
        "config": asdict(config),
        "sizes": [len(train_set), len(valid_set), len(test_set)],
        "runs": runs,
        "summary": summarize(runs),
        "seconds": time.perf_counter() - started,
    }


def _mean(xs):
    xs = list(xs)
    return sum(xs) / len(xs)


def summarize(runs: list[dict]) -> dict:
    """Seed-averaged numbers per mode."""
    out = {}
    for mode in dict.fromkeys(r["mode"] for r in runs):
        mine = [r for r in runs if r["mode"] == mode]
        n = min(len(r["losses"]) for r in mine)
        entry = {"losses": [_mean(r["losses"][i] for r in mine) for i in range(n)]}
        if "test_joint" in mine[0]:
            for key in ("test_joint", "change_joint", "oracle_joint"):
                entry[key] = _mean(r[key] for r in mine)
            ratios = [row["ratio"] for row in mine[0]["probe"]]
            entry["probe_joint"] = {
                ratio: _mean(r["probe"][i]["joint_accuracy"] for r in mine) for i, ratio in enumerate(ratios)
            }
            entry["probe_distance"] = {
                ratio: _mean(r["probe"][i]["mean_l2_distance"] for r in mine) for i, ratio in enumerate(ratios)
            }
        out[mode] = entry
    return out
