"""Small-scale directional experiment: transfer init, mutual modality learning, ensembles.

For one seed it trains on a freshly generated dataset and returns the
validation numbers that the three comparisons need:

* Flow trained from a random init vs from the stage-1 RGB model;
* solo CE RGB vs the RGB model of the final RGB+Flow mutual stage;
* the RGB+Flow ensemble from the ensemble preset vs its better member.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import evaluate, net
from .data import build_dataset
from .modality import CHANNELS
from .pipeline import Runner, derive_seed, run_ensemble_pipeline, run_solo_pipeline
from .sampling import SamplingSpec
from .synthvid import DatasetConfig
from .train import Member, TrainConfig, fit, load_checkpoint

log = logging.getLogger(__name__)

MODALITIES = ("RGB", "Flow")


@dataclass
class TrendSetup:
    n_cls: int = 8
    num_clips_train: int = 512
    num_clips_val: int = 128
    t_total: int = 12
    widths: tuple[int, ...] = (8, 16, 32)
    strides: tuple[int, ...] = (2, 2, 2)
    shift_fraction: float = 1 / 4
    # from-scratch RGB runs (stage 1)
    epochs: int = 16
    milestones: tuple[int, ...] = (12,)
    lr: float = 0.2
    # stages 2 and 3, which start from trained weights, and the two Flow runs
    finetune_epochs: int = 8
    finetune_milestones: tuple[int, ...] = (6,)
    finetune_lr: float = 0.05
    batch_size: int = 16
    sampling: SamplingSpec = field(default_factory=lambda: SamplingSpec(n_in=4, tau=2, test_k=1, test_m=2))

    def dataset(self, seed: int) -> DatasetConfig:
        return DatasetConfig(num_clips_train=self.num_clips_train, num_clips_val=self.num_clips_val,
                             t_total=self.t_total, n_cls=self.n_cls, seed=seed)

    def model(self) -> net.ModelSpec:
        return net.ModelSpec(CHANNELS["RGB"], self.sampling.n_in, self.n_cls, widths=self.widths,
                             strides=self.strides, shift_fraction=self.shift_fraction)

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, milestones=self.milestones, lr=self.lr,
                           batch_size=self.batch_size, sampling=self.sampling, val_k=0, val_m=1)

    def finetune(self) -> TrainConfig:
        return self.train().replace(epochs=self.finetune_epochs, milestones=self.finetune_milestones,
                                    lr=self.finetune_lr)


def _val_scores(path, data, sampling):
    w, spec, mod = load_checkpoint(path)
    return evaluate.multiclip_predict(w, spec, data.val, mod, sampling)


def run_trend_seed(seed: int, root, setup: TrendSetup = TrendSetup(), cache_dir=None) -> dict:
    root = Path(root)
    data = build_dataset(setup.dataset(seed), cache_dir=cache_dir)
    runner = Runner(root, data, setup.model(), setup.finetune(), stage_configs={"1": setup.train()})

    solo = run_solo_pipeline(runner, MODALITIES, seed)
    ce0 = solo.stages[0].models[0]

    # Flow from random vs Flow from the first CE RGB model, same data order
    flow_spec = runner.spec_for("Flow")
    rgb_w, _, _ = load_checkpoint(ce0.checkpoint)
    # Flow converges within a few epochs, so both runs use the short schedule
    cfg = setup.finetune().replace(seed=derive_seed(seed, "flow"))
    inits = {"random": net.init_weights(flow_spec, derive_seed(seed, "flow_init")),
             "from_rgb": net.transfer_weights(rgb_w, flow_spec)}
    flow = {k: fit([Member(w, flow_spec, "Flow", f"flow_{k}")], data, cfg, method="solo")[0].best_metric
            for k, w in inits.items()}

    ens = run_ensemble_pipeline(runner, MODALITIES, seed)
    scores = {m: _val_scores(ens.final[m].checkpoint, data, setup.sampling) for m in MODALITIES}
    singles = {m: evaluate.primary_metric(evaluate.metrics(evaluate.prediction_batch(s, data.val)))
               for m, s in scores.items()}
    mixed = evaluate.ensemble_predict(list(scores.values()))
    ens_metric = evaluate.primary_metric(evaluate.metrics(evaluate.prediction_batch(mixed, data.val)))

    out = {
        "seed": seed,
        "flow_random": flow["random"],
        "flow_from_rgb": flow["from_rgb"],
        "rgb_solo": ce0.best_metric,
        "mml_rgb": solo.final["RGB"].best_metric,
        "ensemble": ens_metric,
        "best_single": max(singles.values()),
        **{f"single_{m.lower()}": v for m, v in singles.items()},
    }
    log.info("trend seed %d: %s", seed, out)
    return out


def verdicts(rows: list[dict]) -> dict[str, int]:
    """Number of seeds in which each comparison goes the expected way."""
    return {
        "transfer_init": sum(r["flow_from_rgb"] >= r["flow_random"] for r in rows),
        "mml_rgb": sum(r["mml_rgb"] >= r["rgb_solo"] for r in rows),
        "ensemble": sum(r["ensemble"] >= r["best_single"] for r in rows),
    }
