"""Multi-stage training pipelines.

``solo``: two RGB CE runs, an RGB+RGB mutual run initialised from them, then
one mutual run over all modalities whose models all start from one stage-2
network.

``ensemble``: the same first stage, two separate RGB+RGB mutual launches, then
for every modality a single-modality mutual pair seeded with one model from
each launch. The best member of each pair is the ensemble member.

Every training run is keyed by a hash of everything that determines its
output, so rerunning into the same directory skips finished work.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import io, net
from .modality import CHANNELS
from .train import Member, TrainConfig, fit, load_checkpoint, save_checkpoint, write_metric_log

log = logging.getLogger(__name__)

PRESETS = ("solo", "ensemble")


class StageFailure(RuntimeError):
    def __init__(self, stage_id: str, message: str):
        super().__init__(f"stage {stage_id}: {message}")
        self.stage_id = stage_id


def derive_seed(seed: int, tag: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{tag}".encode()).digest()[:4], "little")


@dataclass
class ModelRecord:
    name: str
    modality: str
    init: str  # "random" or a checkpoint path
    init_seed: int | None
    checkpoint: str = ""
    sha256: str = ""
    best_epoch: int = -1
    best_metric: float = float("nan")


@dataclass
class PipelineStage:
    stage_id: str
    method: str
    train_seed: int
    models: list[ModelRecord] = field(default_factory=list)
    key: str = ""

    @property
    def modalities(self) -> list[str]:
        return [m.modality for m in self.models]


@dataclass
class PipelineResult:
    preset: str
    seed: int
    stages: list[PipelineStage]
    final: dict[str, ModelRecord]
    manifest_path: Path | None = None

    @property
    def n_runs(self) -> int:
        return sum(len(s.models) for s in self.stages)

    def manifest(self) -> dict:
        return {"preset": self.preset, "seed": self.seed, "n_runs": self.n_runs,
                "stages": [{"stage_id": s.stage_id, "method": s.method, "train_seed": s.train_seed,
                            "key": s.key, "models": [asdict(m) for m in s.models]} for s in self.stages],
                "final": {k: asdict(v) for k, v in self.final.items()}}


class Runner:
    """Executes training groups under ``root``; a group whose outputs exist with matching hashes is skipped."""

    def __init__(self, root, data, base_spec: net.ModelSpec, train_config: TrainConfig, resume: bool = True,
                 log_fn=None, stage_configs: dict[str, TrainConfig] | None = None):
        self.root = Path(root)
        self.data = data
        self.base_spec = base_spec
        self.config = train_config
        # optional per-stage schedules, keyed by the leading stage number ("1", "2", "3")
        self.stage_configs = dict(stage_configs or {})
        self.resume = resume
        self.log_fn = log_fn
        self.executed = 0

    def spec_for(self, modality: str) -> net.ModelSpec:
        return self.base_spec.with_channels(CHANNELS[modality])

    def _init(self, rec: ModelRecord) -> dict:
        spec = self.spec_for(rec.modality)
        if rec.init == "random":
            return net.init_weights(spec, rec.init_seed)
        path = Path(rec.init)
        if not path.exists():
            raise FileNotFoundError(f"init checkpoint {path} missing")
        w, _, _ = load_checkpoint(path)
        return net.transfer_weights(w, spec)

    def config_for(self, stage: PipelineStage) -> TrainConfig:
        return self.stage_configs.get(stage.stage_id[0], self.config)

    def _key(self, stage: PipelineStage) -> str:
        inits = []
        for m in stage.models:
            if m.init == "random":
                inits.append(["random", m.init_seed])
            else:
                inits.append([io.file_hash(m.init)])
        payload = {"method": stage.method, "train_seed": stage.train_seed,
                   "models": [[m.name, m.modality, i] for m, i in zip(stage.models, inits)],
                   "spec": self.base_spec.to_dict(), "train": _config_dict(self.config_for(stage)),
                   "data": asdict(self.data.config)}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def run(self, stage: PipelineStage) -> PipelineStage:
        try:
            stage.key = self._key(stage)
        except FileNotFoundError as exc:
            raise StageFailure(stage.stage_id, str(exc)) from exc
        out = self.root / "runs" / stage.key
        done = out / "done.json"
        if self.resume and done.exists():
            saved = json.loads(done.read_text())
            ok = all(Path(r["checkpoint"]).exists() and io.file_hash(r["checkpoint"]) == r["sha256"]
                     for r in saved)
            if ok:
                for m, r in zip(stage.models, saved):
                    m.checkpoint, m.sha256 = r["checkpoint"], r["sha256"]
                    m.best_epoch, m.best_metric = r["best_epoch"], r["best_metric"]
                log.info("stage %s: reusing %s", stage.stage_id, out)
                return stage
        log.info("stage %s: training %s", stage.stage_id, stage.modalities)
        try:
            members = [Member(self._init(m), self.spec_for(m.modality), m.modality, m.name) for m in stage.models]
        except (FileNotFoundError, ValueError) as exc:
            raise StageFailure(stage.stage_id, str(exc)) from exc
        base = self.config_for(stage)
        if stage.method == "solo":
            # independent runs, each with its own data order
            results = [fit([mem], self.data, base.replace(seed=derive_seed(stage.train_seed, mem.name)),
                           method="solo", log_fn=self.log_fn)[0] for mem in members]
        else:
            cfg = base.replace(seed=stage.train_seed)
            results = fit(members, self.data, cfg, method=stage.method, log_fn=self.log_fn)
        self.executed += 1
        out.mkdir(parents=True, exist_ok=True)
        logs = []
        for m, r in zip(stage.models, results):
            path = out / f"{m.name}.mml"
            m.checkpoint = str(path)
            m.sha256 = save_checkpoint(path, r.best_weights, r.spec, r.modality,
                                       extra={"best_epoch": r.best_epoch, "best_metric": r.best_metric,
                                              "stage": stage.stage_id})
            m.best_epoch, m.best_metric = r.best_epoch, r.best_metric
            logs.extend(r.log)
        write_metric_log(out / "metrics.jsonl", logs)
        done.write_text(json.dumps([dict(checkpoint=m.checkpoint, sha256=m.sha256, best_epoch=m.best_epoch,
                                         best_metric=m.best_metric) for m in stage.models], indent=2))
        return stage


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d.pop("seed")
    d["milestones"] = list(d["milestones"])
    return d


def _best(models: list[ModelRecord]) -> ModelRecord:
    # ties go to the earlier model
    return max(models, key=lambda m: (m.best_metric, -models.index(m)))


def _stage1(seed: int) -> PipelineStage:
    return PipelineStage("1", "solo", derive_seed(seed, "s1"), [
        ModelRecord(f"rgb_ce{i}", "RGB", "random", derive_seed(seed, f"init{i}")) for i in range(2)])


def _mutual_from(stage_id, tag, seed, sources: list[ModelRecord], modality: str, names) -> PipelineStage:
    return PipelineStage(stage_id, "mutual", derive_seed(seed, tag), [
        ModelRecord(n, modality, src.checkpoint, None) for n, src in zip(names, sources)])


def _write_manifest(result: PipelineResult, root: Path) -> PipelineResult:
    path = root / f"manifest_{result.preset}.json"
    path.write_text(json.dumps(result.manifest(), indent=2, sort_keys=True))
    result.manifest_path = path
    return result


def _check_modalities(modalities):
    bad = [m for m in modalities if m not in CHANNELS]
    if bad:
        raise ValueError(f"unknown modalities {bad}")
    if len(set(modalities)) != len(modalities):
        raise ValueError("modalities must be distinct")
    if not modalities:
        raise ValueError("need at least one modality")


def run_solo_pipeline(runner: Runner, modalities=("RGB", "Flow", "Diff"), seed: int = 0) -> PipelineResult:
    """Best single model per modality. The manifest lists 2 + 2 + len(modalities) model trainings."""
    modalities = list(modalities)
    _check_modalities(modalities)
    if len(modalities) < 2:
        raise ValueError("the final mutual stage needs at least two modalities")
    root = runner.root
    root.mkdir(parents=True, exist_ok=True)
    s1 = runner.run(_stage1(seed))
    s2 = runner.run(_mutual_from("2", "s2a", seed, s1.models, "RGB", ["rgb_ml0", "rgb_ml1"]))
    src = _best(s2.models)
    s3 = runner.run(PipelineStage("3", "mutual", derive_seed(seed, "s3"), [
        ModelRecord(f"mml_{m.lower()}", m, src.checkpoint, None) for m in modalities]))
    final = {m.modality: m for m in s3.models}
    return _write_manifest(PipelineResult("solo", seed, [s1, s2, s3], final), root)


def run_ensemble_pipeline(runner: Runner, modalities=("RGB", "Flow", "Diff"), seed: int = 0) -> PipelineResult:
    """One ensemble member per modality. The manifest lists 2 + 2*2 + 2*len(modalities) trainings."""
    modalities = list(modalities)
    _check_modalities(modalities)
    root = runner.root
    root.mkdir(parents=True, exist_ok=True)
    s1 = runner.run(_stage1(seed))
    # launch "a" has the same key as the solo pipeline's second stage
    s2a = runner.run(_mutual_from("2a", "s2a", seed, s1.models, "RGB", ["rgb_ml0", "rgb_ml1"]))
    s2b = runner.run(_mutual_from("2b", "s2b", seed, s1.models, "RGB", ["rgb_ml0", "rgb_ml1"]))
    pair_src = [_best(s2a.models), _best(s2b.models)]
    stages = [s1, s2a, s2b]
    final = {}
    for mod in modalities:
        st = runner.run(_mutual_from(f"3-{mod}", f"s3-{mod}", seed, pair_src, mod,
                                     [f"{mod.lower()}_a", f"{mod.lower()}_b"]))
        stages.append(st)
        final[mod] = _best(st.models)
    return _write_manifest(PipelineResult("ensemble", seed, stages, final), root)


def run_pipeline(preset: str, runner: Runner, modalities, seed: int) -> PipelineResult:
    if preset == "solo":
        return run_solo_pipeline(runner, modalities, seed)
    if preset == "ensemble":
        return run_ensemble_pipeline(runner, modalities, seed)
    raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
