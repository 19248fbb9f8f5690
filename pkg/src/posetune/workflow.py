"""End-to-end experiment stages behind the service and CLI.

Four resumable stages share one output directory: scene generation, noise
scheduling against the surrogate trainer, the two-phase parameter
optimization, and held-out evaluation with budget selection. All randomness
derives from the config's master seed through named sub-streams, so re-runs
are reproducible byte for byte (timing fields aside).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bayesopt import Schedule, SearchSpace, default_schedule, optimize_continuous, trace_to_csv
from .geometry import ObjectModel
from .gridopt import (
    GridSpec,
    ParetoEntry,
    RuntimeCoefficients,
    enumerate_grid,
    evaluate_grid,
    fit_runtime_model,
    measurements_to_csv,
    pareto_front,
    predict_runtime,
    select_for_budget,
)
from .metrics import add_correct, evaluate_pose, recall_contribution, scores_to_csv
from .objects import make_object, save_object
from .pipeline import ContinuousParams, DiscreteParams, estimate_all
from .scenes import NoiseConfig, Scene, apply_domain_randomization, generate_scene, load_scene, save_scene
from .scheduler import run_scheduled_training
from .seeding import stream_seed
from .training import SurrogateTrainer

# Discrete values pinned during the continuous search.
BO_FIXED_DISCRETE = DiscreteParams(classified=32, estimated=6, ransac_iters=500,
                                   depth_checked=2, icp_iters=10)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def default_grid() -> GridSpec:
    """Desk-scale grid covering the cheap-to-thorough range."""
    return GridSpec(classified=(2, 4, 8), estimated=(1, 2), ransac_iters=(100, 500),
                    depth_checked=(1, 2), icp_iters=(2, 10))


@dataclass
class ExperimentConfig:
    objects: list[dict]
    output_dir: str
    seed: int = 0
    train_scenes: int = 3
    validation_scenes: int = 9
    eval_scenes: int = 20
    clutter: float = 0.75
    occlusion: float = 0.18
    epochs: int = 60
    metric: str = "bop"
    budget_seconds: float = 4.0
    schedule: list | None = None
    grid: dict | None = None

    def __post_init__(self):
        if self.validation_scenes < 1:
            raise ValueError("validation set empty")
        if self.metric not in ("bop", "add"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not self.objects:
            raise ValueError("no objects configured")

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        allowed = set(ExperimentConfig.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return ExperimentConfig(**data)

    @staticmethod
    def from_file(path: str | Path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {name: getattr(self, name)
                for name in ExperimentConfig.__dataclass_fields__}

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def bo_schedule(self) -> Schedule:
        if self.schedule is None:
            return default_schedule()
        return Schedule(tuple((int(c), None if k is None else float(k))
                              for c, k in self.schedule))

    def grid_spec(self) -> GridSpec:
        return default_grid() if self.grid is None else GridSpec.from_dict(self.grid)

    def out(self) -> Path:
        return Path(self.output_dir)


def _marker(config: ExperimentConfig, stage: str) -> Path:
    return config.out() / f"{stage}.done.json"


def _stage_complete(config: ExperimentConfig, stage: str, extra: str = "") -> dict | None:
    marker = _marker(config, stage)
    if not marker.exists():
        return None
    data = json.loads(marker.read_text())
    if data.get("config_hash") == config.fingerprint() + extra:
        summary = data["summary"]
        summary["skipped"] = True
        return summary
    return None


def _finish_stage(config: ExperimentConfig, stage: str, summary: dict,
                  extra: str = "") -> dict:
    config.out().mkdir(parents=True, exist_ok=True)
    _marker(config, stage).write_text(json.dumps(
        {"stage": stage, "config_hash": config.fingerprint() + extra,
         "summary": summary}, sort_keys=True, indent=1))
    return dict(summary, skipped=False)


def build_models(config: ExperimentConfig) -> list[ObjectModel]:
    try:
        return [make_object(spec) for spec in config.objects]
    except (KeyError, ValueError, OSError) as exc:
        raise StageError("generate", f"bad object spec: {exc}") from exc


SPLITS = ("train", "validation", "eval")


def _split_count(config: ExperimentConfig, split: str) -> int:
    return {"train": config.train_scenes, "validation": config.validation_scenes,
            "eval": config.eval_scenes}[split]


def _scene_dir(config: ExperimentConfig, split: str, index: int) -> Path:
    return config.out() / "scenes" / split / f"scene_{index:03d}"


def load_split(config: ExperimentConfig, split: str) -> list[Scene]:
    return [load_scene(_scene_dir(config, split, i))
            for i in range(_split_count(config, split))]


def cmd_generate(config: ExperimentConfig, force: bool = False) -> dict:
    """Write object files, seeded scenes for every split, and the manifest."""
    done = _stage_complete(config, "generate")
    if done and not force:
        return done
    models = build_models(config)
    out = config.out()
    (out / "objects").mkdir(parents=True, exist_ok=True)
    for model in models:
        save_object(model, out / "objects" / f"{model.object_id}.json")
    manifest: dict = {"object_ids": sorted(m.object_id for m in models),
                      "splits": {}}
    try:
        for split in SPLITS:
            seeds = []
            for i in range(_split_count(config, split)):
                scene_seed = stream_seed(config.seed, "scene", split, i)
                scene = generate_scene(models, config.clutter, config.occlusion,
                                       seed=scene_seed)
                save_scene(scene, _scene_dir(config, split, i))
                seeds.append(scene_seed)
            manifest["splits"][split] = {"count": len(seeds), "seeds": seeds}
    except OSError as exc:
        raise StageError("generate", str(exc)) from exc
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    summary = {"output_dir": str(out), "object_ids": manifest["object_ids"],
               "scene_counts": {s: manifest["splits"][s]["count"] for s in SPLITS}}
    return _finish_stage(config, "generate", summary)


def _require(config: ExperimentConfig, stage: str, path: Path, produced_by: str):
    if not path.exists():
        raise StageError(stage, f"missing {path.name}; run the "
                                f"'{produced_by}' stage first")


def cmd_train_dr(config: ExperimentConfig, force: bool = False) -> dict:
    """Run the noise scheduler against the surrogate trainer, per object."""
    done = _stage_complete(config, "train-dr")
    if done and not force:
        return done
    _require(config, "train-dr", config.out() / "manifest.json", "generate")
    models = build_models(config)
    train_scenes = load_split(config, "train")
    dr_dir = config.out() / "dr"
    dr_dir.mkdir(parents=True, exist_ok=True)
    finals = []
    for model in models:
        trainer = SurrogateTrainer(train_scenes, model,
                                   seed=stream_seed(config.seed, "dr", model.object_id))
        state, history = run_scheduled_training(trainer, config.epochs)
        finals.append(state.levels)
        (dr_dir / f"{model.object_id}.json").write_text(json.dumps(
            {"final_levels": state.levels.as_dict(), "phase": state.phase,
             "trace": [rec.to_dict() for rec in history]},
            sort_keys=True, indent=1))
    mean_levels = NoiseConfig.from_tuple(
        np.mean([lv.as_tuple() for lv in finals], axis=0))
    (dr_dir / "levels.json").write_text(
        json.dumps(mean_levels.as_dict(), sort_keys=True, indent=1))
    summary = {"levels": mean_levels.as_dict(), "epochs": config.epochs,
               "objects": sorted(m.object_id for m in models)}
    return _finish_stage(config, "train-dr", summary)


def learned_levels(config: ExperimentConfig) -> NoiseConfig:
    path = config.out() / "dr" / "levels.json"
    _require(config, "optimize", path, "train-dr")
    return NoiseConfig(**json.loads(path.read_text()))


def _noised_split(config: ExperimentConfig, split: str, levels: NoiseConfig | None,
                  stream: str) -> list[Scene]:
    scenes = load_split(config, split)
    if levels is None:
        return scenes
    return [apply_domain_randomization(s, levels, seed=stream_seed(config.seed, stream, i))
            for i, s in enumerate(scenes)]


def _instance_score(config: ExperimentConfig, model: ObjectModel, scene: Scene,
                    result) -> float:
    if not result.found:
        return 0.0
    gt = scene.gt_poses[model.object_id]
    if config.metric == "add":
        return float(add_correct(model, gt, result.hypothesis.pose,
                                 model.is_symmetric))
    return recall_contribution(model, gt, result.hypothesis.pose, scene.cam,
                               scene.depth)


def _scene_set_recall(config: ExperimentConfig, models, scenes, cp, dp) -> tuple[float, float]:
    """(mean image runtime, mean recall) over a scene set."""
    scores, runtimes = [], []
    for i, scene in enumerate(scenes):
        bundle = estimate_all(scene, models, cp, dp,
                              seed=stream_seed(config.seed, "est", i))
        runtimes.append(bundle.total_time)
        for model in models:
            scores.append(_instance_score(config, model, scene,
                                          bundle.results[model.object_id]))
    return float(np.mean(runtimes)), float(np.mean(scores))


def _mode_tag(no_dr: bool) -> str:
    return "nodr" if no_dr else "dr"


def cmd_optimize(config: ExperimentConfig, no_dr: bool = False,
                 force: bool = False) -> dict:
    """Continuous search at fixed discrete values, then grid + front + fit."""
    tag = _mode_tag(no_dr)
    done = _stage_complete(config, f"optimize-{tag}")
    if done and not force:
        return done
    _require(config, "optimize", config.out() / "manifest.json", "generate")
    models = build_models(config)
    levels = None if no_dr else learned_levels(config)
    scenes = _noised_split(config, "validation", levels, f"valnoise-{tag}")
    opt_dir = config.out() / "opt"
    opt_dir.mkdir(parents=True, exist_ok=True)

    def continuous_objective(cp: ContinuousParams) -> float:
        return _scene_set_recall(config, models, scenes, cp, BO_FIXED_DISCRETE)[1]

    try:
        best_cp, trace = optimize_continuous(
            continuous_objective, SearchSpace.default(), config.bo_schedule(),
            seed=stream_seed(config.seed, "bo", tag))
    except Exception as exc:
        raise StageError("optimize:continuous", str(exc)) from exc
    (opt_dir / f"continuous_{tag}.json").write_text(json.dumps(
        {"params": best_cp.as_dict(), "metric": config.metric,
         "best_value": max(t.value for t in trace)}, sort_keys=True, indent=1))
    (opt_dir / f"trace_{tag}.csv").write_text(trace_to_csv(trace))

    def discrete_objective(dp: DiscreteParams) -> tuple[float, float]:
        return _scene_set_recall(config, models, scenes, best_cp, dp)

    try:
        grid = enumerate_grid(config.grid_spec())
        entries = evaluate_grid(grid, discrete_objective)
        front = pareto_front(entries)
        coeffs = fit_runtime_model([(e.params, len(models), e.runtime)
                                    for e in entries])
    except Exception as exc:
        raise StageError("optimize:discrete", str(exc)) from exc
    (opt_dir / f"grid_{tag}.csv").write_text(measurements_to_csv(entries))
    (opt_dir / f"front_{tag}.json").write_text(json.dumps(
        {"front": [e.to_dict() for e in front],
         "coefficients": coeffs.to_dict()}, sort_keys=True, indent=1))
    summary = {"mode": tag, "continuous": best_cp.as_dict(),
               "best_value": max(t.value for t in trace),
               "grid_entries": len(entries), "front_size": len(front),
               "coefficients": coeffs.to_dict()}
    return _finish_stage(config, f"optimize-{tag}", summary)


def load_optimization(config: ExperimentConfig, no_dr: bool = False):
    tag = _mode_tag(no_dr)
    cont_path = config.out() / "opt" / f"continuous_{tag}.json"
    front_path = config.out() / "opt" / f"front_{tag}.json"
    _require(config, "evaluate", cont_path, "optimize")
    _require(config, "evaluate", front_path, "optimize")
    cp = ContinuousParams(**json.loads(cont_path.read_text())["params"])
    data = json.loads(front_path.read_text())
    front = [ParetoEntry(DiscreteParams.from_dict(e["params"]), e["runtime"],
                         e["recall"]) for e in data["front"]]
    raw = dict(data["coefficients"])
    coeffs = RuntimeCoefficients(**raw)
    return cp, front, coeffs


def cmd_evaluate(config: ExperimentConfig, budget: float | None = None,
                 objects: int | None = None, no_dr: bool = False,
                 force: bool = False) -> dict:
    """Select a front entry for the budget and score it on held-out scenes."""
    tag = _mode_tag(no_dr)
    budget = config.budget_seconds if budget is None else float(budget)
    object_count = objects if objects is not None else len(config.objects)
    stage = f"evaluate-{tag}-{budget:g}-{object_count}"
    done = _stage_complete(config, stage)
    if done and not force:
        return done
    models = build_models(config)
    cp, front, coeffs = load_optimization(config, no_dr)
    levels = learned_levels(config)
    scenes = _noised_split(config, "eval", levels, "evalnoise")
    selection = select_for_budget(front, coeffs, object_count, budget)
    dp = selection.entry.params

    per_object: dict[str, list[float]] = {m.object_id: [] for m in models}
    records = []
    runtimes = []
    for i, scene in enumerate(scenes):
        bundle = estimate_all(scene, models, cp, dp,
                              seed=stream_seed(config.seed, "eval-est", i))
        runtimes.append(bundle.total_time)
        for model in models:
            result = bundle.results[model.object_id]
            per_object[model.object_id].append(
                _instance_score(config, model, scene, result))
            if result.found:
                records.append((model.object_id, f"eval/{i:03d}", evaluate_pose(
                    model, scene.gt_poses[model.object_id],
                    result.hypothesis.pose, scene.cam, scene.depth)))
    recall = float(np.mean([v for vals in per_object.values() for v in vals]))
    report = {
        "mode": tag,
        "metric": config.metric,
        "budget_seconds": budget,
        "object_count": object_count,
        "selection": selection.to_dict(),
        "continuous": cp.as_dict(),
        "recall": recall,
        "per_object_recall": {k: float(np.mean(v)) for k, v in per_object.items()},
        "measured_runtime": float(np.mean(runtimes)),
        "predicted_runtime": predict_runtime(coeffs, dp, object_count),
        "scenes": len(scenes),
    }
    eval_dir = config.out() / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    stamp = f"{tag}_{budget:g}_{object_count}"
    (eval_dir / f"report_{stamp}.json").write_text(
        json.dumps(report, sort_keys=True, indent=1))
    (eval_dir / f"scores_{stamp}.csv").write_text(scores_to_csv(records))
    return _finish_stage(config, stage, report)
