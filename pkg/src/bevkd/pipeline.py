"""End-to-end training: a frozen lidar-side teacher supervises a trainable
camera-side student through dense feature imitation and quality-weighted
instance distillation, on top of the student's own detection task loss.

Everything here is deterministic given the configured seeds: plain SGD,
fixed shuffle streams, and pure scene generation. Checkpoints happen at
epoch boundaries; resuming from one reproduces an uninterrupted run
bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .contrastive_critic import CriticHandle, make_critic
from .core_types import BevGrid, DistillConfig, FeatureMap, PredictionSet
from .dense_distill import (ForegroundMask, MaskStrategy, build_foreground_mask,
                            gaussian_center_weight, masked_feature_loss, merge_masks)
from .eval_metrics import MetricReport, evaluate_detections
from .instance_distill import (gt_cost_matrix, instance_loss_components,
                               prediction_class_score, teacher_quality_weights)
from .models import Detector, ModelConfig, ToyStudent, ToyTeacher
from .run_config import RunConfig
from .scenes import Scene, SceneSpec, generate_dataset, read_dataset
from .set_matching import LOG_FLOOR, build_cost_matrix, hungarian_assign

VELOCITY_SCALE = 4.0  # m/s per unit in the task-loss box vector
TASK_BOX_WEIGHT = 5.0  # box-vs-CE balance in the detection loss
EVAL_OFFSET = 500_000  # scene-seed offset separating eval from train draws
CHECKPOINT_FORMAT_VERSION = 1


class NaNLossError(RuntimeError):
    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite {component} loss at step {step}")
        self.component = component
        self.step = step


class TeacherConvergenceError(RuntimeError):
    def __init__(self, report: MetricReport, floor: float):
        super().__init__(
            f"teacher failed its convergence floor: toy_nds={report.toy_nds:.4f} "
            f"< {floor:.4f} (toy_map={report.toy_map:.4f})")
        self.report = report
        self.floor = floor


@dataclass(frozen=True)
class LossReport:
    task_loss: float
    feat_loss: float
    inst_cls_loss: float
    inst_box_loss: float
    total: float

    def as_list(self) -> list[float]:
        return [self.task_loss, self.feat_loss, self.inst_cls_loss,
                self.inst_box_loss, self.total]


@dataclass
class TrainState:
    student: ToyStudent
    critic: CriticHandle | None
    lr: float
    clip_norm: float
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    loss_history: list[LossReport] = field(default_factory=list)
    mask_cache: dict = field(default_factory=dict)
    quality_cache: dict = field(default_factory=dict)
    heatmap_cache: dict = field(default_factory=dict)

    def named_params(self) -> dict[str, DiffValue]:
        out = dict(self.student.params)
        if self.critic is not None:
            out.update(self.critic.named_params())
        return out


def sgd_step(params: dict[str, DiffValue], lr: float, clip_norm: float) -> None:
    """One plain SGD update with global-norm gradient clipping."""
    sq = 0.0
    for p in params.values():
        if p.gradient is not None:
            sq += float((p.gradient * p.gradient).sum())
    norm = np.sqrt(sq)
    scale = 1.0 if norm <= clip_norm else clip_norm / norm
    for p in params.values():
        if p.gradient is not None:
            p.value -= lr * scale * p.gradient
        p.zero_gradient()


# -- task loss -------------------------------------------------------------

def _stage_prob_rows(preds: PredictionSet) -> DiffValue:
    if preds.diff is not None:
        return preds.diff.class_probs
    return ad.constant(np.stack([d.probs for d in preds.class_dists]))


def _stage_box10_rows(preds: PredictionSet, indices, extent: float) -> DiffValue:
    from .instance_distill import _student_box_rows
    box8 = _student_box_rows(preds, indices, extent)
    if preds.diff is not None:
        vel = ad.take_rows(preds.diff.velocity, indices)
    else:
        vel = ad.constant(np.array([[preds.boxes[j].vx, preds.boxes[j].vy]
                                    for j in indices]))
    return ad.concat([box8, vel * (1.0 / VELOCITY_SCALE)], axis=1)


def _gt_box10(box, extent: float) -> np.ndarray:
    from .set_matching import normalized_box_vector
    vec8 = normalized_box_vector(box, extent)
    return np.concatenate([vec8, [box.vx / VELOCITY_SCALE, box.vy / VELOCITY_SCALE]])


def student_task_loss(stage_preds: list[PredictionSet], gt_boxes,
                      extent: float) -> DiffValue:
    """Set-based detection loss, averaged over decoder stages.

    Per stage: optimal matching of ground truth to queries under the match
    cost; matched queries pay cross-entropy at the true class plus a box L1
    (normalized vector with velocity), unmatched queries pay cross-entropy
    against the trailing background class.
    """
    if not stage_preds:
        raise ValueError("need at least one decoder stage")
    total = ad.constant(0.0)
    for preds in stage_preds:
        n = len(preds)
        probs = _stage_prob_rows(preds)
        n_entries = probs.value.shape[1]
        target = np.zeros((n, n_entries))
        target[:, n_entries - 1] = 1.0  # background by default
        pairs = []
        if gt_boxes and n:
            assignment = hungarian_assign(gt_cost_matrix(gt_boxes, preds, extent))
            pairs = sorted(assignment.pairs)
            for gt_i, query_j in pairs:
                target[query_j] = 0.0
                target[query_j, gt_boxes[gt_i].class_id] = 1.0
        picked = ad.vsum(probs * ad.constant(target), axis=1)
        ce = ad.vsum(-ad.log(ad.maximum(picked, LOG_FLOOR))) * (1.0 / max(n, 1))
        stage_loss = ce
        if pairs:
            s_idx = [j for _, j in pairs]
            gt10 = np.stack([_gt_box10(gt_boxes[i], extent) for i, _ in pairs])
            s10 = _stage_box10_rows(preds, s_idx, extent)
            l1 = ad.vsum(ad.absolute(s10 - ad.constant(gt10)))
            stage_loss = stage_loss + l1 * (TASK_BOX_WEIGHT / max(len(gt_boxes), 1))
        total = total + stage_loss
    return total * (1.0 / len(stage_preds))


# -- distillation step -------------------------------------------------------

def teacher_pred_heatmap(teacher_stages: list[PredictionSet], grid: BevGrid,
                         sigma: float) -> FeatureMap:
    """Per-class score heatmap splatted from the teacher's final-stage
    predictions; the PRED_HEATMAP mask source."""
    final = teacher_stages[-1]
    k = len(final.class_dists[0]) - 1 if final.class_dists else 1
    heat = np.zeros((grid.height_cells, grid.width_cells, max(k, 1)))
    for box, dist in zip(final.boxes, final.class_dists):
        score = prediction_class_score(dist, background_last=True)
        bump = gaussian_center_weight((box.x, box.y), grid, sigma).weights * score
        cls = box.class_id % max(k, 1)
        heat[:, :, cls] = np.maximum(heat[:, :, cls], bump)
    return FeatureMap(grid, heat)


def _foreground_mask_for(state: TrainState, teacher: Detector, scene: Scene,
                         student_stages: list[PredictionSet],
                         config: DistillConfig,
                         strategy: MaskStrategy) -> ForegroundMask:
    grid = teacher.grid
    if strategy is MaskStrategy.QUERY_CENTER:
        refs = [p for st in student_stages for p in st.reference_points]
        return build_foreground_mask(scene.gt_boxes, grid, config, strategy, refs)
    key = (scene.scene_id, strategy.value)
    if key not in state.mask_cache:
        aux = None
        if strategy is MaskStrategy.PRED_HEATMAP:
            hkey = scene.scene_id
            if hkey not in state.heatmap_cache:
                _, t_stages = teacher.forward(scene)
                state.heatmap_cache[hkey] = teacher_pred_heatmap(
                    t_stages, grid, config.sigma)
            aux = state.heatmap_cache[hkey]
        state.mask_cache[key] = build_foreground_mask(
            scene.gt_boxes, grid, config, strategy, aux)
    return state.mask_cache[key]


def _quality_for(state: TrainState, teacher: Detector, scene: Scene,
                 stage: int, teacher_preds: PredictionSet,
                 config: DistillConfig, extent: float):
    key = (scene.scene_id, stage, config.gamma)
    if key not in state.quality_cache:
        state.quality_cache[key] = teacher_quality_weights(
            teacher_preds, scene.gt_boxes, config, extent, background_last=True)
    return state.quality_cache[key]


def compute_distill_losses(state: TrainState, teacher: Detector, scene: Scene,
                           config: DistillConfig,
                           mask_strategy: MaskStrategy = MaskStrategy.GT_HEATMAP,
                           critic_loss: str = "infonce") -> dict[str, DiffValue]:
    """Forward pass of one distillation step; returns the loss components
    as differentiable scalars (keys: task, feat, inst_cls, inst_box, total)."""
    extent = state.student.grid.extent
    f2d, s_stages = state.student.forward(scene)
    task = student_task_loss(s_stages, scene.gt_boxes, extent)

    zero = ad.constant(0.0)
    feat = zero
    if config.lambda_feat > 0.0:
        t_fmap, t_stages = teacher.forward(scene)
        mask = _foreground_mask_for(state, teacher, scene, s_stages, config,
                                    mask_strategy)
        feat = masked_feature_loss(f2d, t_fmap, mask)

    inst_cls = zero
    inst_box = zero
    if config.alpha > 0.0 or config.beta > 0.0:
        _, t_stages = teacher.forward(scene)
        n_stages = len(t_stages)
        for stage, (t_preds, s_preds) in enumerate(zip(t_stages, s_stages)):
            q = _quality_for(state, teacher, scene, stage, t_preds, config, extent)
            assignment = hungarian_assign(
                build_cost_matrix(t_preds, s_preds, extent))
            cls_term, box_term = instance_loss_components(
                t_preds, s_preds, q, assignment, config, extent,
                critic=state.critic, critic_loss=critic_loss)
            inst_cls = inst_cls + cls_term * (1.0 / n_stages)
            inst_box = inst_box + box_term * (1.0 / n_stages)

    total = task + feat * config.lambda_feat + inst_cls + inst_box
    return {"task": task, "feat": feat, "inst_cls": inst_cls,
            "inst_box": inst_box, "total": total}


def distill_step(state: TrainState, teacher: Detector, scene: Scene,
                 config: DistillConfig,
                 mask_strategy: MaskStrategy = MaskStrategy.GT_HEATMAP,
                 critic_loss: str = "infonce") -> tuple[TrainState, LossReport]:
    """One optimizer step on the student (and critic); teacher untouched."""
    try:
        losses = compute_distill_losses(state, teacher, scene, config,
                                        mask_strategy, critic_loss)
    except ValueError as exc:
        # non-finite activations trip the FeatureMap invariant mid-forward
        if "finite" in str(exc):
            raise NaNLossError("forward", state.step) from exc
        raise
    for component in ("task", "feat", "inst_cls", "inst_box", "total"):
        if not np.isfinite(losses[component].value):
            raise NaNLossError(component, state.step)
    losses["total"].backward()
    sgd_step(state.named_params(), state.lr, state.clip_norm)
    report = LossReport(
        task_loss=float(losses["task"].value),
        feat_loss=float(losses["feat"].value),
        inst_cls_loss=float(losses["inst_cls"].value),
        inst_box_loss=float(losses["inst_box"].value),
        total=float(losses["total"].value),
    )
    state.step += 1
    state.loss_history.append(report)
    return state, report


# -- evaluation --------------------------------------------------------------

def evaluate_model(model: Detector, scenes: list[Scene]) -> MetricReport:
    """Score the final decoder stage on held-out scenes."""
    preds = []
    gts = []
    for scene in scenes:
        _, stages = model.forward(scene)
        preds.append(stages[-1])
        gts.append(scene.gt_boxes)
    return evaluate_detections(preds, gts, background_last=True)


# -- teacher training --------------------------------------------------------

def train_teacher(train_scenes: list[Scene], epochs: int, seed: int, *,
                  grid: BevGrid, model_config: ModelConfig,
                  lr: float = 0.1, clip_norm: float = 10.0,
                  eval_scenes: list[Scene] | None = None,
                  nds_floor: float = 0.0) -> ToyTeacher:
    """Train on the lidar-like modality with the task loss, then freeze.

    The returned teacher carries its held-out MetricReport (when eval
    scenes are given) as `eval_report`; a toy-NDS below `nds_floor` raises
    TeacherConvergenceError instead of returning a bad teacher.
    """
    teacher = ToyTeacher(grid, model_config, seed=seed)
    rng = np.random.default_rng([seed, 1])
    extent = grid.extent
    step = 0
    for _epoch in range(epochs):
        for idx in rng.permutation(len(train_scenes)):
            scene = train_scenes[int(idx)]
            _, stages = teacher.forward(scene)
            loss = student_task_loss(stages, scene.gt_boxes, extent)
            if not np.isfinite(loss.value):
                raise NaNLossError("task", step)
            loss.backward()
            sgd_step(teacher.params, lr, clip_norm)
            step += 1
    teacher.freeze()
    teacher.eval_report = None
    if eval_scenes is not None:
        report = evaluate_model(teacher, eval_scenes)
        teacher.eval_report = report
        if report.toy_nds < nds_floor:
            raise TeacherConvergenceError(report, nds_floor)
    return teacher


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray], *, config: dict,
                    optimizer: dict, rng_state: dict | None, step: int) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "optimizer": optimizer,
        "rng_state": rng_state,
        "step": step,
        "array_shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    payload = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, __meta__=payload, **arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: "
                             f"{meta.get('format_version')}")
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
    for name, shape in meta["array_shapes"].items():
        if list(arrays[name].shape) != shape:
            raise ValueError(f"checkpoint array {name} has shape "
                             f"{arrays[name].shape}, declared {shape}")
    return meta, arrays


def save_teacher(path, teacher: ToyTeacher, model_config: ModelConfig) -> None:
    cfg = {"kind": "teacher", "modality": teacher.modality,
           "model": model_config.__dict__,
           "grid": [teacher.grid.height_cells, teacher.grid.width_cells,
                    teacher.grid.x_min, teacher.grid.x_max,
                    teacher.grid.y_min, teacher.grid.y_max]}
    save_checkpoint(path, teacher.state_arrays(), config=cfg,
                    optimizer={}, rng_state=None, step=0)


def load_teacher(path) -> ToyTeacher:
    meta, arrays = load_checkpoint(path)
    g = meta["config"]["grid"]
    grid = BevGrid(int(g[0]), int(g[1]), g[2], g[3], g[4], g[5])
    model_config = ModelConfig(**meta["config"]["model"])
    teacher = ToyTeacher(grid, model_config)
    teacher.load_state_arrays(arrays)
    teacher.freeze()
    teacher.eval_report = None
    return teacher


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_train_state(path, state: TrainState, *, config: dict) -> None:
    arrays = {f"student.{k}": v for k, v in state.student.state_arrays().items()}
    if state.critic is not None:
        for name, p in state.critic.named_params().items():
            arrays[name] = p.value.copy()
    save_checkpoint(path, arrays, config=config,
                    optimizer={"lr": state.lr, "clip_norm": state.clip_norm},
                    rng_state=_rng_state_to_json(state.rng), step=state.step)


def load_train_state(path, state: TrainState) -> TrainState:
    """Restore weights, rng stream and step counter into a freshly built
    state (the state's structure must match what was saved)."""
    meta, arrays = load_checkpoint(path)
    student_arrays = {k[len("student."):]: v for k, v in arrays.items()
                      if k.startswith("student.")}
    state.student.load_state_arrays(student_arrays)
    if state.critic is not None:
        for name, p in state.critic.named_params().items():
            p.value = np.asarray(arrays[name], dtype=np.float64).copy()
    state.lr = meta["optimizer"]["lr"]
    state.clip_norm = meta["optimizer"]["clip_norm"]
    state.rng = _rng_from_json(meta["rng_state"])
    state.step = meta["step"]
    return state


# -- experiment runner ---------------------------------------------------------

def build_model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(in_channels=2, channels=cfg.channels,
                       num_classes=cfg.num_classes, num_queries=cfg.num_queries,
                       stages=cfg.stages, embed_dim=cfg.embed_dim)


def load_or_generate_scenes(cfg: RunConfig) -> tuple[list[Scene], list[Scene]]:
    from .scenes import make_grid
    grid = make_grid(cfg.grid_cells, cfg.grid_extent)
    spec = SceneSpec(num_classes=cfg.num_classes)
    if cfg.dataset:
        train = read_dataset(cfg.dataset, spec)
    else:
        train = generate_dataset(cfg.data_seed, cfg.n_train, grid, spec)
    if cfg.eval_dataset:
        eval_scenes = read_dataset(cfg.eval_dataset, spec)
    else:
        eval_scenes = generate_dataset(cfg.data_seed, cfg.n_eval, grid, spec,
                                       offset=EVAL_OFFSET)
    return train, eval_scenes


def make_train_state(cfg: RunConfig, grid: BevGrid, seed: int) -> TrainState:
    model_config = build_model_config(cfg)
    student = ToyStudent(grid, model_config, seed=seed)
    critic = None
    if cfg.cls_mode == "contrastive":
        # both sides project penultimate query embeddings here; the
        # map-sampling critic path builds its own head geometry
        critic = make_critic(cfg.embed_dim, cfg.embed_dim, tau=cfg.tau,
                             seed=seed + 1_000_003)
    return TrainState(student=student, critic=critic, lr=cfg.lr,
                      clip_norm=cfg.clip_norm,
                      rng=np.random.default_rng([seed, 2]))


def resolve_teacher(cfg: RunConfig, seed: int, train_scenes, eval_scenes,
                    grid: BevGrid) -> ToyTeacher:
    if cfg.teacher:
        return load_teacher(cfg.teacher.format(seed=seed))
    teacher = train_teacher(
        train_scenes, cfg.teacher_epochs, seed, grid=grid,
        model_config=build_model_config(cfg), lr=cfg.lr,
        clip_norm=cfg.clip_norm, eval_scenes=eval_scenes,
        nds_floor=cfg.teacher_nds_floor)
    return teacher


def train_student(cfg: RunConfig, state: TrainState, teacher: ToyTeacher,
                  train_scenes: list[Scene], epochs: int | None = None) -> TrainState:
    config = cfg.to_distill_config()
    strategy = cfg.mask_strategy_enum
    for _epoch in range(epochs if epochs is not None else cfg.epochs):
        for idx in state.rng.permutation(len(train_scenes)):
            distill_step(state, teacher, train_scenes[int(idx)], config,
                         strategy, cfg.critic_loss)
    return state


def run_experiment(config: RunConfig | str | os.PathLike,
                   teacher_pool: dict | None = None) -> dict:
    """Train and evaluate one configuration across its seeds.

    Writes results-<label>.json plus the flat CSV next to it and returns
    the results record. `teacher_pool` (seed -> ToyTeacher) lets callers
    share already-trained teachers across configurations.
    """
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_file(config)
    out_dir = cfg.resolved_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    train_scenes, eval_scenes = load_or_generate_scenes(cfg)
    grid = train_scenes[0].grid if train_scenes else eval_scenes[0].grid
    label = cfg.strategy_label()

    runs = []
    for seed in cfg.seeds:
        if teacher_pool is not None and seed in teacher_pool:
            teacher = teacher_pool[seed]
        else:
            teacher = resolve_teacher(cfg, seed, train_scenes, eval_scenes, grid)
            if teacher_pool is not None:
                teacher_pool[seed] = teacher
        if teacher.eval_report is None:
            teacher.eval_report = evaluate_model(teacher, eval_scenes)
        state = make_train_state(cfg, grid, seed)
        train_student(cfg, state, teacher, train_scenes)
        metrics = evaluate_model(state.student, eval_scenes)
        ckpt = os.path.join(out_dir, f"student-{label}-seed{seed}.npz")
        save_train_state(ckpt, state, config=cfg.as_dict())
        runs.append({
            "run_id": f"{label}-seed{seed}",
            "strategy": label,
            "seed": seed,
            "metrics": metrics.as_dict(),
            "teacher_metrics": teacher.eval_report.as_dict(),
            "loss_history": [r.as_list() for r in state.loss_history],
        })

    record = {"format_version": 1, "config": cfg.as_dict(), "runs": runs}
    with open(os.path.join(out_dir, f"results-{label}.json"), "w",
              encoding="utf-8") as fh:
        json.dump(record, fh)
    write_flat_csv(os.path.join(out_dir, f"results-{label}.csv"), runs)
    return record


CSV_COLUMNS = ("run_id", "strategy", "seed", "toy_nds", "toy_map",
               "mate", "mase", "maoe", "mave")


def write_flat_csv(path, runs: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for run in runs:
            m = run["metrics"]
            row = [run["run_id"], run["strategy"], str(run["seed"]),
                   repr(m["toy_nds"]), repr(m["toy_map"]), repr(m["mate"]),
                   repr(m["mase"]), repr(m["maoe"]), repr(m["mave"])]
            fh.write(",".join(row) + "\n")


# -- ablation axes ---------------------------------------------------------------

def ablation_cells(axis: str, base: RunConfig) -> list[RunConfig]:
    """The configuration cells for one ablation axis."""
    from .run_config import (baseline_overrides, dense_only_overrides,
                             sparse_only_overrides)
    if axis == "table3":
        return [
            base.replace(**baseline_overrides()),
            base.replace(**dense_only_overrides()),
            base.replace(**sparse_only_overrides(base.cls_mode if base.cls_mode != "none" else "contrastive")),
            base.replace(label="both"),
        ]
    if axis == "table4":
        cells = [base.replace(**baseline_overrides())]
        for strategy in ("gt_center", "query_center", "pred_heatmap", "gt_heatmap"):
            over = dense_only_overrides()
            over.update(mask_strategy=strategy, label=f"dense-{strategy}")
            cells.append(base.replace(**over))
        return cells
    if axis == "table5":
        cells = [("baseline", "none", False), ("kl-only", "kl", False),
                 ("l1-only", "none", True), ("kl+l1", "kl", True),
                 ("infonce+l1", "contrastive", True)]
        return [base.replace(lambda_feat=0.0, cls_mode=mode, box_distill=box,
                             use_contrastive_cls=mode == "contrastive",
                             label=label)
                for label, mode, box in cells]
    if axis == "table6":
        common = {"lambda_feat": 0.0, "box_distill": False}
        return [
            base.replace(cls_mode="none", use_contrastive_cls=False,
                         label="baseline", **common),
            base.replace(cls_mode="contrastive", use_contrastive_cls=True,
                         critic_loss="ncs", label="ncs-pos", **common),
            base.replace(cls_mode="kl", use_contrastive_cls=False,
                         label="kl-logit", **common),
            base.replace(cls_mode="contrastive", use_contrastive_cls=True,
                         critic_loss="infonce", label="infonce-posneg", **common),
        ]
    raise ValueError(f"unknown ablation axis: {axis!r}")


def run_ablation_axis(axis: str, base: RunConfig) -> dict:
    """Run every cell of one axis, sharing teachers across cells per seed."""
    teacher_pool: dict = {}
    records = []
    for cell in ablation_cells(axis, base):
        records.append(run_experiment(cell, teacher_pool=teacher_pool))
    all_runs = [run for rec in records for run in rec["runs"]]
    out_dir = base.resolved_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    write_flat_csv(os.path.join(out_dir, f"ablation-{axis}.csv"), all_runs)
    return {"axis": axis, "records": records}


def mean_nds_by_strategy(axis_record: dict) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for rec in axis_record["records"]:
        for run in rec["runs"]:
            sums.setdefault(run["strategy"], []).append(run["metrics"]["toy_nds"])
    return {k: float(np.mean(v)) for k, v in sums.items()}
