"""Run configuration: one flat record that pins every knob of an experiment.

A RunConfig can be built from CLI flags or a JSON file; unknown keys are
rejected by name so configs cannot silently drift. The defaults ARE the
reference configuration used by the acceptance experiments.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields

from .core_types import DistillConfig
from .dense_distill import MaskStrategy

CLS_MODES = ("kl", "contrastive", "none")
CRITIC_LOSSES = ("infonce", "ncs")
DEFAULT_OUT_ENV = "BEVKD_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # distillation knobs (DistillConfig fields)
    sigma: float = 2.0
    gamma: float = 0.5
    alpha: float = 1.0
    beta: float = 0.25
    tau: float = 0.07
    lambda_feat: float = 1.0
    include_positive_in_denominator: bool = True
    use_contrastive_cls: bool = True
    # data
    dataset: str | None = None
    eval_dataset: str | None = None
    n_train: int = 400
    n_eval: int = 100
    data_seed: int = 7
    grid_cells: int = 64
    grid_extent: float = 64.0
    # model
    channels: int = 16
    num_queries: int = 16
    stages: int = 2
    num_classes: int = 4
    embed_dim: int = 32
    # training
    teacher: str | None = None
    teacher_epochs: int = 12
    teacher_nds_floor: float = 0.0
    epochs: int = 8
    lr: float = 0.1
    clip_norm: float = 10.0
    seeds: tuple[int, ...] = (0, 1, 2)
    # distillation wiring
    mask_strategy: str = "gt_heatmap"
    cls_mode: str = "contrastive"
    box_distill: bool = True
    critic_loss: str = "infonce"
    # bookkeeping
    label: str = ""
    out_dir: str | None = None

    def __post_init__(self):
        if self.cls_mode not in CLS_MODES:
            raise ConfigError(f"cls_mode must be one of {CLS_MODES}, got {self.cls_mode!r}")
        if self.critic_loss not in CRITIC_LOSSES:
            raise ConfigError(f"critic_loss must be one of {CRITIC_LOSSES}")
        valid_masks = {m.value for m in MaskStrategy}
        if self.mask_strategy not in valid_masks:
            raise ConfigError(f"mask_strategy must be one of {sorted(valid_masks)}")
        if self.cls_mode == "kl" and self.use_contrastive_cls:
            raise ConfigError("cls_mode 'kl' contradicts use_contrastive_cls=true")
        if self.cls_mode == "contrastive" and not self.use_contrastive_cls:
            raise ConfigError("cls_mode 'contrastive' requires use_contrastive_cls=true")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_distill_config(self) -> DistillConfig:
        """The loss-level view; cls_mode none zeroes the classification term."""
        return DistillConfig(
            sigma=self.sigma, gamma=self.gamma,
            alpha=0.0 if self.cls_mode == "none" else self.alpha,
            beta=self.beta if self.box_distill else 0.0,
            tau=self.tau, lambda_feat=self.lambda_feat,
            include_positive_in_denominator=self.include_positive_in_denominator,
            use_contrastive_cls=self.cls_mode == "contrastive",
        )

    @property
    def mask_strategy_enum(self) -> MaskStrategy:
        return MaskStrategy(self.mask_strategy)

    @property
    def wants_instance_distill(self) -> bool:
        return self.cls_mode != "none" or self.box_distill

    def strategy_label(self) -> str:
        if self.label:
            return self.label
        dense = self.lambda_feat > 0
        sparse = self.wants_instance_distill
        if dense and sparse:
            return "both"
        if dense:
            return "dense"
        if sparse:
            return "sparse"
        return "baseline"

    def resolved_out_dir(self) -> str:
        return self.out_dir or os.environ.get(DEFAULT_OUT_ENV, "bevkd_out")

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        return out

    @classmethod
    def field_defaults(cls) -> dict:
        return {f.name: f.default for f in fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = [k for k in data if k not in known]
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]!r}")
        data = dict(data)
        if "seeds" in data:
            data["seeds"] = tuple(data["seeds"])
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def baseline_overrides() -> dict:
    return {"lambda_feat": 0.0, "cls_mode": "none", "box_distill": False,
            "use_contrastive_cls": False, "label": "baseline"}


def dense_only_overrides() -> dict:
    return {"cls_mode": "none", "box_distill": False,
            "use_contrastive_cls": False, "label": "dense"}


def sparse_only_overrides(cls_mode: str = "contrastive") -> dict:
    return {"lambda_feat": 0.0, "cls_mode": cls_mode,
            "use_contrastive_cls": cls_mode == "contrastive", "label": "sparse"}


REFERENCE_CONFIG = RunConfig()
