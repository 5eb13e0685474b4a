"""Cross-modal bird's-eye-view knowledge distillation, desk scale.

A frozen lidar-side teacher supervises a camera-side student on synthetic
paired-modality scenes through dense foreground-masked feature imitation
and quality-weighted sparse instance distillation, with detection metrics
and a fully gradient-checked loss stack.
"""

from .autodiff import DiffValue
from .core_types import (BevBox, BevGrid, ClassDistribution, DistillConfig,
                         FeatureMap, PredictionSet, normalize_yaw)
from .dense_distill import (ForegroundMask, MaskStrategy, build_foreground_mask,
                            fitnet_feature_loss, gaussian_center_weight,
                            masked_feature_loss, merge_masks)
from .set_matching import (Assignment, CostMatrix, brute_force_assign,
                           build_cost_matrix, hungarian_assign, pair_match_cost)
from .instance_distill import (QualityWeights, box_distill_l1, instance_loss,
                               kl_class_distill, quality_score, rotated_bev_iou,
                               teacher_quality_weights)
from .contrastive_critic import (CriticHandle, PairBatch, ProjectionHead,
                                 bilinear_sample, critic_class_loss,
                                 infonce_loss, make_critic, project)
from .eval_metrics import MetricReport, match_predictions, nds, toy_map, tp_errors
from .scenes import Scene, SceneSpec, generate_scene, make_grid, read_dataset, write_dataset
from .models import ModelConfig, ToyStudent, ToyTeacher
from .pipeline import (LossReport, TrainState, distill_step, evaluate_model,
                       run_experiment, student_task_loss, train_teacher)
from .run_config import REFERENCE_CONFIG, RunConfig

__version__ = "0.1.0"
