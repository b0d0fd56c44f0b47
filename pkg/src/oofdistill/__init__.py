"""Leakage-aware out-of-fold soft-label distillation engine."""

from .data import Dataset, DataError, FoldPlan, load_dataset, make_folds
from .labeling import (AnnotationConfig, LabelingError, SoftLabelSet, annotate,
                       collect_leaky, collect_oof)
from .losses import LossConfig, kl, mixed_loss, mixed_loss_grad, smooth_target, temper
from .teachers import TeacherSpec, FittedTeacher, fit_teacher
from .gbdt import (GbdtConfig, TreeEnsemble, fit_gbdt, load_gbdt, predict_gbdt,
                   save_gbdt, soft_logit_targets)
from .mlp import MlpConfig, MlpModel, fit_mlp, load_mlp, predict_mlp, save_mlp
from .metrics import (MetricRow, StatResult, ece, feature_split_analysis,
                      fit_temperature, friedman, retention, roc_auc,
                      temperature_scale, wilcoxon_signed_rank, win_rate)
from .bench import LatencyReport, measure_latency, speedup
from .cache import CacheError, CacheMeta, read_cache, write_cache
from .experiment import (ExperimentConfig, config_from_dict, leak_demo,
                         run_ablation, run_experiment)

__version__ = "0.1.0"
