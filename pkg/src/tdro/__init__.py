"""Temporally robust group-weighted training for cold-start recommendation.

The package trains a small two-tower recommender (CF embeddings plus an
item-feature extractor) under four training modes and evaluates it with
full-ranking metrics on all/warm/cold candidate settings.
"""

from .data import (Dataset, IntegrityError, Interaction, ParseError,
                   SplitDataset, chronological_split, load_dataset)
from .evaluate import (EvalReport, SettingEval, build_report, evaluate_split,
                       full_rank_metrics, item_popularity_groups,
                       user_shift_groups)
from .grouping import (GroupPeriodIndex, build_group_period_index,
                       kmeans_cluster, period_weights, split_periods)
from .model import (Batch, Model, feature_rep, init_model, load_checkpoint,
                    loss, loss_gradient, save_checkpoint, score)
from .optim import (TdroConfig, TdroState, TrainResult, group_scores,
                    shifting_trend, stream_update, train, weight_update)
from .synth import SynthConfig, SynthResult, generate, mixture_schedule

__version__ = "0.1.0"

__all__ = [
    "Batch", "Dataset", "EvalReport", "GroupPeriodIndex", "IntegrityError",
    "Interaction", "Model", "ParseError", "SettingEval", "SplitDataset",
    "SynthConfig", "SynthResult", "TdroConfig", "TdroState", "TrainResult",
    "build_group_period_index", "build_report", "chronological_split",
    "evaluate_split", "feature_rep", "full_rank_metrics", "generate",
    "group_scores", "init_model", "item_popularity_groups", "kmeans_cluster",
    "load_checkpoint", "load_dataset", "loss", "loss_gradient",
    "mixture_schedule", "period_weights", "save_checkpoint", "score",
    "shifting_trend", "split_periods", "stream_update", "train",
    "user_shift_groups", "weight_update",
]
