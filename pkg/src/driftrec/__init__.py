"""Incremental updates for a drifting sequential recommender.

A small item-token transformer carries low-rank adapters on every layer. When
new interactions arrive, the layers whose hidden states move most are
located, outdated history is dropped by a light filter model, and only the
located adapters are trained, with a KL term keeping inactive users stable.
"""

from .data import (DriftScenario, Encoder, InteractionLog, TemporalSplit, full_instances, generate_drift,
                   ingest, kcore_filter, pretrain_instances, sample_candidates, temporal_split)
from .errors import DataError, MissingArtifactError, NumericalError
from .evaluation import MetricsReport, evaluate, hit_rate, ndcg
from .evolve import (EvolutionConfig, alignment_loss, consistency_loss, cycle_splits, evolve_cycle,
                     run_schedule, run_strategy, selective_step, total_loss)
from .filter import (FilterConfig, FilterModel, drop_bottom_k, finetune_filter, forget, pretrain_filter,
                     relevance_scores, seq_repr, train_bpr)
from .locate import SensitivityReport, layer_similarity, locate, most_sensitive_layer, select_layers
from .model import ModelConfig, RecModel, forward_trace, merge_delta, nll_loss, pretrain

__version__ = "0.1.0"
