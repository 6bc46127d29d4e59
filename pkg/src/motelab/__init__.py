"""Desk-scale mixture-of-task-experts embedding lab."""

from .analysis import SimilaritySample, WelchResult, emit_report, inter_task_similarity, t_cdf, welch_one_sided
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CorpusSpec, TaskStore, TrainingPair, Vocabulary, generate_corpus, load_jsonl
from .metrics import average_precision, mean_average_precision, ndcg_at_k, spearman, v_measure
from .model import (EncoderConfig, ModelCheckpoint, encode, expert_average, forward, init_model, set_residency,
                    upcycle)
from .routing import TaskEntry, TaskRegistry, default_registry, load_balancing_loss, route_sequence, route_tokens
from .training import MiniBatch, Schedule, build_minibatch, info_nce, train

__version__ = "0.1.0"
