"""Replay-based domain-incremental learning with gradient-interference retrieval.

A small numpy feed-forward classifier, a synthetic two-domain task, the
GMIR/GMIR+ buffer selectors and the usual finetuning baselines, plus the
evaluation pipeline that compares them.
"""
from .data import Dataset, DomainSpec, Sample, generate_domain, merge, split
from .metrics import (DomainResult, ExperimentReport, TransferResult, evaluate, time_reduction,
                      transfer_metrics)
from .net import (Checkpoint, ConfigurationError, ModelConfig, forward, grad, init_params, loss,
                  sgd_step)
from .replay import (ReplayBuffer, average_new_domain_gradient, gmir_select, interference_score,
                     per_sample_gradient, random_select)
from .strategies import (FisherDiagonal, StrategyConfig, agem_project, ewc_fisher,
                         ewc_penalty_grad, gss_select, mir_epoch_select, strategy_resample)
from .trainer import TimingLedger, TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigurationError", "Dataset", "DomainResult", "DomainSpec",
    "ExperimentReport", "FisherDiagonal", "ModelConfig", "ReplayBuffer", "Sample",
    "StrategyConfig", "TimingLedger", "TrainConfig", "TransferResult", "agem_project",
    "average_new_domain_gradient", "evaluate", "ewc_fisher", "ewc_penalty_grad", "finetune",
    "forward", "generate_domain", "gmir_select", "grad", "gss_select", "init_params",
    "interference_score", "loss", "merge", "mir_epoch_select", "per_sample_gradient",
    "pretrain", "random_select", "sgd_step", "split", "strategy_resample", "time_reduction",
    "transfer_metrics",
]
