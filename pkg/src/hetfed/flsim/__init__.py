"""Deterministic federated-learning simulator for small models."""
from .federation import (
    Algorithm,
    ClientState,
    EvalResult,
    FederationResult,
    RoundLog,
    TrainConfig,
    aggregate_fedavg,
    client_splits,
    finetune_and_evaluate,
    finetuned_models,
    local_train,
    run_federation,
)
from .models import MLP, Architecture, ModelParams, SoftmaxRegression, architecture_from_dict

__all__ = [
    "Algorithm", "Architecture", "ClientState", "EvalResult", "FederationResult", "MLP",
    "ModelParams", "RoundLog", "SoftmaxRegression", "TrainConfig", "aggregate_fedavg",
    "architecture_from_dict", "client_splits", "finetune_and_evaluate", "finetuned_models",
    "local_train", "run_federation",
]
