"""Residuals, losses, training loop, certificates and comparison envelopes."""

from .certify import Certificate, Dataset, build_budget, certify, issue_certificate, loss_validity
from .envelope import KlEnvelope, kl_envelope
from .lipschitz import Multipliers, lipschitz_verdicts, loss_lipschitz
from .params import HyperParams, IncompleteBudget, LipschitzBudget, class_k_lipschitz, compose_overall_L
from .scp import (
    DatasetEval,
    ResidualBundle,
    evaluate_dataset,
    loss_main,
    loss_main_eta_grad,
    loss_main_trace,
    scp_residuals,
)
from .train import Adam, TrainResult, train, write_history

__all__ = [
    "Adam", "Certificate", "Dataset", "DatasetEval", "HyperParams", "IncompleteBudget", "KlEnvelope",
    "LipschitzBudget", "Multipliers", "ResidualBundle", "TrainResult", "build_budget", "certify",
    "class_k_lipschitz", "compose_overall_L", "evaluate_dataset", "issue_certificate", "kl_envelope",
    "lipschitz_verdicts", "loss_lipschitz", "loss_main", "loss_main_eta_grad", "loss_main_trace",
    "loss_validity", "scp_residuals", "train", "write_history",
]
