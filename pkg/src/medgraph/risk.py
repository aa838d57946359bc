"""Supervised risk head on the recurrent hidden state."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .encoder import glorot

LOSS_MODES = ("softmax-ce", "paper-literal")
CLIP = 1e-9


class MissingLabelError(ValueError):
    pass


def init_head(rng: np.random.Generator, hidden: int, n_classes: int) -> dict:
    return {"W_s": glorot(rng, hidden, n_classes), "b_s": np.zeros(n_classes)}


def predict_nodes(H, p: Mapping[str, ad.Node]) -> ad.Node:
    return ad.softmax(ad.matmul(H, p["W_s"]) + p["b_s"], axis=-1)


def predict(h, p: Mapping[str, np.ndarray]) -> np.ndarray:
    """Class probabilities for one hidden state (or rows of states)."""
    return predict_nodes(ad.const(h), {k: ad.const(v) for k, v in p.items()}).value


def task_loss(labels, predictions, mode: str = "softmax-ce", weights=None) -> ad.Node:
    """Cross-entropy between label rows and predicted probability rows.

    With ``weights=None`` the rows form one sequence and the loss is the mean
    over rows; otherwise each row's term is scaled by ``weights`` and summed.
    ``"paper-literal"`` adds the ``(1 - y) log(1 - yhat)`` term.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    if labels is None or any(y is None for y in labels):
        raise MissingLabelError("every visit needs a label for the task loss")
    Y = np.asarray(labels, dtype=np.float64)
    P = ad.const(predictions)
    if Y.shape != P.shape:
        raise ad.ShapeError(f"labels {Y.shape} vs predictions {P.shape}")
    per_row = ad.sum(ad.mul(ad.log(ad.clip(P, CLIP, 1 - CLIP)), Y), axis=-1)
    if mode == "paper-literal":
        comp = ad.log(ad.clip(1.0 - P, CLIP, 1 - CLIP))
        per_row = per_row + ad.sum(ad.mul(comp, 1.0 - Y), axis=-1)
    if weights is None:
        weights = np.full(Y.shape[0], 1.0 / Y.shape[0])
    return -ad.sum(ad.mul(per_row, np.asarray(weights, dtype=np.float64)))
