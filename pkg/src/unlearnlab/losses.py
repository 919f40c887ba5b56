"""Unlearning objectives: NLL, ascent loss, hard/soft retain losses, POP.

Aggregation convention everywhere: sum over predicted positions within a
sequence, mean over sequences in a batch. The frozen reference model
("teacher") contributes values but never gradients; its parameters are
read-only snapshots.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .model import (
    GradAccum,
    ModelParams,
    batch_backward,
    forward_logprobs,
    onehot_spec,
    token_array,
)
from .optim import add_grads


class Method(str, enum.Enum):
    """Unlearning objective selector."""

    UL = "ul"              # ascent loss only
    POP_FLAT = "pop_flat"  # ascent + hard-label retain loss
    POP = "pop"            # ascent + soft-label (teacher-distribution) retain loss


@dataclass
class LossBreakdown:
    asc: float
    ret: float
    total: float
    lam: float

    def as_dict(self) -> dict:
        return {"asc": self.asc, "ret": self.ret, "total": self.total, "lambda": self.lam}


def _arrays(batch, what: str) -> list[np.ndarray]:
    if not batch:
        raise InvalidInput(f"{what} batch is empty")
    return [token_array(s) for s in batch]


def _check_teacher(params: ModelParams, params_ptr: ModelParams) -> None:
    if params.cfg != params_ptr.cfg:
        raise InvalidInput("model and frozen reference differ in architecture")


def _true_token_logprobs(params: ModelParams, arrays: list[np.ndarray]) -> list[float]:
    return [float(forward_logprobs(params, a)[np.arange(a.shape[0] - 1), a[1:]].sum())
            for a in arrays]


# ---------------------------------------------------------------------------
# Loss values
# ---------------------------------------------------------------------------

def nll_loss(params: ModelParams, batch) -> float:
    """Mean negative sequence log-likelihood; >= 0."""
    arrays = _arrays(batch, "nll")
    return -math.fsum(_true_token_logprobs(params, arrays)) / len(arrays)


def asc_loss(params: ModelParams, forget_batch) -> float:
    """Mean sequence log-likelihood of the forget batch (<= 0).

    Minimizing this value pushes the target sequences' probabilities down.
    """
    arrays = _arrays(forget_batch, "forget")
    return math.fsum(_true_token_logprobs(params, arrays)) / len(arrays)


def ret_loss_hard(params: ModelParams, params_ptr: ModelParams, retain_batch) -> float:
    """Mean [log p under frozen reference - log p under params] on retain data."""
    _check_teacher(params, params_ptr)
    arrays = _arrays(retain_batch, "retain")
    ptr = math.fsum(_true_token_logprobs(params_ptr, arrays))
    cur = math.fsum(_true_token_logprobs(params, arrays))
    return (ptr - cur) / len(arrays)


def ret_loss_soft(params: ModelParams, params_ptr: ModelParams, retain_batch) -> float:
    """Per-position KL from the frozen reference distribution to the model's.

    Zero iff the two next-token distributions agree at every position.
    """
    _check_teacher(params, params_ptr)
    arrays = _arrays(retain_batch, "retain")
    total = 0.0
    for a in arrays:
        lp_ptr = forward_logprobs(params_ptr, a)
        lp_cur = forward_logprobs(params, a)
        kl_rows = (np.exp(lp_ptr) * (lp_ptr - lp_cur)).sum(axis=-1)
        # per-position KL is non-negative; clip float dust so the
        # invariant holds exactly
        total += float(np.maximum(kl_rows, 0.0).sum())
    return total / len(arrays)


def pop_loss(params: ModelParams, params_ptr: ModelParams | None, forget_batch,
             retain_batch, lam: float = 1.0, variant: Method = Method.POP) -> LossBreakdown:
    """Combined objective: ascent term plus lam times the retain term."""
    variant = Method(variant)
    asc = asc_loss(params, forget_batch)
    if variant is Method.UL:
        return LossBreakdown(asc=asc, ret=0.0, total=asc, lam=lam)
    if params_ptr is None:
        raise InvalidInput(f"{variant.value} needs the frozen reference model")
    if variant is Method.POP_FLAT:
        ret = ret_loss_hard(params, params_ptr, retain_batch)
    else:
        ret = ret_loss_soft(params, params_ptr, retain_batch)
    return LossBreakdown(asc=asc, ret=ret, total=asc + lam * ret, lam=lam)


# ---------------------------------------------------------------------------
# Loss values with exact gradients (what the unlearning driver consumes)
# ---------------------------------------------------------------------------

def nll_grad(params: ModelParams, batch) -> tuple[float, GradAccum]:
    arrays = _arrays(batch, "nll")
    w = 1.0 / len(arrays)
    specs = [onehot_spec(a, params.cfg.vocab_size, w) for a in arrays]
    return batch_backward(params, arrays, specs)


def asc_grad(params: ModelParams, forget_batch) -> tuple[float, GradAccum]:
    arrays = _arrays(forget_batch, "forget")
    w = -1.0 / len(arrays)
    specs = [onehot_spec(a, params.cfg.vocab_size, w) for a in arrays]
    return batch_backward(params, arrays, specs)


def ret_hard_grad(params: ModelParams, params_ptr: ModelParams,
                  retain_batch) -> tuple[float, GradAccum]:
    _check_teacher(params, params_ptr)
    arrays = _arrays(retain_batch, "retain")
    w = 1.0 / len(arrays)
    specs = [onehot_spec(a, params.cfg.vocab_size, w) for a in arrays]
    neg_cur, grads = batch_backward(params, arrays, specs)
    ptr = math.fsum(_true_token_logprobs(params_ptr, arrays)) / len(arrays)
    return ptr + neg_cur, grads


def ret_soft_grad(params: ModelParams, params_ptr: ModelParams,
                  retain_batch) -> tuple[float, GradAccum]:
    _check_teacher(params, params_ptr)
    arrays = _arrays(retain_batch, "retain")
    w = 1.0 / len(arrays)
    specs = []
    entropy = 0.0
    for a in arrays:
        lp_ptr = forward_logprobs(params_ptr, a)
        p_ptr = np.exp(lp_ptr)
        entropy += float(-(p_ptr * lp_ptr).sum()) * w
        specs.append(p_ptr * w)
    cross_entropy, grads = batch_backward(params, arrays, specs)
    # KL = cross-entropy minus the (constant) teacher entropy; gradients agree
    return cross_entropy - entropy, grads


def pop_grad(params: ModelParams, params_ptr: ModelParams | None, forget_batch,
             retain_batch, lam: float = 1.0,
             variant: Method = Method.POP) -> tuple[LossBreakdown, GradAccum]:
    """Objective value and gradient for one update step.

    With variant UL, or lam == 0, the retain term is skipped entirely so
    the update (and the recorded breakdown) is bit-identical to the pure
    ascent objective.
    """
    variant = Method(variant)
    asc, grads = asc_grad(params, forget_batch)
    if variant is Method.UL or lam == 0.0:
        return LossBreakdown(asc=asc, ret=0.0, total=asc, lam=lam), grads
    if params_ptr is None:
        raise InvalidInput(f"{variant.value} needs the frozen reference model")
    ret_fn = ret_hard_grad if variant is Method.POP_FLAT else ret_soft_grad
    ret, ret_grads = ret_fn(params, params_ptr, retain_batch)
    return (LossBreakdown(asc=asc, ret=ret, total=asc + lam * ret, lam=lam),
            add_grads(grads, ret_grads, lam))
