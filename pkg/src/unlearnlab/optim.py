"""Bias-corrected adaptive-moment optimizer and the pretraining loop.

Updates are pure functions: opt_step returns fresh params/state and
leaves its inputs untouched, so frozen teacher snapshots stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import TokenSeq
from .errors import InvalidInput, NumericalError
from .model import (
    GradAccum,
    ModelConfig,
    ModelParams,
    batch_backward,
    onehot_spec,
    param_shapes,
    token_array,
)

DEFAULT_LR = 1e-3          # desk-scale default for the tiny model
PAPER_LR = 5e-5            # constant-schedule preset matching the reference setup


@dataclass
class OptimizerState:
    cfg: ModelConfig
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_opt_state(params: ModelParams, lr: float = DEFAULT_LR,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    zeros = {name: np.zeros(shape, dtype=params.dtype)
             for name, shape in param_shapes(params.cfg)}
    return OptimizerState(cfg=params.cfg,
                          m={k: v.copy() for k, v in zeros.items()},
                          v=zeros, step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def opt_step(params: ModelParams, grads: GradAccum,
             state: OptimizerState) -> tuple[ModelParams, OptimizerState]:
    """One adaptive-moment update with constant learning rate."""
    if set(grads) != {name for name, _ in param_shapes(params.cfg)}:
        raise InvalidInput("gradient keys do not match the parameter set")
    dtype = params.dtype
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_tensors: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(params.cfg):
        g = np.asarray(grads[name], dtype=dtype)
        if g.shape != shape:
            raise InvalidInput(f"gradient {name} has shape {g.shape}, expected {shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_tensors[name] = (params.tensors[name] - update.astype(dtype)).astype(dtype)
        new_m[name] = m
        new_v[name] = v
    new_state = OptimizerState(cfg=state.cfg, m=new_m, v=new_v, step=t,
                               lr=state.lr, beta1=state.beta1,
                               beta2=state.beta2, eps=state.eps)
    return ModelParams(params.cfg, new_tensors), new_state


def scale_grads(grads: GradAccum, factor: float) -> GradAccum:
    return {k: v * factor for k, v in grads.items()}


def add_grads(a: GradAccum, b: GradAccum, factor: float = 1.0) -> GradAccum:
    return {k: a[k] + factor * b[k] for k in a}


def pretrain(params: ModelParams, data: list[TokenSeq], epochs: int, batch_size: int,
             state: OptimizerState, seed: int) -> tuple[ModelParams, OptimizerState, list[float]]:
    """Minimize mean sequence NLL with seeded mini-batch shuffling.

    Returns the final params, optimizer state, and per-epoch mean loss.
    """
    if batch_size < 1:
        raise InvalidInput("batch_size must be >= 1")
    if epochs < 0:
        raise InvalidInput("epochs must be >= 0")
    if not data:
        raise InvalidInput("pretraining data is empty")
    arrays = [token_array(s) for s in data]
    rng = np.random.default_rng(seed)
    curve: list[float] = []
    V = params.cfg.vocab_size
    for _ in range(epochs):
        order = rng.permutation(len(arrays))
        total = 0.0
        for start in range(0, len(arrays), batch_size):
            chunk = [arrays[int(i)] for i in order[start:start + batch_size]]
            weight = 1.0 / len(chunk)
            specs = [onehot_spec(s, V, weight) for s in chunk]
            loss, grads = batch_backward(params, chunk, specs)
            total += loss * len(chunk)
            params, state = opt_step(params, grads, state)
        curve.append(total / len(arrays))
    return params, state, curve
