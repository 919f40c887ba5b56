"""Batch and sequential unlearning drivers with metric-gated stopping.

Each epoch runs one optimizer pass over the forget batch (pairing every
step with a freshly sampled retain mini-batch when the objective has a
retain term), then evaluates the forget-set metrics and retention
probes. Unlearning stops once the chosen metrics fall below their
thresholds, the epoch cap is hit, or the loss goes non-finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import TokenSeq
from .errors import InvalidInput, NumericalError
from .losses import (
    LossBreakdown,
    Method,
    asc_loss,
    pop_grad,
    ret_loss_hard,
    ret_loss_soft,
)
from .metrics import (
    DEFAULT_EL_ORDER,
    ForgettingThresholds,
    MetricTriple,
    ma,
    metric_triple,
)
from .model import ModelParams, forward_logprobs, token_array
from .optim import DEFAULT_LR, OptimizerState, init_opt_state, opt_step

STOP_REASONS = ("thresholds_met", "epoch_cap", "numerical_failure")


@dataclass
class UnlearnConfig:
    method: Method = Method.POP
    lam: float = 1.0
    lr: float = DEFAULT_LR
    forget_batch_size: int = 32
    retain_sample_size: int = 32
    el_order: int = DEFAULT_EL_ORDER
    stop_mode: str = "set_average"               # or "per_sequence"
    stop_metrics: tuple[str, ...] = ("el", "ma", "rma")
    max_epochs: int = 200
    seed: int = 0
    teacher: str = "refreeze"                    # sequential: "refreeze" | "original"
    reset_optimizer: bool = True                 # sequential: fresh moments per batch

    def __post_init__(self) -> None:
        self.method = Method(self.method)
        if self.max_epochs < 1:
            raise InvalidInput("max_epochs must be >= 1")
        if self.forget_batch_size < 1 or self.retain_sample_size < 1:
            raise InvalidInput("batch sizes must be >= 1")
        if self.lam < 0:
            raise InvalidInput("lambda must be >= 0")
        if self.stop_mode not in ("set_average", "per_sequence"):
            raise InvalidInput(f"unknown stop_mode {self.stop_mode!r}")
        if self.teacher not in ("refreeze", "original"):
            raise InvalidInput(f"unknown teacher mode {self.teacher!r}")
        bad = set(self.stop_metrics) - {"el", "ma", "rma"}
        if bad or not self.stop_metrics:
            raise InvalidInput(f"stop_metrics must be a non-empty subset of el/ma/rma, got {self.stop_metrics}")

    def as_dict(self) -> dict:
        return {
            "method": self.method.value, "lambda": self.lam, "lr": self.lr,
            "forget_batch_size": self.forget_batch_size,
            "retain_sample_size": self.retain_sample_size,
            "el_order": self.el_order, "stop_mode": self.stop_mode,
            "stop_metrics": list(self.stop_metrics),
            "max_epochs": self.max_epochs, "seed": self.seed,
            "teacher": self.teacher, "reset_optimizer": self.reset_optimizer,
        }


@dataclass
class RetentionProbe:
    perplexity: float
    next_token_accuracy: float

    def as_dict(self) -> dict:
        return {"perplexity": self.perplexity,
                "next_token_accuracy": self.next_token_accuracy}


@dataclass
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    forget_mean: MetricTriple
    per_sequence: list[MetricTriple]
    retention: RetentionProbe


@dataclass
class UnlearnTrace:
    config: dict
    thresholds: ForgettingThresholds
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "epoch_cap"


def retention_probe(params: ModelParams, heldout: list[TokenSeq]) -> RetentionProbe:
    """Held-out perplexity (exp mean per-token NLL) and mean MA."""
    if not heldout:
        raise InvalidInput("heldout set is empty")
    nll = 0.0
    positions = 0
    for s in heldout:
        tokens = token_array(s)
        lp = forward_logprobs(params, tokens)
        nll -= float(lp[np.arange(tokens.shape[0] - 1), tokens[1:]].sum())
        positions += tokens.shape[0] - 1
    acc = math.fsum(ma(params, s) for s in heldout) / len(heldout)
    return RetentionProbe(perplexity=math.exp(nll / positions), next_token_accuracy=acc)


def stop_predicate(record: EpochRecord, thresholds: ForgettingThresholds,
                   mode: str = "set_average",
                   stop_metrics: tuple[str, ...] = ("el", "ma", "rma")) -> bool:
    """True when every chosen metric is strictly below its threshold."""
    def below(triple: MetricTriple) -> bool:
        return all(getattr(triple, m) < getattr(thresholds, m) for m in stop_metrics)

    if mode == "set_average":
        return below(record.forget_mean)
    if mode == "per_sequence":
        return all(below(t) for t in record.per_sequence)
    raise InvalidInput(f"unknown stop_mode {mode!r}")


def _mean_triple(triples: list[MetricTriple], n: int) -> MetricTriple:
    k = len(triples)
    return MetricTriple(el=math.fsum(t.el for t in triples) / k,
                        ma=math.fsum(t.ma for t in triples) / k,
                        rma=math.fsum(t.rma for t in triples) / k, el_n=n)


def _evaluate(params: ModelParams, forget: list[TokenSeq], heldout: list[TokenSeq],
              losses: LossBreakdown, epoch: int, n: int) -> EpochRecord:
    per_seq = [metric_triple(params, s, n) for s in forget]
    return EpochRecord(epoch=epoch, losses=losses, forget_mean=_mean_triple(per_seq, n),
                       per_sequence=per_seq, retention=retention_probe(params, heldout))


def _loss_snapshot(params, params_ptr, forget, retain_head, cfg: UnlearnConfig,
                   use_ret: bool) -> LossBreakdown:
    asc = asc_loss(params, forget)
    if not use_ret:
        return LossBreakdown(asc=asc, ret=0.0, total=asc, lam=cfg.lam)
    ret_fn = ret_loss_hard if cfg.method is Method.POP_FLAT else ret_loss_soft
    ret = ret_fn(params, params_ptr, retain_head)
    return LossBreakdown(asc=asc, ret=ret, total=asc + cfg.lam * ret, lam=cfg.lam)


def unlearn_batch(params: ModelParams, params_ptr: ModelParams,
                  forget_batch: list[TokenSeq], retain_pool: list[TokenSeq],
                  heldout: list[TokenSeq], thresholds: ForgettingThresholds,
                  cfg: UnlearnConfig) -> tuple[ModelParams, UnlearnTrace]:
    params, trace, _ = _unlearn_batch_impl(params, params_ptr, forget_batch,
                                           retain_pool, heldout, thresholds, cfg)
    return params, trace


def _unlearn_batch_impl(params, params_ptr, forget_batch, retain_pool, heldout,
                        thresholds, cfg: UnlearnConfig,
                        opt_state: OptimizerState | None = None):
    if not forget_batch:
        raise InvalidInput("forget batch is empty")
    use_ret = cfg.method is not Method.UL and cfg.lam != 0.0
    if use_ret and not retain_pool:
        raise InvalidInput(f"{cfg.method.value} needs a non-empty retain pool")

    rng = np.random.default_rng(cfg.seed)
    if opt_state is None:
        opt_state = init_opt_state(params, lr=cfg.lr)

    retain_head = retain_pool[: cfg.retain_sample_size] if use_ret else []
    record0 = _evaluate(params, forget_batch, heldout,
                        _loss_snapshot(params, params_ptr, forget_batch,
                                       retain_head, cfg, use_ret),
                        epoch=0, n=cfg.el_order)
    trace = UnlearnTrace(config=cfg.as_dict(), thresholds=thresholds, records=[record0])
    if stop_predicate(record0, thresholds, cfg.stop_mode, cfg.stop_metrics):
        trace.stop_reason = "thresholds_met"
        return params, trace, opt_state

    # retain mini-batches: without replacement within an epoch, reshuffled
    # per epoch; a pool smaller than the sample size is used whole
    draw_retain = use_ret and cfg.retain_sample_size < len(retain_pool)
    perm: np.ndarray = np.empty(0, dtype=np.int64)
    cursor = 0

    def next_retain() -> list[TokenSeq]:
        nonlocal perm, cursor
        if not use_ret:
            return []
        if not draw_retain:
            return retain_pool
        if cursor + cfg.retain_sample_size > perm.shape[0]:
            perm = rng.permutation(len(retain_pool))
            cursor = 0
        chosen = perm[cursor: cursor + cfg.retain_sample_size]
        cursor += cfg.retain_sample_size
        return [retain_pool[int(i)] for i in chosen]

    trace.stop_reason = "epoch_cap"
    for epoch in range(1, cfg.max_epochs + 1):
        if draw_retain:
            perm = rng.permutation(len(retain_pool))
            cursor = 0
        step_losses: list[LossBreakdown] = []
        failed = False
        for start in range(0, len(forget_batch), cfg.forget_batch_size):
            chunk = forget_batch[start: start + cfg.forget_batch_size]
            try:
                breakdown, grads = pop_grad(params, params_ptr if use_ret else None,
                                            chunk, next_retain(),
                                            lam=cfg.lam, variant=cfg.method)
                if not math.isfinite(breakdown.total):
                    raise NumericalError("non-finite unlearning loss")
                params, opt_state = opt_step(params, grads, opt_state)
            except NumericalError:
                failed = True
                break
            step_losses.append(breakdown)
        if failed:
            trace.stop_reason = "numerical_failure"
            break
        k = len(step_losses)
        mean_losses = LossBreakdown(
            asc=math.fsum(b.asc for b in step_losses) / k,
            ret=math.fsum(b.ret for b in step_losses) / k,
            total=math.fsum(b.total for b in step_losses) / k,
            lam=cfg.lam,
        )
        record = _evaluate(params, forget_batch, heldout, mean_losses,
                           epoch=epoch, n=cfg.el_order)
        trace.records.append(record)
        if stop_predicate(record, thresholds, cfg.stop_mode, cfg.stop_metrics):
            trace.stop_reason = "thresholds_met"
            break
    return params, trace, opt_state


def sequential_unlearn(params: ModelParams, forget_batches: list[list[TokenSeq]],
                       retain_pool: list[TokenSeq], heldout: list[TokenSeq],
                       thresholds: ForgettingThresholds,
                       cfg: UnlearnConfig) -> tuple[ModelParams, list[UnlearnTrace]]:
    """Unlearn batches in order on the evolving model.

    The frozen reference is re-frozen to the model entering each batch
    (cfg.teacher == "refreeze") or pinned to the model entering the first
    batch (cfg.teacher == "original"). A numerical failure aborts the
    remaining batches; partial traces are returned.
    """
    ids = [s.id for batch in forget_batches for s in batch]
    if len(set(ids)) != len(ids):
        raise InvalidInput("forget batches share sequence ids")
    original = params.copy() if cfg.teacher == "original" else None
    traces: list[UnlearnTrace] = []
    opt_state: OptimizerState | None = None
    for k, batch in enumerate(forget_batches):
        ptr = original if original is not None else params.copy()
        cfg_k = replace(cfg, seed=cfg.seed + k)
        if cfg.reset_optimizer:
            opt_state = None
        params, trace, opt_state = _unlearn_batch_impl(
            params, ptr, batch, retain_pool, heldout, thresholds, cfg_k, opt_state)
        traces.append(trace)
        if trace.stop_reason == "numerical_failure":
            break
    return params, traces


# ---------------------------------------------------------------------------
# Trace serialization (JSON dict and flat CSV rows)
# ---------------------------------------------------------------------------

TRACE_CSV_COLUMNS = ("epoch", "loss_total", "loss_asc", "loss_ret",
                     "el", "ma", "rma", "heldout_ppl", "heldout_acc")


def trace_to_dict(trace: UnlearnTrace) -> dict:
    return {
        "version": 1,
        "config": trace.config,
        "thresholds": trace.thresholds.as_dict(),
        "stop_reason": trace.stop_reason,
        "records": [
            {
                "epoch": r.epoch,
                "losses": r.losses.as_dict(),
                "forget_mean": r.forget_mean.as_dict(),
                "per_sequence": [t.as_dict() for t in r.per_sequence],
                "retention": r.retention.as_dict(),
            }
            for r in trace.records
        ],
    }


def trace_from_dict(d: dict) -> UnlearnTrace:
    records = []
    for r in d["records"]:
        records.append(EpochRecord(
            epoch=int(r["epoch"]),
            losses=LossBreakdown(asc=r["losses"]["asc"], ret=r["losses"]["ret"],
                                 total=r["losses"]["total"], lam=r["losses"]["lambda"]),
            forget_mean=MetricTriple(**r["forget_mean"]),
            per_sequence=[MetricTriple(**t) for t in r["per_sequence"]],
            retention=RetentionProbe(**r["retention"]),
        ))
    return UnlearnTrace(config=d["config"],
                        thresholds=ForgettingThresholds.from_dict(d["thresholds"]),
                        records=records, stop_reason=d["stop_reason"])


def trace_csv(trace: UnlearnTrace) -> str:
    lines = [",".join(TRACE_CSV_COLUMNS)]
    for r in trace.records:
        lines.append(",".join([
            str(r.epoch),
            repr(r.losses.total), repr(r.losses.asc), repr(r.losses.ret),
            repr(r.forget_mean.el), repr(r.forget_mean.ma), repr(r.forget_mean.rma),
            repr(r.retention.perplexity), repr(r.retention.next_token_accuracy),
        ]))
    return "\n".join(lines) + "\n"
