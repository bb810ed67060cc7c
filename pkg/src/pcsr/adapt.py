"""The online adaptation engine: one pass over a corrupted stream.

Per batch: forward, reliable-entropy (+ similarity) loss, one SGD step on the
method's trainable set, prediction emission. The default ordering updates
first and predicts with the updated parameters (costing a second forward); a
flag flips to the cheaper predict-then-adapt variant. Labels ride on the
stream batches for metrics only and never reach the adaptation path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .losses import LossBreakdown, combined_loss, entropy_threshold, reliable_entropy_loss
from .optim import ParamGroup, SgdState
from .recalibration import PcsrConfig, PcsrParams, init_pcsr, similarity_loss
from .tensor import Tensor, backward, no_grad
from .vit import VitParams, forward

METHODS = ("pcsr", "tent_like", "source")
RESET_POLICIES = ("per_domain", "continual")


@dataclass(frozen=True)
class AdaptConfig:
    lr_dsn: float = 0.2
    lr_fgn: float = 0.0005
    lr_ln: float = 0.001          # entropy-only LayerNorm baseline
    batch_size: int = 64
    e0_coeff: float = 0.4         # threshold = e0_coeff * ln(n_classes)
    method: str = "pcsr"
    reset: str = "per_domain"
    seed: int = 2022
    predict_first: bool = False   # True: emit predictions from the pre-update forward
    pcsr: PcsrConfig = field(default_factory=PcsrConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.reset not in RESET_POLICIES:
            raise ConfigError(f"reset must be one of {RESET_POLICIES}, got {self.reset!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.e0_coeff <= 0:
            raise ConfigError(f"e0_coeff must be > 0, got {self.e0_coeff}")
        for name in ("lr_dsn", "lr_fgn", "lr_ln"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class BatchRecord:
    step: int
    domain: str
    batch_size: int
    correct: int
    batch_accuracy: float
    cumulative_accuracy: float
    entropy_mean: float
    breakdown: LossBreakdown


@dataclass
class StreamMetrics:
    """Online metrics: each sample scored on the prediction emitted at arrival."""

    records: list[BatchRecord] = field(default_factory=list)
    seen: int = 0
    correct: int = 0
    domain_seen: dict[str, int] = field(default_factory=dict)
    domain_correct: dict[str, int] = field(default_factory=dict)

    @property
    def cumulative_accuracy(self) -> float:
        return self.correct / self.seen if self.seen else 0.0

    def domain_accuracy(self, domain: str) -> float:
        return self.domain_correct[domain] / self.domain_seen[domain]

    def add(self, domain: str, preds: np.ndarray, labels: np.ndarray,
            breakdown: LossBreakdown):
        n = len(labels)
        c = int((preds == labels).sum())
        self.seen += n
        self.correct += c
        self.domain_seen[domain] = self.domain_seen.get(domain, 0) + n
        self.domain_correct[domain] = self.domain_correct.get(domain, 0) + c
        self.records.append(BatchRecord(
            step=len(self.records),
            domain=domain,
            batch_size=n,
            correct=c,
            batch_accuracy=c / n,
            cumulative_accuracy=self.cumulative_accuracy,
            entropy_mean=breakdown.entropy_mean,
            breakdown=breakdown,
        ))


class MethodState:
    """Per-method trainable state; `reset()` restores the initial condition."""

    method: str

    def adapt_batch(self, images: np.ndarray) -> tuple[np.ndarray, LossBreakdown]:
        raise NotImplementedError

    def reset(self):
        raise NotImplementedError


def _predict(logits_data: np.ndarray) -> np.ndarray:
    return logits_data.argmax(axis=1)


def _source_breakdown(logits: Tensor, threshold: float) -> LossBreakdown:
    loss, mask, ent = reliable_entropy_loss(logits, threshold)
    _, breakdown = combined_loss(loss, mask, None, ent.data)
    return breakdown


class SourceState(MethodState):
    """No adaptation: the frozen source model, with loss diagnostics only."""

    method = "source"

    def __init__(self, source: VitParams, config: AdaptConfig):
        self.params = source
        self.threshold = entropy_threshold(source.config.n_classes, config.e0_coeff)

    def adapt_batch(self, images):
        with no_grad():
            logits = forward(images, self.params).logits
            breakdown = _source_breakdown(logits, self.threshold)
        return _predict(logits.data), breakdown

    def reset(self):
        pass


class _AdaptingState(MethodState):
    """Shared predict/update plumbing for the adapting methods."""

    def __init__(self, config: AdaptConfig, n_classes: int):
        self.config = config
        self.threshold = entropy_threshold(n_classes, config.e0_coeff)
        self.skipped_steps = 0

    def _loss(self, images) -> tuple[Tensor, LossBreakdown, Tensor]:
        raise NotImplementedError

    def _optimizer(self) -> SgdState:
        raise NotImplementedError

    def _forward_logits(self, images) -> Tensor:
        raise NotImplementedError

    def adapt_batch(self, images):
        try:
            loss, breakdown, logits = self._loss(images)
        except NumericError:
            # The forward itself blew up; skip the step, keep the stream alive.
            self.skipped_steps += 1
            b = images.shape[0]
            nan = float("nan")
            breakdown = LossBreakdown(nan, nan, 0.0, np.zeros(b, dtype=np.float32),
                                      nan, nan, finite=False)
            return np.zeros(b, dtype=np.int64), breakdown
        if not breakdown.finite:
            # Skip-on-non-finite guard: record, emit predictions, leave params alone.
            self.skipped_steps += 1
            return _predict(logits.data), breakdown
        backward(loss)
        self._optimizer().step()
        if self.config.predict_first:
            preds = _predict(logits.data)
        else:
            with no_grad():
                preds = _predict(self._forward_logits(images).data)
        return preds, breakdown


class PcsrState(_AdaptingState):
    """Scale-shift recalibration: trains only the per-layer dsn/fgn adapters."""

    method = "pcsr"

    def __init__(self, source: VitParams, config: AdaptConfig):
        super().__init__(config, source.config.n_classes)
        self.source = source
        self.source.set_requires_grad(False)
        self.adapter = init_pcsr(source.config.n_layers, source.config.d_model, config.pcsr)

    def _forward_logits(self, images):
        return forward(images, self.source, pcsr=self.adapter).logits

    def _loss(self, images):
        result = forward(images, self.source, pcsr=self.adapter)
        entropy_term, mask, ent = reliable_entropy_loss(result.logits, self.threshold)
        sim = similarity_loss(result.sim_matrices)
        loss, breakdown = combined_loss(entropy_term, mask, sim, ent.data)
        return loss, breakdown, result.logits

    def _optimizer(self):
        return SgdState([
            ParamGroup("dsn", self.config.lr_dsn, self.adapter.dsn_tensors()),
            ParamGroup("fgn", self.config.lr_fgn, self.adapter.fgn_tensors()),
        ])

    def reset(self):
        self.adapter = init_pcsr(self.source.config.n_layers,
                                 self.source.config.d_model, self.config.pcsr)
        self.skipped_steps = 0


class TentLikeState(_AdaptingState):
    """Entropy-only baseline: adapts the LayerNorm affine parameters."""

    method = "tent_like"

    def __init__(self, source: VitParams, config: AdaptConfig):
        super().__init__(config, source.config.n_classes)
        self.source = source
        self.params = source.clone()
        self.params.set_requires_grad(False)
        for t in self.params.ln_affine_tensors():
            t.requires_grad = True

    def _forward_logits(self, images):
        return forward(images, self.params).logits

    def _loss(self, images):
        logits = forward(images, self.params).logits
        entropy_term, mask, ent = reliable_entropy_loss(logits, self.threshold)
        loss, breakdown = combined_loss(entropy_term, mask, None, ent.data)
        return loss, breakdown, logits

    def _optimizer(self):
        return SgdState([ParamGroup("ln", self.config.lr_ln,
                                    self.params.ln_affine_tensors())])

    def reset(self):
        self.params = self.source.clone()
        self.params.set_requires_grad(False)
        for t in self.params.ln_affine_tensors():
            t.requires_grad = True
        self.skipped_steps = 0


def make_state(source: VitParams, config: AdaptConfig) -> MethodState:
    if config.method == "source":
        return SourceState(source, config)
    if config.method == "pcsr":
        return PcsrState(source, config)
    if config.method == "tent_like":
        return TentLikeState(source, config)
    raise ConfigError(f"unknown method {config.method!r}")


def adapt_batch(state: MethodState, images: np.ndarray) -> tuple[np.ndarray, LossBreakdown]:
    """Process one unlabeled batch: predict and (for adapting methods) update."""
    return state.adapt_batch(images)


def run_stream(stream, source: VitParams, config: AdaptConfig) -> tuple[StreamMetrics, MethodState]:
    """Single sequential pass over a stream of batches.

    `stream` yields objects with `.images` (normalized [b,3,S,S]), `.labels`
    (metrics only) and `.domain`. Under the per_domain reset policy the
    method state is reinitialized at every domain boundary.
    """
    state = make_state(source, config)
    metrics = StreamMetrics()
    current_domain: str | None = None
    for batch in stream:
        if batch.images.shape[0] > config.batch_size:
            raise ContractError(
                f"stream batch of {batch.images.shape[0]} exceeds configured size {config.batch_size}"
            )
        if batch.domain != current_domain:
            if current_domain is not None and config.reset == "per_domain":
                state.reset()
            current_domain = batch.domain
        preds, breakdown = state.adapt_batch(batch.images)
        metrics.add(batch.domain, preds, batch.labels, breakdown)
    return metrics, state
