"""Three-step pruning pipeline and its surrounding loop.

One loop attempt sparsifies every prunable layer by weight magnitude,
measures per-channel mean absolute activations on the validation set,
removes channels whose statistic falls below the channel threshold
(with all coupled weights), fine-tunes, and re-evaluates.  Attempts are
accepted while validation PSNR stays at or above the accuracy threshold
and the parameter count stays above the pruning-threshold floor; the
first failing attempt rolls back to the last accepted model.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .autodiff import Adam, Parameter, Rng, Tensor, mae_loss
from .errors import ConfigError, NumericError, PlanError
from .model import (
    NON_RESIDUAL,
    RESIDUAL,
    ModelState,
    count_parameters,
    network_forward,
)


@dataclass
class PruneConfig:
    """Loop hyperparameters; defaults are the desk-scale settings."""

    st: float = 0.8            # sparsity fraction per prunable layer
    ct: float = 0.001          # mean-absolute-activation removal threshold
    at: float | None = None    # absolute PSNR floor in dB; None derives it
    max_drop: float = 0.1      # dB below baseline PSNR when at is None
    pt: float = 0.9            # max allowed removed-parameter fraction
    train_epochs: int = 40     # fine-tune epochs per loop attempt
    lr: float = 3e-3
    batch_size: int = 4
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.st < 1.0:
            raise ConfigError(f"st must be in [0, 1), got {self.st}")
        if self.ct < 0:
            raise ConfigError(f"ct must be >= 0, got {self.ct}")
        if not 0.0 <= self.pt <= 1.0:
            raise ConfigError(f"pt must be in [0, 1], got {self.pt}")
        if self.train_epochs < 0:
            raise ConfigError(f"train_epochs must be >= 0, got {self.train_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_drop < 0:
            raise ConfigError(f"max_drop must be >= 0, got {self.max_drop}")


@dataclass
class ActivationStats:
    """Per prunable layer, the per-channel mean of |post-activation value|
    over the entire validation set (dense units count as channels)."""

    values: dict  # layer key -> float64 vector, one entry per channel


@dataclass
class BlockPrunePlan:
    """Channels to remove from one block.

    ``pair`` holds the joint conv2/dense2 indices: those two layers are
    multiplied together channel-by-channel, so a channel leaves both or
    neither.  Consumer-side removals (conv2 input slices for conv1,
    dense2 input columns for dense1, dense1 input columns and the
    residual reconnection indices for the pair) are derived from the
    block structure when the plan is applied.
    """

    conv1: tuple = ()
    pair: tuple = ()
    dense1: tuple = ()

    def removed(self) -> int:
        return len(self.conv1) + len(self.pair) + len(self.dense1)


@dataclass
class PrunePlan:
    blocks: dict = field(default_factory=dict)  # (stage, block) -> BlockPrunePlan

    def total_channels(self) -> int:
        return sum(bp.removed() for bp in self.blocks.values())

    def removed_by_layer(self) -> dict:
        out = {}
        for (si, bi), bp in sorted(self.blocks.items()):
            prefix = f"s{si}.b{bi}"
            if bp.conv1:
                out[f"{prefix}.conv1"] = len(bp.conv1)
            if bp.pair:
                out[f"{prefix}.conv2"] = len(bp.pair)
            if bp.dense1:
                out[f"{prefix}.dense1"] = len(bp.dense1)
        return out

    def digest(self) -> str:
        parts = []
        for (si, bi), bp in sorted(self.blocks.items()):
            parts.append(f"{si}.{bi}:{list(bp.conv1)}:{list(bp.pair)}:{list(bp.dense1)}")
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:12]


@dataclass
class TraceRecord:
    iteration: int
    params: int
    psnr_db: float
    infer_time_s: float
    removed: dict
    accepted: bool

    @property
    def removed_channels(self) -> int:
        return sum(self.removed.values())


@dataclass
class PruneTrace:
    """Per-attempt history of one pruning run."""

    records: list = field(default_factory=list)
    baseline_psnr: float = 0.0
    accuracy_threshold: float = 0.0
    original_params: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "params", "psnr_db", "infer_time_s",
                    "removed_channels", "accepted"])
        for r in self.records:
            w.writerow([r.iteration, r.params, f"{r.psnr_db:.6f}",
                        f"{r.infer_time_s:.6f}", r.removed_channels,
                        int(r.accepted)])
        return buf.getvalue()

    def to_svg(self) -> str:
        attempts = [r.iteration for r in self.records]
        return metrics.svg_dual_axis_chart(
            attempts,
            [r.psnr_db for r in self.records],
            [r.infer_time_s for r in self.records],
            x_label="pruning attempt",
            left_label="validation PSNR [dB]",
            right_label="inference time [s]",
        )


# -- prunable-layer enumeration -------------------------------------------

def prunable_layers(model: ModelState):
    """Yield (key, block, layer) for every prunable layer, in model order.

    ``layer`` is one of conv1 / conv2 / dense1 / dense2; head, transition
    and tail convs are never included, and conv2/dense2 appear only for
    residual blocks.
    """
    for si, stage in enumerate(model.stages):
        for bi, block in enumerate(stage):
            spec = block.spec
            prefix = f"s{si}.b{bi}"
            if spec.prunable_c1:
                yield f"{prefix}.conv1", block, "conv1"
            if spec.prunable_c2:
                yield f"{prefix}.conv2", block, "conv2"
            if spec.prunable_d1:
                yield f"{prefix}.dense1", block, "dense1"
            if spec.prunable_d2:
                yield f"{prefix}.dense2", block, "dense2"


_LAYER_WEIGHTS = {"conv1": "conv1_w", "conv2": "conv2_w",
                  "dense1": "dense1_w", "dense2": "dense2_w"}


# -- step 1: sparsity ------------------------------------------------------

def apply_sparsity_pruning(param: Parameter, st: float) -> int:
    """Zero the k = round(st * n) smallest-magnitude weights of one layer.

    Applies to weight tensors only, never biases.  Ties break by
    ascending flat index.  The layer mask is recomputed from scratch over
    all weights; already-masked weights are exact zeros, sort first, and
    so count toward k, which keeps the post-call zero count at exactly k.
    Returns k.
    """
    if not 0.0 <= st < 1.0:
        raise ConfigError(f"st must be in [0, 1), got {st}")
    n = param.data.size
    k = int(math.floor(st * n + 0.5))
    if k == 0:
        return 0
    flat = np.abs(param.data.reshape(-1))
    order = np.argsort(flat, kind="stable")
    mask = np.ones(n, dtype=np.float32)
    mask[order[:k]] = 0.0
    param.mask = mask.reshape(param.data.shape)
    param.data = param.data * param.mask
    return k


def sparsify_model(model: ModelState, st: float) -> None:
    """Apply magnitude sparsity to every prunable layer's weight tensor."""
    for _, block, layer in prunable_layers(model):
        apply_sparsity_pruning(getattr(block, _LAYER_WEIGHTS[layer]), st)


# -- step 2: identification ------------------------------------------------

class ChannelStatAccumulator:
    """Streams per-channel mean |value| over (sample, height, width) of a
    sequence of (n, c, h, w) batches, accumulating in float64."""

    def __init__(self):
        self._sums = {}
        self._counts = {}

    def add(self, key: str, data: np.ndarray) -> None:
        self._sums[key] = self._sums.get(key, 0.0) + np.abs(data).sum(
            axis=(0, 2, 3), dtype=np.float64)
        self._counts[key] = self._counts.get(key, 0) + (
            data.shape[0] * data.shape[2] * data.shape[3])

    def finalize(self) -> dict:
        return {key: self._sums[key] / self._counts[key] for key in self._sums}


def collect_activation_stats(model: ModelState, val_inputs: np.ndarray,
                             batch_size: int = 16) -> ActivationStats:
    """Mean |post-activation| per channel over the entire validation set.

    Conv channels average over samples and spatial positions, dense units
    over samples.  Samples are visited in fixed order, so results are
    reproducible; the mean itself is order-invariant.
    """
    val_inputs = np.asarray(val_inputs, dtype=np.float32)
    if val_inputs.shape[0] == 0:
        raise ConfigError("activation statistics require a non-empty validation set")
    keys = {key for key, _, _ in prunable_layers(model)}
    acc = ChannelStatAccumulator()

    def tap(key, data):
        if key in keys:
            acc.add(key, data)

    for i in range(0, val_inputs.shape[0], batch_size):
        network_forward(model, Tensor(val_inputs[i:i + batch_size]), tap=tap)
    return ActivationStats(acc.finalize())


def _mark(stat: np.ndarray, ct: float) -> np.ndarray:
    """Indices with stat < ct; if every channel falls below, the channel
    with the largest stat is retained."""
    marked = np.flatnonzero(stat < ct)
    if marked.size == stat.size and stat.size > 0:
        marked = marked[marked != int(np.argmax(stat))]
    return marked


def identify_redundant_channels(stats: ActivationStats, ct: float,
                                model: ModelState) -> PrunePlan:
    """Build the removal plan from activation statistics.

    A channel is marked when its statistic is strictly below ``ct``.  For
    residual blocks, conv2 and dense2 are treated as one coupled pair: a
    channel leaves when either side marks it, and the keep-one rule uses
    the elementwise max of both statistics.
    """
    plan = PrunePlan()
    for si, stage in enumerate(model.stages):
        for bi, block in enumerate(stage):
            spec = block.spec
            prefix = f"s{si}.b{bi}"
            conv1 = dense1 = pair = ()
            if spec.prunable_c1 and f"{prefix}.conv1" in stats.values:
                conv1 = tuple(int(i) for i in _mark(stats.values[f"{prefix}.conv1"], ct))
            if spec.prunable_d1 and f"{prefix}.dense1" in stats.values:
                dense1 = tuple(int(i) for i in _mark(stats.values[f"{prefix}.dense1"], ct))
            if spec.prunable_c2 and f"{prefix}.conv2" in stats.values:
                s_conv2 = stats.values[f"{prefix}.conv2"]
                s_dense2 = stats.values[f"{prefix}.dense2"]
                joint = np.union1d(np.flatnonzero(s_conv2 < ct),
                                   np.flatnonzero(s_dense2 < ct))
                if joint.size == spec.c2:
                    combined = np.maximum(s_conv2, s_dense2)
                    joint = joint[joint != int(np.argmax(combined))]
                pair = tuple(int(i) for i in joint)
            if conv1 or dense1 or pair:
                plan.blocks[(si, bi)] = BlockPrunePlan(conv1, pair, dense1)
    return plan


# -- step 3: structured removal ---------------------------------------------

def _keep_indices(removed, size: int, what: str) -> np.ndarray:
    removed = np.asarray(sorted(removed), dtype=np.intp)
    if removed.size == 0:
        return np.arange(size, dtype=np.intp)
    if removed.min() < 0 or removed.max() >= size or len(np.unique(removed)) != removed.size:
        raise PlanError(f"plan references invalid {what} channels {removed.tolist()} (size {size})")
    if removed.size >= size:
        raise PlanError(f"plan would remove every {what} channel")
    keep = np.setdiff1d(np.arange(size, dtype=np.intp), removed)
    return keep


def apply_structured_pruning(model: ModelState, plan: PrunePlan) -> ModelState:
    """Physically remove the planned channels; returns a new model.

    Removing a conv1 channel drops its filter and bias plus the matching
    conv2 input slice.  Removing a conv2/dense2 pair channel drops the
    conv2 filter and bias, the dense1 input column, the dense2 row and
    bias, and — for residual blocks — its entry in the reconnection index,
    so the block still emits its full input width.  Removing a dense1
    unit drops its row and bias plus the dense2 input column.  The input
    model is not mutated.
    """
    out = model.clone()
    for (si, bi), bp in plan.blocks.items():
        try:
            block = out.stages[si][bi]
        except IndexError:
            raise PlanError(f"plan references nonexistent block s{si}.b{bi}")
        spec = block.spec
        if bp.pair and spec.kind == NON_RESIDUAL:
            raise PlanError(f"s{si}.b{bi}: conv2/dense2 of a non-residual block are not prunable")

        if bp.conv1:
            keep = _keep_indices(bp.conv1, spec.c1, f"s{si}.b{bi}.conv1")
            block.conv1_w = block.conv1_w.take(0, keep)
            block.conv1_b = block.conv1_b.take(0, keep)
            block.conv2_w = block.conv2_w.take(1, keep)
            spec.c1 = len(keep)
        if bp.pair:
            keep = _keep_indices(bp.pair, spec.c2, f"s{si}.b{bi}.conv2")
            block.conv2_w = block.conv2_w.take(0, keep)
            block.conv2_b = block.conv2_b.take(0, keep)
            block.dense1_w = block.dense1_w.take(1, keep)
            block.dense2_w = block.dense2_w.take(0, keep)
            block.dense2_b = block.dense2_b.take(0, keep)
            if block.residual_idx is not None:
                block.residual_idx = block.residual_idx[keep].copy()
            spec.c2 = len(keep)
            spec.d2 = spec.c2
        if bp.dense1:
            keep = _keep_indices(bp.dense1, spec.d1, f"s{si}.b{bi}.dense1")
            block.dense1_w = block.dense1_w.take(0, keep)
            block.dense1_b = block.dense1_b.take(0, keep)
            block.dense2_w = block.dense2_w.take(1, keep)
            spec.d1 = len(keep)
    out.prune_history.append(plan.digest())
    return out


# -- fine-tuning ------------------------------------------------------------

def fine_tune(model: ModelState, train_inputs: np.ndarray, train_targets: np.ndarray,
              epochs: int, lr: float = 1e-3, batch_size: int = 4,
              rng: Rng | None = None, on_epoch=None):
    """Train with MAE + Adam for ``epochs`` epochs of seeded shuffling.

    Mutates the model in place and returns the mean training loss of the
    final epoch (None when epochs == 0).  A non-finite loss restores the
    pre-call parameter state and raises ``NumericError``.
    """
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if epochs == 0:
        return None
    x = np.asarray(train_inputs, dtype=np.float32)
    y = np.asarray(train_targets, dtype=np.float32)
    if x.shape != y.shape or x.shape[0] == 0:
        raise ConfigError(f"training pairs must be aligned and non-empty: {x.shape} vs {y.shape}")
    rng = rng or Rng(0)
    params = model.parameters()
    snapshot = [(p.data.copy(), p.adam_m.copy(), p.adam_v.copy()) for p in params]
    opt = Adam(params, lr=lr)
    final = None
    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        total = 0.0
        seen = 0
        try:
            for i in range(0, x.shape[0], batch_size):
                idx = order[i:i + batch_size]
                opt.zero_grad()
                pred = network_forward(model, Tensor(x[idx]))
                loss = mae_loss(pred, Tensor(y[idx]))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError("non-finite training loss")
                loss.backward()
                opt.step()
                total += value * len(idx)
                seen += len(idx)
        except NumericError:
            for p, (d, m, v) in zip(params, snapshot):
                p.data, p.adam_m, p.adam_v = d, m, v
            raise
        final = total / seen
        if on_epoch is not None:
            on_epoch(epoch, final)
    return final


def validation_psnr(model: ModelState, val_inputs: np.ndarray, val_targets: np.ndarray,
                    batch_size: int = 16):
    """Mean per-sample PSNR (peak 1.0) of the filtered validation set.

    Returns (psnr_db, inference_seconds); the timer covers forward passes
    only.
    """
    x = np.asarray(val_inputs, dtype=np.float32)
    y = np.asarray(val_targets, dtype=np.float32)
    if x.shape != y.shape or x.shape[0] == 0:
        raise ConfigError(f"validation pairs must be aligned and non-empty: {x.shape} vs {y.shape}")
    preds = np.empty_like(x)
    elapsed = 0.0
    for i in range(0, x.shape[0], batch_size):
        batch = Tensor(x[i:i + batch_size])
        t0 = time.perf_counter()
        out = network_forward(model, batch)
        elapsed += time.perf_counter() - t0
        preds[i:i + batch_size] = out.data
    values = [metrics.psnr(preds[i], y[i], peak=1.0) for i in range(x.shape[0])]
    return float(np.mean(values)), elapsed


# -- the loop ----------------------------------------------------------------

def prune_loop(model: ModelState, config: PruneConfig,
               train_pairs, val_pairs):
    """Run pruning attempts until a stop criterion fires.

    ``train_pairs`` and ``val_pairs`` are (inputs, targets) arrays of
    shape (n, 1, p, p).  Returns (pruned model, trace).  The input model
    is never mutated; the returned model is the last accepted state, so
    it satisfies both thresholds whenever at least one attempt was
    accepted.  An attempt that removes no channels and still passes both
    tests ends the loop (otherwise it would spin forever) and its
    fine-tune result is discarded in favour of the last accepted model.
    """
    config.validate()
    x_train, y_train = train_pairs
    x_val, y_val = val_pairs
    rng = Rng(config.seed)

    original_params = count_parameters(model)
    baseline_psnr, _ = validation_psnr(model, x_val, y_val)
    at = config.at if config.at is not None else baseline_psnr - config.max_drop

    accepted = model.clone()
    trace = PruneTrace(baseline_psnr=baseline_psnr, accuracy_threshold=at,
                       original_params=original_params)
    attempt = 0
    while True:
        attempt += 1
        candidate = accepted.clone()
        sparsify_model(candidate, config.st)
        stats = collect_activation_stats(candidate, x_val)
        plan = identify_redundant_channels(stats, config.ct, candidate)
        candidate = apply_structured_pruning(candidate, plan)
        fine_tune(candidate, x_train, y_train, config.train_epochs,
                  lr=config.lr, batch_size=config.batch_size, rng=rng.split())
        psnr, infer_s = validation_psnr(candidate, x_val, y_val)
        params = count_parameters(candidate)
        removed = plan.removed_by_layer()

        passes = psnr >= at and params / original_params >= 1.0 - config.pt
        keep = passes and plan.total_channels() > 0
        trace.records.append(TraceRecord(attempt, params, psnr, infer_s,
                                         removed, keep))
        if not passes:
            return accepted, trace
        if plan.total_channels() == 0:
            return accepted, trace
        accepted = candidate
