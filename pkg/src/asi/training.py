"""Training loop for the three activation-storage regimes.

vanilla
    fine-tuned conv layers keep their dense input.
hosvd
    the input is HOSVD-truncated every step at a fixed explained-variance
    threshold; ranks vary from step to step.
asi
    per-layer ranks come from budgeted selection; each step compresses
    with one warm-started subspace iteration per mode.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .cost import LayerCostInputs, flops_asi_backward, flops_asi_overhead, flops_hosvd, flops_vanilla
from .data import batches, load_dataset, steps_per_epoch
from .decomposition import TuckerFactors, asi_compress, hosvd_variance, reconstruct
from .layers import sgd_step
from .selection import SelectionResult, measure_perplexity, select_ranks

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class BudgetExceeded(AssertionError):
    pass


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    accuracy: float
    stored_activation_elements: int
    cumulative_flops: int
    wall_seconds: float
    relu_mask_elements: int = 0
    reconstruction_error: float = None


@dataclass
class TrainResult:
    metrics: list
    bundle: CheckpointBundle
    step_losses: list
    peak_stored_elements: int
    dense_elements: int
    ranks: dict = field(default_factory=dict)
    selection: SelectionResult = None
    reconstruction_errors: list = field(default_factory=list)


def layer_seed(seed, layer_index, salt=0):
    """Per-layer random stream key derived from the global seed."""
    return int(np.random.SeedSequence([seed, layer_index, salt]).generate_state(1, np.uint64)[0])


def learning_rate(cfg, step, total_steps):
    if cfg.schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))


def evaluate(model, params, x, y, batch_size=256):
    correct = 0
    for s in range(0, len(y), batch_size):
        logits, _ = M.forward(model, params, x[s:s + batch_size], trainable=set())
        correct += int((np.argmax(logits, axis=1) == y[s:s + batch_size]).sum())
    return correct / max(len(y), 1)


def calibrate(cfg, model=None, params=None, data=None):
    """Perplexity table for ``cfg`` from the first training batch of size ``batch_size``."""
    data = data or load_dataset(cfg.dataset)
    if model is None:
        model = M.parse_model(cfg.model, data.in_channels, data.num_classes)
    if params is None:
        params = M.init_params(model, cfg.seed)
    trainable = M.fine_tuned(model, cfg.layers)
    n = cfg.batch_size
    return measure_perplexity(model, params, data.train_x[:n], data.train_y[:n],
                              cfg.thresholds, trainable, meta={"seed": cfg.seed})


def _step_flops(conv_layers, shapes, regime, ranks):
    total = 0
    for layer in conv_layers:
        if layer.spec.stride != 1:
            continue
        inp = LayerCostInputs(shapes[layer.name], layer.spec, ranks.get(layer.name, (1, 1, 1, 1)))
        fwd, bwd = flops_vanilla(inp)
        if regime == "vanilla":
            total += fwd + bwd
        elif regime == "hosvd":
            total += fwd + flops_hosvd(inp.shape) + flops_asi_backward(inp)
        else:
            total += fwd + flops_asi_overhead(inp.shape, inp.ranks) + flops_asi_backward(inp)
    return total


def run_training(cfg, out_dir=None, resume=None):
    """Train according to ``cfg``; returns a :class:`TrainResult`.

    With ``out_dir`` the per-epoch metrics go to ``metrics.jsonl`` and the
    final state to ``checkpoint/`` there. ``resume`` (or ``cfg.resume``)
    names a checkpoint directory to continue from.
    """
    cfg.validate()
    t0 = time.perf_counter()
    data = load_dataset(cfg.dataset)
    model = M.parse_model(cfg.model, data.in_channels, data.num_classes)
    params = M.init_params(model, cfg.seed)
    trainable = M.fine_tuned(model, cfg.layers)
    convs = [l for l in M.conv_layers(model) if l.name in trainable]
    conv_index = {l.name: i for i, l in enumerate(model)}
    buffers, caches, start = {}, {}, 0

    resume = resume or cfg.resume
    if resume:
        bundle = load_checkpoint(resume)
        if bundle.config_hash != cfg.digest():
            raise ValueError("checkpoint was written with a different configuration")
        params, buffers, caches, start = bundle.params, bundle.buffers, bundle.caches, bundle.step

    ranks, selection, budget = {}, None, None
    if cfg.regime == "asi":
        if cfg.selection:
            selection = SelectionResult.read(cfg.selection)
        else:
            table = calibrate(cfg, model, M.init_params(model, cfg.seed), data)
            selection = select_ranks(table, cfg.budget)
        budget = selection.budget if cfg.budget is None else cfg.budget
        missing = {l.name for l in convs} - set(selection.ranks)
        if missing:
            raise ValueError(f"selection has no ranks for layers {sorted(missing)}")
        ranks = dict(selection.ranks)

    per_epoch = steps_per_epoch(len(data.train_y), cfg.batch_size)
    if per_epoch == 0:
        raise ValueError("training set smaller than one batch")
    total_steps = per_epoch * cfg.epochs
    last_step = total_steps if cfg.max_steps is None else min(total_steps, cfg.max_steps)

    metrics, step_losses, recon_errors = [], [], []
    peak = 0
    cum_flops = 0
    shapes = {}
    metrics_fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics_fh = open(Path(out_dir) / "metrics.jsonl", "a" if resume else "w")

    step = start
    try:
        for epoch in range(start // per_epoch, cfg.epochs):
            if step >= last_step:
                break
            ep_losses, ep_peak, ep_masks, ep_err = [], 0, 0, []
            for k, (xb, yb) in enumerate(batches(data.train_x, data.train_y, cfg.batch_size,
                                                  cfg.seed, epoch)):
                if epoch * per_epoch + k < step:
                    continue
                if step >= last_step:
                    break
                step_ranks = {}

                def store(name, x):
                    shapes[name] = x.shape
                    if cfg.regime == "vanilla":
                        return x
                    if cfg.regime == "hosvd":
                        f, r = hosvd_variance(x, cfg.eps)
                        step_ranks[name] = r
                    else:
                        idx = conv_index[name]
                        if cfg.warm_start:
                            f, caches[name] = asi_compress(
                                x, ranks[name], caches.get(name), layer_seed(cfg.seed, idx))
                        else:
                            f, _ = asi_compress(x, ranks[name], None,
                                                layer_seed(cfg.seed, idx, step + 1))
                        step_ranks[name] = f.ranks
                    if cfg.track_error:
                        err = np.linalg.norm(x - reconstruct(f)) / max(np.linalg.norm(x), 1e-30)
                        ep_err.append(float(err))
                    return f

                logits, tape = M.forward(model, params, xb, trainable, store)
                stored = sum(v.stored_elements if isinstance(v, TuckerFactors) else v.size
                             for v in tape.stored.values())
                if budget is not None and stored > budget:
                    raise BudgetExceeded(f"step {step}: stored {stored} > budget {budget}")
                loss, grad_logits, _ = M.softmax_cross_entropy(logits, yb)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss} at step {step}")
                grads = M.backward(model, params, tape, grad_logits, trainable)
                tparams = {k: v for k, v in params.items() if k in grads}
                new, nbuf = sgd_step(tparams, grads, buffers,
                                     learning_rate(cfg, step, total_steps), cfg.momentum,
                                     cfg.weight_decay, cfg.clip)
                params = {**params, **new}
                buffers = {**buffers, **nbuf}
                cum_flops += _step_flops(convs, shapes, cfg.regime,
                                         step_ranks if cfg.regime != "vanilla" else {})
                ep_losses.append(loss)
                step_losses.append(loss)
                ep_peak = max(ep_peak, stored)
                ep_masks = max(ep_masks, tape.relu_mask_elements)
                step += 1
            recon_errors.extend(ep_err)
            peak = max(peak, ep_peak)
            if not ep_losses:
                continue
            rec = MetricsRecord(
                step=step, epoch=epoch, loss=float(np.mean(ep_losses)),
                accuracy=evaluate(model, params, data.val_x, data.val_y),
                stored_activation_elements=ep_peak, cumulative_flops=cum_flops,
                wall_seconds=time.perf_counter() - t0, relu_mask_elements=ep_masks,
                reconstruction_error=float(np.mean(ep_err)) if ep_err else None)
            metrics.append(rec)
            log.info("epoch %d step %d loss %.4f acc %.3f stored %d", epoch, step,
                     rec.loss, rec.accuracy, rec.stored_activation_elements)
            if metrics_fh:
                metrics_fh.write(json.dumps(asdict(rec)) + "\n")
                metrics_fh.flush()
    finally:
        if metrics_fh:
            metrics_fh.close()

    bundle = CheckpointBundle(params, buffers, caches, cfg.digest(), step,
                              {"peak_stored_elements": peak})
    if out_dir is not None:
        save_checkpoint(bundle, Path(out_dir) / "checkpoint")
    dense = sum(int(np.prod(s)) for s in shapes.values())
    return TrainResult(metrics, bundle, step_losses, peak, dense, ranks, selection, recon_errors)
