"""Losses, momentum SGD, reconstruction training and adversarial fine-tuning.

Reconstruction loss is the squared error summed over pixels and averaged
over the batch. The discriminator is trained to output a high probability
on reconstructed images and a low one on ground truth; the generator loss
adds ``-lambda * mean(log(1 - D(G(x_L))))`` to the reconstruction loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .layers import LayerState, layer_seed
from .models import DiscriminatorGraph, NetworkGraph
from .tensor import ShapeError, make_rng

log = logging.getLogger(__name__)

EPS = 1e-7
PUBLISHED_LR_0_255 = 1e-8
STABLE_LR_0_1 = 1e-5


class TrainingError(RuntimeError):
    """Training stopped: non-finite values or a diverging loss."""


@dataclass
class PairSet:
    """Aligned low/high resolution pairs, NCHW with one channel."""

    lr: np.ndarray
    hr: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.lr.ndim != 4 or self.hr.ndim != 4 or len(self.lr) != len(self.hr):
            raise ShapeError(f"pair arrays disagree: {self.lr.shape} vs {self.hr.shape}")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.lr))]

    def __len__(self):
        return len(self.lr)

    def batch(self, idx):
        return self.lr[idx], self.hr[idx]


def _scale_factor(pixel_scale: str) -> float:
    if pixel_scale == "0-255":
        return 1.0
    if pixel_scale == "0-1":
        return 255.0 ** 2
    raise ValueError(f"unknown pixel scale {pixel_scale!r}")


def published_learning_rate(pixel_scale: str) -> float:
    """The published 0-255 rate, rescaled for 0-1 pixels (about 6.5e-4).

    With Glorot-initialised layers and momentum 0.9 this diverges within a
    few iterations, so it is not the default.
    """
    return PUBLISHED_LR_0_255 * _scale_factor(pixel_scale)


def default_learning_rate(pixel_scale: str) -> float:
    """1e-5 for 0-1 pixels (1e-5 / 255**2 for 0-255), stable on 64 and 128 pixel faces."""
    return STABLE_LR_0_1 * _scale_factor(pixel_scale) / 255.0 ** 2


@dataclass
class TrainConfig:
    batch_size: int = 5
    learning_rate: float | None = None
    momentum: float = 0.9
    iterations: int = 1000
    seed: int = 0
    pixel_scale: str = "0-1"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.learning_rate is None:
            self.learning_rate = default_learning_rate(self.pixel_scale)


@dataclass
class AdvConfig:
    lam: float = 0.0
    d_steps: int = 10
    g_steps: int = 50
    switches: int = 10000
    lambda_rule: str = "explicit"
    # discriminator step size; the generator uses TrainConfig.learning_rate
    d_learning_rate: float = 1e-3

    def __post_init__(self):
        if min(self.d_steps, self.g_steps, self.switches) < 1:
            raise ValueError("d_steps, g_steps and switches must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lambda_rule not in ("explicit", "tenth_of_mse"):
            raise ValueError(f"unknown lambda rule {self.lambda_rule!r}")


# ---------------------------------------------------------------------------
# losses


def loss_ms(outputs: np.ndarray, targets: np.ndarray):
    """Squared error summed over pixels, averaged over the batch. Returns (loss, dloss/doutputs)."""
    if outputs.shape != targets.shape:
        raise ShapeError(f"outputs {outputs.shape} vs targets {targets.shape}")
    n = outputs.shape[0]
    diff = outputs - targets
    loss = float(np.sum(np.square(diff, dtype=np.float64)) / n)
    return loss, (2.0 / n) * diff


def _clamped(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError(f"{what}: probabilities must lie in [0, 1]")
    return np.clip(p, EPS, 1 - EPS)


def loss_d(d_on_real: np.ndarray, d_on_fake: np.ndarray):
    """Discriminator loss; D should be high on reconstructions and low on ground truth.

    Returns ``(loss, dloss/dD(real), dloss/dD(fake))``.
    """
    pr = _clamped(d_on_real, "D(real)")
    pf = _clamped(d_on_fake, "D(fake)")
    n = pr.shape[0]
    loss = float(-(np.log1p(-pr).sum() + np.log(pf).sum()) / (2 * n))
    return loss, 1.0 / (2 * n * (1 - pr)), -1.0 / (2 * n * pf)


def adversarial_term(d_on_fake: np.ndarray) -> float:
    """``-mean(log(1 - D(G(x_L))))`` (without the lambda weight)."""
    pf = _clamped(d_on_fake, "D(fake)")
    return float(-np.log1p(-pf).mean())


def loss_g(outputs, targets, d_on_fake, lam: float):
    """Generator loss. Returns ``(loss, dloss/doutputs [MS part only], dloss/dD(fake))``."""
    ms, grad_out = loss_ms(outputs, targets)
    pf = _clamped(d_on_fake, "D(fake)")
    n = pf.shape[0]
    if lam == 0:
        return ms, grad_out, np.zeros_like(pf)
    loss = ms + lam * adversarial_term(pf)
    return loss, grad_out, lam / (n * (1 - pf))


def tenth_of_mse_lambda(l_ms: float, d_on_fake: np.ndarray) -> float:
    """Weight making the adversarial term one tenth of the reconstruction loss."""
    adv = adversarial_term(d_on_fake)
    if adv <= 0:
        raise TrainingError("adversarial term is zero; cannot scale lambda")
    return (l_ms / 10.0) / adv


# ---------------------------------------------------------------------------
# optimiser


def sgd_step(state: LayerState, lr: float, momentum: float) -> LayerState:
    """``v <- m*v - lr*g; theta <- theta + v``; gradients are zeroed afterwards."""
    for key, param in state.params.items():
        v = state.momentum[key]
        v *= momentum
        v -= lr * state.grads[key]
        if not np.all(np.isfinite(v)):
            raise TrainingError(f"non-finite update for parameter {key!r}")
        param += v
        state.grads[key].fill(0)
    return state


def sgd_update(graph: NetworkGraph, lr: float, momentum: float):
    for layer in graph.parametric_layers():
        try:
            sgd_step(layer.state, lr, momentum)
        except TrainingError as exc:
            raise TrainingError(f"{layer.name}: {exc}") from None


# ---------------------------------------------------------------------------
# batching


class BatchSampler:
    """Seeded per-epoch permutations; the trailing partial batch is dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.epoch = 0
        self._queue: list[np.ndarray] = []

    def _refill(self):
        perm = self.rng.permutation(self.n)
        full = self.n // self.batch_size
        self._queue = [perm[i * self.batch_size:(i + 1) * self.batch_size] for i in range(full)]
        self.epoch += 1

    def next(self) -> np.ndarray:
        if not self._queue:
            self._refill()
        return self._queue.pop(0)


def dataset_loss(model: NetworkGraph, pairs: PairSet, chunk: int = 5) -> float:
    """Mean over all pairs of the per-image summed squared error."""
    total = 0.0
    for start in range(0, len(pairs), chunk):
        lr, hr = pairs.batch(slice(start, start + chunk))
        out = model.forward(lr.astype(_param_dtype(model), copy=False))
        total += float(np.sum(np.square(out - hr, dtype=np.float64)))
    return total / len(pairs)


def _param_dtype(model: NetworkGraph):
    for _, p in model.named_parameters():
        return p.dtype
    return np.float64


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# reconstruction stage


@dataclass
class TrainResult:
    model: NetworkGraph
    losses: list[float]


def train_reconstruction(
    model: NetworkGraph,
    pairs: PairSet,
    cfg: TrainConfig,
    log_file: TextIO | None = None,
    on_checkpoint: Callable[[NetworkGraph, int], None] | None = None,
) -> TrainResult:
    """Minimise the reconstruction loss with momentum SGD for ``cfg.iterations`` steps."""
    dtype = _param_dtype(model)
    sampler = BatchSampler(len(pairs), cfg.batch_size, make_rng(cfg.seed))
    losses: list[float] = []
    initial = None
    model.zero_grad()
    for it in range(1, cfg.iterations + 1):
        lr_img, hr_img = pairs.batch(sampler.next())
        out = model.forward(lr_img.astype(dtype, copy=False))
        loss, grad = loss_ms(out, hr_img.astype(dtype, copy=False))
        if not math.isfinite(loss):
            raise TrainingError(f"iteration {it}: non-finite loss")
        if initial is None:
            initial = loss
        elif loss > cfg.divergence_factor * initial:
            raise TrainingError(
                f"iteration {it}: loss {loss:.4g} exceeds {cfg.divergence_factor:g} x initial {initial:.4g}"
            )
        model.backward(grad)
        sgd_update(model, cfg.learning_rate, cfg.momentum)
        losses.append(loss)
        if log_file is not None:
            log_file.write(f"{it}\t{_fmt(loss)}\n")
        if on_checkpoint is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            on_checkpoint(model, it)
        if it % 100 == 0:
            log.info("iter %d loss %.6g", it, loss)
    return TrainResult(model, losses)


# ---------------------------------------------------------------------------
# adversarial stage


@dataclass
class AdvHistory:
    lam: float
    ms: list[float] = field(default_factory=list)
    d_loss: list[float] = field(default_factory=list)
    mean_d: list[float] = field(default_factory=list)


def _discriminator_step(model, disc, pairs, sampler, lr, momentum, dtype):
    lr_img, hr_img = pairs.batch(sampler.next())
    fake = model.forward(lr_img.astype(dtype, copy=False))
    n = len(fake)
    probs = disc.probability(np.concatenate([hr_img.astype(dtype, copy=False), fake]))
    loss, g_real, g_fake = loss_d(probs[:n], probs[n:])
    disc.backward_probability(np.concatenate([g_real, g_fake]).astype(dtype), need_input_grad=False)
    sgd_update(disc, lr, momentum)
    return loss


def _generator_step(model, disc, pairs, sampler, lam, lr, momentum, dtype):
    lr_img, hr_img = pairs.batch(sampler.next())
    out = model.forward(lr_img.astype(dtype, copy=False))
    p_fake = disc.probability(out)
    _, grad, g_fake = loss_g(out, hr_img.astype(dtype, copy=False), p_fake, lam)
    ms = loss_ms(out, hr_img.astype(dtype, copy=False))[0]
    if lam != 0:
        grad = grad + disc.backward_probability(g_fake.astype(dtype), need_input_grad=True)
        disc.zero_grad()
    model.backward(grad)
    sgd_update(model, lr, momentum)
    return ms, float(np.mean(p_fake))


def initial_lambda(model, disc, pairs, limit: int = 50, chunk: int = 5) -> float:
    """Tenth-of-MSE weight measured on (up to) the first ``limit`` pairs."""
    dtype = _param_dtype(model)
    count = min(limit, len(pairs))
    ms_total, probs = 0.0, []
    for start in range(0, count, chunk):
        lr_img, hr_img = pairs.batch(slice(start, min(start + chunk, count)))
        out = model.forward(lr_img.astype(dtype, copy=False))
        ms_total += float(np.sum(np.square(out - hr_img, dtype=np.float64)))
        probs.append(disc.probability(out))
    return tenth_of_mse_lambda(ms_total / count, np.concatenate(probs))


def _finite_params(model) -> bool:
    return all(np.isfinite(p).all() for _, p in model.named_parameters())


def finetune_adversarial(
    model: NetworkGraph,
    disc: DiscriminatorGraph,
    pairs: PairSet,
    cfg: TrainConfig,
    adv: AdvConfig,
    log_file: TextIO | None = None,
):
    """Alternate ``d_steps`` discriminator updates with ``g_steps`` generator updates.

    The generator draws batches from the same seeded stream as
    :func:`train_reconstruction`; the discriminator has its own stream, so
    ``lam = 0`` reproduces plain reconstruction training exactly.
    Returns ``(model, disc, history)``.
    """
    dtype = _param_dtype(model)
    g_sampler = BatchSampler(len(pairs), cfg.batch_size, make_rng(cfg.seed))
    d_sampler = BatchSampler(len(pairs), cfg.batch_size, make_rng(layer_seed(cfg.seed, 1)))
    lam = adv.lam
    if adv.lambda_rule == "tenth_of_mse":
        lam = initial_lambda(model, disc, pairs)
        log.info("lambda set to %.6g by the tenth-of-MSE rule", lam)
    history = AdvHistory(lam=lam)
    model.zero_grad()
    disc.zero_grad()
    for switch in range(1, adv.switches + 1):
        d_loss = math.nan
        ms_sum, d_sum = 0.0, 0.0
        try:
            for _ in range(adv.d_steps):
                d_loss = _discriminator_step(model, disc, pairs, d_sampler, adv.d_learning_rate, cfg.momentum, dtype)
            model.zero_grad()
            for _ in range(adv.g_steps):
                ms, mean_d = _generator_step(model, disc, pairs, g_sampler, lam, cfg.learning_rate, cfg.momentum,
                                             dtype)
                ms_sum += ms
                d_sum += mean_d
        except ValueError as exc:
            # out-of-range probabilities here mean the networks blew up
            raise TrainingError(f"switch {switch}: training diverged ({exc})") from exc
        ms_mean, d_mean = ms_sum / adv.g_steps, d_sum / adv.g_steps
        if not (math.isfinite(ms_mean) and math.isfinite(d_loss) and math.isfinite(d_mean)):
            raise TrainingError(f"switch {switch}: non-finite loss")
        if not _finite_params(model):
            raise TrainingError(f"switch {switch}: generator weights diverged (lambda {lam:g} too large?)")
        history.ms.append(ms_mean)
        history.d_loss.append(d_loss)
        history.mean_d.append(d_mean)
        if log_file is not None:
            log_file.write(f"{switch}\t{_fmt(ms_mean)}\t{_fmt(d_loss)}\t{_fmt(d_mean)}\n")
    return model, disc, history
