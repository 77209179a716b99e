"""Bidirectional training: the two-term MSE loss, Adam, step schedule, train loop and inference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, save
from .data import Normalizer
from .errors import ContractError, DimensionError, IvnacError, NumericalError
from .flow import FlowConfig, FlowModel, augment, extract_ct, model_forward, model_inverse
from .metrics import psnr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    base_lr: float = 1e-4
    lam: float = 1.0
    batch_size: int = 4
    seed: int = 0
    halve_every: int = 10
    grad_clip: Optional[float] = None
    init: str = "glow"
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.epochs <= 0:
            raise ContractError(f"epochs must be positive, got {self.epochs}")
        if not self.base_lr > 0:
            raise ContractError(f"base_lr must be positive, got {self.base_lr}")
        if not self.lam >= 0:
            raise ContractError(f"lambda must be nonnegative, got {self.lam}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.halve_every < 1:
            raise ContractError(f"halve_every must be >= 1, got {self.halve_every}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ContractError("grad_clip must be positive when set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flow"] = self.flow.to_dict()
        return d


# --------------------------------------------------------------------------- loss


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"x_pet {x.shape} and y_ct {y.shape} differ in shape")
    if x.shape[1] != 1:
        raise DimensionError(f"x_pet/y_ct must be single-channel, got {x.shape[1]} channels")


def loss_terms(model: FlowModel, x_pet, y_ct, tape: Optional[Tape] = None) -> Tuple[Tensor, Tensor]:
    """(forward term, inverse term).

    Forward: MSE between the CT channel of the forward pass on the augmented
    PET and ``y_ct``.  Inverse: MSE between channel 0 of the inverse pass on
    the augmented CT and ``x_pet``.
    """
    x = _as_tensor(x_pet)
    y = _as_tensor(y_ct)
    _check_pair(x, y)
    if tape is not None:
        x = tape.leaf(x.data, "x_pet")
        y = tape.leaf(y.data, "y_ct")
    C = model.config.channels
    ct = extract_ct(model_forward(augment(x, C), model, tape)).ct
    pet = extract_ct(model_inverse(augment(y, C), model, tape)).ct
    return ad.mse(ct, y), ad.mse(pet, x)


def loss_total(model: FlowModel, x_pet, y_ct, lam: float = 1.0, tape: Optional[Tape] = None) -> Tensor:
    if not lam >= 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    fwd, inv = loss_terms(model, x_pet, y_ct, tape)
    return ad.add(ad.scale(fwd, lam), inv)


# --------------------------------------------------------------------------- optimizer


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """base_lr halved every ``halve_every`` epochs (epoch counted from 0)."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.base_lr * 0.5 ** (epoch // cfg.halve_every)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[Tuple[str, np.ndarray]], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params:
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for {name}")
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = grads[name].astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)
    return state


def parameter_gradients(model: FlowModel, tape: Tape, grads: ad.Gradients) -> Dict[str, np.ndarray]:
    """Map parameter name -> gradient (zeros for parameters not on the tape)."""
    out = {}
    for name, p in model.parameters():
        hit = tape._leaves.get(id(p))
        out[name] = grads[hit[1]] if hit is not None else np.zeros_like(p)
    return out


def _clip(grads: Dict[str, np.ndarray], limit: float) -> None:
    norm = math.sqrt(math.fsum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > limit:
        for k in grads:
            grads[k] = grads[k] * (limit / norm)


# --------------------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_psnr: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.lr:.10g}\t{self.train_loss:.10g}\t{self.val_psnr:.10g}"


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: List[EpochRecord]

    def log_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.history)


def _as_batch(arr, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=ad.default_dtype())
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise DimensionError(f"{what} must be (N, 1, H, W), got {arr.shape}")
    return arr


def validation_psnr(model: FlowModel, x_val, y_val) -> float:
    """Mean PSNR of the synthetic CT against reference CT (normalized domain)."""
    C = model.config.channels
    vals = []
    for i in range(x_val.shape[0]):
        ct = extract_ct(model_forward(augment(Tensor(x_val[i : i + 1]), C), model)).ct.data
        vals.append(psnr(y_val[i, 0], ct[0, 0]))
    return float(np.mean(vals))


def train(train_data: Tuple[np.ndarray, np.ndarray], val_data: Optional[Tuple[np.ndarray, np.ndarray]],
          cfg: TrainConfig, normalizer: Normalizer = Normalizer.identity(),
          log_path: Optional[Union[str, Path]] = None, progress: Optional[Callable[[EpochRecord], None]] = None
          ) -> TrainResult:
    """Train a fresh model and return final and best-validation checkpoints.

    Without validation data the best checkpoint is the final one.  Every
    random choice derives from ``cfg.seed``.
    """
    x_tr = _as_batch(train_data[0], "training PET")
    y_tr = _as_batch(train_data[1], "training CT")
    if x_tr.shape != y_tr.shape:
        raise DimensionError(f"training PET {x_tr.shape} and CT {y_tr.shape} differ")
    n = x_tr.shape[0]
    if n == 0:
        raise ContractError("training set is empty")
    if val_data is not None:
        x_va = _as_batch(val_data[0], "validation PET")
        y_va = _as_batch(val_data[1], "validation CT")
        if x_va.shape[0] == 0:
            val_data = None
    seq = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed = (int(s) for s in seq.generate_state(2))
    model = FlowModel(cfg.flow, seed=init_seed, init=cfg.init)
    image_size = x_tr.shape[2:]
    if not model.initialized:
        model.data_init(augment(Tensor(x_tr[: cfg.batch_size]), cfg.flow.channels))
    rng = np.random.default_rng(shuffle_seed)
    state = AdamState()
    history: List[EpochRecord] = []
    best_psnr, best_model = -math.inf, model.copy()
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = rng.permutation(n)
            losses = []
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = np.sort(order[start : start + cfg.batch_size])
                tape = Tape()
                try:
                    loss = loss_total(model, x_tr[idx], y_tr[idx], cfg.lam, tape)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NumericalError("loss is not finite")
                    grads = parameter_gradients(model, tape, ad.backward(loss))
                    if cfg.grad_clip is not None:
                        _clip(grads, cfg.grad_clip)
                    adam_step(model.parameters(), grads, state, lr)
                    model.check_invertible()
                except NumericalError as err:
                    raise type(err)(f"epoch {epoch + 1} batch {b + 1}: {err}") from err
                losses.append(value * len(idx))
            train_loss = math.fsum(losses) / n
            val = validation_psnr(model, x_va, y_va) if val_data is not None else float("nan")
            rec = EpochRecord(epoch + 1, lr, train_loss, val)
            history.append(rec)
            if log_file is not None:
                log_file.write(rec.line() + "\n")
                log_file.flush()
            if progress is not None:
                progress(rec)
            log.info("epoch %d lr %.3g loss %.6g val_psnr %.3f", rec.epoch, lr, train_loss, val)
            if val_data is not None and val > best_psnr:
                best_psnr, best_model = val, model.copy()
    finally:
        if log_file is not None:
            log_file.close()

    def checkpoint(m: FlowModel, kind: str, epoch: int) -> Checkpoint:
        meta = {
            "kind": kind,
            "epoch": epoch,
            "seed": int(cfg.seed),
            "train_config": cfg.to_dict(),
            "final_train_loss": history[-1].train_loss,
            "final_val_psnr": None if val_data is None else history[-1].val_psnr,
            "best_val_psnr": None if val_data is None else best_psnr,
        }
        return Checkpoint(m, image_size, normalizer, meta)

    final = checkpoint(model, "final", cfg.epochs)
    if val_data is None:
        best = checkpoint(model.copy(), "best", cfg.epochs)
    else:
        best_epoch = 1 + max(range(len(history)), key=lambda i: (history[i].val_psnr, -i))
        best = checkpoint(best_model, "best", best_epoch)
    return TrainResult(final, best, history)


# --------------------------------------------------------------------------- inference


def infer(ckpt: Checkpoint, nac_pet, normalized: bool = True) -> np.ndarray:
    """Synthetic CT in HU for (N, 1, H, W) NAC-PET images.

    ``nac_pet`` is expected in the training normalization unless
    ``normalized=False``, in which case the checkpoint's normalizer is
    applied first.  Images are processed one at a time, so results do not
    depend on batch composition.
    """
    x = np.asarray(nac_pet)
    if x.ndim == 2:
        x = x[None, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"nac_pet must be (N, 1, H, W), got {x.shape}")
    if tuple(x.shape[2:]) != tuple(ckpt.image_size):
        raise ContractError(f"image size {tuple(x.shape[2:])} does not match checkpoint {tuple(ckpt.image_size)}")
    if not normalized:
        x = ckpt.normalizer.pet(x)
    x = x.astype(ad.default_dtype())
    C = ckpt.model.config.channels
    out = np.empty(x.shape, dtype=np.float64)
    for i in range(x.shape[0]):
        ct = extract_ct(model_forward(augment(Tensor(x[i : i + 1]), C), ckpt.model)).ct.data
        out[i] = ckpt.normalizer.ct_inverse(ct[0])
    return out
