"""Losses, SGD with momentum, and the alternating adversarial training loop."""

from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigError, DimensionError, TrainingAborted

logger = logging.getLogger(__name__)

LOG_EPS = 1e-7

LOG_COLUMNS = ("epoch", "step", "recon_loss", "teacher_loss", "gen_loss", "avd_loss", "real_score", "fake_score")


@dataclass
class TrainConfig:
    lam: float = 0.5
    lr: float = 3e-3
    momentum: float = 0.9
    lr_decay: float = 0.1
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    teacher_updates_per_batch: int = 1
    teacher_lr: Optional[float] = None
    recalibrate_bn: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.teacher_lr is not None and not self.teacher_lr > 0:
            raise ConfigError(f"teacher_lr must be positive, got {self.teacher_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.lr_decay > 0:
            raise ConfigError(f"lr_decay must be positive, got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.teacher_updates_per_batch < 0:
            raise ConfigError("teacher_updates_per_batch must be >= 0")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def reconstruction_loss(clips, reconstructions) -> T.Tensor:
    """Mean squared error over every element of the batch."""
    clips, reconstructions = T.as_tensor(clips), T.as_tensor(reconstructions)
    if clips.shape != reconstructions.shape:
        raise DimensionError(f"reconstruction shape {reconstructions.shape} != clip shape {clips.shape}")
    return T.reduce_mean(T.square(T.sub(reconstructions, clips)))


def _safe_log(p: T.Tensor) -> T.Tensor:
    return T.log(T.clamp(p, LOG_EPS, 1.0 - LOG_EPS))


def teacher_loss(real_scores, fake_scores) -> T.Tensor:
    """Negated GAN value: -mean(log D(real)) - mean(log(1 - D(fake)))."""
    real, fake = T.as_tensor(real_scores), T.as_tensor(fake_scores)
    real_term = T.reduce_mean(_safe_log(real))
    fake_term = T.reduce_mean(_safe_log(T.add(T.neg(fake), 1.0)))
    return T.neg(T.add(real_term, fake_term))


def generator_loss(fake_scores) -> T.Tensor:
    """Non-saturating encoder loss -mean(log D(fake))."""
    return T.neg(T.reduce_mean(_safe_log(T.as_tensor(fake_scores))))


def avd_loss(recon: T.Tensor, gen: T.Tensor, lam: float) -> T.Tensor:
    """lam * recon + (1 - lam) * gen; the endpoints return the selected term itself."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    if lam == 1.0:
        return recon
    if lam == 0.0:
        return gen
    return T.add(T.scale(recon, lam), T.scale(gen, 1.0 - lam))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(params: Dict[str, T.Tensor], grads: Dict[str, np.ndarray], state: OptimizerState,
                      lr: float, momentum: float) -> None:
    """Heavy-ball update: v <- momentum * v + g; p <- p - lr * v.

    Parameters missing from ``grads`` are treated as having zero gradient.
    New arrays are assigned, so views of old parameter data stay valid.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise DimensionError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v = (momentum * v + g).astype(p.dtype)
        state.velocity[name] = v
        p.data = (p.data - p.dtype.type(lr) * v).astype(p.dtype)


def _step(params: Dict[str, T.Tensor], state: OptimizerState, lr: float, momentum: float) -> None:
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    sgd_momentum_step(params, grads, state, lr, momentum)


def _zero(params: Dict[str, T.Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


@contextlib.contextmanager
def frozen(params: Dict[str, T.Tensor]):
    """Temporarily stop gradient tracking for ``params``."""
    flags = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = flags[k]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records:
            last = self.records[-1]
            if (record["epoch"], record["step"]) <= (last["epoch"], last["step"]):
                raise ValueError("log keys must increase")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def to_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for r in self.records:
            cells = [str(int(r["epoch"])), str(int(r["step"]))]
            cells += ["%.6g" % r[c] for c in LOG_COLUMNS[2:]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {k: float(v) for k, v in row.items()}
                rec["epoch"], rec["step"] = int(rec["epoch"]), int(rec["step"])
                log.records.append(rec)
        return log


@dataclass
class Trainer:
    """Model plus per-network optimiser state."""

    model: M.AVDModel
    config: TrainConfig
    gen_state: OptimizerState = field(default_factory=OptimizerState)
    teacher_state: OptimizerState = field(default_factory=OptimizerState)

    def train_step(self, clips: np.ndarray, real_frames: np.ndarray, lr: float,
                   epoch: int = 0, step: int = 0) -> dict:
        """One teacher phase followed by one joint encoder/decoder update."""
        cfg = self.config
        enc, dec, tea = self.model.encoder, self.model.decoder, self.model.teacher
        enc_dec = M.trainable({**enc, **dec})
        tea_p = M.trainable(tea)
        t_lr = cfg.teacher_lr if cfg.teacher_lr is not None else lr
        if len(clips) == 0:
            raise DimensionError("empty batch")

        x = T.Tensor(clips)
        # The encoder is unchanged by the teacher phase, so one forward pass serves both phases.
        image = M.encode(enc, x, training=True)
        fake_in = image.detach()
        real_in = T.Tensor(real_frames)

        real_score = fake_score = float("nan")
        t_loss_val = float("nan")
        with frozen(enc_dec):
            for _ in range(cfg.teacher_updates_per_batch):
                _zero(tea_p)
                real_s = M.discriminate(tea, real_in)
                fake_s = M.discriminate(tea, fake_in)
                t_loss = teacher_loss(real_s, fake_s)
                real_score = float(real_s.data.mean())
                fake_score = float(fake_s.data.mean())
                t_loss_val = t_loss.item()
                if not np.isfinite(t_loss_val):
                    break
                t_loss.backward()
                _step(tea_p, self.teacher_state, t_lr, cfg.momentum)
            _zero(tea_p)
        if cfg.teacher_updates_per_batch == 0:
            with T.no_grad():
                real_score = float(M.discriminate(tea, real_in).data.mean())
                fake_score = float(M.discriminate(tea, fake_in).data.mean())
                t_loss_val = teacher_loss(T.Tensor([real_score]), T.Tensor([fake_score])).item()

        with frozen(tea_p):
            _zero(enc_dec)
            recon = reconstruction_loss(x, M.decode(dec, image, training=True))
            gen = generator_loss(M.discriminate(tea, image))
            total = avd_loss(recon, gen, cfg.lam)
            record = {
                "epoch": epoch, "step": step,
                "recon_loss": recon.item(), "teacher_loss": t_loss_val, "gen_loss": gen.item(),
                "avd_loss": total.item(), "real_score": real_score, "fake_score": fake_score,
            }
            bad = [k for k, v in record.items() if not np.isfinite(v)]
            if bad:
                raise TrainingAborted(f"non-finite values {bad} at epoch {epoch} step {step}", record)
            total.backward()
            _step(enc_dec, self.gen_state, lr, cfg.momentum)
            _zero(enc_dec)
        return record


def recalibrate_batchnorm(model: M.AVDModel, clips: np.ndarray, batch_size: int) -> None:
    """Replace encoder and decoder running statistics by their average over ``clips``.

    The moving averages kept during training trail the weights, which keep
    changing; eval-mode outputs then drift away from what training saw.  One
    pass in batch-statistics mode with weights 1/(k+1) leaves each running
    estimate equal to the mean of the per-batch statistics under the final
    weights.  No trainable parameter changes.
    """
    with T.no_grad():
        for k, start in enumerate(range(0, len(clips), batch_size)):
            batch = clips[start : start + batch_size]
            if len(batch) < 2 and k > 0:
                break
            momentum = 1.0 / (k + 1)
            image = M.encode(model.encoder, batch, training=True, bn_momentum=momentum)
            M.decode(model.decoder, image, training=True, bn_momentum=momentum)


def train(clips: np.ndarray, frame_pool: np.ndarray, config: TrainConfig,
          model: Optional[M.AVDModel] = None, arch: M.ArchConfig = None,
          on_epoch: Optional[Callable[[int, List[dict]], None]] = None):
    """Train encoder, decoder and teacher on ``clips`` [N,3,32,H,W].

    Real frames for the teacher are drawn from ``frame_pool`` [P,3,H,W].
    Returns ``(model, TrainLog)``.  A non-finite loss raises
    :class:`TrainingAborted` whose ``record`` is the last good log row.
    """
    config.validate()
    clips = np.asarray(clips)
    if clips.ndim != 6 and clips.ndim != 5:
        raise DimensionError(f"clips must be [N,3,32,H,W], got {clips.shape}")
    if len(clips) == 0:
        raise DimensionError("training set is empty")
    if len(frame_pool) == 0:
        raise DimensionError("frame pool is empty")
    if model is None:
        if arch is None:
            arch = M.ArchConfig(height=clips.shape[-2], width=clips.shape[-1])
        model = M.AVDModel.create(config.seed, arch)
    trainer = Trainer(model, config)
    rng = np.random.default_rng([config.seed, 1])
    log = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** epoch
        order = rng.permutation(len(clips))
        epoch_rows = []
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            real_idx = rng.integers(0, len(frame_pool), size=len(idx))
            try:
                rec = trainer.train_step(clips[idx], frame_pool[real_idx], lr, epoch, step)
            except TrainingAborted as exc:
                exc.record = log.records[-1] if log.records else None
                raise
            log.append(rec)
            epoch_rows.append(rec)
            step += 1
        logger.info("epoch %d lr %.3g recon %.5f teacher %.4f gen %.4f", epoch, lr,
                    np.mean([r["recon_loss"] for r in epoch_rows]),
                    np.mean([r["teacher_loss"] for r in epoch_rows]),
                    np.mean([r["gen_loss"] for r in epoch_rows]))
        if on_epoch is not None:
            on_epoch(epoch, epoch_rows)
    if config.recalibrate_bn and config.epochs > 0:
        recalibrate_batchnorm(model, clips, config.batch_size)
    return model, log


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
