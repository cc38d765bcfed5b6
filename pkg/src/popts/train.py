"""Population-aware training loop (reconstruction + CC-distribution MMD)."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, build_backbone, save_checkpoint
from .data import Dataset
from .schedule import NoiseSchedule, forward_sample, make_schedule, sample_steps
from .stats import DEFAULT_BANDWIDTHS, l_pop

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training diverged at epoch {epoch}: loss = {value}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 15000
    batch: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    alpha: float = 0.0005
    steps: int = 250
    schedule: str = "cosine"
    strategy: str = "sss"
    hidden: int = 128
    heads: int = 4
    encoder_blocks: int = 1
    dit_blocks: int = 3
    bandwidths: tuple[float, ...] = DEFAULT_BANDWIDTHS
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.bandwidths = tuple(float(w) for w in self.bandwidths)
        self.validate()

    def validate(self) -> None:
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be a finite value >= 0, got {self.alpha}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.steps < 2:
            raise ValueError("steps (T) must be >= 2")
        if self.strategy not in ("uniform", "sss"):
            raise ValueError(f"strategy must be 'uniform' or 'sss', got {self.strategy!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not self.bandwidths or min(self.bandwidths) <= 0:
            raise ValueError("bandwidths must be positive")
        make_schedule(self.schedule, self.steps)

    def backbone_config(self, length: int, features: int) -> BackboneConfig:
        return BackboneConfig(
            length=length,
            features=features,
            hidden=self.hidden,
            heads=self.heads,
            encoder_blocks=self.encoder_blocks,
            dit_blocks=self.dit_blocks,
            steps=self.steps,
        )

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["bandwidths"] = list(self.bandwidths)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "l0", "lpop", "ltotal", "t1", "clipped", "wall")

    def append(self, **rec) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: r[k] for k in self.COLUMNS})


def loss_l0(x0: torch.Tensor, x0_hat: torch.Tensor) -> torch.Tensor:
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    return ((x0 - x0_hat) ** 2).mean()


def loss_total(x0, x0_hat, alpha: float, bandwidths=DEFAULT_BANDWIDTHS):
    """Returns ``(L0 + alpha * Lpop, L0, Lpop)``.

    With ``alpha == 0`` the total is exactly L0 and Lpop is reported
    detached (0 when the batch is too small to compare distributions).
    """
    l0 = loss_l0(x0, x0_hat)
    if alpha == 0:
        if x0.shape[0] < 2 or x0.shape[2] < 2:
            return l0, l0, x0_hat.new_zeros(())
        with torch.no_grad():
            lp = l_pop(x0, x0_hat.detach(), bandwidths)
        return l0, l0, lp
    lp = l_pop(x0, x0_hat, bandwidths)
    return l0 + alpha * lp, l0, lp


def _batches(n: int, batch: int, rng: torch.Generator):
    """Endless stream of index batches; reshuffled on every pass."""
    while True:
        perm = torch.randperm(n, generator=rng)
        for i in range(0, n, batch):
            yield perm[i:i + batch]


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    outdir: str | os.PathLike | None = None,
    checkpoint_extra: dict | None = None,
) -> tuple[Backbone, TrainLog]:
    """Run ``cfg.epochs`` single-batch updates; deterministic given ``cfg.seed``.

    When ``outdir`` is set and ``cfg.checkpoint_every > 0`` a checkpoint is
    written to ``outdir/step_<k>`` every that many updates.
    """
    cfg.validate()
    dtype = cfg.torch_dtype
    sched = make_schedule(cfg.schedule, cfg.steps)
    model = build_backbone(cfg.backbone_config(dataset.length, dataset.features), cfg.seed, dtype)
    trainlog = TrainLog()
    if cfg.epochs == 0:
        return model, trainlog

    if cfg.alpha > 0 and len(dataset) < 2:
        raise ValueError("population loss needs at least 2 samples")
    data = torch.as_tensor(dataset.samples, dtype=dtype)
    rng = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    batches = _batches(len(data), cfg.batch, rng)
    start = time.perf_counter()
    model.train()
    epoch = 0
    while epoch < cfg.epochs:
        idx = next(batches)
        if cfg.alpha > 0 and len(idx) < 2:
            continue
        epoch += 1
        x0 = data[idx]
        t = sample_steps(len(idx), cfg.steps, cfg.strategy, rng)
        eps = torch.randn(x0.shape, generator=rng, dtype=dtype)
        xt = forward_sample(x0, t, eps, sched)
        x0_hat = model(xt, t)
        total, l0, lp = loss_total(x0, x0_hat, cfg.alpha, cfg.bandwidths)
        value = float(total.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(epoch, value)
        opt.zero_grad(set_to_none=True)
        total.backward()
        clipped = False
        if cfg.grad_clip and cfg.grad_clip > 0:
            norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            clipped = bool(norm > cfg.grad_clip)
        opt.step()
        trainlog.append(
            epoch=epoch,
            l0=float(l0.detach()),
            lpop=float(lp.detach()),
            ltotal=value,
            t1=int(t[0]),
            clipped=int(clipped),
            wall=time.perf_counter() - start,
        )
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d  L0 %.5f  Lpop %.5f  Ltotal %.5f", epoch, trainlog.records[-1]["l0"], trainlog.records[-1]["lpop"], value)
        if outdir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, os.path.join(outdir, f"step_{epoch}"), checkpoint_manifest(cfg, checkpoint_extra))
    model.eval()
    return model, trainlog


def checkpoint_manifest(cfg: TrainConfig, extra: dict | None = None) -> dict:
    out = {
        "schedule": cfg.schedule,
        "T": cfg.steps,
        "alpha": cfg.alpha,
        "bandwidths": list(cfg.bandwidths),
        "seed": cfg.seed,
        "train_config": cfg.to_dict(),
    }
    out.update(extra or {})
    return out


def schedule_for(manifest: dict) -> NoiseSchedule:
    return make_schedule(manifest["schedule"], int(manifest["T"]))
