"""Time-conditioned noise predictor and its training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..errors import InputError, ShapeError, UsageError
from ..rng import Rng
from .schedule import NoiseSchedule, loss_weights, make_schedule

log = logging.getLogger(__name__)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h):
        return h + self.fc2(nn.functional.silu(self.fc1(self.norm(h))))


class DenseDenoiser(nn.Module):
    """Residual MLP over the flattened grid.

    The hidden width acts as a learned low-dimensional code of the gradient
    distribution; a time-gated identity path carries the full-resolution
    input to the output, which the bottleneck alone cannot.
    """

    def __init__(self, side: int, width: int = 128, blocks: int = 3, time_dim: int = 64,
                 conditional: bool = False, noise_fraction: np.ndarray | None = None):
        super().__init__()
        d = side * side
        self.side, self.width, self.time_dim, self.conditional = side, width, time_dim, conditional
        self.inp = nn.Linear(d, width)
        self.temb = nn.Linear(time_dim, width)
        self.blocks = nn.ModuleList(ResidualBlock(width) for _ in range(blocks))
        self.out = nn.Linear(width, d)
        self.gate = nn.Linear(time_dim, 1)
        if conditional:
            # created last and zeroed: under the same seed the conditional network starts
            # as exactly the unconditional one and learns only what the condition adds
            self.cond = nn.Linear(d, width, bias=False)
            self.cond_gate = nn.Linear(time_dim, 1)
            for p in (self.cond.weight, self.cond_gate.weight, self.cond_gate.bias):
                nn.init.zeros_(p)
            # the condition enters scaled by 1 - gamma_t: at small t the corrupted input
            # already pins down x_0 and the condition would only add noise
            if noise_fraction is None:
                raise UsageError("a conditional network needs the schedule's noise fractions")
            self.register_buffer("noise_fraction", torch.as_tensor(np.asarray(noise_fraction, dtype=np.float32)))

    def forward(self, x, t, cond=None):
        emb = timestep_embedding(t, self.time_dim)
        h = self.inp(x) + self.temb(emb)
        if self.conditional:
            cond = self.noise_fraction[t][:, None] * cond
            h = h + self.cond(cond)
        for block in self.blocks:
            h = block(h)
        out = self.out(h) + self.gate(emb) * x
        if self.conditional:
            out = out + self.cond_gate(emb) * cond
        return out


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    batch_size: int = 32
    lr: float = 1e-3
    width: int = 128
    blocks: int = 3
    time_dim: int = 64
    weighting: str = "simple"  # or "bound"


class NoisePredictor:
    """A trained network bundled with the schedule it was trained on."""

    def __init__(self, net: DenseDenoiser, schedule: NoiseSchedule, blocks: int):
        self.net = net.eval()
        self.schedule = schedule
        self.blocks = blocks

    @property
    def side(self) -> int:
        return self.net.side

    @property
    def conditional(self) -> bool:
        return self.net.conditional

    @property
    def width(self) -> int:
        return self.net.width

    @property
    def time_dim(self) -> int:
        return self.net.time_dim

    @classmethod
    def create(cls, side: int, schedule: NoiseSchedule, cfg: TrainConfig, conditional: bool,
               seed: int) -> "NoisePredictor":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = DenseDenoiser(side, cfg.width, cfg.blocks, cfg.time_dim, conditional, 1.0 - schedule.gamma)
        return cls(net, schedule, cfg.blocks)

    def __call__(self, x, t, condition=None) -> np.ndarray:
        if self.conditional and condition is None:
            raise UsageError("conditional predictor called without a condition grid")
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 1
        xb = torch.from_numpy(x.reshape(-1, self.side * self.side))
        tb = torch.as_tensor(np.broadcast_to(np.asarray(t, dtype=np.int64), (xb.shape[0],)).copy())
        cb = None
        if self.conditional:
            cb = torch.from_numpy(np.asarray(condition, dtype=np.float32).reshape(xb.shape))
        with torch.no_grad():
            out = self.net(xb, tb, cb).numpy()
        return out[0] if single else out

    def parameters_flat(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.net.parameters()]).numpy().astype("<f4")

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float32)
        total = sum(p.numel() for p in self.net.parameters())
        if flat.size != total:
            raise ShapeError(f"checkpoint holds {flat.size} parameters, network needs {total}")
        pos = 0
        with torch.no_grad():
            for p in self.net.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(flat[pos:pos + n].copy()).reshape(p.shape))
                pos += n


@dataclass
class TrainResult:
    predictor: NoisePredictor
    losses: list = field(default_factory=list)


def _corrupt(x0, t, eps, sched):
    g = torch.from_numpy(sched.gamma[t].astype(np.float32))[:, None]
    return torch.sqrt(g) * x0 + torch.sqrt(1.0 - g) * eps


@dataclass(frozen=True)
class NoisyConditions:
    """Condition grids redrawn on every training step.

    Each condition is ``base[i]`` plus Gaussian noise of standard deviation
    ``sd[i]`` on its first ``length`` cells (the padding stays zero). Fresh
    draws keep the predictor from memorizing one fixed noisy copy per sample.
    """

    base: np.ndarray
    sd: np.ndarray
    length: int

    def draw(self, idx: np.ndarray, rng: Rng) -> np.ndarray:
        out = np.array(self.base[idx], dtype=np.float32)
        noise = rng.normal(len(idx) * self.length).reshape(len(idx), self.length)
        out[:, :self.length] += (self.sd[idx][:, None] * noise).astype(np.float32)
        return out


# condition noise comes from its own stream, so a conditional run sees exactly the
# batches, steps and noise of the unconditional run with the same rng
_COND_STREAM = 1


def train(grids: np.ndarray, cfg: TrainConfig, rng: Rng, schedule: NoiseSchedule | None = None,
          conditions: "np.ndarray | NoisyConditions | None" = None) -> TrainResult:
    """Fit a noise predictor to ``grids`` (n, g*g) with the simplified loss.

    With ``conditions`` (fixed grids or a :class:`NoisyConditions` source,
    aligned 1:1 with ``grids``) the predictor is conditional.
    ``cfg.weighting='bound'`` uses the per-step weights of the variational
    bound instead of the unweighted objective.
    """
    grids = np.asarray(grids, dtype=np.float32)
    if grids.ndim != 2 or grids.shape[0] == 0:
        raise InputError("training needs a non-empty (n, g*g) dataset")
    side = math.isqrt(grids.shape[1])
    if side * side != grids.shape[1]:
        raise ShapeError("training grids must be square")
    fresh = isinstance(conditions, NoisyConditions)
    if conditions is not None:
        base = conditions.base if fresh else conditions
        if np.shape(base) != grids.shape or (fresh and np.shape(conditions.sd) != (grids.shape[0],)):
            raise ShapeError("condition grids must align 1:1 with training grids")
        if not fresh:
            conditions = np.asarray(conditions, dtype=np.float32)
    sched = schedule or make_schedule()
    weights = loss_weights(sched) if cfg.weighting == "bound" else None
    model = NoisePredictor.create(side, sched, cfg, conditions is not None, rng.torch_seed())
    net = model.net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    data = torch.from_numpy(grids)
    conds = torch.from_numpy(conditions) if conditions is not None and not fresh else None
    cond_rng = rng.derive(_COND_STREAM)
    n, d, b = grids.shape[0], grids.shape[1], cfg.batch_size
    # tiny Adam moments decay into subnormal floats, which run many times slower on CPU
    flush = torch.set_flush_denormal(True)
    losses = []
    started = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.integers(n, b)
            t = 1 + rng.integers(sched.T, b)
            eps = torch.from_numpy(rng.normal(b * d).astype(np.float32).reshape(b, d))
            x0 = data[idx]
            xt = _corrupt(x0, t, eps, sched)
            if fresh:
                cond = torch.from_numpy(conditions.draw(idx, cond_rng))
            else:
                cond = conds[idx] if conds is not None else None
            pred = net(xt, torch.from_numpy(t), cond)
            per_sample = ((pred - eps) ** 2).mean(dim=1)
            if weights is not None:
                per_sample = per_sample * torch.from_numpy(weights[t].astype(np.float32))
            loss = per_sample.mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if step % 1000 == 0:
                log.info("step %d/%d loss %.4f (%.1f s)", step, cfg.steps, np.mean(losses[-1000:]),
                         time.perf_counter() - started)
    finally:
        if flush:
            torch.set_flush_denormal(False)
    net.eval()
    return TrainResult(model, losses)


def validation_draws(n: int, d: int, sched: NoiseSchedule, rng: Rng):
    """Fixed per-sample (t, eps) pairs so different predictors see identical noise."""
    t = 1 + rng.integers(sched.T, n)
    eps = rng.normal(n * d).astype(np.float32).reshape(n, d)
    return t, eps


def validation_loss(predictor: NoisePredictor, grids, t, eps, conditions=None) -> float:
    """Mean squared noise-prediction error over (grid, t, eps) triples."""
    grids = np.asarray(grids, dtype=np.float32)
    sched = predictor.schedule
    xt = _corrupt(torch.from_numpy(grids), np.asarray(t), torch.from_numpy(np.asarray(eps)), sched)
    total = 0.0
    for start in range(0, grids.shape[0], 64):
        sl = slice(start, start + 64)
        pred = predictor(xt[sl].numpy(), np.asarray(t)[sl],
                         None if conditions is None else np.asarray(conditions)[sl])
        total += float(np.sum((pred.astype(np.float64) - np.asarray(eps)[sl]) ** 2))
    return total / grids.size
