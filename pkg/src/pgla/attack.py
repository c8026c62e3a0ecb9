"""PGLA attack path: surrogate harvesting, denoising, inversion, evaluation.

Everything up to :func:`invert_gradients` consumes only the intercepted
gradient and attacker-side artifacts; ground truth enters in
:func:`evaluate` alone.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import ProbeDataset
from .diffusion import NoisePredictor, NoisyConditions, denoise
from .errors import LayoutError, ShapeError
from .layout import GradientVector, adjust, normalize, stack_grids
from .metrics import cosine_similarity, label_accuracy, psnr, psnr_gradient
from .nets import (ModelInstance, build_model, grad_match_loss_and_input_grad,
                   infer_structure, loss_and_grad_params)
from .rng import Rng

__all__ = [
    "SurrogateHarvest", "InversionConfig", "InversionResult", "AttackReport",
    "infer_structure", "build_surrogate", "harvest_surrogate_gradients", "training_grids",
    "condition_source", "perturbed_condition_grids", "intercepted_condition_grids", "run_pgla", "invert_gradients", "evaluate", "reports_to_csv",
    "reports_from_csv",
]


@dataclass
class SurrogateHarvest:
    surrogate: ModelInstance
    gradients: list
    probe_source: str

    def __post_init__(self):
        for g in self.gradients:
            if g.layout != self.surrogate.layout:
                raise LayoutError("harvested gradient layout differs from the surrogate")

    def __len__(self):
        return len(self.gradients)

    def matrix(self) -> np.ndarray:
        return np.stack([g.values for g in self.gradients])


def build_surrogate(shared: GradientVector, rng: Rng, input_shape=None, activation="sigmoid",
                    known_params: np.ndarray | None = None) -> ModelInstance:
    """Surrogate with the structure seen in ``shared``.

    ``known_params`` warm-starts it from weights the attacker already holds
    (e.g. the broadcast global model); otherwise it is freshly initialized.
    """
    spec = infer_structure(shared, input_shape, activation)
    if known_params is not None:
        return ModelInstance(spec, known_params)
    return build_model(spec, rng)


def harvest_surrogate_gradients(surrogate: ModelInstance, probe: ProbeDataset) -> SurrogateHarvest:
    """One clean surrogate gradient per probe sample."""
    if probe.images.shape[1] != surrogate.spec.input_size:
        raise ShapeError("probe images do not fit the surrogate input")
    probe.check_classes(surrogate.spec.classes)
    grads = []
    for x, y in zip(probe.images, probe.labels):
        _, g = loss_and_grad_params(surrogate, x, int(y))
        g.role = "surrogate"
        grads.append(g)
    return SurrogateHarvest(surrogate, grads, probe.source)


def training_grids(gradients) -> np.ndarray:
    return stack_grids([adjust(g) for g in gradients])


def condition_source(gradients, noise_sd: float, clip: float | None = None) -> NoisyConditions:
    """Conditions for training: each surrogate gradient plus known-scale noise,
    expressed in the clean gradient's own normalized units and redrawn every step."""
    from .perturb import clip_gradient

    base, sd = [], []
    for g in gradients:
        if clip is not None:
            g = clip_gradient(g, clip)
        grid = adjust(g)
        base.append(grid.flat())
        sd.append(noise_sd / grid.scale)
    return NoisyConditions(np.stack(base).astype(np.float32), np.array(sd), len(gradients[0]))


def perturbed_condition_grids(gradients, noise_sd: float, rng: Rng, clip: float | None = None) -> np.ndarray:
    """One fixed noisy condition grid per gradient (for validation)."""
    source = condition_source(gradients, noise_sd, clip)
    return source.draw(np.arange(len(source.base)), rng)


def intercepted_condition_grids(shared, noise_sds, count: int) -> np.ndarray:
    """Conditions pairing surrogate gradient j with intercepted upload ``j mod len(shared)``.

    Each upload is expressed in the clean-signal units the denoiser uses at
    sampling time, so training and sampling see the same kind of condition.
    """
    from .perturb import estimate_noise_scale

    grids = []
    for g, sd in zip(shared, noise_sds):
        c = 1.0 / math.sqrt(1.0 + estimate_noise_scale(g, sd) ** 2)
        _, s_noisy, offset = normalize(g.values)
        grids.append(adjust(g, scale=c * s_noisy, offset=offset).flat())
    grids = np.stack(grids).astype(np.float32)
    return grids[np.arange(count) % len(grids)]


def run_pgla(shared: GradientVector, predictor: NoisePredictor, rng: Rng, M: float | None = None,
             c: float | None = None, stochastic: bool = True) -> GradientVector:
    """Denoise an intercepted gradient; provenance (M, c, T') lands in ``meta``."""
    return denoise(shared, predictor, rng, M=M, c=c, stochastic=stochastic)


@dataclass(frozen=True)
class InversionConfig:
    iterations: int = 300
    step: float = 0.1
    label_step: float = 0.4
    restarts: int = 3
    box: tuple[float, float] | None = (0.0, 1.0)


@dataclass
class InversionResult:
    x: np.ndarray
    label: int
    label_logits: np.ndarray
    loss: float
    trace: list
    accepted: list
    restarts: int = 0
    failed: bool = False


class _Adam:
    def __init__(self, size, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.lr, self.b1, self.b2, self.eps, self.k = lr, b1, b2, eps, 0

    def step(self, grad):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.k)
        vhat = self.v / (1 - self.b2 ** self.k)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def invert_gradients(target: GradientVector, model: ModelInstance, rng: Rng,
                     cfg: InversionConfig = InversionConfig(), init_x=None, init_y=None) -> InversionResult:
    """Gradient matching on a dummy (image, soft label) pair, batch size one.

    Adam on both unknowns; the best iterate by match loss is returned. A NaN
    loss restarts from the initial point with half the step, up to
    ``cfg.restarts`` times.
    """
    if target.layout.shapes != model.layout.shapes:
        raise LayoutError("target gradient does not match the model layout")
    n_in, n_cls = model.spec.input_size, model.spec.classes
    x0 = rng.uniform(n_in) if init_x is None else np.asarray(init_x, dtype=np.float64).reshape(-1)
    y0 = rng.normal(n_cls) if init_y is None else np.asarray(init_y, dtype=np.float64).reshape(-1)
    scale = 1.0
    for attempt in range(cfg.restarts + 1):
        result = _descend(target, model, cfg, x0.copy(), y0.copy(), scale)
        if not result.failed:
            result.restarts = attempt
            return result
        scale *= 0.5
    result.restarts = cfg.restarts
    return result


def _descend(target, model, cfg, x, y, scale):
    ax = _Adam(x.size, cfg.step * scale)
    ay = _Adam(y.size, cfg.label_step * scale)
    best = (math.inf, x.copy(), y.copy())
    trace, accepted = [], []
    for _ in range(cfg.iterations + 1):
        loss, dx, dy = grad_match_loss_and_input_grad(model, x, y, target)
        if not math.isfinite(loss) or not np.all(np.isfinite(dx)):
            return InversionResult(best[1], int(np.argmax(best[2])), best[2], best[0], trace,
                                   accepted, failed=True)
        trace.append(loss)
        if loss < best[0]:
            best = (loss, x.copy(), y.copy())
            accepted.append(loss)
        x = x - ax.step(dx)
        y = y - ay.step(dy)
        if cfg.box is not None:
            x = np.clip(x, *cfg.box)
    return InversionResult(best[1], int(np.argmax(best[2])), best[2], best[0], trace, accepted)


@dataclass
class AttackReport:
    trial: int
    seed: int
    config_digest: str
    cos_g: float | None = None
    psnr_g: float | None = None
    psnr_i: float | None = None
    lra: float | None = None
    wall_clock: float | None = None

    # wall-clock time is kept out of the CSV so that reruns stay byte-identical
    CSV_FIELDS = ("trial", "seed", "config_digest", "cos_g", "psnr_g", "psnr_i", "lra")

    def to_row(self) -> dict:
        row = asdict(self)
        return {k: ("" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k]))
                for k in self.CSV_FIELDS}

    @classmethod
    def from_row(cls, row: dict) -> "AttackReport":
        kw = {}
        for f in fields(cls):
            raw = row.get(f.name, "")
            if f.name == "config_digest":
                kw[f.name] = raw
            elif f.name in ("trial", "seed"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = None if raw == "" else float(raw)
        return cls(**kw)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=AttackReport.CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.to_row())
    return buf.getvalue()


def reports_from_csv(text: str) -> list:
    return [AttackReport.from_row(row) for row in csv.DictReader(io.StringIO(text))]


def evaluate(recovered: GradientVector | None = None, clean: GradientVector | None = None,
             x_rec=None, x_true=None, y_rec=None, y_true=None, *, trial: int = 0, seed: int = 0,
             config_digest: str = "") -> AttackReport:
    """Metrics for whatever ground truth is supplied; missing pairs stay None."""
    report = AttackReport(trial, seed, config_digest)
    if recovered is not None and clean is not None:
        if len(recovered) != len(clean):
            raise ShapeError("recovered and clean gradients differ in length")
        report.cos_g = cosine_similarity(recovered.values, clean.values)
        report.psnr_g = psnr_gradient(clean.values, recovered.values)
    if x_rec is not None and x_true is not None:
        report.psnr_i = psnr(x_true, x_rec, 1.0)
    if y_rec is not None and y_true is not None:
        report.lra = label_accuracy(np.atleast_1d(y_rec), np.atleast_1d(y_true))
    return report
