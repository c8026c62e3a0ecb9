"""Pipeline stages over an output directory.

Each stage reads the artifacts of the previous one, checks their config
digest, and writes its own artifacts atomically. Random streams are derived
from the run seed by fixed keys, so any stage can be rerun in isolation and
reproduce the same bytes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attack
from .config import ExperimentConfig
from .data import ProbeDataset, load_idx_dataset, random_probe_dataset, synthetic_dataset
from .diffusion import TrainConfig, make_schedule, train
from .errors import DigestMismatchError, InputError, MissingArtifactError
from .formats import GradientFile, atomic_write, load_predictor, read_artifact, save_predictor
from .layout import GradientVector, LayerLayout
from .nets import ModelInstance, ModelSpec, build_model
from .perturb import Client, FlTopology, PerturbationSpec, estimate_noise_scale, simulate_round
from .rng import Rng

log = logging.getLogger(__name__)

# stream keys under the run seed
# KEY_COND is unused (condition noise is drawn inside training) but keeps its number
KEY_GLOBAL, KEY_NOISE, KEY_PROBES, KEY_TRAIN, KEY_COND, KEY_DENOISE, KEY_INVERT, KEY_SURROGATE = range(1, 9)

FILES = {
    "global": "global.pgrd",
    "victims": "victims.pgrd",
    "clean": "clean.pgrd",
    "shared": "shared.pgrd",
    "simulate": "simulate.json",
    "surrogate": "surrogate.pgrd",
    "predictor": "predictor.pgdm",
    "training": "training.csv",
    "recovered": "recovered.pgrd",
    "denoise": "denoise.csv",
    "inverted": "inverted.pgrd",
    "inverted_baseline": "inverted_baseline.pgrd",
    "inversion": "inversion.csv",
    "metrics": "metrics.csv",
    "baseline": "baseline.csv",
    "report": "report.json",
}


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    return list(csv.DictReader(io.StringIO(read_artifact(path).decode("utf-8"))))


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


@dataclass
class Stage:
    """Shared context of one stage invocation."""

    cfg: ExperimentConfig
    out: Path
    force: bool = False

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.root = Rng(self.cfg.seed)

    def path(self, name: str) -> Path:
        return self.out / FILES[name]

    def check(self, digest: bytes, what: str) -> None:
        if digest != self.cfg.digest and not self.force:
            raise DigestMismatchError(f"{what} was produced by a different config "
                                      f"({digest.hex()[:12]} vs {self.cfg.digest_hex[:12]}); "
                                      "rerun the stage or pass --force")

    def load_gradients(self, name: str) -> GradientFile:
        gf = GradientFile.load(self.path(name))
        self.check(gf.digest, FILES[name])
        return gf

    def save_gradients(self, name: str, vectors) -> GradientFile:
        gf = GradientFile.from_vectors(vectors, self.cfg.digest, self.cfg.seed)
        gf.save(self.path(name))
        return gf

    def load_json(self, name: str) -> dict:
        doc = json.loads(read_artifact(self.path(name)).decode("utf-8"))
        self.check(bytes.fromhex(doc["config_digest"]), FILES[name])
        return doc

    def write_text(self, name: str, text: str) -> None:
        atomic_write(self.path(name), text)

    @property
    def spec(self) -> ModelSpec:
        m = self.cfg.model
        return ModelSpec.mlp(m.input_shape, m.hidden, m.classes, m.activation)


def _victim_data(cfg: ExperimentConfig) -> ProbeDataset:
    d = cfg.dataset
    shape = tuple(cfg.model.input_shape)
    if d.source == "synthetic":
        if len(shape) != 3:
            raise InputError("the synthetic generator needs a (channels, height, width) input shape")
        return synthetic_dataset(cfg.trials, shape, cfg.model.classes, cfg.seed, d.noise)
    data = load_idx_dataset(d.images, d.labels, cfg.model.classes, d.limit)
    if math.prod(data.shape) != math.prod(shape):
        raise InputError(f"dataset images of shape {data.shape} do not fit model input {shape}")
    if len(data) < cfg.trials:
        raise InputError(f"dataset holds {len(data)} samples, {cfg.trials} trials requested")
    return ProbeDataset(data.images[:cfg.trials], data.labels[:cfg.trials], shape, data.source)


def perturbation_spec(cfg: ExperimentConfig) -> PerturbationSpec:
    p = cfg.perturbation
    return PerturbationSpec(p.mechanism, p.epsilon, p.delta, p.clip, p.min_dataset_size, p.sigma_override)


def simulate(stage: Stage) -> dict:
    """Global model, one single-sample victim client per trial, clipped and perturbed uploads."""
    cfg = stage.cfg
    model = build_model(stage.spec, stage.root.derive(KEY_GLOBAL))
    victims = _victim_data(cfg)
    spec = perturbation_spec(cfg)
    t = cfg.topology
    topo = FlTopology(t.clients, t.aggregation_times, t.exposures)
    noise = stage.root.derive(KEY_NOISE)
    clean, shared, noise_sd, server = [], [], [], []
    for trial in range(cfg.trials):
        x, y = victims[trial]
        result = simulate_round([Client(model, [(x, y)])], spec, topo, noise, round_index=trial,
                                server_noise=t.server_noise, c_dp=t.c_dp)
        server.append(result.server_sigma)
        clean.append(result.clean[0])
        shared.append(result.shared[0])
        noise_sd.append(float(result.shared[0].meta["noise_std"]))
    layout = LayerLayout.single(victims.images.shape[1], "pixels")
    stage.save_gradients("global", [model.as_gradient_vector()])
    stage.save_gradients("victims", [GradientVector(im, layout, "image") for im in victims.images])
    stage.save_gradients("clean", clean)
    stage.save_gradients("shared", shared)
    doc = {"config_digest": cfg.digest_hex, "seed": cfg.seed, "labels": victims.labels.tolist(),
           "noise_std": noise_sd, "sigma": spec.sigma, "mechanism": spec.mechanism,
           "server_sigma": server}
    stage.write_text("simulate", _json(doc))
    return doc


def _probes(stage: Stage, spec: ModelSpec) -> ProbeDataset:
    cfg = stage.cfg
    a = cfg.attack
    if a.probe_source == "uniform":
        return random_probe_dataset(a.probes, tuple(cfg.model.input_shape), spec.classes,
                                    stage.root.derive(KEY_PROBES))
    d = cfg.dataset
    data = load_idx_dataset(d.images, d.labels, spec.classes, cfg.trials + a.probes)
    if len(data) < cfg.trials + a.probes:
        raise InputError("dataset too small to hold disjoint victim and probe samples")
    return ProbeDataset(data.images[cfg.trials:], data.labels[cfg.trials:], data.shape, data.source)


def surrogate_model(stage: Stage) -> ModelInstance:
    """The attacker's model, inferred from the shapes of an intercepted upload."""
    shared = stage.load_gradients("shared").vector(0)
    known = None
    if stage.cfg.attack.surrogate_init == "global":
        known = stage.load_gradients("global").values[0].astype(np.float64)
    return attack.build_surrogate(shared, stage.root.derive(KEY_SURROGATE),
                                  activation=stage.cfg.model.activation, known_params=known)


def harvest(stage: Stage) -> GradientFile:
    surrogate = surrogate_model(stage)
    result = attack.harvest_surrogate_gradients(surrogate, _probes(stage, surrogate.spec))
    return stage.save_gradients("surrogate", result.gradients)


def _mean_noise_sd(stage: Stage) -> float:
    return float(np.mean(stage.load_json("simulate")["noise_std"]))


def train_diffusion(stage: Stage):
    cfg = stage.cfg
    grads = stage.load_gradients("surrogate").vectors()
    grids = attack.training_grids(grads)
    conditions = None
    if cfg.training.conditional and cfg.training.condition == "intercepted":
        shared = stage.load_gradients("shared").vectors()
        conditions = attack.intercepted_condition_grids(shared, stage.load_json("simulate")["noise_std"], len(grads))
    elif cfg.training.conditional:
        conditions = attack.condition_source(grads, _mean_noise_sd(stage), clip=cfg.perturbation.clip)
    tc = cfg.training
    s = cfg.schedule
    result = train(grids, TrainConfig(tc.steps, tc.batch_size, tc.lr, tc.width, tc.blocks, tc.time_dim,
                                      tc.weighting),
                   stage.root.derive(KEY_TRAIN), make_schedule(s.T, s.beta_start, s.beta_end), conditions)
    save_predictor(result.predictor, stage.path("predictor"), cfg.digest, cfg.seed)
    stage.write_text("training", _csv(["step", "loss"], enumerate(result.losses, 1)))
    return result


def load_stage_predictor(stage: Stage):
    predictor, ckpt = load_predictor(stage.path("predictor"))
    stage.check(ckpt.digest, FILES["predictor"])
    return predictor


def denoise(stage: Stage, predictor=None) -> list[GradientVector]:
    cfg = stage.cfg
    a = cfg.attack
    predictor = predictor or load_stage_predictor(stage)
    shared = stage.load_gradients("shared").vectors()
    noise_sd = stage.load_json("simulate")["noise_std"]
    recovered, rows = [], []
    for trial, (g, sd) in enumerate(zip(shared, noise_sd)):
        rng = stage.root.derive(KEY_DENOISE, trial)
        if a.entry == "adaptive":
            M = estimate_noise_scale(g, sd)
            out = attack.run_pgla(g, predictor, rng, M=M, stochastic=a.stochastic)
        else:
            from .diffusion import denoise as _denoise
            out = _denoise(g, predictor, rng, c=a.c, T_prime=a.T_prime, stochastic=a.stochastic)
        recovered.append(out)
        rows.append((trial, out.meta["M"], out.meta["c"], out.meta["T_prime"]))
    stage.save_gradients("recovered", recovered)
    stage.write_text("denoise", _csv(["trial", "M", "c", "T_prime"], rows))
    return recovered


def _inversion_cfg(cfg: ExperimentConfig) -> attack.InversionConfig:
    s = cfg.attack.inversion
    return attack.InversionConfig(s.iterations, s.step, s.label_step, s.restarts)


def invert(stage: Stage) -> dict:
    cfg = stage.cfg
    surrogate = surrogate_model(stage)
    targets = {"inverted": stage.load_gradients("recovered").vectors()}
    if cfg.attack.inversion.baseline:
        targets["inverted_baseline"] = stage.load_gradients("shared").vectors()
    icfg = _inversion_cfg(cfg)
    layout = LayerLayout.single(surrogate.spec.input_size, "pixels")
    rows, images = [], {}
    for name, vectors in targets.items():
        images[name] = []
        for trial, target in enumerate(vectors):
            init = stage.root.derive(KEY_INVERT, trial)
            x0 = init.uniform(surrogate.spec.input_size)
            y0 = init.normal(surrogate.spec.classes)
            res = attack.invert_gradients(target, surrogate, init, icfg, x0, y0)
            images[name].append(GradientVector(res.x.astype(np.float32), layout, "image"))
            rows.append((name, trial, res.label, res.loss, res.restarts, int(res.failed)))
        stage.save_gradients(name, images[name])
    stage.write_text("inversion", _csv(["target", "trial", "label", "loss", "restarts", "failed"], rows))
    return images


def _labels(stage: Stage, target: str) -> list[int] | None:
    path = stage.path("inversion")
    if not path.exists():
        return None
    return [int(r["label"]) for r in read_csv(path) if r["target"] == target]


def _optional(stage: Stage, name: str):
    return stage.load_gradients(name) if stage.path(name).exists() else None


def evaluate(stage: Stage, started: float | None = None) -> dict:
    """Compare attack outputs with the ground truth kept by the simulator."""
    cfg = stage.cfg
    clean = stage.load_gradients("clean").vectors()
    truth = stage.load_json("simulate")["labels"]
    victims = stage.load_gradients("victims").values
    summary = {}
    for csv_name, grad_name, img_name in (("metrics", "recovered", "inverted"),
                                          ("baseline", "shared", "inverted_baseline")):
        grads = _optional(stage, grad_name)
        if grads is None:
            continue
        images = _optional(stage, img_name)
        labels = _labels(stage, img_name)
        reports = []
        for trial in range(len(clean)):
            reports.append(attack.evaluate(
                grads.vector(trial), clean[trial],
                None if images is None else images.values[trial], victims[trial],
                None if labels is None else labels[trial], truth[trial],
                trial=trial, seed=cfg.seed, config_digest=cfg.digest_hex))
        stage.write_text(csv_name, attack.reports_to_csv(reports))
        summary[csv_name] = summarize(reports)
    doc = {"config_digest": cfg.digest_hex, "seed": cfg.seed, "trials": cfg.trials, "summary": summary}
    if started is not None:
        doc["wall_clock_seconds"] = time.perf_counter() - started
    atomic_write(stage.path("report"), _json(doc))
    return doc


def summarize(reports) -> dict:
    out = {}
    for name in ("cos_g", "psnr_g", "psnr_i", "lra"):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            out[name] = math.fsum(vals) / len(vals)
    return out


def run_pipeline(cfg: ExperimentConfig, out=None, force: bool = False) -> dict:
    """simulate, harvest, train, denoise, invert (if enabled), evaluate."""
    started = time.perf_counter()
    stage = Stage(cfg, out or cfg.output_dir, force)
    simulate(stage)
    harvest(stage)
    result = train_diffusion(stage)
    denoise(stage, result.predictor)
    if cfg.attack.inversion.enabled:
        invert(stage)
    return evaluate(stage, started)


def eval_files(recovered, clean, force: bool = False) -> list:
    """Gradient metrics between two standalone gradient files."""
    a, b = GradientFile.load(recovered), GradientFile.load(clean)
    if a.digest != b.digest and not force:
        raise DigestMismatchError("inputs carry different config digests; pass --force to compare anyway")
    if len(a) != len(b):
        raise InputError(f"{len(a)} recovered vectors but {len(b)} clean vectors")
    return [attack.evaluate(a.vector(i), b.vector(i), trial=i, seed=a.seed, config_digest=a.digest.hex())
            for i in range(len(a))]


__all__ = ["Stage", "FILES", "simulate", "harvest", "train_diffusion", "denoise", "invert", "evaluate",
           "run_pipeline", "eval_files", "perturbation_spec", "surrogate_model", "read_csv",
           "MissingArtifactError"]
