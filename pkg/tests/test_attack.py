import numpy as np
import pytest

from pgla import attack
from pgla.data import ProbeDataset, random_probe_dataset
from pgla.errors import LayoutError, ShapeError
from pgla.layout import GradientVector, LayerLayout
from pgla.metrics import psnr
from pgla.nets import ModelSpec, build_model, loss_and_grad_params
from pgla.rng import Rng


@pytest.fixture
def tiny_model():
    return build_model(ModelSpec.mlp((1, 4, 4), [6], 3), Rng(0))


def test_harvest_one_gradient_per_probe(tiny_model):
    probe = random_probe_dataset(5, (1, 4, 4), 3, Rng(1))
    harvest = attack.harvest_surrogate_gradients(tiny_model, probe)
    assert len(harvest) == 5
    assert all(g.role == "surrogate" and g.layout == tiny_model.layout for g in harvest.gradients)
    one = attack.harvest_surrogate_gradients(tiny_model, ProbeDataset(probe.images[:1], probe.labels[:1], (1, 4, 4)))
    assert len(one) == 1


def test_zero_images_give_zero_first_layer_weight_gradient(tiny_model):
    probe = ProbeDataset(np.zeros((3, 16)), [0, 1, 2], (1, 4, 4))
    for g in attack.harvest_surrogate_gradients(tiny_model, probe).gradients:
        assert not np.any(g.layer(0))


def test_harvest_rejects_wrong_input_size(tiny_model):
    with pytest.raises(ShapeError):
        attack.harvest_surrogate_gradients(tiny_model, random_probe_dataset(2, (1, 3, 3), 3, Rng(0)))


def test_surrogate_from_shared_gradient(tiny_model):
    shared = GradientVector(np.zeros(tiny_model.layout.total), tiny_model.layout, "perturbed")
    fresh = attack.build_surrogate(shared, Rng(5))
    assert fresh.layout.shapes == tiny_model.layout.shapes
    warm = attack.build_surrogate(shared, Rng(5), known_params=tiny_model.params)
    assert np.array_equal(warm.params, tiny_model.params)


def test_inversion_fixed_point(tiny_model):
    x = Rng(2).uniform(16)
    y_logits = np.array([0.0, 40.0, 0.0])
    _, target = loss_and_grad_params(tiny_model, x, np.eye(3)[1])
    res = attack.invert_gradients(target, tiny_model, Rng(0), attack.InversionConfig(iterations=3),
                                  init_x=x, init_y=y_logits)
    assert res.trace[0] < 1e-12 and res.label == 1


def test_inversion_recovers_image_and_trace_is_monotone():
    model = build_model(ModelSpec.mlp((1, 4, 4), [8], 4), Rng(3))
    x_true = Rng(4).uniform(16)
    _, target = loss_and_grad_params(model, x_true, 2)
    init = Rng(5)
    x0 = init.uniform(16)
    res = attack.invert_gradients(target, model, init, attack.InversionConfig(iterations=300), init_x=x0)
    assert all(b < a for a, b in zip(res.accepted, res.accepted[1:]))
    assert res.loss == min(res.trace)
    assert res.label == 2
    assert psnr(x_true, res.x) > psnr(x_true, x0) + 10
    assert res.x.min() >= 0 and res.x.max() <= 1


def test_inversion_restarts_on_divergence(tiny_model):
    _, target = loss_and_grad_params(tiny_model, np.zeros(16), 0)
    bad = target.with_values(np.full(len(target), np.nan))
    res = attack.invert_gradients(bad, tiny_model, Rng(0), attack.InversionConfig(iterations=5, restarts=2))
    assert res.failed and res.restarts == 2


def test_inversion_checks_layout(tiny_model):
    with pytest.raises(LayoutError):
        attack.invert_gradients(GradientVector(np.zeros(4), LayerLayout.single(4)), tiny_model, Rng(0))


def test_evaluate_perfect_recovery_and_missing_truth():
    g = GradientVector(Rng(0).normal(20).astype(np.float32), LayerLayout.single(20))
    report = attack.evaluate(g, g, y_rec=3, y_true=3)
    assert report.cos_g == 1.0 and report.psnr_g == 100.0 and report.lra == 1.0
    assert report.psnr_i is None


def test_report_csv_roundtrip():
    reports = [attack.AttackReport(0, 5, "ab", 0.1 + 0.2, 1 / 3, None, 1.0),
               attack.AttackReport(1, 5, "ab", -0.5, 12.25, 7e-300, 0.0)]
    text = attack.reports_to_csv(reports)
    assert "\r" not in text and text.splitlines()[0] == ",".join(attack.AttackReport.CSV_FIELDS)
    assert attack.reports_from_csv(text) == reports


def test_run_pgla_without_noise_returns_input():
    class Never:
        side = 5
        conditional = False
        schedule = None

        def __call__(self, *a):
            raise AssertionError("no reverse steps expected")

    from pgla.diffusion import make_schedule

    g = GradientVector(Rng(0).normal(16).astype(np.float32), LayerLayout.single(16), "perturbed")
    p = Never()
    p.schedule = make_schedule()
    out = attack.run_pgla(g, p, Rng(0), M=0.0)
    assert np.array_equal(out.values, g.values) and out.meta["T_prime"] == 0
