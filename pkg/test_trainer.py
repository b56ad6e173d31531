#!/usr/bin/env python3
"""EPPINN session: normalization, head, initialization, losses, short training runs."""

import math
import os
import sys

import numpy as np
import torch

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import RuntimeConfig, TrainConfig
from networks import NetworkBundle, SirenMlp
from services import evidential
from services.errors import TrainingDiverged
from services.kinetics import EPS_CBF, derive_cbf, endpoint_difference
from services.phantom import PhantomSpec, generate
from services.trainer import (
    CaseTrainer,
    ParamHead,
    annealing_weight,
    anticollapse_loss,
    evidential_terms,
    fov_normalize,
    index_normalize,
    phys_init,
    pretrain_aif,
    prior_loss,
    train_case,
)
from testkit import run_tests

RUNTIME = RuntimeConfig(threads=1, deterministic=True)


def _tiny_cfg(**overrides) -> TrainConfig:
    base = dict(
        iterations=20,
        aif_pretrain_iters=20,
        batch_samples=256,
        trace_every=5,
        coverage_samples=256,
        coverage_time_points=4,
        hash_log2_table=10,
        tissue_hidden=32,
        param_hidden=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _tiny_case():
    return generate(PhantomSpec(dims=(8, 8, 1), duration=40.0, dt=2.0, psnr=None))[0]


def test_fov_normalize_examples():
    np.testing.assert_allclose(fov_normalize([100.0, 50.0, 20.0], [200.0, 200.0, 40.0]), [0.5, 0.25, 0.5])
    np.testing.assert_allclose(fov_normalize([0.0, 0.0, 0.0], [200.0, 200.0, 40.0]), [0.0, 0.0, 0.0])
    corners = np.array([[0.0, 0.0, 0.0], [512 * 0.4, 512 * 0.4, 16 * 10.0]])
    normalized = fov_normalize(corners, [512 * 0.4, 512 * 0.4, 16 * 10.0])
    assert normalized.min() >= 0.0 and normalized.max() <= 1.0


def test_index_normalize_uses_largest_extent():
    np.testing.assert_allclose(index_normalize([[0, 0, 0]], (16, 16, 4)), [[0.5 / 16] * 3])


def test_param_head_is_strictly_positive():
    head = ParamHead()
    raw = (torch.rand(10000, 6, dtype=torch.float64) * 2 - 1) * 50
    out = head(raw)
    assert torch.all(out.cbv >= 0) and torch.all(out.mtt >= 0.1) and torch.all(out.delay >= 0.05)
    torch.testing.assert_close(out.cbf, 60.0 * out.cbv / (out.mtt + EPS_CBF))


def test_cbf_parameterization_inverts_roles():
    head = ParamHead(predict_cbf=True)
    out = head(torch.zeros(4, 6, dtype=torch.float64))
    torch.testing.assert_close(out.cbf, torch.full((4,), 30.0 * math.log(2.0), dtype=torch.float64))
    torch.testing.assert_close(60.0 * out.cbv / (out.mtt + EPS_CBF), out.cbf)


def test_phys_init_targets():
    torch.manual_seed(0)
    cfg = TrainConfig()
    bundle = NetworkBundle(cfg)
    head = ParamHead.from_config(cfg)
    phys_init(bundle.param_net, head)
    with torch.no_grad():
        out = head(bundle.params_raw(bundle.encoder(torch.rand(1000, 3))))
    assert 15.0 <= float(out.cbf.mean()) <= 25.0
    assert 1.5 <= float(out.delay.mean()) <= 2.5
    assert 3.0 <= float(out.mtt.mean()) <= 5.0
    torch.testing.assert_close(bundle.param_net.head.bias.detach()[3:], torch.zeros(3))


def test_anticollapse_examples():
    cfg = TrainConfig(lambda_ac=0.5)
    zeros = torch.zeros(8)
    assert abs(anticollapse_loss(zeros, zeros + 4.0, cfg).item() - 1.0) < 1e-6
    ln2 = math.log(2.0)
    mtts = torch.tensor([4.0 - math.sqrt(ln2), 4.0 + math.sqrt(ln2)], dtype=torch.float64)
    value = anticollapse_loss(torch.full((2,), ln2, dtype=torch.float64), mtts, cfg).item()
    assert abs(value - 0.5) < 1e-9
    far = anticollapse_loss(torch.full((2,), 100.0), torch.tensor([0.0, 200.0]), cfg).item()
    assert far < 1e-12


def test_prior_examples():
    cfg = TrainConfig(lambda_pr=1.0)
    assert prior_loss(torch.tensor([5.0]), torch.tensor([10.0]), cfg).item() == 0.0
    assert prior_loss(torch.tensor([20.0]), torch.tensor([10.0]), cfg).item() == 25.0
    assert prior_loss(torch.tensor([5.0]), torch.tensor([35.0]), cfg).item() == 25.0


def test_annealing_schedule():
    assert annealing_weight(0, 100) == 0.0
    assert annealing_weight(50, 100) == 0.5
    assert annealing_weight(100, 100) == 1.0
    assert annealing_weight(0, 100, enabled=False) == 1.0


def test_pretrain_fits_constant_aif():
    torch.manual_seed(0)
    net = SirenMlp(1, 16, 3, 1)
    t_norm = torch.linspace(-1.0, 1.0, 60)
    error = pretrain_aif(net, t_norm, torch.ones(60), iters=2000)
    assert error < 0.01


def test_residual_delay_gradient_matches_analytic_form():
    aif = lambda t: torch.exp(-((t - 10.0) ** 2) / 8.0)
    daif = lambda t: -(t - 10.0) / 4.0 * aif(t)
    t = torch.linspace(5.0, 25.0, 41, dtype=torch.float64)
    rate, mtt = 0.4, torch.tensor(4.0, dtype=torch.float64)
    delay = torch.tensor(1.5, dtype=torch.float64, requires_grad=True)
    residual = lambda d: torch.zeros_like(t) - endpoint_difference(aif, rate, d, mtt, t)
    grads = torch.autograd.functional.jacobian(residual, delay)
    analytic = rate * (daif(t - 1.5) - daif(t - 1.5 - 4.0))
    torch.testing.assert_close(grads, analytic)
    h = 1e-6
    fd = (residual(delay.detach() + h) - residual(delay.detach() - h)) / (2 * h)
    torch.testing.assert_close(grads, fd, rtol=1e-3, atol=1e-8)


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(3)
    tissue = SirenMlp(2, 4, 1, 1).double()
    params = SirenMlp(1, 4, 1, 6).double()
    head = ParamHead()
    cfg = TrainConfig()
    aif = lambda t: torch.exp(-((t - 10.0) ** 2) / 8.0)
    x = torch.rand(8, 1, dtype=torch.float64)
    t = torch.rand(8, dtype=torch.float64) * 20.0 + 2.0

    def loss_fn():
        _, dcdt = tissue.forward_with_time_derivative(torch.cat([(t / 10.0 - 1.0)[:, None], x], dim=1), time_scale=0.1)
        out = head(params(x))
        r = dcdt[:, 0] - endpoint_difference(aif, out.cbv / (out.mtt + EPS_CBF), out.delay, out.mtt, t)
        return (
            torch.mean(r**2)
            + evidential.nig_nll(r, out.nig)
            + 1e-3 * evidential.nig_reg(r, out.nig)
            + anticollapse_loss(out.delay, out.mtt, cfg)
            + prior_loss(out.delay, out.mtt, cfg)
        )

    loss_fn().backward()
    h = 1e-6
    for net in (tissue, params):
        for param in net.parameters():
            flat, grad = param.data.view(-1), param.grad.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                up = loss_fn().item()
                flat[i] = original - h
                down = loss_fn().item()
                flat[i] = original
                fd = (up - down) / (2 * h)
                assert abs(grad[i].item() - fd) <= 1e-3 * max(1e-3, abs(fd)), (grad[i].item(), fd)


def test_short_training_run_produces_valid_maps():
    case = _tiny_case()
    result = train_case(case, _tiny_cfg(), RUNTIME)
    maps = result.maps
    assert maps.cbv.shape == case.grid_shape
    assert np.all(maps.delay >= 0.05) and np.all(maps.mtt >= 0.1)
    np.testing.assert_array_equal(maps.cbf, np.asarray(derive_cbf(maps.cbv, maps.mtt), dtype=np.float32))
    assert list(result.trace["iteration"]) == [0, 5, 10, 15, 19]
    assert result.nig is not None
    assert np.all(result.nig.total >= 0)
    assert len(result.coverage) == 4
    assert result.summary["peak_abs_dcdt"] > 0


def test_training_is_deterministic():
    case = _tiny_case()
    first = train_case(case, _tiny_cfg(seed=11), RUNTIME)
    second = train_case(case, _tiny_cfg(seed=11), RUNTIME)
    for name, grid in first.maps.as_dict().items():
        assert grid.tobytes() == second.maps.as_dict()[name].tobytes(), name


def test_ablation_switches_run():
    case = _tiny_case()
    pinn = train_case(case, _tiny_cfg(no_evidential=True), RUNTIME, method="pinn")
    assert pinn.nig is None and pinn.coverage is None
    flipped = train_case(
        case,
        _tiny_cfg(no_cbv_param=True, no_aif_pretrain=True, no_phys_init=True, no_annealing=True,
                  no_anticollapse=True, no_adaptive_hash=True, aif_extension="hold"),
        RUNTIME,
    )
    assert np.all(np.isfinite(flipped.maps.cbf))
    assert (flipped.trace["omega"] == 1.0).all()
    assert (flipped.trace["ac"] == 0.0).all()


def test_evidential_terms_leave_tissue_and_rates_alone():
    trainer = CaseTrainer(_tiny_case(), _tiny_cfg(), RUNTIME)
    r, _, out = trainer.residual(trainer.brain_coords[:32], trainer.residual_times(32))
    l_nll, l_reg = evidential_terms(r, out.nig)
    targets = list(trainer.bundle.tissue_net.parameters()) + [out.cbv, out.mtt, out.delay]
    grads = torch.autograd.grad(l_nll + l_reg, targets, allow_unused=True)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
    nig_grads = torch.autograd.grad(l_nll, [out.nig.alpha, out.nig.beta, out.nig.nu])
    assert all(torch.count_nonzero(g) > 0 for g in nig_grads)


def test_full_evidential_weight_keeps_cbf_physiological():
    case, _ = generate(PhantomSpec(dims=(8, 8, 1), duration=40.0, dt=2.0, psnr=None))
    result = train_case(case, _tiny_cfg(iterations=300, no_annealing=True, trace_every=100), RUNTIME)
    brain_cbf = result.maps.cbf[case.brain_mask]
    assert 5.0 < float(brain_cbf.mean()) < 120.0, float(brain_cbf.mean())
    assert (result.trace["mean_cbf"] > 5.0).all(), list(result.trace["mean_cbf"])


def test_nan_loss_aborts_with_trace():
    trainer = CaseTrainer(_tiny_case(), _tiny_cfg(), RUNTIME)
    with torch.no_grad():
        trainer.bundle.param_net.head.bias.fill_(float("nan"))
    try:
        trainer.run()
    except TrainingDiverged as e:
        assert e.code == "train-diverged"
        assert e.trace is not None
    else:
        raise AssertionError("expected TrainingDiverged")


if __name__ == "__main__":
    run_tests(dict(globals()))
