import math

import numpy as np
import pytest
import torch

from slim_distill.distillation import (
    ChannelProjector,
    align_channels,
    alpha_at,
    channel_softmax,
    cwd_loss,
    tap_losses,
    total_loss,
)
from slim_distill.graph import build_graph, forward
from slim_distill.model import Alignment, AlphaSchedule, DistillationConfig, ScheduleParams, TapPoint
from slim_distill.pruning import make_plan, prune
from slim_distill.sparsity import collect_bn_gammas
from slim_distill.utils import ConfigError, GraphStructureError, NumericError, ScheduleDomainError, ShapeError
from slim_distill.zoo import conv_chain


def brute_force_cwd(teacher: np.ndarray, student: np.ndarray, tau: float) -> float:
    """Loop-by-loop spatial softmax and KL, batch-averaged."""
    n, c, h, w = teacher.shape
    total = 0.0
    for b in range(n):
        for ch in range(c):
            t = [math.exp(v / tau) for v in teacher[b, ch].ravel()]
            s = [math.exp(v / tau) for v in student[b, ch].ravel()]
            pt = [v / sum(t) for v in t]
            ps = [v / sum(s) for v in s]
            total += (tau**2 / c) * sum(p * math.log(p / q) for p, q in zip(pt, ps))
    return total / n


class TestChannelSoftmax:
    def test_constant_map_is_uniform(self):
        out = channel_softmax(torch.full((1, 2, 3, 4), 7.0), tau=3.0)
        torch.testing.assert_close(out, torch.full((1, 2, 3, 4), 1 / 12))

    def test_two_positions(self):
        fm = torch.tensor([[[[math.log(2), 0.0]]]], dtype=torch.float64)
        torch.testing.assert_close(channel_softmax(fm, 1.0).flatten(), torch.tensor([2 / 3, 1 / 3], dtype=torch.float64))

    @pytest.mark.parametrize("tau", [0.5, 1.0, 6.0, 20.0])
    def test_argmax_and_normalisation(self, tau):
        fm = torch.randn(3, 5, 4, 4, generator=torch.Generator().manual_seed(0))
        out = channel_softmax(fm, tau)
        torch.testing.assert_close(out.sum(dim=(2, 3)), torch.ones(3, 5), rtol=0, atol=1e-6)
        assert torch.equal(out.flatten(2).argmax(-1), fm.flatten(2).argmax(-1))

    def test_large_values_are_stable(self):
        out = channel_softmax(torch.tensor([[[[1e4, 0.0]]]]), 1.0)
        assert torch.isfinite(out).all()

    def test_non_finite(self):
        with pytest.raises(NumericError):
            channel_softmax(torch.tensor([[[[float("nan"), 0.0]]]]), 1.0)

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            channel_softmax(torch.zeros(1, 1, 2, 2), 0.0)


class TestCwdLoss:
    def test_identical_features(self):
        fm = torch.randn(2, 4, 5, 5, dtype=torch.float64)
        assert abs(float(cwd_loss(fm, fm.clone(), 6.0))) < 1e-9

    @pytest.mark.parametrize("tau,expected", [(1.0, 0.056633), (2.0, 0.059148)])
    def test_two_position_oracle(self, tau, expected):
        teacher = torch.tensor([[[[math.log(2), 0.0]]]], dtype=torch.float64)
        student = torch.zeros_like(teacher)
        loss = float(cwd_loss(teacher, student, tau))
        assert loss == pytest.approx(expected, abs=1e-5)
        assert loss == pytest.approx(brute_force_cwd(teacher.numpy(), student.numpy(), tau), abs=1e-12)

    def test_matches_brute_force(self):
        gen = torch.Generator().manual_seed(5)
        t = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        s = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
        assert float(cwd_loss(t, s, 4.0)) == pytest.approx(brute_force_cwd(t.numpy(), s.numpy(), 4.0), rel=1e-10)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(7)
        t = torch.randn(1, 2, 3, 3, generator=gen, dtype=torch.float64)
        s = torch.randn(1, 2, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        tau = 2.0
        cwd_loss(t, s, tau).backward()
        analytic = s.grad.clone()
        numeric = torch.zeros_like(analytic)
        eps = 1e-6
        flat = s.detach().clone().flatten()
        for i in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += eps
            minus[i] -= eps
            numeric.view(-1)[i] = (
                cwd_loss(t, plus.view_as(s), tau) - cwd_loss(t, minus.view_as(s), tau)
            ) / (2 * eps)
        rel = (analytic - numeric).norm() / numeric.norm()
        assert float(rel) < 1e-4

    def test_teacher_gets_no_gradient(self):
        t = torch.randn(1, 2, 3, 3, requires_grad=True)
        s = torch.randn(1, 2, 3, 3, requires_grad=True)
        cwd_loss(t, s, 1.0).backward()
        assert t.grad is None
        assert s.grad is not None

    def test_non_negative(self):
        gen = torch.Generator().manual_seed(11)
        for _ in range(20):
            t, s = torch.randn(2, 3, 2, 2, generator=gen), torch.randn(2, 3, 2, 2, generator=gen)
            assert float(cwd_loss(t, s, 3.0)) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cwd_loss(torch.zeros(1, 2, 3, 3), torch.zeros(1, 3, 3, 3), 1.0)


class TestAlignChannels:
    def test_identity_map(self):
        t, s = torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2)
        t2, s2 = align_channels(t, s, Alignment.INDEX_MAP, {i: i for i in range(4)})
        assert torch.equal(t2, t)
        assert torch.equal(s2, s)

    def test_kept_subset(self):
        t, s = torch.randn(1, 4, 2, 2), torch.randn(1, 2, 2, 2)
        t2, s2 = align_channels(t, s, Alignment.INDEX_MAP, {0: 0, 2: 1})
        assert torch.equal(t2[:, 0], t[:, 0])
        assert torch.equal(t2[:, 1], t[:, 2])
        assert torch.equal(s2, s)

    def test_projection_lifts_student(self):
        t, s = torch.randn(2, 8, 5, 5), torch.randn(2, 4, 5, 5)
        t2, s2 = align_channels(t, s, Alignment.LEARNED_PROJECTION, projection=ChannelProjector(4, 8))
        assert s2.shape == (2, 8, 5, 5)
        assert torch.equal(t2, t)

    def test_out_of_range(self):
        with pytest.raises(GraphStructureError):
            align_channels(torch.zeros(1, 4, 2, 2), torch.zeros(1, 1, 2, 2), Alignment.INDEX_MAP, {9: 0})

    def test_missing_inputs(self):
        with pytest.raises(ConfigError):
            align_channels(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2), Alignment.INDEX_MAP)
        with pytest.raises(ConfigError):
            align_channels(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 2), Alignment.LEARNED_PROJECTION)


def schedule(kind, alpha0=0.5, **params):
    return DistillationConfig(alpha0=alpha0, alpha_schedule=kind, schedule_params=ScheduleParams(**params))


class TestAlphaAt:
    @pytest.mark.parametrize("kind", list(AlphaSchedule))
    def test_starts_at_alpha0(self, kind):
        assert alpha_at(0, 100, schedule(kind, alpha0=0.7)) == 0.7

    def test_constant(self):
        cfg = schedule(AlphaSchedule.CONSTANT)
        assert all(alpha_at(t, 50, cfg) == 0.5 for t in range(51))

    def test_cosine_endpoint(self):
        cfg = schedule(AlphaSchedule.COSINE_ANNEALING, alpha_min=0.05)
        assert alpha_at(100, 100, cfg) == pytest.approx(0.05, abs=1e-15)
        assert alpha_at(100, 100, schedule(AlphaSchedule.COSINE_ANNEALING)) == pytest.approx(0.05)

    def test_exponential_tenth(self):
        cfg = schedule(AlphaSchedule.EXPONENTIAL_DECAY, k=math.log(10))
        assert alpha_at(40, 40, cfg) == pytest.approx(0.05, rel=1e-12)

    @pytest.mark.parametrize(
        "kind",
        [AlphaSchedule.EXPONENTIAL_DECAY, AlphaSchedule.TIME_BASED_DECAY, AlphaSchedule.INVERSE_SIGMOID_DECAY],
    )
    def test_decay_is_monotone(self, kind):
        values = [alpha_at(t, 30, schedule(kind)) for t in range(31)]
        assert all(b < a for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("t", [-1, 11])
    def test_out_of_range(self, t):
        with pytest.raises(ScheduleDomainError):
            alpha_at(t, 10, schedule(AlphaSchedule.CONSTANT))


class TestTotalLoss:
    def test_zero_alpha(self):
        task = torch.tensor(1.25)
        assert torch.equal(total_loss(task, [torch.tensor(3.0)], 0.0), task)

    def test_weighted_mean(self):
        loss = total_loss(1.0, [0.1, 0.3], 0.5)
        assert loss == pytest.approx(1.1)

    def test_zero_cwd(self):
        assert total_loss(2.0, [0.0, 0.0], 0.8) == 2.0

    def test_negative_alpha(self):
        with pytest.raises(ConfigError):
            total_loss(1.0, [0.1], -0.5)


class TestSelfDistillation:
    def test_dead_channels_give_zero_cwd(self):
        teacher = build_graph(conv_chain([8, 8]), seed=1).double()
        with torch.no_grad():
            for bn in ("l0_bn", "l1_bn"):
                teacher.layers[bn].weight[[1, 6]] = 0
                teacher.layers[bn].bias[[1, 6]] = 0
                teacher.layers[bn].weight[[0, 2, 3, 4, 5, 7]] = torch.linspace(0.5, 1.5, 6, dtype=torch.float64)
        plan = make_plan(teacher, collect_bn_gammas(teacher), ratio=0.25)
        assert plan.per_layer["l0_bn"] == [0, 2, 3, 4, 5, 7]
        student, maps = prune(teacher, plan)
        cfg = DistillationConfig(tap_points=[TapPoint(teacher="l0_act", student="l0_act"), TapPoint(teacher="l1_act", student="l1_act")])
        x = torch.randn(4, 3, 6, 6, dtype=torch.float64)
        losses = tap_losses(forward(teacher, x).features, forward(student, x).features, cfg, maps)
        assert len(losses) == 2
        assert all(abs(float(loss)) < 1e-9 for loss in losses)
