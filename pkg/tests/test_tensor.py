from __future__ import annotations

import pytest
import torch
from torch import nn

from fisheye_bev_parking.errors import NonFiniteGradientError, ShapeError
from fisheye_bev_parking.tensor import (
    AdamWStepper,
    broadcast_shape,
    channel_dropout,
    check_same_shape,
    dropout,
    generator_for,
    gradient_check,
    masked_softmax,
    one_cycle_lr,
    seed_for,
)


def test_generators_are_keyed_by_stream() -> None:
    a = torch.rand(4, generator=generator_for(3, "order", 1))
    b = torch.rand(4, generator=generator_for(3, "order", 1))
    c = torch.rand(4, generator=generator_for(3, "order", 2))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert seed_for(3, "scene", "train", 0) == seed_for(3, "scene", "train", 0)
    assert seed_for(3, "scene", "train", 0) != seed_for(3, "scene", "val", 0)


def test_shape_errors_name_both_shapes() -> None:
    assert broadcast_shape((2, 1, 3), (4, 1)) == (2, 4, 3)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        broadcast_shape((2, 3), (4,))
    with pytest.raises(ShapeError, match="targets"):
        check_same_shape(torch.zeros(2, 3), torch.zeros(3, 2), "targets")


def test_softmax_of_constant_is_uniform() -> None:
    out = masked_softmax(torch.full((7,), 2.5, dtype=torch.float64), None)
    assert torch.allclose(out, torch.full((7,), 1 / 7, dtype=torch.float64))


def test_masked_softmax_zeroes_masked_entries() -> None:
    scores = torch.tensor([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    mask = torch.tensor([[True, False, True], [False, False, False]])
    out = masked_softmax(scores, mask)
    assert out[0, 1] == 0.0
    assert out[0].sum().item() == pytest.approx(1.0)
    assert torch.equal(out[1], torch.zeros(3))


def test_sigmoid_slope_at_zero() -> None:
    x = torch.zeros((), dtype=torch.float64, requires_grad=True)
    torch.sigmoid(x).backward()
    assert x.grad is not None
    assert x.grad.item() == pytest.approx(0.25)


def test_four_layer_graph_passes_gradient_check() -> None:
    gen = torch.Generator().manual_seed(0)
    w1 = torch.randn(6, 5, generator=gen, dtype=torch.float64)
    w2 = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    x = torch.randn(3, 6, generator=gen, dtype=torch.float64)
    kernel = torch.randn(2, 1, 3, 3, generator=gen, dtype=torch.float64)

    def graph(x: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        h = nn.functional.gelu(x @ w1)
        h = nn.functional.layer_norm(h, (5,))
        h = torch.sigmoid(h @ w2).reshape(1, 1, 3, 4)
        h = nn.functional.conv2d(h, k, padding=1)
        h = nn.functional.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        return (h.softmax(dim=-1) * h).sum()

    assert gradient_check(graph, [x, w1, w2, kernel], eps=1e-5, rtol=1e-6, atol=1e-8)


def test_backward_is_linear_in_the_losses() -> None:
    w = torch.randn(4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    w.requires_grad_(True)

    def loss_a() -> torch.Tensor:
        return (w**2).sum()

    def loss_b() -> torch.Tensor:
        return torch.sin(w).sum()

    (ga,) = torch.autograd.grad(loss_a(), w)
    (gb,) = torch.autograd.grad(loss_b(), w)
    (gsum,) = torch.autograd.grad(loss_a() + loss_b(), w)
    assert torch.allclose(gsum, ga + gb)


def test_dropout_is_identity_outside_training() -> None:
    x = torch.randn(3, 4, 5)
    assert dropout(x, 0.5, train=False) is x
    assert channel_dropout(x, 0.5, train=False) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, train=True)


def test_channel_dropout_preserves_expected_magnitude() -> None:
    x = torch.ones(10_000, 1, 1, dtype=torch.float64)
    out = channel_dropout(x, 0.5, train=True, generator=torch.Generator().manual_seed(2))
    assert set(out.unique().tolist()) <= {0.0, 2.0}
    assert out.mean().item() == pytest.approx(1.0, rel=0.05)


def test_dropout_mean_over_many_draws() -> None:
    gen = torch.Generator().manual_seed(4)
    x = torch.ones(10_000, dtype=torch.float64)
    total = sum(dropout(x, 0.3, train=True, generator=gen).mean().item() for _ in range(10))
    assert total / 10 == pytest.approx(1.0, rel=0.01)


def test_one_cycle_schedule() -> None:
    assert one_cycle_lr(0, 1000, 1.5e-4, 3e-4, 1.5e-5) == pytest.approx(1.5e-4)
    assert one_cycle_lr(500, 1000, 1.5e-4, 3e-4, 1.5e-5) == pytest.approx(3e-4)
    assert one_cycle_lr(1000, 1000, 1.5e-4, 3e-4, 1.5e-5) == pytest.approx(1.5e-5)
    assert one_cycle_lr(250, 1000, 1.0, 3.0, 0.0) == pytest.approx(2.0)
    assert one_cycle_lr(0, 0, 1.0, 3.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        one_cycle_lr(1001, 1000, 1.0, 3.0, 0.0)


def _scalar(value: float) -> nn.Parameter:
    return nn.Parameter(torch.tensor([value], dtype=torch.float64))


def test_adamw_zero_gradient_without_decay_leaves_parameters() -> None:
    p = _scalar(1.5)
    stepper = AdamWStepper([("p", p)], lr=0.1, weight_decay=0.0)
    for _ in range(3):
        p.grad = torch.zeros_like(p)
        stepper.step(0.1)
    assert p.item() == 1.5


def test_adamw_decay_shrinks_geometrically() -> None:
    p = _scalar(2.0)
    stepper = AdamWStepper([("p", p)], lr=0.1, weight_decay=0.5)
    for _ in range(4):
        p.grad = torch.zeros_like(p)
        stepper.step(0.1)
    assert p.item() == pytest.approx(2.0 * (1 - 0.1 * 0.5) ** 4, rel=1e-12)


def test_adamw_finds_the_minimiser_of_a_quadratic() -> None:
    p = _scalar(-3.0)
    stepper = AdamWStepper([("p", p)], lr=0.05, weight_decay=0.0)
    for _ in range(5000):
        stepper.zero_grad()
        ((p - 1.25) ** 2).sum().backward()
        stepper.step(0.05)
    assert p.item() == pytest.approx(1.25, abs=1e-6)


def test_adamw_names_the_non_finite_parameter() -> None:
    good, bad = _scalar(1.0), _scalar(1.0)
    stepper = AdamWStepper([("good", good), ("head.bad", bad)], lr=0.1)
    good.grad = torch.ones_like(good)
    bad.grad = torch.tensor([float("nan")], dtype=torch.float64)
    with pytest.raises(NonFiniteGradientError, match="head.bad"):
        stepper.step(0.1)
    assert good.item() == 1.0


def test_adamw_state_round_trip() -> None:
    p = _scalar(0.5)
    stepper = AdamWStepper([("p", p)], lr=0.1)
    p.grad = torch.ones_like(p)
    stepper.step(0.1)
    state = stepper.state_tensors()
    assert set(state) == {"optim/p/exp_avg", "optim/p/exp_avg_sq"}

    q = _scalar(p.item())
    resumed = AdamWStepper([("p", q)], lr=0.1)
    resumed.load_state_tensors(state, 1)
    p.grad = torch.full_like(p, 0.3)
    q.grad = torch.full_like(q, 0.3)
    stepper.step(0.05)
    resumed.step(0.05)
    assert q.item() == p.item()
    assert resumed.steps_taken == 2
