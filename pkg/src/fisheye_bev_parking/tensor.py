"""Tensor helpers on top of torch autograd.

torch supplies the dense tensor, the op set and reverse-mode differentiation. This module
adds the pieces the training code needs beyond it: explicitly seeded random streams,
masked softmax, shape-checked broadcasting, the one-cycle schedule and an AdamW step that
names the parameter carrying a non-finite gradient.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Iterable, Sequence

import torch
from torch import Tensor, nn

from .errors import NonFiniteGradientError, ShapeError


def generator_for(seed: int, *stream: int | str) -> torch.Generator:
    """Independent CPU generator for ``(seed, *stream)``; no global RNG state is touched."""
    key = ":".join(str(part) for part in (seed, *stream)).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    gen = torch.Generator()
    gen.manual_seed(int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


def seed_for(seed: int, *stream: int | str) -> int:
    """Integer seed for numpy ``default_rng`` derived like :func:`generator_for`."""
    key = ":".join(str(part) for part in (seed, *stream)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    try:
        return tuple(torch.broadcast_shapes(tuple(a), tuple(b)))
    except RuntimeError as exc:
        raise ShapeError(f"cannot broadcast shapes {tuple(a)} and {tuple(b)}") from exc


def check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


def dropout(x: Tensor, p: float, train: bool, generator: torch.Generator | None = None) -> Tensor:
    """Element-wise inverted dropout; the identity when ``train`` is false."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    keep = torch.bernoulli(torch.full(x.shape, 1.0 - p, dtype=x.dtype), generator=generator)
    return x * keep.to(x.device) / (1.0 - p)


def channel_dropout(
    x: Tensor,
    p: float,
    train: bool,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Zero whole channels of a ``(C, H, W)`` map with probability ``p``.

    Survivors are scaled by ``1 / (1 - p)`` so the expected magnitude is preserved.
    """
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    probs = torch.full((x.shape[0], 1, 1), 1.0 - p, dtype=x.dtype)
    keep = torch.bernoulli(probs, generator=generator)
    return x * keep.to(x.device) / (1.0 - p)


def masked_softmax(scores: Tensor, mask: Tensor | None, dim: int = -1) -> Tensor:
    """Softmax with masked-out entries exactly zero (``mask`` true = keep)."""
    if mask is None:
        return scores.softmax(dim=dim)
    broadcast_shape(scores.shape, mask.shape)
    filled = scores.masked_fill(~mask, float("-inf"))
    weights = filled.softmax(dim=dim)
    # rows with every entry masked would be NaN
    return torch.nan_to_num(weights, nan=0.0)


def one_cycle_lr(step: int, total_steps: int, start: float, peak: float, end: float) -> float:
    """Piecewise-linear one-cycle schedule: start to peak over the first half, then to end."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return start
    half = total_steps / 2.0
    if step <= half:
        return start + (peak - start) * (step / half)
    return peak + (end - peak) * ((step - half) / (total_steps - half))


class AdamWStepper:
    """``torch.optim.AdamW`` over named parameters with a finite-gradient guard."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, nn.Parameter]],
        *,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        weight_decay: float = 0.01,
        eps: float = 1e-8,
    ) -> None:
        self.named_params = [(n, p) for n, p in named_params if p.requires_grad]
        self.optimizer = torch.optim.AdamW(
            [p for _, p in self.named_params],
            lr=lr,
            betas=betas,
            weight_decay=weight_decay,
            eps=eps,
        )
        self.steps_taken = 0

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def check_gradients(self) -> None:
        for name, param in self.named_params:
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise NonFiniteGradientError(parameter=name, step=self.steps_taken)

    def step(self, lr: float) -> None:
        self.check_gradients()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.steps_taken += 1

    def state_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, param in self.named_params:
            state = self.optimizer.state.get(param, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    out[f"optim/{name}/{key}"] = state[key]
        return out

    def load_state_tensors(self, tensors: dict[str, Tensor], steps_taken: int) -> None:
        for name, param in self.named_params:
            avg = tensors.get(f"optim/{name}/exp_avg")
            avg_sq = tensors.get(f"optim/{name}/exp_avg_sq")
            if avg is None or avg_sq is None:
                continue
            self.optimizer.state[param] = {
                "step": torch.tensor(float(steps_taken)),
                "exp_avg": avg.clone().to(param.dtype),
                "exp_avg_sq": avg_sq.clone().to(param.dtype),
            }
        self.steps_taken = steps_taken


def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    *,
    eps: float = 1e-6,
    atol: float = 1e-8,
    rtol: float = 1e-6,
) -> bool:
    """Central finite-difference check of ``fn`` in float64 (wraps ``torch.autograd.gradcheck``)."""
    prepared = tuple(t.detach().to(torch.float64).requires_grad_(True) for t in inputs)
    return bool(torch.autograd.gradcheck(fn, prepared, eps=eps, atol=atol, rtol=rtol))
