"""Differentiable op layer used by the network, plus a finite-difference gradient checker.

All ops are thin, contract-enforcing wrappers over torch CPU tensors: shapes are
validated up front, errors are raised as plain ``ValueError`` (shape problems) or
``FloatingPointError`` (non-finite numerics), and every op is deterministic on CPU.
Training runs in float32; gradient checks convert parameters to float64 and compare
reverse-mode gradients against central differences.

Conventions fixed here so tests and oracles are unambiguous:

* ``conv2d`` zero-pads, uses odd kernels, floor output sizing.
* ``bilinear_upsample`` samples at half-pixel centers: output pixel ``i`` reads the
  source at ``(i + 0.5) / factor - 0.5``, clamped to the valid range.
* ``covariance`` normalizes by ``n - 1``.
* Hidden activations are leaky ReLU with slope 0.1; image / probability outputs
  use sigmoid.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.1


@dataclass
class GradReport:
    """Result of a finite-difference gradient check.

    ``max_rel_err`` is taken over sampled entries where either gradient exceeds
    ``rel_floor`` in magnitude; entries below the floor are numerically zero and
    are covered by ``max_abs_err`` instead.
    """

    max_abs_err: float
    max_rel_err: float
    checked_params: int

    def ok(self, rel_tol: float = 1e-5, abs_tol: float = 1e-7) -> bool:
        return self.max_rel_err < rel_tol and self.max_abs_err < abs_tol


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected CHW or BCHW tensor, got shape {tuple(x.shape)}")


def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """2-D convolution with zero padding. ``x`` is CHW or BCHW, kernel is OIHW."""
    xb, squeeze = _as_batched(x)
    if kernel.dim() != 4:
        raise ValueError(f"kernel must be OIHW, got shape {tuple(kernel.shape)}")
    cout, cin, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel sizes must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} padding={padding}")
    if xb.shape[1] != cin:
        raise ValueError(
            f"input has {xb.shape[1]} channels but kernel expects {cin}"
        )
    if bias is not None and tuple(bias.shape) != (cout,):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match Cout={cout}")
    y = F.conv2d(xb, kernel, bias, stride=stride, padding=padding)
    return y.squeeze(0) if squeeze else y


def bilinear_upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Upsample spatial dims by an integer factor with half-pixel-centers bilinear."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    xb, squeeze = _as_batched(x)
    y = F.interpolate(xb, scale_factor=factor, mode="bilinear", align_corners=False)
    return y.squeeze(0) if squeeze else y


def covariance(x: torch.Tensor) -> torch.Tensor:
    """Sample covariance ``(X - mean)^T (X - mean) / (n - 1)`` of an n x d matrix."""
    if x.dim() != 2:
        raise ValueError(f"expected n x d matrix, got shape {tuple(x.shape)}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"covariance needs n >= 2 rows, got {n}")
    centered = x - x.mean(dim=0, keepdim=True)
    return centered.t() @ centered / (n - 1)


def leaky_relu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=LEAKY_SLOPE)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    """Spatial mean of a CHW (-> C) or BCHW (-> B x C) tensor."""
    if x.dim() == 3:
        return x.mean(dim=(1, 2))
    if x.dim() == 4:
        return x.mean(dim=(2, 3))
    raise ValueError(f"expected CHW or BCHW tensor, got shape {tuple(x.shape)}")


def sgd_update(
    param: torch.Tensor,
    grad: torch.Tensor,
    velocity: torch.Tensor,
    lr: float,
    momentum: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One SGD-with-momentum step: ``v' = momentum*v + g``, ``p' = p - lr*v'``.

    Returns fresh tensors; inputs are not mutated.
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(
            f"shape mismatch: param {tuple(param.shape)}, grad {tuple(grad.shape)}, "
            f"velocity {tuple(velocity.shape)}"
        )
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient entries; step aborted")
    new_v = momentum * velocity + grad
    new_p = param - lr * new_v
    return new_p, new_v


def grad_check(
    loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-4,
    samples_per_tensor: int = 4,
    seed: int = 0,
    rel_floor: float = 1e-6,
) -> GradReport:
    """Compare reverse-mode gradients of ``loss_fn`` against central differences.

    Parameters are promoted to float64 and ``loss_fn`` must be deterministic.
    ``samples_per_tensor`` flat indices per named tensor are probed (all of them
    when the tensor is smaller). Raises FloatingPointError if the loss is not
    finite at the base point.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {
        name: p.detach().to(torch.float64).clone().requires_grad_(True)
        for name, p in params.items()
    }
    loss = loss_fn(base)
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite at the base point")
    analytic = torch.autograd.grad(
        loss, list(base.values()), allow_unused=True, retain_graph=False
    )
    analytic = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(base.items(), analytic)
    }

    frozen = {name: p.detach().clone() for name, p in base.items()}
    rng = np.random.Generator(np.random.PCG64(seed))
    max_abs = 0.0
    max_rel = 0.0
    checked = 0
    with torch.no_grad():
        for name, p in frozen.items():
            numel = p.numel()
            k = min(samples_per_tensor, numel)
            idxs = rng.choice(numel, size=k, replace=False)
            flat = p.view(-1)
            for idx in idxs:
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn(frozen).item()
                flat[idx] = orig - eps
                down = loss_fn(frozen).item()
                flat[idx] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError(
                        f"loss not finite when perturbing {name}[{idx}]"
                    )
                numeric = (up - down) / (2.0 * eps)
                exact = analytic[name].view(-1)[idx].item()
                err = abs(exact - numeric)
                max_abs = max(max_abs, err)
                scale = max(abs(exact), abs(numeric))
                if scale > rel_floor:
                    max_rel = max(max_rel, err / scale)
                checked += 1
    return GradReport(max_abs_err=max_abs, max_rel_err=max_rel, checked_params=checked)
