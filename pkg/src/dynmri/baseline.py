"""Classical compressed-sensing comparator: gradient descent on the
half-quadratic data-fidelity term plus a smoothed TV prior, starting from
the zero-filled reconstruction.

The data-fidelity gradient is the adjoint-encoded residual; the TV
gradient is obtained from the loss module's autodiff in float64, so the
baseline and the training losses share one TV implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynmri import losses
from dynmri import tensor as dt
from dynmri.kspace import ComplexImageSequence, KSpaceData, fft2c, ifft2c
from dynmri.tensor import Tensor

__all__ = ["CsConfig", "DivergenceError", "cs_reconstruct"]


class DivergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class CsConfig:
    lam: float = 0.005
    iterations: int = 100
    step_size: float = 1.0
    tv_kind: str = "aniso"
    smoothing_eps: float = 1e-6

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.tv_kind not in ("aniso", "iso"):
            raise ValueError(f"tv_kind must be aniso or iso, got {self.tv_kind!r}")


def _tv_value_and_grad(s: np.ndarray, kind: str, eps: float):
    # The training losses report TV per pixel; the unnormalized data term
    # here needs the summed version, so scale by the pixel count.
    ch = np.stack([s.real, s.imag]).astype(np.float64)
    t = Tensor(ch, requires_grad=True)
    val = losses.tv_penalty(t, kind, eps)
    dt.backward(val)
    n = s.size
    grad = n * (t.grad[0] + 1j * t.grad[1])
    return n * val.item(), grad


def cs_reconstruct(k_u: KSpaceData, config: CsConfig):
    """Minimize 0.5 ||F_u S - K_u||^2 + lam * sum TV_eps(S) by gradient
    descent with backtracking; returns (best iterate, objective trace)."""
    config.validate()
    mask = k_u.mask.as_volume().astype(np.float64)
    ku = k_u.data.astype(np.complex128)
    s = ifft2c(ku)

    def objective_parts(x):
        resid = fft2c(x) * mask - ku
        data_term = 0.5 * float(np.sum(np.abs(resid) ** 2))
        if config.lam > 0:
            tv_val, tv_grad = _tv_value_and_grad(x, config.tv_kind, config.smoothing_eps)
        else:
            tv_val, tv_grad = 0.0, 0.0
        grad = ifft2c(resid * mask) + config.lam * tv_grad
        return data_term + config.lam * tv_val, grad

    obj, grad = objective_parts(s)
    initial_obj = obj
    trace = [obj]
    best_obj, best_s = obj, s.copy()
    step = config.step_size

    for _ in range(config.iterations):
        candidate = s - step * grad
        cand_obj, cand_grad = objective_parts(candidate)
        while cand_obj > obj and step > 1e-12:
            step *= 0.5
            candidate = s - step * grad
            cand_obj, cand_grad = objective_parts(candidate)
        s, obj, grad = candidate, cand_obj, cand_grad
        trace.append(obj)
        if obj < best_obj:
            best_obj, best_s = obj, s.copy()
        if initial_obj > 0 and obj > 10 * initial_obj:
            raise DivergenceError(
                f"objective {obj:.3e} exceeded 10x initial {initial_obj:.3e}", trace
            )
    return ComplexImageSequence(best_s.astype(np.complex64)), trace
