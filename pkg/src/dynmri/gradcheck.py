"""Central finite-difference verification of every differentiable piece.

All checks run in float64 with step 1e-5 on O(1) inputs. Each suite
returns (name, max relative error, tolerance) triples; a check passes when
the error is at or below its tolerance.
"""

from __future__ import annotations

import numpy as np

from dynmri import losses, network
from dynmri import tensor as dt
from dynmri.tensor import Tensor

__all__ = [
    "fd_gradient",
    "check_layer_gradients",
    "check_tv_gradients",
    "check_crdn_gradient",
    "run_all",
]

FD_STEP = 1e-5


def fd_gradient(func, arr: np.ndarray, indices) -> np.ndarray:
    """Central finite differences of scalar-valued func at chosen entries."""
    out = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        up = arr.copy()
        up[idx] += FD_STEP
        down = arr.copy()
        down[idx] -= FD_STEP
        out[n] = (func(up) - func(down)) / (2 * FD_STEP)
    return out


def _compare(func, arr, grad, rng, n_probe=8, exclude=None):
    flat_indices = rng.choice(arr.size, size=min(n_probe, arr.size), replace=False)
    indices = [np.unravel_index(i, arr.shape) for i in flat_indices]
    if exclude is not None:
        indices = [i for i in indices if not exclude(arr[i])] or indices[:1]
    fd = fd_gradient(func, arr, indices)
    ad = np.array([grad[i] for i in indices])
    denom = np.maximum(np.abs(fd), 1.0)
    return float(np.max(np.abs(fd - ad) / denom))


def check_layer_gradients(seed: int = 0):
    """FD checks for every layer type of the engine."""
    rng = np.random.default_rng(seed)
    results = []

    def run(name, build, arr, tol=1e-4, exclude=None):
        t = Tensor(arr, requires_grad=True)
        loss = build(t)
        dt.backward(loss)

        def f(a):
            return build(Tensor(a)).item()

        results.append((name, _compare(f, arr, t.grad, rng, exclude=exclude), tol))

    x = rng.standard_normal((2, 3, 4, 5, 5))
    w = rng.standard_normal((3, 3, 3, 3, 3)) * 0.3
    b = rng.standard_normal(3) * 0.1
    wt = Tensor(w)
    bt = Tensor(b)
    run("conv3d/input", lambda t: dt.reduce_sum(dt.square(dt.conv3d(t, wt, bt))), x)

    xt = Tensor(x)
    run(
        "conv3d/kernel",
        lambda t: dt.reduce_sum(dt.square(dt.conv3d(xt, t, bt))),
        w,
    )
    run("conv3d/bias", lambda t: dt.reduce_sum(dt.square(dt.conv3d(xt, wt, t))), b)

    w1 = rng.standard_normal((2, 3, 1, 1, 1)) * 0.5
    b1 = np.zeros(2)
    run(
        "conv1x1/kernel",
        lambda t: dt.reduce_sum(dt.square(dt.conv1x1(xt, t, Tensor(b1)))),
        w1,
    )

    xr = rng.standard_normal((4, 5))
    run(
        "relu",
        lambda t: dt.reduce_sum(dt.square(dt.relu(t))),
        xr,
        exclude=lambda v: abs(v) < 1e-3,
    )
    run("abs", lambda t: dt.reduce_sum(dt.absolute(t)), xr, exclude=lambda v: abs(v) < 1e-3)
    run("square", lambda t: dt.reduce_sum(dt.square(t)), xr)
    run(
        "sqrt",
        lambda t: dt.reduce_sum(dt.sqrt(dt.add_scalar(dt.square(t), 0.1))),
        xr,
    )
    run("reduce_mean", lambda t: dt.reduce_mean(dt.multiply(t, t)), xr)

    ya = rng.standard_normal((1, 2, 2, 3, 3))
    yb = Tensor(rng.standard_normal((1, 2, 2, 3, 3)))
    run(
        "concat_channels",
        lambda t: dt.reduce_sum(dt.square(dt.concat_channels([t, yb]))),
        ya,
    )
    run(
        "pad_replicate",
        lambda t: dt.reduce_sum(dt.square(dt.pad_replicate(t, 4, 1, 1))),
        ya,
    )
    run("narrow", lambda t: dt.reduce_sum(dt.square(dt.narrow(t, 3, 1, 2))), ya)
    return results


def check_tv_gradients(seed: int = 0, eps: float = 1e-8):
    """FD checks for all four TV losses on a random complex view."""
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal((2, 2, 8, 8))
    results = []
    for kind in ("aniso", "iso", "2dtv", "3dtv"):
        t = Tensor(arr, requires_grad=True)
        loss = losses.tv_penalty(t, kind, eps)
        dt.backward(loss)

        def f(a, kind=kind):
            return losses.tv_penalty(Tensor(a), kind, eps).item()

        results.append((f"tv/{kind}", _compare(f, arr, t.grad, rng), 1e-4))
    return results


def check_crdn_gradient(seed: int = 0):
    """End-to-end FD check of the cascade on a miniature problem."""
    from dynmri import data as dd
    from dynmri import kspace as ks

    rng = np.random.default_rng(seed)
    cfg = network.NetworkConfig(
        num_rdn_blocks=2,
        convs_per_block=5,
        num_rdbs=2,
        growth_channels=3,
        base_channels=4,
        kernel=(3, 3, 3),
        kpn_channels=4,
    )
    phantom = dd.generate_phantom(dd.PhantomConfig(nx=16, ny=16, nt=4, seed=seed))
    mask = ks.generate_mask(16, 16, 4, 2.0, 4, seed=seed)
    ku = ks.forward_model(phantom, mask)
    params = network.init_params(cfg, seed=seed, dtype=np.float64)
    # Perturb away from the zero-initialized identity so every branch is live.
    for _, t in params.items():
        t.data = t.data + 0.05 * rng.standard_normal(t.shape)

    ku_arr = ku.data[None].astype(np.complex128)
    mask_vol = mask.as_volume()[None].astype(np.float64)
    k2ch = Tensor(ku.to_channels()[None].astype(np.float64))
    ref = Tensor(phantom.to_channels()[None].astype(np.float64))

    def forward():
        out = network.crdn_forward_channels(k2ch, ku_arr, mask_vol, params, cfg)
        return losses.mse_loss(out, ref)

    loss = forward()
    dt.backward(loss)

    results = []
    for name in ("kpn.conv1.weight", "rdn0.rdb0.conv0.weight", "rdn1.out.weight"):
        t = params[name]
        grad = t.grad.copy()
        base = t.data.copy()
        flat = rng.choice(t.size, size=4, replace=False)
        indices = [np.unravel_index(i, t.shape) for i in flat]
        fd = np.zeros(len(indices))
        for n, idx in enumerate(indices):
            t.data = base.copy()
            t.data[idx] += FD_STEP
            up = forward().item()
            t.data = base.copy()
            t.data[idx] -= FD_STEP
            down = forward().item()
            fd[n] = (up - down) / (2 * FD_STEP)
        t.data = base
        ad = np.array([grad[i] for i in indices])
        err = float(np.max(np.abs(fd - ad) / np.maximum(np.abs(fd), 1e-3)))
        results.append((f"crdn/{name}", err, 1e-3))
    params.zero_grad()
    return results


def run_all(seed: int = 0):
    results = []
    results += check_layer_gradients(seed)
    results += check_tv_gradients(seed)
    results += check_crdn_gradient(seed)
    return results
