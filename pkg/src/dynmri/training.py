"""Supervised training loop: He initialization, Adam with exponentially
decaying learning rate, mini-batches, best-validation checkpointing."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from dynmri import losses, network
from dynmri import tensor as dt
from dynmri.kspace import ComplexImageSequence, KSpaceData, SamplingMask
from dynmri.losses import LossConfig
from dynmri.network import ModelParams, NetworkConfig
from dynmri.tensor import Tensor

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "NumericalDivergenceError",
    "he_init",
    "init_optimizer_state",
    "adam_step",
    "lr_schedule",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


class NumericalDivergenceError(RuntimeError):
    """Raised when a non-finite loss is produced; names the first bad tensor."""


@dataclass
class TrainConfig:
    batch_size: int = 20
    initial_lr: float = 0.0001
    lr_decay: float = 0.95          # multiplicative, applied per epoch
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    seed: int = 0
    val_fraction: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.lr_decay <= 1):
            raise ValueError("lr_decay must be in (0, 1]")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not (0 <= v < 1):
                raise ValueError(f"{name} must be in [0, 1)")
        if self.initial_lr < 0 or self.adam_eps <= 0:
            raise ValueError("learning rate must be >= 0 and adam_eps > 0")
        if not (0 <= self.val_fraction < 1):
            raise ValueError("val_fraction must be in [0, 1)")
        self.loss.validate()


def he_init(shape, fan_in: int, seed, dtype=np.float32) -> Tensor:
    """Zero-mean Gaussian weights with std sqrt(2 / fan_in)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = np.sqrt(2.0 / fan_in)
    return Tensor(
        (rng.standard_normal(shape) * std).astype(dtype), requires_grad=True
    )


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


def init_optimizer_state(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(t.data) for name, t in params.items()},
        v={name: np.zeros_like(t.data) for name, t in params.items()},
    )


def adam_step(
    params: ModelParams,
    grads: dict,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    return config.initial_lr * config.lr_decay ** epoch


def _first_nonfinite_tensor(loss: Tensor) -> str:
    tape = dt.ComputationTape(loss)
    for node in tape.operations:
        if not np.all(np.isfinite(node.data)):
            return node.op
    return "loss"


def _stack_samples(samples, dtype):
    ku = np.stack([s[0].data for s in samples])
    mask = np.stack([s[1].as_volume() for s in samples]).astype(dtype)
    ku_ch = np.stack(
        [np.stack([k.real, k.imag]) for k in ku]
    ).astype(dtype)
    ref_ch = np.stack(
        [np.stack([s[2].data.real, s[2].data.imag]) for s in samples]
    ).astype(dtype)
    return ku, mask, ku_ch, ref_ch


def _forward_batch(samples, params, net_config, dtype):
    ku, mask, ku_ch, ref_ch = _stack_samples(samples, dtype)
    out = network.crdn_forward_channels(
        Tensor(ku_ch), ku, mask, params, net_config
    )
    return out, Tensor(ref_ch)


def _psnr_channels(out: np.ndarray, ref: np.ndarray) -> float:
    # magnitude-image PSNR averaged over the batch
    from dynmri.data import metric_psnr

    vals = []
    for i in range(out.shape[0]):
        rec = np.abs(out[i, 0] + 1j * out[i, 1])
        gt = np.abs(ref[i, 0] + 1j * ref[i, 1])
        vals.append(metric_psnr(rec, gt))
    finite = [v for v in vals if np.isfinite(v)]
    return float(np.mean(finite)) if finite else float("inf")


def train(
    dataset: Sequence,
    net_config: NetworkConfig,
    config: TrainConfig,
    params: Optional[ModelParams] = None,
    dtype=np.float32,
    checkpoint_path=None,
    log_path=None,
    verbose: bool = False,
):
    """Optimize network parameters on (K_u, mask, reference) triples.

    Returns (best ModelParams, list of per-epoch log dicts). Deterministic
    given seed and config; aborts on non-finite loss.
    """
    config.validate()
    net_config.validate()
    if len(dataset) == 0:
        raise ValueError("empty training dataset")

    rng = np.random.default_rng(config.seed)
    if params is None:
        params = network.init_params(net_config, seed=config.seed, dtype=dtype)

    n = len(dataset)
    order = rng.permutation(n)
    n_val = int(round(config.val_fraction * n))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("validation split left no training samples")

    state = init_optimizer_state(params)
    log: list[dict] = []
    best_key = None
    best_state = None
    t_start = time.time()

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        rng.shuffle(train_idx)
        batch_losses = []
        for start in range(0, len(train_idx), config.batch_size):
            idx = train_idx[start:start + config.batch_size]
            samples = [dataset[i] for i in idx]
            out, ref = _forward_batch(samples, params, net_config, dtype)
            loss = losses.total_loss(out, ref, config.loss)
            lv = loss.item()
            if not np.isfinite(lv):
                raise NumericalDivergenceError(
                    f"non-finite loss at epoch {epoch}; first non-finite tensor "
                    f"produced by op {_first_nonfinite_tensor(loss)!r}"
                )
            if lr > 0:
                dt.backward(loss)
                grads = {name: t.grad for name, t in params.items()}
                adam_step(
                    params, grads, state, lr,
                    config.adam_beta1, config.adam_beta2, config.adam_eps,
                )
                params.zero_grad()
            batch_losses.append(lv)

        train_loss = float(np.mean(batch_losses))
        if len(val_idx):
            val_losses, val_psnrs = [], []
            for start in range(0, len(val_idx), config.batch_size):
                samples = [dataset[i] for i in val_idx[start:start + config.batch_size]]
                out, ref = _forward_batch(samples, params, net_config, dtype)
                val_losses.append(losses.total_loss(out, ref, config.loss).item())
                val_psnrs.append(_psnr_channels(out.data, ref.data))
            val_loss = float(np.mean(val_losses))
            val_psnr = float(np.mean(val_psnrs))
        else:
            val_loss, val_psnr = train_loss, float("nan")

        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_psnr": val_psnr,
            "wall_seconds": time.time() - t_start,
        }
        log.append(entry)
        if verbose:
            print(
                f"epoch {epoch:3d} lr {lr:.3e} train {train_loss:.6f} "
                f"val {val_loss:.6f} psnr {val_psnr:.2f}"
            )

        if best_key is None or val_loss < best_key:
            best_key = val_loss
            best_state = {k: v.copy() for k, v in params.state_arrays().items()}
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, params, net_config)

    if best_state is not None:
        params.load_state_arrays(best_state)
    if log_path is not None:
        write_training_log(log_path, log)
    return params, log


def write_training_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        # wall_seconds stays out of the file so identical runs produce
        # byte-identical logs
        writer = csv.DictWriter(
            fh,
            fieldnames=["epoch", "lr", "train_loss", "val_loss", "val_psnr"],
            extrasaction="ignore",
        )
        writer.writeheader()
        for entry in log:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in entry.items()})


def save_checkpoint(path, params: ModelParams, net_config: NetworkConfig) -> None:
    arrays = dict(params.state_arrays())
    cfg = dataclasses.asdict(net_config)
    cfg["kernel"] = list(cfg["kernel"])
    arrays["__config__"] = np.frombuffer(
        json.dumps(cfg, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        cfg = json.loads(bytes(data["__config__"].tobytes()).decode())
        cfg["kernel"] = tuple(cfg["kernel"])
        net_config = NetworkConfig(**cfg)
        params = network.init_params(net_config, seed=0)
        params.load_state_arrays(
            {k: data[k] for k in data.files if k != "__config__"}
        )
    return params, net_config
