"""Cascaded reconstruction network: k-space block, IFFT bridge, and a chain
of residual dense networks, each anchored to the measurements by a
data-consistency layer.

All blocks map two-channel (real/imaginary) tensors [N, 2, nt, ny, nx] to
the same shape. The frequency-domain transforms inside the bridge and the
DC layers are linear, so their backward rules are the adjoint transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dynmri import tensor as dt
from dynmri.kspace import ComplexImageSequence, KSpaceData, SamplingMask, fft2c, ifft2c
from dynmri.tensor import ShapeMismatchError, Tensor

__all__ = [
    "NetworkConfig",
    "ModelParams",
    "init_params",
    "kpn_forward",
    "rdb_forward",
    "rdn_forward",
    "data_consistency",
    "crdn_forward",
    "crdn_forward_channels",
]

DC_MODES = ("hard", "soft")


@dataclass
class NetworkConfig:
    num_rdn_blocks: int = 4
    convs_per_block: int = 5
    num_rdbs: int = 2              # RDBs per RDN
    growth_channels: int = 12
    base_channels: int = 24
    kernel: tuple = (3, 3, 3)
    convs_per_rdb: int = 2
    kpn_channels: Optional[int] = None  # None -> base_channels
    dc_mode: str = "hard"
    dc_lambda: float = 1e6

    @property
    def kpn_width(self) -> int:
        return self.kpn_channels if self.kpn_channels is not None else self.base_channels

    def validate(self) -> None:
        if self.num_rdn_blocks < 1 or self.num_rdbs < 1 or self.convs_per_rdb < 1:
            raise ValueError("block counts must be >= 1")
        if self.convs_per_block < 3:
            raise ValueError("convs_per_block must be >= 3")
        if self.dc_mode not in DC_MODES:
            raise ValueError(f"dc_mode must be one of {DC_MODES}, got {self.dc_mode!r}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel extents must be odd and positive, got {self.kernel}")
        counted = self.counted_layers_per_rdn()
        if counted != self.convs_per_block:
            raise ValueError(
                f"layer census mismatch: 1 shallow + {self.num_rdbs} RDB stacks "
                f"+ 1 global fusion + 1 output = {counted} counted layers per "
                f"image-domain block, but convs_per_block is {self.convs_per_block}"
            )

    def counted_layers_per_rdn(self) -> int:
        # Each RDB stack counts as one composite layer in the depth audit.
        return 1 + self.num_rdbs + 1 + 1

    def census(self) -> dict:
        """Explicit layer bookkeeping for the depth audit."""
        kpn_convs = self.convs_per_block
        rdn_convs = 1 + self.num_rdbs * (self.convs_per_rdb + 1) + 1 + 1
        return {
            "counted_layers": self.convs_per_block * (self.num_rdn_blocks + 1),
            "counted_per_block": self.convs_per_block,
            "kpn_conv_layers": kpn_convs,
            "rdn_conv_layers_each": rdn_convs,
            "actual_conv_layers": kpn_convs + self.num_rdn_blocks * rdn_convs,
        }


class ModelParams:
    """Ordered, named collection of weight/bias tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams()
        for name, t in self._tensors.items():
            out.add(name, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._tensors.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise ValueError(
                    f"checkpoint shape {arrays[name].shape} for {name!r} "
                    f"does not match model shape {t.shape}"
                )
            t.data = np.ascontiguousarray(arrays[name])


def init_params(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-initialize all layers; the final layer of every residual branch
    (KPN output, RDB fusion, RDN output) starts at zero so each block is an
    identity at initialization."""
    from dynmri.training import he_init

    config.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams()
    k = tuple(config.kernel)

    def conv(name, cin, cout, kernel, zero=False):
        shape = (cout, cin) + kernel
        fan_in = cin * int(np.prod(kernel))
        if zero:
            w = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        else:
            w = he_init(shape, fan_in, rng, dtype=dtype)
        params.add(name + ".weight", w)
        params.add(name + ".bias", Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))

    kw = config.kpn_width
    widths = [2] + [kw] * (config.convs_per_block - 1) + [2]
    for i in range(config.convs_per_block):
        conv(f"kpn.conv{i}", widths[i], widths[i + 1], k,
             zero=(i == config.convs_per_block - 1))

    c0, g = config.base_channels, config.growth_channels
    for r in range(config.num_rdn_blocks):
        conv(f"rdn{r}.shallow", 2, c0, k)
        for b in range(config.num_rdbs):
            for i in range(config.convs_per_rdb):
                conv(f"rdn{r}.rdb{b}.conv{i}", c0 + i * g, g, k)
            conv(f"rdn{r}.rdb{b}.fusion", c0 + config.convs_per_rdb * g, c0,
                 (1, 1, 1), zero=True)
        conv(f"rdn{r}.gff", config.num_rdbs * c0, c0, (1, 1, 1))
        conv(f"rdn{r}.out", c0, 2, k, zero=True)
    return params


# ---------------------------------------------------------------------------
# Frequency-domain plumbing as autodiff operations
# ---------------------------------------------------------------------------

def _channels_to_complex(arr: np.ndarray) -> np.ndarray:
    return arr[:, 0] + 1j * arr[:, 1]


def _complex_to_channels(z: np.ndarray, dtype) -> np.ndarray:
    return np.ascontiguousarray(
        np.stack([z.real, z.imag], axis=1), dtype=dtype
    )


def _check_two_channel(x: Tensor, opname: str) -> None:
    if x.data.ndim != 5 or x.shape[1] != 2:
        raise ShapeMismatchError(
            f"{opname}: expected [N, 2, nt, ny, nx] input, got {x.shape}"
        )


def ifft_bridge(k2ch: Tensor) -> Tensor:
    """Per-frame centered inverse FFT on a two-channel k-space tensor.

    The transform is unitary, so the backward rule is the forward FFT.
    """
    _check_two_channel(k2ch, "ifft_bridge")
    out = _complex_to_channels(ifft2c(_channels_to_complex(k2ch.data)), k2ch.dtype)

    def rule(g):
        return (_complex_to_channels(fft2c(_channels_to_complex(g)), g.dtype),)

    return dt._from_op(out, (k2ch,), rule, "ifft_bridge")


def _dc_weight(mask_vol: np.ndarray, mode: str, lam: float) -> np.ndarray:
    # Passband for the network's k-space: unsampled entries pass, sampled
    # entries are replaced (hard) or blended (soft).
    if mode == "hard":
        return 1.0 - mask_vol
    return (1.0 - mask_vol) + mask_vol / (1.0 + lam)


def data_consistency(
    image: Tensor,
    k_u: np.ndarray,
    mask_vol: np.ndarray,
    mode: str = "hard",
    lam: float = 1e6,
) -> Tensor:
    """Restore measured k-space samples into an intermediate reconstruction.

    hard: sampled entries of FFT(image) are replaced by the measurements.
    soft: sampled entries become (FFT(image) + lam * k_u) / (1 + lam).
    """
    _check_two_channel(image, "data_consistency")
    if mode not in DC_MODES:
        raise ValueError(f"dc mode must be one of {DC_MODES}, got {mode!r}")
    if mask_vol.shape[-3:] != image.shape[-3:]:
        raise ShapeMismatchError(
            f"data_consistency: mask {mask_vol.shape} does not match image {image.shape}"
        )
    w = _dc_weight(mask_vol, mode, lam)
    if mode == "hard":
        measured = k_u * mask_vol
    else:
        measured = k_u * mask_vol * (lam / (1.0 + lam))
    k = fft2c(_channels_to_complex(image.data))
    out = _complex_to_channels(ifft2c(k * w + measured), image.dtype)

    def rule(g):
        gz = fft2c(_channels_to_complex(g))
        return (_complex_to_channels(ifft2c(gz * w), g.dtype),)

    return dt._from_op(out, (image,), rule, "data_consistency")


def kspace_data_consistency(
    k2ch: Tensor,
    k_u: np.ndarray,
    mask_vol: np.ndarray,
    mode: str = "hard",
    lam: float = 1e6,
) -> Tensor:
    """DC applied directly in k-space (no transforms)."""
    _check_two_channel(k2ch, "kspace_data_consistency")
    w = _dc_weight(mask_vol, mode, lam)
    if mode == "hard":
        measured = k_u * mask_vol
    else:
        measured = k_u * mask_vol * (lam / (1.0 + lam))
    out = _complex_to_channels(
        _channels_to_complex(k2ch.data) * w + measured, k2ch.dtype
    )

    def rule(g):
        return (_complex_to_channels(_channels_to_complex(g) * w, g.dtype),)

    return dt._from_op(out, (k2ch,), rule, "kspace_dc")


# ---------------------------------------------------------------------------
# Network blocks
# ---------------------------------------------------------------------------

def _conv(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return dt.conv3d(x, params[name + ".weight"], params[name + ".bias"])


def _conv1x1(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return dt.conv1x1(x, params[name + ".weight"], params[name + ".bias"])


def kpn_forward(
    k2ch: Tensor,
    k_u: np.ndarray,
    mask_vol: np.ndarray,
    params: ModelParams,
    config: NetworkConfig,
) -> Tensor:
    """Frequency-domain block: conv stack with a residual connection from
    the block input, then hard k-space data consistency."""
    _check_two_channel(k2ch, "kpn_forward")
    h = k2ch
    for i in range(config.convs_per_block):
        h = _conv(params, f"kpn.conv{i}", h)
        if i < config.convs_per_block - 1:
            h = dt.relu(h)
    res = dt.add(h, k2ch)
    return kspace_data_consistency(res, k_u, mask_vol, "hard")


def rdb_forward(
    features: Tensor, params: ModelParams, prefix: str, config: NetworkConfig
) -> Tensor:
    """Residual dense block: densely connected conv+ReLU layers, 1x1 local
    feature fusion, local residual connection."""
    feats = [features]
    for i in range(config.convs_per_rdb):
        inp = feats[0] if len(feats) == 1 else dt.concat_channels(feats)
        feats.append(dt.relu(_conv(params, f"{prefix}.conv{i}", inp)))
    fused = _conv1x1(params, f"{prefix}.fusion", dt.concat_channels(feats))
    return dt.add(fused, features)


def rdn_forward(
    image: Tensor,
    k_u: np.ndarray,
    mask_vol: np.ndarray,
    params: ModelParams,
    prefix: str,
    config: NetworkConfig,
) -> Tensor:
    """Shallow feature extraction, RDBs, global feature fusion, global
    residual from the block input, data consistency."""
    _check_two_channel(image, "rdn_forward")
    shallow = _conv(params, f"{prefix}.shallow", image)
    x = shallow
    rdb_outs = []
    for b in range(config.num_rdbs):
        x = rdb_forward(x, params, f"{prefix}.rdb{b}", config)
        rdb_outs.append(x)
    gff = _conv1x1(params, f"{prefix}.gff", dt.concat_channels(rdb_outs))
    out = _conv(params, f"{prefix}.out", gff)
    res = dt.add(out, image)
    return data_consistency(res, k_u, mask_vol, config.dc_mode, config.dc_lambda)


def crdn_forward_channels(
    k2ch: Tensor,
    k_u: np.ndarray,
    mask_vol: np.ndarray,
    params: ModelParams,
    config: NetworkConfig,
) -> Tensor:
    """Full cascade on batched two-channel tensors (training entry point)."""
    x = kpn_forward(k2ch, k_u, mask_vol, params, config)
    img = ifft_bridge(x)
    for r in range(config.num_rdn_blocks):
        img = rdn_forward(img, k_u, mask_vol, params, f"rdn{r}", config)
    return img


def crdn_forward(
    k_u: KSpaceData, params: ModelParams, config: NetworkConfig
) -> ComplexImageSequence:
    """Reconstruct one undersampled sequence."""
    ch = k_u.to_channels()[None]
    dtype = params.tensors()[0].dtype if len(params) else np.float32
    k2ch = Tensor(ch.astype(dtype))
    mask_vol = k_u.mask.as_volume()[None].astype(dtype)
    ku_arr = k_u.data[None]
    out = crdn_forward_channels(k2ch, ku_arr, mask_vol, params, config)
    return ComplexImageSequence.from_channels(out.data[0])
