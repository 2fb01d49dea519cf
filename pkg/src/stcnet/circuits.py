"""Dynamic spatio-temporal circuits: modulation factors from previous spikes.

Each layer owns two feedback pathways driven by its own spikes from the
previous timestep: the temporal circuit produces ``beta`` (scales the stored
membrane potential) and the spatial circuit produces ``gamma`` (scales the
input current). Both factors pass through tanh and therefore live in (-1, 1),
so a modulated term can at most double and at least vanish.

Three connectivity variants are supported:

* ``per_neuron``   - one learnable scalar weight + bias per channel, applied
                     pointwise (a depthwise 1x1 convolution);
* ``group_conv``   - grouped kxk convolution (default 16 groups, kernel 5),
                     so a factor at (i, j) sees only the kxk neighborhood in
                     its own channel group;
* ``global_conv``  - full kxk convolution across all channels.

By default the circuit input is detached, which decouples spike output from
self-regulation: gradients reach the circuit weights but never flow through
``s_prev`` into earlier timesteps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, conv2d, detach, parameter, tanh

__all__ = ["VARIANTS", "CircuitParams", "init_circuit", "compute_modulation"]

VARIANTS = ("per_neuron", "group_conv", "global_conv")


@dataclass
class CircuitParams:
    """Weights and wiring for one layer's temporal + spatial circuits.

    A disabled pathway contributes an exact zero factor and its weights are
    dropped from parameter enumeration and cost accounting.
    """

    variant: str
    channels: int
    w_gt: Tensor | None = None
    b_gt: Tensor | None = None
    w_gs: Tensor | None = None
    b_gs: Tensor | None = None
    groups: int = 16
    kernel: int = 5
    enabled_tc: bool = True
    enabled_sc: bool = True
    detach_input: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown circuit variant {self.variant!r}")
        if self.variant == "group_conv" and self.channels % self.groups:
            raise ValueError(
                f"channels={self.channels} not divisible by groups={self.groups}")

    @property
    def conv_groups(self) -> int:
        if self.variant == "per_neuron":
            return self.channels
        if self.variant == "group_conv":
            return self.groups
        return 1

    @property
    def conv_kernel(self) -> int:
        return 1 if self.variant == "per_neuron" else self.kernel


def _init_weights(channels: int, conv_groups: int, k: int, rng: np.random.Generator,
                  dtype, tag: str) -> tuple[Tensor, Tensor]:
    # Small fan-in-scaled uniform init keeps initial factors near 0, so the
    # neuron starts in its base (circuit-silent) regime.
    fan_in = (channels // conv_groups) * k * k
    bound = 1.0 / fan_in
    w = rng.uniform(-bound, bound, size=(channels, channels // conv_groups, k, k))
    return (parameter(w.astype(dtype), name=f"w_{tag}"),
            parameter(np.zeros(channels, dtype=dtype), name=f"b_{tag}"))


def init_circuit(channels: int, variant: str = "group_conv", *, groups: int = 16,
                 kernel: int = 5, enabled_tc: bool = True, enabled_sc: bool = True,
                 detach_input: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float64) -> CircuitParams:
    """Create circuit parameters for a layer with the given channel count."""
    params = CircuitParams(variant=variant, channels=channels, groups=groups,
                           kernel=kernel, enabled_tc=enabled_tc, enabled_sc=enabled_sc,
                           detach_input=detach_input)
    rng = rng if rng is not None else np.random.default_rng(0)
    if enabled_tc:
        params.w_gt, params.b_gt = _init_weights(
            channels, params.conv_groups, params.conv_kernel, rng, dtype, "gt")
    if enabled_sc:
        params.w_gs, params.b_gs = _init_weights(
            channels, params.conv_groups, params.conv_kernel, rng, dtype, "gs")
    return params


def compute_modulation(s_prev: Tensor, params: CircuitParams) -> tuple[Tensor, Tensor]:
    """Map the layer's previous spikes to (beta, gamma) modulation factors.

    beta = tanh(W_gt s_prev), gamma = tanh(W_gs s_prev); disabled pathways
    return an exact zero tensor of the same shape.
    """
    if s_prev.shape[1] != params.channels:
        raise ValueError(
            f"s_prev has {s_prev.shape[1]} channels, circuit expects {params.channels}")
    s_in = detach(s_prev) if params.detach_input else s_prev
    k = params.conv_kernel
    pad = (k - 1) // 2

    def pathway(w, b):
        return tanh(conv2d(s_in, w, b, groups=params.conv_groups, padding=pad))

    zero = Tensor(np.zeros(s_prev.shape, dtype=s_prev.dtype))
    beta = pathway(params.w_gt, params.b_gt) if params.enabled_tc else zero
    gamma = pathway(params.w_gs, params.b_gs) if params.enabled_sc else zero
    return beta, gamma
