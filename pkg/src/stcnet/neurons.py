"""Stateful spiking neuron dynamics: IF, LIF, PLIF, LM-H and their STC variants.

All kinds share the soft reset v' = m - vth*s and fire on m >= vth (ties fire,
so the algebraic degeneracies between kinds hold bit-exactly). Membrane
potentials and previous spikes start at zero for every new sequence.

The STC variants take modulation factors ``beta`` (scales the stored
potential; temporal pathway) and ``gamma`` (scales the input current; spatial
pathway), both in [-1, 1], normally produced by ``stcnet.circuits``. With
beta = gamma = 0 each STC kind reduces exactly to its base kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    SurrogateConfig,
    Tensor,
    detach,
    mul,
    sigmoid,
    sub,
    surrogate_heaviside,
)

__all__ = [
    "KINDS",
    "STC_KINDS",
    "NeuronParams",
    "NeuronState",
    "neuron_step",
    "lif_step",
    "stc_lif_step",
    "plif_step",
    "stc_plif_step",
    "lmh_step",
    "stc_lmh_step",
]

KINDS = ("if", "lif", "plif", "lmh", "stc_lif", "stc_plif", "stc_lmh")
STC_KINDS = ("stc_lif", "stc_plif", "stc_lmh")
_LMH_KINDS = ("lmh", "stc_lmh")
_PLIF_KINDS = ("plif", "stc_plif")


def logit(p: float) -> float:
    """Inverse of the logistic; raw value that makes a PLIF alpha equal p."""
    return math.log(p / (1.0 - p))


@dataclass
class NeuronParams:
    """Per-layer neuron configuration and learnable scalars.

    ``alpha`` is the fixed membrane constant for IF/LIF. PLIF kinds instead
    learn ``alpha_raw`` and use logistic(alpha_raw) so the effective constant
    stays in (0, 1). LM-H kinds carry the four mixing scalars; they may be
    plain floats (pure simulation) or scalar parameter Tensors (training).

    ``modulation_override`` pins (beta, gamma) to fixed values, bypassing the
    circuit; used by degeneracy and oracle tests. ``lmh_reset_detach`` restores
    the original LM-H behavior of cutting the gradient through the reset spike
    (off by default; the STC treatment keeps that path).
    """

    kind: str
    alpha: float = 0.5
    vth: float = 1.0
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    alpha_raw: Tensor | float | None = None
    mu_d: Tensor | float = 0.0
    mu_s: Tensor | float = 0.0
    lambda_d: Tensor | float = 0.5
    lambda_s: Tensor | float = 0.5
    modulation_override: tuple[float, float] | None = None
    lmh_reset_detach: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown neuron kind {self.kind!r}")
        if self.vth <= 0:
            raise ValueError("vth must be positive")
        if self.kind in _PLIF_KINDS and self.alpha_raw is None:
            raise ValueError(f"{self.kind} requires alpha_raw")

    @property
    def is_stc(self) -> bool:
        return self.kind in STC_KINDS

    @property
    def is_lmh(self) -> bool:
        return self.kind in _LMH_KINDS


@dataclass
class NeuronState:
    """Membrane potentials and previous spikes for one layer.

    ``v`` holds the post-reset potential (the somatic potential for LM-H
    kinds); ``v_d`` is the dendritic potential and exists only for LM-H.
    """

    v: Tensor
    s_prev: Tensor
    v_d: Tensor | None = None

    @classmethod
    def zeros(cls, shape, dtype=np.float64, lmh: bool = False) -> "NeuronState":
        z = lambda: Tensor(np.zeros(shape, dtype=dtype))
        return cls(v=z(), s_prev=z(), v_d=z() if lmh else None)

    def copy(self) -> "NeuronState":
        """Detached value snapshot, suitable for checkpoint/replay."""
        return NeuronState(
            v=Tensor(self.v.data.copy()),
            s_prev=Tensor(self.s_prev.data.copy()),
            v_d=Tensor(self.v_d.data.copy()) if self.v_d is not None else None,
        )

    def reset(self) -> "NeuronState":
        """Zeroed state of the same geometry, for the next sequence."""
        return NeuronState.zeros(self.v.shape, dtype=self.v.dtype,
                                 lmh=self.v_d is not None)


def _check_input(state: NeuronState, x: Tensor) -> None:
    if x.shape != state.v.shape:
        raise ValueError(f"input shape {x.shape} does not match state shape {state.v.shape}")


def _check_modulation(t: Tensor, name: str) -> None:
    if np.any(np.abs(t.data) > 1.0):
        raise ValueError(f"{name} must lie in [-1, 1]")


def _fire(m: Tensor, params: NeuronParams, v_d: Tensor | None = None,
          reset_detach: bool = False) -> tuple[Tensor, NeuronState]:
    s = surrogate_heaviside(m, params.vth, params.surrogate)
    s_reset = detach(s) if reset_detach else s
    v_new = sub(m, mul(s_reset, params.vth))
    return s, NeuronState(v=v_new, s_prev=s, v_d=v_d)


def lif_step(state: NeuronState, x: Tensor, params: NeuronParams) -> tuple[Tensor, NeuronState]:
    """One IF/LIF step: m = alpha*v + (1-alpha)*x (IF keeps v undecayed)."""
    if params.kind not in ("if", "lif"):
        raise ValueError(f"lif_step cannot run kind {params.kind!r}")
    _check_input(state, x)
    alpha = params.alpha
    if params.kind == "if":
        m = state.v + mul(x, 1.0 - alpha)
    else:
        m = mul(state.v, alpha) + mul(x, 1.0 - alpha)
    return _fire(m, params)


def stc_lif_step(state: NeuronState, x: Tensor, beta: Tensor, gamma: Tensor,
                 params: NeuronParams) -> tuple[Tensor, NeuronState]:
    """One STC-LIF step: m = v*(1+beta) + x*(1+gamma)."""
    _check_input(state, x)
    _check_modulation(beta, "beta")
    _check_modulation(gamma, "gamma")
    m = mul(state.v, beta + 1.0) + mul(x, gamma + 1.0)
    return _fire(m, params)


def _effective_alpha(params: NeuronParams) -> Tensor | float:
    raw = params.alpha_raw
    if isinstance(raw, Tensor):
        return sigmoid(raw)
    return 1.0 / (1.0 + math.exp(-raw))


def plif_step(state: NeuronState, x: Tensor, params: NeuronParams) -> tuple[Tensor, NeuronState]:
    """One PLIF step: like LIF but alpha = logistic(alpha_raw) is learnable."""
    _check_input(state, x)
    a = _effective_alpha(params)
    m = mul(state.v, a) + mul(x, 1.0 - a)
    return _fire(m, params)


def stc_plif_step(state: NeuronState, x: Tensor, beta: Tensor, gamma: Tensor,
                  params: NeuronParams) -> tuple[Tensor, NeuronState]:
    """One STC-PLIF step: m = alpha*v*(1+beta) + (1-alpha)*x*(1+gamma)."""
    _check_input(state, x)
    _check_modulation(beta, "beta")
    _check_modulation(gamma, "gamma")
    a = _effective_alpha(params)
    m = mul(mul(state.v, a), beta + 1.0) + mul(mul(x, 1.0 - a), gamma + 1.0)
    return _fire(m, params)


def lmh_step(state: NeuronState, x: Tensor, params: NeuronParams) -> tuple[Tensor, NeuronState]:
    """One LM-H step over the two-compartment (dendritic, somatic) potentials.

    v_d' = mu_d*v_d + mu_s*v_s + x;  m = lambda_s*v_s + lambda_d*v_d';
    spike and soft reset update the somatic potential stored in ``state.v``.
    """
    _check_input(state, x)
    if state.v_d is None:
        raise ValueError("LM-H kinds need a state with a dendritic potential")
    v_d = mul(state.v_d, params.mu_d) + mul(state.v, params.mu_s) + x
    m = mul(state.v, params.lambda_s) + mul(v_d, params.lambda_d)
    return _fire(m, params, v_d=v_d, reset_detach=params.lmh_reset_detach)


def stc_lmh_step(state: NeuronState, x: Tensor, beta: Tensor, gamma: Tensor,
                 params: NeuronParams) -> tuple[Tensor, NeuronState]:
    """One STC-LM-H step: gamma scales the input into v_d, beta scales v_s in m."""
    _check_input(state, x)
    if state.v_d is None:
        raise ValueError("LM-H kinds need a state with a dendritic potential")
    _check_modulation(beta, "beta")
    _check_modulation(gamma, "gamma")
    v_d = mul(state.v_d, params.mu_d) + mul(state.v, params.mu_s) + mul(x, gamma + 1.0)
    m = mul(mul(state.v, params.lambda_s), beta + 1.0) + mul(v_d, params.lambda_d)
    return _fire(m, params, v_d=v_d, reset_detach=params.lmh_reset_detach)


def neuron_step(state: NeuronState, x: Tensor, params: NeuronParams,
                beta: Tensor | None = None, gamma: Tensor | None = None
                ) -> tuple[Tensor, NeuronState]:
    """Dispatch one timestep for any neuron kind."""
    kind = params.kind
    if kind in ("if", "lif"):
        return lif_step(state, x, params)
    if kind == "plif":
        return plif_step(state, x, params)
    if kind == "lmh":
        return lmh_step(state, x, params)
    if beta is None or gamma is None:
        raise ValueError(f"{kind} requires modulation factors")
    if kind == "stc_lif":
        return stc_lif_step(state, x, beta, gamma, params)
    if kind == "stc_plif":
        return stc_plif_step(state, x, beta, gamma, params)
    return stc_lmh_step(state, x, beta, gamma, params)
