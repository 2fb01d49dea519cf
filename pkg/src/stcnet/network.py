"""Recurrent frame-prediction network and multi-step rollout.

Architecture: patchify (space-to-depth) -> three spiking conv blocks
(conv -> group norm -> circuit modulation -> neuron step) -> a plain decode
convolution -> unpatchify back to the input frame geometry. Feature-map
resolution is constant across blocks; the decode layer has no normalization
and no neuron.

The rollout feeds ground-truth frames during the input phase and the model's
own previous prediction afterwards; the output at step t is the prediction of
frame t+1, so T_out predictions need T_in + T_out - 1 network steps. Because
extra steps only append, a longer rollout's first predictions equal a shorter
rollout's output exactly (prefix property), which is what makes variable
output lengths safe without retraining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, conv2d, group_norm, parameter, reshape, transpose
from .circuits import CircuitParams, compute_modulation, init_circuit
from .neurons import NeuronParams, NeuronState, logit, neuron_step

__all__ = [
    "SpikingBlock",
    "NetworkParams",
    "RolloutPlan",
    "build_network",
    "parameters",
    "init_states",
    "patchify",
    "unpatchify",
    "forward_step",
    "rollout",
    "rollout_tensors",
]


@dataclass
class SpikingBlock:
    conv_w: Tensor
    conv_b: Tensor
    gn_gamma: Tensor
    gn_beta: Tensor
    neuron: NeuronParams
    circuit: CircuitParams | None = None


@dataclass
class NetworkParams:
    """All learnable parameters plus the fixed architecture description."""

    blocks: list[SpikingBlock]
    final_w: Tensor
    final_b: Tensor
    channels: list[int]
    patch: int
    in_shape: tuple[int, int, int]   # (C, H, W) of raw frames
    norm_groups: int = 16
    kernel: int = 5
    dtype: np.dtype = np.float64

    @property
    def feature_hw(self) -> tuple[int, int]:
        _, h, w = self.in_shape
        return h // self.patch, w // self.patch


@dataclass
class RolloutPlan:
    """How many frames go in, how many predictions come out.

    ``teacher_forcing`` applies only when targets are supplied (training): the
    output phase is fed ground-truth frames instead of the model's own
    predictions. Inference always self-feeds.
    """

    t_in: int
    t_out: int
    teacher_forcing: bool = False

    def __post_init__(self):
        if self.t_in < 1 or self.t_out < 1:
            raise ValueError("t_in and t_out must be >= 1")


def _conv_init(cout: int, cin: int, k: int, rng: np.random.Generator, dtype,
               name: str) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(cin * k * k)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    return (parameter(w.astype(dtype), name=f"{name}.w"),
            parameter(np.zeros(cout, dtype=dtype), name=f"{name}.b"))


def build_network(kind: str, *, in_shape: tuple[int, int, int], channels=(256, 256, 256),
                  patch: int = 2, kernel: int = 5, norm_groups: int = 16,
                  alpha: float = 0.5, vth: float = 1.0, surrogate=None,
                  circuit_variant: str = "group_conv", circuit_groups: int = 16,
                  circuit_kernel: int = 5, enabled_tc: bool = True,
                  enabled_sc: bool = True, detach_input: bool = True,
                  lmh_init=(0.0, 0.0, 0.5, 0.5), rng: np.random.Generator | None = None,
                  dtype=np.float64) -> NetworkParams:
    """Assemble a randomly initialized network for the given neuron kind.

    ``lmh_init`` gives (mu_d, mu_s, lambda_d, lambda_s); the default is the
    LIF-equivalent point so LM-H training starts from known-stable dynamics.
    """
    from .neurons import KINDS, STC_KINDS  # local to avoid import noise at top

    if kind not in KINDS:
        raise ValueError(f"unknown neuron kind {kind!r}")
    c_in, h, w = in_shape
    if h % patch or w % patch:
        raise ValueError(f"frame {h}x{w} not divisible by patch {patch}")
    rng = rng if rng is not None else np.random.default_rng(0)
    channels = list(channels)
    for c in channels:
        if c % norm_groups:
            raise ValueError(f"channels {c} not divisible by norm groups {norm_groups}")

    blocks: list[SpikingBlock] = []
    prev = c_in * patch * patch
    for i, c in enumerate(channels):
        conv_w, conv_b = _conv_init(c, prev, kernel, rng, dtype, f"block{i}.conv")
        gn_gamma = parameter(np.ones(c, dtype=dtype), name=f"block{i}.gn.gamma")
        gn_beta = parameter(np.zeros(c, dtype=dtype), name=f"block{i}.gn.beta")

        neuron_kwargs = dict(kind=kind, alpha=alpha, vth=vth)
        if surrogate is not None:
            neuron_kwargs["surrogate"] = surrogate
        if kind in ("plif", "stc_plif"):
            neuron_kwargs["alpha_raw"] = parameter(
                np.asarray(logit(alpha), dtype=dtype), name=f"block{i}.neuron.alpha_raw")
        if kind in ("lmh", "stc_lmh"):
            mu_d, mu_s, lam_d, lam_s = lmh_init
            neuron_kwargs.update(
                mu_d=parameter(np.asarray(mu_d, dtype=dtype), name=f"block{i}.neuron.mu_d"),
                mu_s=parameter(np.asarray(mu_s, dtype=dtype), name=f"block{i}.neuron.mu_s"),
                lambda_d=parameter(np.asarray(lam_d, dtype=dtype), name=f"block{i}.neuron.lambda_d"),
                lambda_s=parameter(np.asarray(lam_s, dtype=dtype), name=f"block{i}.neuron.lambda_s"),
            )
        neuron = NeuronParams(**neuron_kwargs)

        circuit = None
        if kind in STC_KINDS:
            circuit = init_circuit(c, circuit_variant, groups=circuit_groups,
                                   kernel=circuit_kernel, enabled_tc=enabled_tc,
                                   enabled_sc=enabled_sc, detach_input=detach_input,
                                   rng=rng, dtype=dtype)
        blocks.append(SpikingBlock(conv_w, conv_b, gn_gamma, gn_beta, neuron, circuit))
        prev = c

    final_w, final_b = _conv_init(c_in * patch * patch, prev, kernel, rng, dtype, "final")
    return NetworkParams(blocks=blocks, final_w=final_w, final_b=final_b,
                         channels=channels, patch=patch, in_shape=tuple(in_shape),
                         norm_groups=norm_groups, kernel=kernel, dtype=np.dtype(dtype))


def parameters(net: NetworkParams) -> dict[str, Tensor]:
    """Ordered name -> leaf tensor map of every learnable parameter."""
    out: dict[str, Tensor] = {}
    for i, blk in enumerate(net.blocks):
        p = f"block{i}"
        out[f"{p}.conv.w"] = blk.conv_w
        out[f"{p}.conv.b"] = blk.conv_b
        out[f"{p}.gn.gamma"] = blk.gn_gamma
        out[f"{p}.gn.beta"] = blk.gn_beta
        n = blk.neuron
        if isinstance(n.alpha_raw, Tensor):
            out[f"{p}.neuron.alpha_raw"] = n.alpha_raw
        for attr in ("mu_d", "mu_s", "lambda_d", "lambda_s"):
            val = getattr(n, attr)
            if isinstance(val, Tensor):
                out[f"{p}.neuron.{attr}"] = val
        c = blk.circuit
        if c is not None:
            if c.enabled_tc:
                out[f"{p}.circuit.w_gt"] = c.w_gt
                out[f"{p}.circuit.b_gt"] = c.b_gt
            if c.enabled_sc:
                out[f"{p}.circuit.w_gs"] = c.w_gs
                out[f"{p}.circuit.b_gs"] = c.b_gs
    out["final.w"] = net.final_w
    out["final.b"] = net.final_b
    return out


def patchify(frame: Tensor, p: int) -> Tensor:
    """Space-to-depth: (B,C,H,W) -> (B,C*p*p,H/p,W/p), losslessly."""
    b, c, h, w = frame.shape
    if h % p or w % p:
        raise ValueError(f"frame {h}x{w} not divisible by patch {p}")
    if p == 1:
        return frame
    t = reshape(frame, (b, c, h // p, p, w // p, p))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return reshape(t, (b, c * p * p, h // p, w // p))


def unpatchify(x: Tensor, p: int) -> Tensor:
    """Exact inverse of ``patchify``."""
    b, cpp, hp, wp = x.shape
    if cpp % (p * p):
        raise ValueError(f"channel count {cpp} is not divisible by patch^2={p * p}")
    if p == 1:
        return x
    c = cpp // (p * p)
    t = reshape(x, (b, c, p, p, hp, wp))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (b, c, hp * p, wp * p))


def init_states(net: NetworkParams, batch: int) -> list[NeuronState]:
    hf, wf = net.feature_hw
    return [
        NeuronState.zeros((batch, c, hf, wf), dtype=net.dtype, lmh=blk.neuron.is_lmh)
        for c, blk in zip(net.channels, net.blocks)
    ]


def forward_step(net: NetworkParams, states: list[NeuronState] | None,
                 frame: Tensor, capture: list | None = None
                 ) -> tuple[Tensor, list[NeuronState]]:
    """Advance every layer one timestep; returns (predicted next frame, states).

    When ``capture`` is a list it receives one (beta, gamma) array pair per
    spiking block for this step (zeros for circuit-less kinds), which is how
    the parameter-trace analysis observes the modulation dynamics.
    """
    if frame.shape[1:] != net.in_shape:
        raise ValueError(f"frame shape {frame.shape[1:]} does not match {net.in_shape}")
    if states is None:
        states = init_states(net, frame.shape[0])

    x = patchify(frame, net.patch)
    pad = (net.kernel - 1) // 2
    new_states: list[NeuronState] = []
    for blk, state in zip(net.blocks, states):
        h = conv2d(x, blk.conv_w, blk.conv_b, padding=pad)
        h = group_norm(h, net.norm_groups, blk.gn_gamma, blk.gn_beta)
        beta = gamma = None
        if blk.neuron.is_stc:
            if blk.neuron.modulation_override is not None:
                bv, gv = blk.neuron.modulation_override
                beta = Tensor(np.full(h.shape, bv, dtype=h.dtype))
                gamma = Tensor(np.full(h.shape, gv, dtype=h.dtype))
            else:
                beta, gamma = compute_modulation(state.s_prev, blk.circuit)
        if capture is not None:
            zeros = np.zeros(h.shape, dtype=h.data.dtype)
            capture.append((beta.data if beta is not None else zeros,
                            gamma.data if gamma is not None else zeros))
        s, new_state = neuron_step(state, h, blk.neuron, beta, gamma)
        new_states.append(new_state)
        x = s
    y = conv2d(x, net.final_w, net.final_b, padding=pad)
    return unpatchify(y, net.patch), new_states


def rollout_tensors(net: NetworkParams, plan: RolloutPlan, frames: np.ndarray,
                    targets: np.ndarray | None = None,
                    all_steps: bool = False) -> list[Tensor]:
    """Run the recurrent network and collect the T_out predicted frames.

    ``frames``: (B, T_in, C, H, W) ground-truth input phase. When
    ``plan.teacher_forcing`` and ``targets`` (B, T_out, C, H, W) are given,
    the output phase is fed ground truth; otherwise it self-feeds.
    ``all_steps=True`` returns every step's output (T_in + T_out - 1 frames,
    the input-phase next-frame predictions included) instead of just the
    output phase.
    """
    if frames.ndim != 5:
        raise ValueError("frames must be (B, T, C, H, W)")
    if frames.shape[1] < plan.t_in:
        raise ValueError(f"need {plan.t_in} input frames, got {frames.shape[1]}")
    frames = frames.astype(net.dtype, copy=False)
    states: list[NeuronState] | None = None
    preds: list[Tensor] = []
    pred: Tensor | None = None
    total_steps = plan.t_in + plan.t_out - 1
    for t in range(total_steps):
        if t < plan.t_in:
            inp = Tensor(frames[:, t])
        elif plan.teacher_forcing and targets is not None:
            inp = Tensor(targets[:, t - plan.t_in].astype(net.dtype, copy=False))
        else:
            inp = pred
        pred, states = forward_step(net, states, inp)
        if all_steps or t >= plan.t_in - 1:
            preds.append(pred)
    return preds


def rollout(net: NetworkParams, plan: RolloutPlan, frames: np.ndarray) -> np.ndarray:
    """Inference rollout: (B, T_in, C, H, W) -> (B, T_out, C, H, W)."""
    if frames.shape[0] == 0:
        raise ValueError("empty input batch")
    preds = rollout_tensors(net, plan, frames)
    return np.stack([p.data for p in preds], axis=1)
