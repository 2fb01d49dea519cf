"""Executable oracles for the closed-form dynamics, gradient flow, and costs.

The unroll oracles evaluate the T-step closed forms of the membrane potential
directly from a recorded trace and must match step simulation to ~1e-9 at
64-bit:

* LIF:  v[T] = a^T v[0] + sum_i a^(T-i) (1-a) x[i] - vth * sum_i a^(T-i) s[i]
* STC:  v[T] = v[0] prod(1+beta) + sum_i (1+gamma_i) x_i prod_suffix(1+beta)
               - vth * sum_i s_i prod_suffix(1+beta)

``gradient_flow_trace`` evaluates the per-neuron temporal gradient product
d v[T] / d v[0]; in the deep-subthreshold regime it collapses to a^T for LIF
(vanishing) and to ~1 for STC with beta = 0 (preserved).

Cost accounting counts exact learnable scalars and multiply-accumulate FLOPs
per timestep (batch size 1), totalled over t_in + t_out timesteps. Elementwise
neuron/norm work is itemized separately from convolution MACs, and each
enabled circuit pathway is its own item so ablation differences are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import SurrogateConfig, Tape, Tensor, sum_all
from .circuits import CircuitParams, compute_modulation
from .metrics import reported_mse
from .network import NetworkParams, RolloutPlan, forward_step, rollout
from .neurons import NeuronParams, NeuronState, lif_step, stc_lif_step

__all__ = [
    "UnrollTrace",
    "record_lif_trace",
    "record_stc_trace",
    "record_stc_circuit_trace",
    "lif_unroll_oracle",
    "stc_unroll_oracle",
    "gradient_flow_trace",
    "v_grad_autodiff",
    "CostItem",
    "CostReport",
    "count_params_flops",
    "shuffle_probe",
    "param_trace",
]


# ---------------------------------------------------------------------------
# unroll traces and oracles


@dataclass
class UnrollTrace:
    """Per-step records of one layer's neuron iterates over T steps."""

    v0: np.ndarray
    x: np.ndarray       # (T, ...) input currents
    beta: np.ndarray    # (T, ...) temporal modulation (zeros for plain LIF)
    gamma: np.ndarray   # (T, ...) spatial modulation
    m: np.ndarray       # (T, ...) pre-reset potentials
    s: np.ndarray       # (T, ...) binary spikes
    v: np.ndarray       # (T, ...) post-reset potentials

    def __post_init__(self):
        t = len(self.x)
        for name in ("beta", "gamma", "m", "s", "v"):
            if len(getattr(self, name)) != t:
                raise ValueError(f"trace field {name} has length mismatch")
        if not np.all((self.s == 0.0) | (self.s == 1.0)):
            raise ValueError("trace spikes must be binary")

    @property
    def steps(self) -> int:
        return len(self.x)


def record_lif_trace(x_seq: np.ndarray, alpha: float, vth: float,
                     v0: np.ndarray | None = None) -> UnrollTrace:
    """Simulate LIF over (T, ...) inputs, recording every iterate."""
    params = NeuronParams(kind="lif", alpha=alpha, vth=vth)
    shape = x_seq.shape[1:]
    v0 = np.zeros(shape) if v0 is None else np.asarray(v0, dtype=np.float64)
    state = NeuronState(v=Tensor(v0.copy()), s_prev=Tensor(np.zeros(shape)))
    m_l, s_l, v_l = [], [], []
    for x in x_seq:
        s, state = lif_step(state, Tensor(np.asarray(x, dtype=np.float64)), params)
        m_l.append(state.v.data + vth * s.data)
        s_l.append(s.data)
        v_l.append(state.v.data)
    zeros = np.zeros_like(x_seq)
    return UnrollTrace(v0=v0, x=np.asarray(x_seq, dtype=np.float64), beta=zeros,
                       gamma=zeros, m=np.array(m_l), s=np.array(s_l), v=np.array(v_l))


def record_stc_trace(x_seq: np.ndarray, beta_seq: np.ndarray, gamma_seq: np.ndarray,
                     vth: float, v0: np.ndarray | None = None) -> UnrollTrace:
    """Simulate STC-LIF with prescribed modulation sequences."""
    params = NeuronParams(kind="stc_lif", vth=vth)
    shape = x_seq.shape[1:]
    v0 = np.zeros(shape) if v0 is None else np.asarray(v0, dtype=np.float64)
    state = NeuronState(v=Tensor(v0.copy()), s_prev=Tensor(np.zeros(shape)))
    m_l, s_l, v_l = [], [], []
    for x, b, g in zip(x_seq, beta_seq, gamma_seq):
        s, state = stc_lif_step(state, Tensor(np.asarray(x, dtype=np.float64)),
                                Tensor(np.asarray(b, dtype=np.float64)),
                                Tensor(np.asarray(g, dtype=np.float64)), params)
        m_l.append(state.v.data + vth * s.data)
        s_l.append(s.data)
        v_l.append(state.v.data)
    return UnrollTrace(v0=v0, x=np.asarray(x_seq, dtype=np.float64),
                       beta=np.asarray(beta_seq, dtype=np.float64),
                       gamma=np.asarray(gamma_seq, dtype=np.float64),
                       m=np.array(m_l), s=np.array(s_l), v=np.array(v_l))


def record_stc_circuit_trace(x_seq: np.ndarray, circuit: CircuitParams, vth: float,
                             v0: np.ndarray | None = None) -> UnrollTrace:
    """Simulate STC-LIF with a live circuit driven by the layer's own spikes.

    ``x_seq`` must be (T, B, C, H, W) so the circuit convolution applies.
    """
    params = NeuronParams(kind="stc_lif", vth=vth)
    shape = x_seq.shape[1:]
    v0 = np.zeros(shape) if v0 is None else np.asarray(v0, dtype=np.float64)
    state = NeuronState(v=Tensor(v0.copy()), s_prev=Tensor(np.zeros(shape)))
    b_l, g_l, m_l, s_l, v_l = [], [], [], [], []
    for x in x_seq:
        beta, gamma = compute_modulation(state.s_prev, circuit)
        s, state = stc_lif_step(state, Tensor(np.asarray(x, dtype=np.float64)),
                                beta, gamma, params)
        b_l.append(beta.data)
        g_l.append(gamma.data)
        m_l.append(state.v.data + vth * s.data)
        s_l.append(s.data)
        v_l.append(state.v.data)
    return UnrollTrace(v0=v0, x=np.asarray(x_seq, dtype=np.float64),
                       beta=np.array(b_l), gamma=np.array(g_l),
                       m=np.array(m_l), s=np.array(s_l), v=np.array(v_l))


def lif_unroll_oracle(trace: UnrollTrace, alpha: float, vth: float) -> np.ndarray:
    """Closed-form v[T] from the trace's inputs and spikes (geometric decay)."""
    t = trace.steps
    v_pred = (alpha ** t) * trace.v0
    for i in range(t):
        w = alpha ** (t - 1 - i)
        v_pred = v_pred + w * (1.0 - alpha) * trace.x[i] - vth * w * trace.s[i]
    return v_pred


def stc_unroll_oracle(trace: UnrollTrace, vth: float) -> np.ndarray:
    """Closed-form v[T] with running (1+beta) products over the trace."""
    t = trace.steps
    one_plus_b = 1.0 + trace.beta
    # suffix[i] = prod_{j>i} (1+beta[j]); suffix[T-1] = 1
    suffix = np.ones_like(trace.x)
    for i in range(t - 2, -1, -1):
        suffix[i] = suffix[i + 1] * one_plus_b[i + 1]
    v_pred = trace.v0 * suffix[0] * one_plus_b[0]
    for i in range(t):
        v_pred = v_pred + (1.0 + trace.gamma[i]) * trace.x[i] * suffix[i] \
            - vth * trace.s[i] * suffix[i]
    return v_pred


def gradient_flow_trace(trace: UnrollTrace, vth: float, cfg: SurrogateConfig,
                        model: str, alpha: float | None = None) -> np.ndarray:
    """Per-neuron temporal gradient product d v[T] / d v[0] along the trace.

    ``model='stc'``: prod (1 - vth H'(m - vth)) (1 + beta);
    ``model='lif'``: prod alpha (1 - vth H'(m - vth)).
    """
    if model not in ("lif", "stc"):
        raise ValueError(f"model must be 'lif' or 'stc', got {model!r}")
    if model == "lif" and alpha is None:
        raise ValueError("LIF gradient flow needs alpha")
    product = np.ones_like(trace.v0)
    for i in range(trace.steps):
        reset_term = 1.0 - vth * cfg.derivative(trace.m[i] - vth)
        if model == "stc":
            product = product * reset_term * (1.0 + trace.beta[i])
        else:
            product = product * reset_term * alpha
    return product


def v_grad_autodiff(x_seq: np.ndarray, vth: float, cfg: SurrogateConfig, model: str,
                    alpha: float | None = None, beta_seq: np.ndarray | None = None,
                    gamma_seq: np.ndarray | None = None,
                    v0: np.ndarray | None = None) -> np.ndarray:
    """BPTT gradient of sum(v[T]) w.r.t. v[0], for cross-checking the product.

    Modulation inputs are constants (the circuit input is treated as detached),
    so the only temporal path is through the membrane potential, exactly the
    quantity the closed-form product describes.
    """
    shape = x_seq.shape[1:]
    v0 = np.zeros(shape) if v0 is None else np.asarray(v0, dtype=np.float64)
    params = NeuronParams(kind="stc_lif" if model == "stc" else "lif",
                          alpha=alpha if alpha is not None else 0.5,
                          vth=vth, surrogate=cfg)
    with Tape() as tape:
        v_leaf = Tensor(v0.copy(), requires_grad=True)
        state = NeuronState(v=v_leaf, s_prev=Tensor(np.zeros(shape)))
        for i, x in enumerate(x_seq):
            xt = Tensor(np.asarray(x, dtype=np.float64))
            if model == "stc":
                _, state = stc_lif_step(state, xt, Tensor(beta_seq[i]),
                                        Tensor(gamma_seq[i]), params)
            else:
                _, state = lif_step(state, xt, params)
        loss = sum_all(state.v)
        grads = tape.backward(loss)
    return grads.get(v_leaf, np.zeros(shape))


# ---------------------------------------------------------------------------
# parameter / FLOP accounting


@dataclass
class CostItem:
    name: str
    params: int
    flops_per_step: int


@dataclass
class CostReport:
    items: list[CostItem] = field(default_factory=list)
    timesteps: int = 1

    @property
    def params_total(self) -> int:
        return sum(i.params for i in self.items)

    @property
    def flops_per_step_total(self) -> int:
        return sum(i.flops_per_step for i in self.items)

    @property
    def flops_total(self) -> int:
        return self.flops_per_step_total * self.timesteps

    def subtotal(self, prefix: str) -> tuple[int, int]:
        ps = sum(i.params for i in self.items if i.name.startswith(prefix))
        fl = sum(i.flops_per_step for i in self.items if i.name.startswith(prefix))
        return ps, fl


# elementwise ops per neuron per step, by kind (modulation applies are
# attributed to the circuit items so ablation differences stay exact)
_NEURON_OPS = {"if": 5, "lif": 6, "plif": 6, "lmh": 10,
               "stc_lif": 6, "stc_plif": 6, "stc_lmh": 10}


def count_params_flops(net: NetworkParams, plan: RolloutPlan) -> CostReport:
    """Exact parameter counts and MAC-convention FLOPs, itemized per module."""
    hf, wf = net.feature_hw
    hw = hf * wf
    report = CostReport(timesteps=plan.t_in + plan.t_out)
    k2 = net.kernel * net.kernel

    def conv_item(name: str, cout: int, cin: int, k_sq: int, groups: int = 1):
        params = cout * (cin // groups) * k_sq + cout
        flops = cout * (cin // groups) * k_sq * hw + cout * hw
        report.items.append(CostItem(name, params, flops))

    prev = net.in_shape[0] * net.patch * net.patch
    for i, (blk, c) in enumerate(zip(net.blocks, net.channels)):
        conv_item(f"block{i}.conv", c, prev, k2)
        report.items.append(CostItem(f"block{i}.norm", 2 * c, 4 * c * hw))
        n_scalars = sum(
            1 for attr in ("alpha_raw", "mu_d", "mu_s", "lambda_d", "lambda_s")
            if isinstance(getattr(blk.neuron, attr), Tensor))
        report.items.append(CostItem(f"block{i}.neuron", n_scalars,
                                     _NEURON_OPS[blk.neuron.kind] * c * hw))
        circ = blk.circuit
        if circ is not None:
            ck2 = circ.conv_kernel * circ.conv_kernel
            for tag, enabled in (("tc", circ.enabled_tc), ("sc", circ.enabled_sc)):
                if not enabled:
                    continue
                conv_params = c * (c // circ.conv_groups) * ck2 + c
                conv_flops = c * (c // circ.conv_groups) * ck2 * hw + c * hw
                # + tanh + the (1+factor) add and multiply into the neuron
                report.items.append(CostItem(f"block{i}.circuit.{tag}", conv_params,
                                             conv_flops + 3 * c * hw))
        prev = c
    conv_item("final.conv", net.in_shape[0] * net.patch * net.patch, prev, k2)
    return report


# ---------------------------------------------------------------------------
# behavioural probes


def shuffle_probe(net: NetworkParams, plan: RolloutPlan, frames: np.ndarray,
                  seed: int, permutation: np.ndarray | None = None) -> dict:
    """Rollout MSE with ordered vs time-shuffled input frames.

    ``frames`` is (N, T_in + T_out, C, H, W); the permutation reorders only the
    input phase. Returns mse_ordered, mse_shuffled, gap_ratio and the
    permutation used.
    """
    if plan.t_in < 2:
        raise ValueError("shuffle probe needs t_in >= 2")
    inputs = frames[:, :plan.t_in]
    targets = frames[:, plan.t_in:plan.t_in + plan.t_out]
    if permutation is None:
        rng = np.random.default_rng(seed)
        permutation = rng.permutation(plan.t_in)
    permutation = np.asarray(permutation)

    pred_ord = np.clip(rollout(net, plan, inputs), 0.0, 1.0)
    pred_shuf = np.clip(rollout(net, plan, inputs[:, permutation]), 0.0, 1.0)
    mse_ord = reported_mse(pred_ord, targets)
    mse_shuf = reported_mse(pred_shuf, targets)
    return {
        "mse_ordered": mse_ord,
        "mse_shuffled": mse_shuf,
        "gap_ratio": (mse_shuf - mse_ord) / mse_ord,
        "permutation": permutation,
    }


def param_trace(net: NetworkParams, frames: np.ndarray, layer: int = 0,
                index: tuple[int, int, int] = (0, 0, 0)) -> list[dict]:
    """Record the modulation factors one neuron sees at every rollout step.

    ``index`` is (channel, row, col) within the chosen layer's feature map of
    sample 0. Baseline kinds report constant zeros, which is the point of the
    comparison: their effective parameters do not move at inference.
    """
    if not 0 <= layer < len(net.blocks):
        raise ValueError(f"layer {layer} out of range")
    blk = net.blocks[layer]
    alpha_val = None
    if isinstance(blk.neuron.alpha_raw, Tensor):
        alpha_val = float(1.0 / (1.0 + np.exp(-blk.neuron.alpha_raw.data)))
    elif blk.neuron.kind in ("lif", "if"):
        alpha_val = blk.neuron.alpha

    c, i, j = index
    rows = []
    states = None
    for t in range(frames.shape[1]):
        capture: list = []
        _, states = forward_step(net, states, Tensor(frames[:, t].astype(net.dtype)),
                                 capture=capture)
        beta, gamma = capture[layer]
        rows.append({
            "step": t,
            "layer": layer,
            "beta": float(beta[0, c, i, j]),
            "gamma": float(gamma[0, c, i, j]),
            "alpha": alpha_val,
        })
    return rows
