from __future__ import annotations

import numpy as np
import pytest

from stcnet.autodiff import Tensor
from stcnet.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_into,
    save_checkpoint,
)
from stcnet.network import (
    RolloutPlan,
    build_network,
    forward_step,
    parameters,
    patchify,
    rollout,
    unpatchify,
)


def tiny_net(kind="stc_lif", seed=0, **kwargs):
    defaults = dict(in_shape=(1, 16, 16), channels=[8, 8, 8], patch=2,
                    norm_groups=4, circuit_groups=4,
                    rng=np.random.default_rng(seed))
    defaults.update(kwargs)
    return build_network(kind, **defaults)


# ---------------------------------------------------------------------------
# patchify


def test_patchify_paper_geometry():
    out = patchify(Tensor(np.zeros((1, 1, 64, 64))), 2)
    assert out.shape == (1, 4, 32, 32)


def test_patchify_unit_identity(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    assert patchify(x, 1) is x


@pytest.mark.parametrize("p", [1, 2, 4])
def test_patchify_roundtrip(rng, p):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    y = unpatchify(patchify(x, p), p)
    np.testing.assert_array_equal(y.data, x.data)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        patchify(Tensor(np.zeros((1, 1, 6, 6))), 4)


# ---------------------------------------------------------------------------
# forward step


def test_forward_output_shape(rng):
    net = tiny_net()
    frame = Tensor(rng.uniform(size=(3, 1, 16, 16)))
    pred, states = forward_step(net, None, frame)
    assert pred.shape == (3, 1, 16, 16)
    assert len(states) == 3


def test_quiescent_forward_is_zero():
    net = tiny_net()
    pred, _ = forward_step(net, None, Tensor(np.zeros((2, 1, 16, 16))))
    np.testing.assert_array_equal(pred.data, 0.0)


def test_disabled_circuits_match_if_network(rng):
    """STC-LIF with silenced circuits is the IF network, bit for bit."""
    stc = tiny_net("stc_lif", enabled_tc=False, enabled_sc=False)
    inet = tiny_net("if", alpha=0.0)
    # share the exact same weights
    for blk_s, blk_i in zip(stc.blocks, inet.blocks):
        blk_i.conv_w, blk_i.conv_b = blk_s.conv_w, blk_s.conv_b
        blk_i.gn_gamma, blk_i.gn_beta = blk_s.gn_gamma, blk_s.gn_beta
    inet.final_w, inet.final_b = stc.final_w, stc.final_b

    frames = rng.uniform(size=(2, 6, 1, 16, 16))
    st_s = st_i = None
    for t in range(6):
        f = Tensor(frames[:, t])
        pred_s, st_s = forward_step(stc, st_s, f)
        pred_i, st_i = forward_step(inet, st_i, f)
        np.testing.assert_array_equal(pred_s.data, pred_i.data)


def test_forward_rejects_wrong_frame_shape(rng):
    net = tiny_net()
    with pytest.raises(ValueError, match="frame shape"):
        forward_step(net, None, Tensor(np.zeros((1, 1, 8, 8))))


def test_modulation_override_pins_stc_to_lif(rng):
    """Fixed (alpha-1, -alpha) override turns the STC net into the LIF net."""
    alpha = 0.5
    stc = tiny_net("stc_lif")
    for blk in stc.blocks:
        blk.neuron.modulation_override = (alpha - 1.0, -alpha)
    lif = tiny_net("lif", alpha=alpha)
    for blk_s, blk_l in zip(stc.blocks, lif.blocks):
        blk_l.conv_w, blk_l.conv_b = blk_s.conv_w, blk_s.conv_b
        blk_l.gn_gamma, blk_l.gn_beta = blk_s.gn_gamma, blk_s.gn_beta
    lif.final_w, lif.final_b = stc.final_w, stc.final_b

    frames = rng.uniform(size=(2, 5, 1, 16, 16))
    st_s = st_l = None
    for t in range(5):
        f = Tensor(frames[:, t])
        pred_s, st_s = forward_step(stc, st_s, f)
        pred_l, st_l = forward_step(lif, st_l, f)
        np.testing.assert_array_equal(pred_s.data, pred_l.data)


def test_spike_dependencies_match_recurrence(rng):
    """Layer spikes depend on current input, own previous spikes (through the
    circuit), and own previous potential; nothing else."""
    net = tiny_net("stc_lif", seed=3)
    frame = Tensor(rng.uniform(size=(1, 1, 16, 16)))
    warm = rng.uniform(size=(1, 1, 16, 16))

    # warm up two steps so states are nontrivial
    _, states = forward_step(net, None, Tensor(warm))
    _, states = forward_step(net, states, frame)
    pred_ref, _ = forward_step(net, states, frame)

    # zeroing the previous spikes changes the output (circuit pathway)
    st = [type(s)(v=s.v, s_prev=Tensor(np.zeros_like(s.s_prev.data))) for s in states]
    pred_nospk, _ = forward_step(net, st, frame)
    assert not np.array_equal(pred_nospk.data, pred_ref.data)

    # zeroing the previous potential changes the output (membrane pathway)
    st = [type(s)(v=Tensor(np.zeros_like(s.v.data)), s_prev=s.s_prev) for s in states]
    pred_nov, _ = forward_step(net, st, frame)
    assert not np.array_equal(pred_nov.data, pred_ref.data)

    # identical state + identical frame -> identical output (nothing hidden)
    pred_again, _ = forward_step(net, states, frame)
    np.testing.assert_array_equal(pred_again.data, pred_ref.data)


# ---------------------------------------------------------------------------
# rollout


def test_rollout_shapes_mmnist_plan(rng):
    net = tiny_net(in_shape=(1, 16, 16))
    frames = rng.uniform(size=(2, 10, 1, 16, 16))
    out = rollout(net, RolloutPlan(10, 10), frames)
    assert out.shape == (2, 10, 1, 16, 16)


@pytest.mark.parametrize("t_out", [20, 40])
def test_rollout_variable_length_without_retraining(rng, t_out):
    net = tiny_net()
    frames = rng.uniform(size=(1, 10, 1, 16, 16))
    out = rollout(net, RolloutPlan(10, t_out), frames)
    assert out.shape == (1, t_out, 1, 16, 16)


def test_rollout_prefix_property(rng):
    net = tiny_net()
    frames = rng.uniform(size=(2, 4, 1, 16, 16))
    short = rollout(net, RolloutPlan(4, 4), frames)
    long = rollout(net, RolloutPlan(4, 8), frames)
    np.testing.assert_array_equal(long[:, :4], short)


def test_rollout_deterministic(rng):
    net = tiny_net()
    frames = rng.uniform(size=(2, 4, 1, 16, 16))
    a = rollout(net, RolloutPlan(4, 4), frames)
    b = rollout(net, RolloutPlan(4, 4), frames)
    np.testing.assert_array_equal(a, b)


def test_rollout_rejects_empty_batch():
    net = tiny_net()
    with pytest.raises(ValueError, match="empty"):
        rollout(net, RolloutPlan(2, 2), np.zeros((0, 4, 1, 16, 16)))


def test_rollout_statefulness_early_frame_matters(rng):
    """Perturbing an early input frame changes later predictions (STC)."""
    net = tiny_net("stc_lif")
    frames = rng.uniform(size=(1, 4, 1, 16, 16))
    base = rollout(net, RolloutPlan(4, 4), frames)
    bumped = frames.copy()
    bumped[0, 0] += 0.25
    out = rollout(net, RolloutPlan(4, 4), bumped)
    assert not np.array_equal(out, base)


def test_plan_validation():
    with pytest.raises(ValueError, match=">= 1"):
        RolloutPlan(0, 4)


# ---------------------------------------------------------------------------
# parameters and checkpointing


def test_parameter_enumeration_by_kind():
    counts = {}
    for kind in ("if", "lif", "plif", "lmh", "stc_lif", "stc_plif", "stc_lmh"):
        counts[kind] = len(parameters(tiny_net(kind)))
    base = counts["lif"]
    assert counts["if"] == base
    assert counts["plif"] == base + 3          # one alpha per spiking block
    assert counts["lmh"] == base + 12          # four scalars per block
    assert counts["stc_lif"] == base + 12      # w/b for two circuits per block
    assert counts["stc_plif"] == base + 15
    assert counts["stc_lmh"] == base + 24


def test_checkpoint_roundtrip(tmp_path, rng):
    net = tiny_net("stc_plif", seed=7)
    params = parameters(net)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name, tensor in params.items():
        np.testing.assert_array_equal(loaded[name], tensor.data)

    # loading into a same-shape network reproduces forward outputs exactly
    other = tiny_net("stc_plif", seed=99)
    frames = rng.uniform(size=(1, 4, 1, 16, 16))
    load_into(parameters(other), loaded)
    np.testing.assert_array_equal(
        rollout(other, RolloutPlan(4, 2), frames),
        rollout(net, RolloutPlan(4, 2), frames))


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    net = tiny_net()
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, parameters(net))
    bigger = tiny_net(channels=[12, 12, 12], norm_groups=4, circuit_groups=4)
    with pytest.raises(CheckpointError, match="shape"):
        load_into(parameters(bigger), load_checkpoint(path))


def test_checkpoint_truncation_detected(tmp_path):
    net = tiny_net()
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, parameters(net))
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "net.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
