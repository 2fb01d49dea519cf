"""Seeded BPTT training loop with CSV metric logging and best-checkpoint retention.

One epoch = one shuffled pass over the training split; gradients come from a
fresh tape per minibatch, the learning rate follows the warmup + cosine
schedule evaluated at (epoch + 1), and evaluation runs after every epoch on a
parameter snapshot. The checkpoint with the best eval reported-MSE is kept
(train MSE stands in when the test split is empty).

Everything downstream of the run seed is deterministic for a single worker:
two runs with the same config produce byte-identical metrics CSVs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, mul, sum_all
from .checkpoint import save_checkpoint
from .config import RunConfig, save_resolved
from .data import BlobSpec, SequenceBatch, generate_moving_blobs, load_npy
from .metrics import frame_metrics, mse_objective
from .network import (
    NetworkParams,
    RolloutPlan,
    build_network,
    parameters,
    rollout,
    rollout_tensors,
)
from .optim import OptimizerState, ScheduleConfig, lr_at, optimizer_step

__all__ = [
    "DivergenceError",
    "TrainResult",
    "CSV_HEADER",
    "build_from_config",
    "dataset_from_config",
    "train",
]

CSV_HEADER = ["epoch", "phase", "loss", "mse", "mae", "ssim", "psnr", "lr"]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainResult:
    net: NetworkParams
    history: list[dict] = field(default_factory=list)
    best_mse: float = float("inf")
    best_epoch: int = -1
    csv_path: Path | None = None
    ckpt_path: Path | None = None


def build_from_config(cfg: RunConfig) -> NetworkParams:
    from .autodiff import SurrogateConfig

    rng = np.random.default_rng(np.random.SeedSequence(cfg.run.seed, spawn_key=(0,)))
    m, c, a = cfg.model, cfg.circuit, cfg.arch
    return build_network(
        m.kind,
        in_shape=(a.in_channels, a.height, a.width),
        channels=a.channels,
        patch=a.patch,
        kernel=a.kernel,
        norm_groups=a.norm_groups,
        alpha=m.alpha,
        vth=m.vth,
        surrogate=SurrogateConfig(width=m.surrogate_width),
        circuit_variant=c.variant,
        circuit_groups=c.groups,
        circuit_kernel=c.kernel,
        enabled_tc=c.enable_tc,
        enabled_sc=c.enable_sc,
        detach_input=c.detach,
        lmh_init=(m.mu_d, m.mu_s, m.lambda_d, m.lambda_s),
        rng=rng,
        dtype=cfg.dtype,
    )


def dataset_from_config(cfg: RunConfig) -> SequenceBatch:
    d = cfg.data
    if d.source == "blobs":
        spec = BlobSpec(
            canvas=(d.canvas, d.canvas),
            n_objects=d.n_objects,
            object_size=d.object_size,
            speed_range=(d.speed_min, d.speed_max),
            t_total=d.t_in + d.t_out,
            seed=cfg.data_seed,
            intensity=d.intensity,
            n_train=d.n_train,
            n_test=d.n_test,
        )
        return generate_moving_blobs(spec)
    train_arr = load_npy(d.train_path, scale_uint8=True)
    test_arr = load_npy(d.test_path, scale_uint8=True)
    for name, arr in (("train", train_arr), ("test", test_arr)):
        if arr.ndim != 5:
            raise ValueError(f"{name} NPY must be rank 5 (N,T,C,H,W), got {arr.ndim}")
    frames = np.concatenate([train_arr, test_arr], axis=0)
    return SequenceBatch(frames=frames, n_train=len(train_arr), n_test=len(test_arr))


def _batch_loss(preds: list[Tensor], targets: np.ndarray, t_in: int,
                input_phase_loss: bool, frames: np.ndarray | None):
    """Element-mean squared error over predicted frames; returns (loss, sq_sum).

    ``preds`` holds every step output when input-phase loss is on, otherwise
    just the T_out output-phase predictions. ``sq_sum`` is the raw squared
    error total of the output phase only, for reported-MSE bookkeeping.
    """
    out_preds = preds[-targets.shape[1]:]
    total = None
    for k, p in enumerate(out_preds):
        d = p - Tensor(targets[:, k].astype(p.dtype, copy=False))
        se = sum_all(mul(d, d))
        total = se if total is None else total + se
    sq_sum = float(total.data)
    n_elems = targets.size
    if input_phase_loss and t_in > 1:
        extra = None
        for k in range(t_in - 1):
            d = preds[k] - Tensor(frames[:, k + 1].astype(preds[k].dtype, copy=False))
            se = sum_all(mul(d, d))
            extra = se if extra is None else extra + se
        total = total + extra
        n_elems += targets[:, 0].size * (t_in - 1)
    return mul(total, 1.0 / n_elems), sq_sum


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _write_row(writer, fh, row: dict) -> None:
    writer.writerow([row["epoch"], row["phase"], _fmt(row.get("loss")),
                     _fmt(row.get("mse")), _fmt(row.get("mae")),
                     _fmt(row.get("ssim")), _fmt(row.get("psnr")), _fmt(row.get("lr"))])
    fh.flush()


def _evaluate(net: NetworkParams, plan: RolloutPlan, frames: np.ndarray,
              batch_size: int) -> dict:
    preds = []
    for start in range(0, len(frames), batch_size):
        chunk = frames[start:start + batch_size]
        preds.append(rollout(net, plan, chunk[:, :plan.t_in]))
    pred = np.concatenate(preds, axis=0)
    target = frames[:, plan.t_in:plan.t_in + plan.t_out]
    out = frame_metrics(pred, target)
    out["loss"] = mse_objective(np.clip(pred, 0.0, 1.0), np.clip(target, 0.0, 1.0))
    return out


def train(cfg: RunConfig, data: SequenceBatch | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run the configured training; raises DivergenceError on non-finite math.

    ``out_dir=None`` keeps everything in memory; otherwise metrics.csv,
    best.ckpt and config.resolved.toml are written under ``out_dir`` (the
    best checkpoint survives a later divergence).
    """
    if data is None:
        data = dataset_from_config(cfg)
    net = build_from_config(cfg)
    params = parameters(net)
    plan = RolloutPlan(cfg.data.t_in, cfg.data.t_out,
                       teacher_forcing=cfg.optim.teacher_forcing)
    tf_total = plan.t_in + plan.t_out
    if data.frames.shape[1] < tf_total:
        raise ValueError(f"sequences have {data.frames.shape[1]} frames, need {tf_total}")

    o = cfg.optim
    opt = OptimizerState(kind=o.kind, beta1=o.beta1, beta2=o.beta2,
                         momentum=o.momentum, weight_decay=o.weight_decay)
    sched = ScheduleConfig(lr_init=cfg.schedule.lr_init, lr_final=cfg.schedule.lr_final,
                           warmup_epochs=cfg.schedule.warmup_epochs,
                           total_epochs=o.epochs)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.run.seed, spawn_key=(1,)))

    result = TrainResult(net=net)
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_resolved(cfg, out_dir)
        result.csv_path = out_dir / "metrics.csv"
        result.ckpt_path = out_dir / "best.ckpt"
        fh = open(result.csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)

    train_frames = data.train
    test_frames = data.test
    n_train = len(train_frames)
    if n_train == 0:
        raise ValueError("training split is empty")
    chw = int(np.prod(data.frames.shape[2:]))

    def emit(row: dict) -> None:
        result.history.append(row)
        if writer is not None:
            _write_row(writer, fh, row)

    try:
        for epoch in range(o.epochs):
            opt.lr = lr_at(sched, epoch + 1)
            perm = shuffle_rng.permutation(n_train)
            sq_total = 0.0
            n_frames_seen = 0
            for start in range(0, n_train, o.batch_size):
                idx = perm[start:start + o.batch_size]
                batch = train_frames[idx]
                inputs = batch[:, :plan.t_in]
                targets = batch[:, plan.t_in:tf_total]
                try:
                    with Tape() as tape:
                        preds = rollout_tensors(net, plan, inputs, targets=targets,
                                                all_steps=o.input_phase_loss)
                        loss, sq_sum = _batch_loss(preds, targets, plan.t_in,
                                                   o.input_phase_loss, batch)
                    grads = tape.backward(loss)
                    for leaf in grads:
                        leaf.grad = None
                    named = {name: grads.get(t) for name, t in params.items()}
                    optimizer_step(opt, params, named)
                except (NonFiniteError, FloatingPointError) as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}") from exc
                sq_total += sq_sum
                n_frames_seen += len(idx) * plan.t_out
            train_mse = sq_total / n_frames_seen
            emit({"epoch": epoch, "phase": "train", "loss": train_mse / chw,
                  "mse": train_mse, "lr": opt.lr})

            if len(test_frames):
                try:
                    ev = _evaluate(net, plan, test_frames, o.batch_size)
                except NonFiniteError as exc:
                    raise DivergenceError(f"epoch {epoch} (eval): {exc}") from exc
                emit({"epoch": epoch, "phase": "eval", "loss": ev["loss"],
                      "mse": ev["mse"], "mae": ev["mae"], "ssim": ev["ssim"],
                      "psnr": ev["psnr"], "lr": opt.lr})
                current = ev["mse"]
            else:
                current = train_mse
            if current < result.best_mse:
                result.best_mse = current
                result.best_epoch = epoch
                if result.ckpt_path is not None:
                    save_checkpoint(result.ckpt_path, params)
    finally:
        if fh is not None:
            fh.close()
    return result
