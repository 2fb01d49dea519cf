"""Command-line entry point: train, eval, analyze, presets.

Every artifact-producing command writes a resolved snapshot of its inputs
beside its outputs and never writes outside its output directory. Relative
output directories resolve under $STCNET_OUT_ROOT when that is set.

Exit codes: 0 success, 2 bad config or incompatible artifact, 3 training
divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import (
    count_params_flops,
    gradient_flow_trace,
    lif_unroll_oracle,
    param_trace,
    record_lif_trace,
    record_stc_circuit_trace,
    record_stc_trace,
    shuffle_probe,
    stc_unroll_oracle,
    v_grad_autodiff,
)
from .autodiff import SurrogateConfig
from .checkpoint import CheckpointError, load_checkpoint, load_into
from .circuits import init_circuit
from .config import ConfigError, RunConfig, _fmt_value, load_config, save_resolved
from .data import NpyFormatError, save_npy
from .metrics import frame_metrics, per_frame_metrics
from .network import RolloutPlan, parameters, rollout
from .train import DivergenceError, build_from_config, dataset_from_config, train

OUT_ROOT_ENV = "STCNET_OUT_ROOT"

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _preset_path(name: str):
    path = resources.files("stcnet").joinpath("presets", f"{name}.toml")
    if not path.is_file():
        available = sorted(p.name[:-5] for p in resources.files("stcnet")
                           .joinpath("presets").iterdir() if p.name.endswith(".toml"))
        raise ConfigError(f"unknown preset {name!r}; available: {available}")
    return path


def _load_cfg(args) -> RunConfig:
    if getattr(args, "preset", None):
        with resources.as_file(_preset_path(args.preset)) as p:
            return load_config(p)
    if not args.config:
        raise ConfigError("either --config or --preset is required")
    return load_config(args.config)


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    raw = args.out or (cfg.run.out_dir if cfg else "analysis")
    path = Path(raw)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_long_csv(path: Path, header: list[str], rows: list[list]) -> None:
    """Plot-ready melt: one (row, key, value) record per cell."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "key", "value"])
        for i, row in enumerate(rows):
            for key, value in zip(header, row):
                w.writerow([i, key, value])


def _write_args_snapshot(out: Path, args: argparse.Namespace, keys: list[str]) -> None:
    lines = ["[analysis]"] + [f"{k} = {_fmt_value(getattr(args, k))}" for k in keys]
    (out / "args.resolved.toml").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    result = train(cfg, out_dir=out)
    print(f"trained {cfg.model.kind}: best mse {result.best_mse:.6g} "
          f"at epoch {result.best_epoch}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    t_out = args.t_out or cfg.data.t_out
    if args.t_out:
        cfg.data.t_out = args.t_out  # reflected in the resolved snapshot
    data = dataset_from_config(cfg)
    net = build_from_config(cfg)
    params = parameters(net)
    load_into(params, load_checkpoint(args.checkpoint))

    frames = data.test if data.n_test else data.train
    plan = RolloutPlan(cfg.data.t_in, t_out)
    pred = rollout(net, plan, frames[:, :plan.t_in])
    avail = min(t_out, frames.shape[1] - plan.t_in)
    if avail < 1:
        raise ConfigError(f"no target frames beyond t_in={plan.t_in} to score")
    target = frames[:, plan.t_in:plan.t_in + avail]

    pf = per_frame_metrics(pred[:, :avail], target)
    agg = frame_metrics(pred[:, :avail], target)
    header = ["metric"] + [f"Frame{i + 1}" for i in range(avail)] + ["mean"]
    rows = [[m] + [repr(float(v)) for v in pf[m]] + [repr(agg[m])]
            for m in ("mse", "mae", "ssim", "psnr")]
    _write_csv(out / "eval_metrics.csv", header, rows)
    save_resolved(cfg, out)
    if args.dump_frames:
        save_npy(out / "predictions.npy", pred)
    print(f"eval over {avail} frames: mse {agg['mse']:.6g} mae {agg['mae']:.6g} "
          f"ssim {agg['ssim']:.4f} psnr {agg['psnr']:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def _analyze_unroll(args, out: Path) -> None:
    rows = []
    worst = 0.0
    for run in range(args.runs):
        rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(run,)))
        t = int(rng.integers(1, args.T + 1))
        vth = float(rng.uniform(0.5, 2.0))
        if args.model == "lif":
            alpha = float(rng.uniform(0.05, 0.95))
            x = rng.normal(0.0, 1.0, size=(t, 16))
            trace = record_lif_trace(x, alpha, vth, v0=rng.normal(0.0, 1.0, 16))
            err = float(np.max(np.abs(lif_unroll_oracle(trace, alpha, vth) - trace.v[-1])))
            rows.append([run, "lif", t, repr(alpha), repr(vth), repr(err)])
        else:
            # mean-positive drive keeps potentials reset-bounded, the regime
            # where the closed form holds to 1e-9 absolute at long horizons
            circuit = init_circuit(4, "group_conv", groups=2, kernel=3, rng=rng)
            x = rng.normal(0.5, 0.5, size=(t, 1, 4, 5, 5))
            trace = record_stc_circuit_trace(x, circuit, vth,
                                             v0=rng.normal(0.0, 0.5, (1, 4, 5, 5)))
            err = float(np.max(np.abs(stc_unroll_oracle(trace, vth) - trace.v[-1])))
            rows.append([run, "stc", t, "", repr(vth), repr(err)])
        worst = max(worst, err)
    header = ["run", "model", "T", "alpha", "vth", "max_abs_err"]
    _write_csv(out / "unroll.csv", header, rows)
    if args.long_csv:
        _write_long_csv(out / "unroll_long.csv", header, rows)
    print(f"unroll oracle ({args.model}): {args.runs} runs, worst |closed-simulated| "
          f"= {worst:.3e}")


def _analyze_gradflow(args, out: Path) -> None:
    cfg = SurrogateConfig(width=args.width)
    rng = np.random.default_rng(args.seed)
    n = 8
    if args.regime == "subthreshold":
        vth = 1e10
        x = np.zeros((args.T, n))
    else:
        vth = args.vth
        x = rng.normal(0.0, 1.0, size=(args.T, n))
    if args.model == "lif":
        trace = record_lif_trace(x, args.alpha, vth)
        product = gradient_flow_trace(trace, vth, cfg, "lif", alpha=args.alpha)
        auto = v_grad_autodiff(x, vth, cfg, "lif", alpha=args.alpha)
    else:
        beta = np.zeros_like(x)
        gamma = np.zeros_like(x)
        trace = record_stc_trace(x, beta, gamma, vth)
        product = gradient_flow_trace(trace, vth, cfg, "stc")
        auto = v_grad_autodiff(x, vth, cfg, "stc", beta_seq=beta, gamma_seq=gamma)
    header = ["neuron", "closed_form", "autodiff", "rel_err"]
    rows = []
    for i in range(n):
        rel = abs(product[i] - auto[i]) / max(abs(auto[i]), 1e-300)
        rows.append([i, repr(float(product[i])), repr(float(auto[i])), repr(float(rel))])
    _write_csv(out / "gradflow.csv", header, rows)
    if args.long_csv:
        _write_long_csv(out / "gradflow_long.csv", header, rows)
    print(f"gradient flow ({args.model}, {args.regime}): mean product "
          f"{float(np.mean(product)):.6e}")


def _cost_variants(cfg: RunConfig):
    """(label, config) pairs: full STC, each circuit ablated, LIF baseline."""
    import copy

    base_kind = {"stc_lif": "lif", "stc_plif": "plif", "stc_lmh": "lmh"}
    variants = [("full", cfg)]
    if cfg.model.kind in base_kind:
        wo_tc = copy.deepcopy(cfg)
        wo_tc.circuit.enable_tc = False
        wo_sc = copy.deepcopy(cfg)
        wo_sc.circuit.enable_sc = False
        baseline = copy.deepcopy(cfg)
        baseline.model.kind = base_kind[cfg.model.kind]
        variants += [("wo_tc", wo_tc), ("wo_sc", wo_sc), ("baseline", baseline)]
    return variants


def _analyze_cost(args, cfg: RunConfig, out: Path) -> None:
    plan = RolloutPlan(cfg.data.t_in, cfg.data.t_out)
    rows = []
    summary = {}
    for label, variant_cfg in _cost_variants(cfg):
        net = build_from_config(variant_cfg)
        report = count_params_flops(net, plan)
        for item in report.items:
            rows.append([label, item.name, item.params, item.flops_per_step,
                         item.flops_per_step * report.timesteps])
        rows.append([label, "TOTAL", report.params_total,
                     report.flops_per_step_total, report.flops_total])
        summary[label] = report
    header = ["variant", "module", "params", "flops_per_step", "flops_total"]
    _write_csv(out / "cost.csv", header, rows)
    if args.long_csv:
        _write_long_csv(out / "cost_long.csv", header, rows)
    full = summary["full"]
    print(f"params total: {full.params_total / 1e6:.3f}M; "
          f"flops/rollout: {full.flops_total / 1e9:.3f}G")
    if "baseline" in summary:
        base = summary["baseline"]
        dp = (full.params_total - base.params_total) / base.params_total
        df = (full.flops_total - base.flops_total) / base.flops_total
        print(f"baseline: {base.params_total / 1e6:.3f}M / {base.flops_total / 1e9:.3f}G; "
              f"circuit increase: params +{dp:.1%}, flops +{df:.1%}")


def _analyze_shuffle(args, cfg: RunConfig, out: Path) -> None:
    data = dataset_from_config(cfg)
    net = build_from_config(cfg)
    if args.checkpoint:
        load_into(parameters(net), load_checkpoint(args.checkpoint))
    plan = RolloutPlan(cfg.data.t_in, cfg.data.t_out)
    frames = data.test if data.n_test else data.train
    probe = shuffle_probe(net, plan, frames, args.seed)
    header = ["seed", "mse_ordered", "mse_shuffled", "gap_ratio", "permutation"]
    rows = [[args.seed, repr(probe["mse_ordered"]), repr(probe["mse_shuffled"]),
             repr(probe["gap_ratio"]), " ".join(map(str, probe["permutation"]))]]
    _write_csv(out / "shuffle.csv", header, rows)
    print(f"shuffle probe: ordered {probe['mse_ordered']:.6g}, "
          f"shuffled {probe['mse_shuffled']:.6g}, gap {probe['gap_ratio']:.3f}")


def _analyze_paramtrace(args, cfg: RunConfig, out: Path) -> None:
    data = dataset_from_config(cfg)
    net = build_from_config(cfg)
    if args.checkpoint:
        load_into(parameters(net), load_checkpoint(args.checkpoint))
    frames = (data.test if data.n_test else data.train)[:1]
    rows_d = param_trace(net, frames, layer=args.layer,
                         index=(args.channel, args.row, args.col))
    header = ["step", "layer", "beta", "gamma", "alpha"]
    rows = [[r["step"], r["layer"], repr(r["beta"]), repr(r["gamma"]),
             "" if r["alpha"] is None else repr(r["alpha"])] for r in rows_d]
    _write_csv(out / "paramtrace.csv", header, rows)
    if args.long_csv:
        _write_long_csv(out / "paramtrace_long.csv", header, rows)
    moving = any(r["beta"] != rows_d[0]["beta"] or r["gamma"] != rows_d[0]["gamma"]
                 for r in rows_d)
    print(f"paramtrace over {len(rows_d)} steps: modulation "
          f"{'varies' if moving else 'constant'}")


def cmd_analyze(args) -> int:
    if args.subcommand in ("cost", "shuffle", "paramtrace"):
        cfg = _load_cfg(args)
        out = _out_dir(args, cfg)
        save_resolved(cfg, out)
        if args.subcommand == "cost":
            _analyze_cost(args, cfg, out)
        elif args.subcommand == "shuffle":
            _analyze_shuffle(args, cfg, out)
        else:
            _analyze_paramtrace(args, cfg, out)
        return EXIT_OK
    out = _out_dir(args)
    if args.subcommand == "unroll":
        _write_args_snapshot(out, args, ["model", "T", "seed", "runs"])
        _analyze_unroll(args, out)
    else:
        _write_args_snapshot(out, args, ["model", "T", "seed", "alpha", "vth",
                                         "width", "regime"])
        _analyze_gradflow(args, out)
    return EXIT_OK


def cmd_presets(args) -> int:
    preset_dir = resources.files("stcnet").joinpath("presets")
    names = sorted(p.name[:-5] for p in preset_dir.iterdir() if p.name.endswith(".toml"))
    if args.name:
        with resources.as_file(_preset_path(args.name)) as p:
            print(Path(p).read_text(), end="")
    else:
        for n in names:
            print(n)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a TOML run config")
    p.add_argument("--preset", help="name of a shipped preset")
    p.add_argument("--out", help="output directory (default: config out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stcnet",
                                     description="Spiking STC networks: train, "
                                                 "evaluate, and analyze.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config")
    _add_config_args(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--t-out", type=int, dest="t_out",
                        help="override prediction length")
    p_eval.add_argument("--dump-frames", action="store_true",
                        help="write predictions.npy next to the metrics")
    p_eval.set_defaults(func=cmd_eval)

    p_an = sub.add_parser("analyze", help="run an analysis")
    an_sub = p_an.add_subparsers(dest="subcommand", required=True)

    p_unroll = an_sub.add_parser("unroll", help="closed-form unroll vs simulation")
    p_unroll.add_argument("--model", choices=("lif", "stc"), default="stc")
    p_unroll.add_argument("--T", type=int, default=25)
    p_unroll.add_argument("--seed", type=int, default=0)
    p_unroll.add_argument("--runs", type=int, default=20)
    p_unroll.add_argument("--out")
    p_unroll.add_argument("--long-csv", action="store_true", dest="long_csv")
    p_unroll.set_defaults(func=cmd_analyze)

    p_gf = an_sub.add_parser("gradflow", help="temporal gradient product")
    p_gf.add_argument("--model", choices=("lif", "stc"), default="stc")
    p_gf.add_argument("--T", type=int, default=10)
    p_gf.add_argument("--seed", type=int, default=0)
    p_gf.add_argument("--alpha", type=float, default=0.5)
    p_gf.add_argument("--vth", type=float, default=1.0)
    p_gf.add_argument("--width", type=float, default=2.0)
    p_gf.add_argument("--regime", choices=("subthreshold", "random"),
                      default="subthreshold")
    p_gf.add_argument("--out")
    p_gf.add_argument("--long-csv", action="store_true", dest="long_csv")
    p_gf.set_defaults(func=cmd_analyze)

    for name, helptext in (("cost", "parameter and FLOP accounting"),
                           ("shuffle", "temporal-order sensitivity probe"),
                           ("paramtrace", "per-step modulation factors")):
        p_c = an_sub.add_parser(name, help=helptext)
        _add_config_args(p_c)
        p_c.add_argument("--long-csv", action="store_true", dest="long_csv")
        if name in ("shuffle", "paramtrace"):
            p_c.add_argument("--checkpoint")
            p_c.add_argument("--seed", type=int, default=0)
        if name == "paramtrace":
            p_c.add_argument("--layer", type=int, default=0)
            p_c.add_argument("--channel", type=int, default=0)
            p_c.add_argument("--row", type=int, default=0)
            p_c.add_argument("--col", type=int, default=0)
        p_c.set_defaults(func=cmd_analyze)

    p_presets = sub.add_parser("presets", help="list shipped presets or show one")
    p_presets.add_argument("name", nargs="?")
    p_presets.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, NpyFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
