"""Command-line experiment runner.

Subcommands:

    run        execute one federated experiment from a JSON config;
               writes metrics.csv, model.bin, config.resolved.json
    ablate     sweep (sigma, clip_c) cells and collect final-round metrics
    attack     paired gradient-inversion trials with and without noise;
               writes attack.csv plus PPM images per trial
    calibrate  print the privacy figures for given clip/sigma/delta

Exit codes: 0 success, 2 invalid config or arguments, 3 diverged run.
Everything except the wall_ms column is a pure function of the config and
root seed.
"""

import argparse
import dataclasses
import json
import statistics
import sys
from pathlib import Path

from .attack import invert_from_message, write_ppm
from .client import ClientState, DivergedError, client_round
from .config import ConfigError, ExperimentConfig, config_to_dict, load_config
from .dpcore import DpConfig, epsilon_classic, epsilon_paper
from .learn.data import gen_dataset, load_dataset, save_dataset
from .learn.models import Model, model_layout
from .net import ServerMessage, encode
from .seeds import derive_seed, rng_for
from .server import init_global, run_experiment

METRICS_HEADER = (
    "round,loss,dice,jaccard,acc,epsilon_paper,epsilon_classic,participating_clients,wall_ms"
)
GRID_HEADER = "sigma,clip_c,dice,jaccard,acc,epsilon_paper,status"
ATTACK_HEADER = "trial,arm,mse,psnr"


def _fmt(x: float) -> str:
    return format(float(x), ".6f")


def _write_metrics_csv(path: Path, history) -> None:
    lines = [METRICS_HEADER]
    for rec in history:
        lines.append(
            f"{rec.round},{_fmt(rec.loss)},{_fmt(rec.dice)},{_fmt(rec.jaccard)},"
            f"{_fmt(rec.acc)},{_fmt(rec.epsilon_paper)},{_fmt(rec.epsilon_classic)},"
            f"{rec.participating_clients},{rec.wall_ms}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_model(path: Path, result) -> None:
    # same float64 framing as the wire format
    frame = encode(
        ServerMessage(
            round=len(result.history),
            theta=result.theta.values,
            layout_digest=result.layout.digest64(),
        )
    )
    path.write_bytes(frame)


def _cmd_run(args) -> int:
    cfg = load_config(args.config, profile=args.profile)
    if args.out:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = None
    if args.dataset_file:
        dataset = load_dataset(args.dataset_file)
    result = run_experiment(cfg, dataset=dataset)
    if args.save_dataset:
        ds_seed = cfg.dataset.seed if cfg.dataset.seed is not None else derive_seed(
            cfg.root_seed, "dataset"
        )
        save_dataset(
            args.save_dataset,
            dataset if dataset is not None else gen_dataset(
                cfg.dataset.n, cfg.dataset.h, cfg.dataset.w, ds_seed
            ),
        )
    _write_metrics_csv(out / "metrics.csv", result.history)
    _write_model(out / "model.bin", result)
    (out / "config.resolved.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    last = result.history[-1]
    print(
        f"run complete: {len(result.history)} rounds, "
        f"dice={_fmt(last.dice)} jaccard={_fmt(last.jaccard)} acc={_fmt(last.acc)}"
    )
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config, profile=args.profile)
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s]
        clips = [float(c) for c in args.clips.split(",") if c]
    except ValueError:
        print("config error: --sigmas/--clips: must be comma-separated reals", file=sys.stderr)
        return 2
    if not sigmas or not clips:
        print("config error: --sigmas/--clips: must be nonempty", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [GRID_HEADER]
    for sigma in sigmas:
        for clip in clips:
            cell = dataclasses.replace(
                cfg,
                dp=DpConfig(clip, sigma, cfg.dp.delta, "gaussian", cfg.dp.noise_site),
            )
            try:
                result = run_experiment(cell)
                last = result.history[-1]
                lines.append(
                    f"{sigma},{clip},{_fmt(last.dice)},{_fmt(last.jaccard)},"
                    f"{_fmt(last.acc)},{_fmt(last.epsilon_paper)},ok"
                )
            except Exception as exc:  # record the cell failure, keep sweeping
                reason = str(exc).replace(",", ";")
                lines.append(f"{sigma},{clip},,,,,{type(exc).__name__}: {reason}")
    (out / "grid.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"ablation grid written: {len(sigmas) * len(clips)} cells")
    return 0


def _attack_trial(cfg: ExperimentConfig, trial: int, dp: DpConfig, budget: int):
    """One single-sample inversion trial; returns (truth, AttackResult)."""
    root = cfg.root_seed
    ds_seed = cfg.dataset.seed if cfg.dataset.seed is not None else derive_seed(root, "dataset")
    ds = gen_dataset(cfg.dataset.n, cfg.dataset.h, cfg.dataset.w, ds_seed)
    idx = int(rng_for(root, "attack_sample", trial).integers(0, len(ds)))
    shard = ds.subset([idx])
    theta = init_global("linear_pixel", derive_seed(root, "init"), ds.height, ds.width)
    layout = model_layout("linear_pixel", ds.height, ds.width)
    state = ClientState(
        client_id=0,
        shard=shard,
        rng_seed=derive_seed(root, "attack_client", trial),
        hyper=dataclasses.replace(cfg.hyper(), local_epochs=1, batch_size=1, local_unit="epochs"),
        model_kind="linear_pixel",
    )
    msg = client_round(
        theta,
        state,
        dp,
        round_no=1,
        sgd_rng=rng_for(state.rng_seed, "sgd", 1),
        dp_rng=rng_for(state.rng_seed, "dp", 1),
    )
    truth = shard.images[0]
    result = invert_from_message(
        msg,
        Model("linear_pixel", theta, layout),
        budget,
        seed=derive_seed(root, "attack_init", trial),
        truth=truth,
    )
    return truth, result


def _cmd_attack(args) -> int:
    cfg = load_config(args.config, profile=args.profile)
    if args.trials < 1:
        print("config error: --trials: must be >= 1", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    arms = []
    if not args.no_dp_only:
        dp_gauss = DpConfig(
            cfg.dp.clip_c, cfg.dp.sigma, cfg.dp.delta, "gaussian", cfg.dp.noise_site
        )
        arms.append(("dp", dp_gauss))
    if not args.with_dp_only:
        arms.append(("no_dp", DpConfig(cfg.dp.clip_c, cfg.dp.sigma, cfg.dp.delta, "none")))
    lines = [ATTACK_HEADER]
    per_arm = {name: [] for name, _ in arms}
    for trial in range(args.trials):
        truth_written = False
        for name, dp in arms:
            truth, result = _attack_trial(cfg, trial, dp, args.budget)
            if not truth_written:
                write_ppm(out / f"truth_{trial:02d}.ppm", truth)
                truth_written = True
            write_ppm(out / f"recon_{name}_{trial:02d}.ppm", result.reconstructed)
            lines.append(f"{trial},{name},{result.mse!r},{_fmt(result.psnr)}")
            per_arm[name].append(result)
    (out / "attack.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, results in per_arm.items():
        med_mse = statistics.median(r.mse for r in results)
        med_psnr = statistics.median(r.psnr for r in results)
        print(f"{name}: median mse={med_mse:.3e} median psnr={med_psnr:.2f} dB")
    if len(per_arm) == 2:
        ratio = statistics.median(r.mse for r in per_arm["dp"]) / statistics.median(
            r.mse for r in per_arm["no_dp"]
        )
        margin = statistics.median(r.psnr for r in per_arm["no_dp"]) - statistics.median(
            r.psnr for r in per_arm["dp"]
        )
        print(f"contrast: dp/no_dp median mse ratio={ratio:.1f}, psnr margin={margin:.2f} dB")
    return 0


def _cmd_calibrate(args) -> int:
    if args.clip_c <= 0 or args.sigma <= 0 or not 0 < args.delta < 1:
        print(
            "config error: clip-c and sigma must be > 0 and delta in (0, 1)",
            file=sys.stderr,
        )
        return 2
    print(f"epsilon_paper = {_fmt(epsilon_paper(args.clip_c, args.sigma))}")
    print(f"epsilon_classic = {_fmt(epsilon_classic(args.sigma, args.delta))}")
    print(f"noise_std = {_fmt(args.sigma * args.clip_c)}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpfedsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p_run.add_argument("--out", help="override output_dir")
    p_run.add_argument("--dataset-file", help="load the dataset from a binary file")
    p_run.add_argument("--save-dataset", help="export the dataset to a binary file")
    p_run.set_defaults(func=_cmd_run)

    p_abl = sub.add_parser("ablate", help="sweep a (sigma, clip_c) grid")
    p_abl.add_argument("config")
    p_abl.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p_abl.add_argument("--sigmas", required=True, help="comma-separated noise multipliers")
    p_abl.add_argument("--clips", required=True, help="comma-separated clip thresholds")
    p_abl.add_argument("--out")
    p_abl.set_defaults(func=_cmd_ablate)

    p_atk = sub.add_parser("attack", help="run paired inversion trials")
    p_atk.add_argument("config")
    p_atk.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p_atk.add_argument("--trials", type=int, default=10)
    p_atk.add_argument("--budget", type=int, default=2000)
    group = p_atk.add_mutually_exclusive_group()
    group.add_argument("--with-dp", dest="with_dp_only", action="store_true",
                       help="run only the noised arm")
    group.add_argument("--no-dp", dest="no_dp_only", action="store_true",
                       help="run only the clean arm")
    p_atk.add_argument("--out")
    p_atk.set_defaults(func=_cmd_attack)

    p_cal = sub.add_parser("calibrate", help="print privacy figures")
    p_cal.add_argument("--clip-c", type=float, required=True)
    p_cal.add_argument("--sigma", type=float, required=True)
    p_cal.add_argument("--delta", type=float, default=1e-5)
    p_cal.set_defaults(func=_cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergedError as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
