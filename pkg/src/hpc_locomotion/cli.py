"""Command-line entry point: ``hpc <subcommand> ...`` (also ``python3 -m hpc_locomotion``)."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, validate, write_run_metadata
from .terrain import FAMILIES

log = logging.getLogger("hpc_locomotion")

STUDENT_VARIANTS = ("student", "student_no_wm", "student_no_distill")


def _configure_logging() -> None:
    level = os.environ.get("HPC_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _families(text: str | None):
    if text is None:
        return None
    names = [f for f in text.split(",") if f]
    unknown = [f for f in names if f not in FAMILIES]
    if unknown:
        raise ConfigError(f"--families: unknown terrain family {unknown[0]!r}; expected one of {FAMILIES}")
    return names


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _apply_workers(cfg: RunConfig, workers: int | None) -> None:
    """Cap the number of simulated environments per process."""
    if workers is None:
        return
    if workers < 1:
        raise ConfigError("--workers must be >= 1")
    cfg.student.envs = min(cfg.student.envs, workers)
    cfg.eval.envs = min(cfg.eval.envs, workers)
    envs = min(cfg.ppo.envs, workers)
    cfg.ppo.minibatches = min(cfg.ppo.minibatches, envs)
    while envs % cfg.ppo.minibatches:
        cfg.ppo.minibatches -= 1
    cfg.ppo.envs = envs
    validate(cfg)


def _common(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--config", help="YAML run config; unspecified fields keep their defaults")
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
    p.add_argument("--workers", type=int, help="cap on parallel simulated environments")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hpc", description="Perceptive biped locomotion: train, distill, evaluate.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-oracle", help="PPO training of the privileged teacher")
    _common(p, seed_required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--families", help="comma-separated terrain families (default: config)")

    p = sub.add_parser("distill", help="DAgger distillation of the student (or an ablation)")
    _common(p, seed_required=True)
    p.add_argument("--teacher", help="teacher checkpoint (not needed for student_no_distill)")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=STUDENT_VARIANTS, default="student")
    p.add_argument("--updates", type=int, help="student updates (or PPO iterations for student_no_distill)")
    p.add_argument("--families")

    p = sub.add_parser("export", help="strip a student checkpoint down to its inference bundle")
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="noise sweep over policy variants")
    _common(p)
    p.add_argument("--checkpoints", action="append", default=[],
                   help="directory holding <variant> checkpoints; may repeat")
    p.add_argument("--checkpoint", action="append", default=[], metavar="VARIANT=PATH")
    p.add_argument("--variants", default="oracle,student,student_no_wm,student_no_distill")
    p.add_argument("--noise", type=_floats)
    p.add_argument("--seeds", type=int, help="evaluate seeds 0..N-1")
    p.add_argument("--episodes-per-env", type=int)
    p.add_argument("--families")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("noise-probe", help="CSV of corrupted height scans")
    _common(p)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--intensity", type=float, default=1.0)
    p.add_argument("--family", default="random_rough", choices=FAMILIES)
    p.add_argument("--level", type=int, default=5)
    p.add_argument("--plot", help="also render the scans to this image file")

    p = sub.add_parser("sim-trace", help="CSV state trace of one walker")
    _common(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--family", default="flat", choices=FAMILIES)
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--teacher", help="drive the walker with this teacher (default: zero actions)")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="also render root height and speed to this image file")
    return parser


def _progress(every: int, key: str):
    def report(row):
        if row[key] % every == 0:
            log.info(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    return report


def cmd_train_oracle(args, cfg: RunConfig) -> int:
    from .oracle import train_oracle
    from .plotting import plot_training_curve

    out = Path(args.out)
    write_run_metadata(out, cfg, args.seed, "train-oracle")
    train_oracle(cfg, args.seed, out, iterations=args.iterations, families=_families(args.families),
                 progress=_progress(10, "iteration"))
    plot_training_curve(out / "metrics.csv", out / "training.png", "iteration", ("reward", "distance", "M_terrain"))
    print(out / "teacher.bin")
    return 0


def cmd_distill(args, cfg: RunConfig) -> int:
    from .plotting import plot_training_curve

    out = Path(args.out)
    families = _families(args.families)
    if args.variant == "student_no_distill":
        from .ablations import train_no_distill

        write_run_metadata(out, cfg, args.seed, "distill --variant student_no_distill")
        train_no_distill(cfg, args.seed, out, iterations=args.updates, families=families,
                         progress=_progress(1, "iteration"))
        plot_training_curve(out / "metrics.csv", out / "training.png", "iteration", ("reward", "recon_mse_total"))
        print(out / "student_no_distill.bin")
        return 0
    from .oracle import load_teacher
    from .student import train_student

    if args.teacher is None:
        raise ConfigError(f"--teacher is required for variant {args.variant}")
    teacher = load_teacher(args.teacher)
    write_run_metadata(out, cfg, args.seed, f"distill --variant {args.variant}")
    train_student(cfg, teacher, args.seed, out, updates=args.updates, world_model=args.variant == "student",
                  families=families, progress=_progress(20, "update"))
    plot_training_curve(out / "metrics.csv", out / "training.png", "update", ("imitation_loss", "recon_mse_total"))
    print(out / f"{args.variant}.bin")
    return 0


def cmd_export(args) -> int:
    from .student import StudentNets, export_inference, load_student, save_bundle

    nets = load_student(args.student)
    if not isinstance(nets, StudentNets):
        raise ConfigError(f"{args.student} has no world-model encoder to export")
    save_bundle(args.out, export_inference(nets))
    print(args.out)
    return 0


def _checkpoint_paths(args, variants) -> dict[str, Path]:
    from .evaluation import CHECKPOINT_NAMES, MissingCheckpoint

    explicit = {}
    for item in args.checkpoint:
        name, _, path = item.partition("=")
        explicit[name] = Path(path)
    paths = {}
    for variant in variants:
        if variant in explicit:
            candidates = [explicit[variant]]
        else:
            candidates = [Path(d) / CHECKPOINT_NAMES[variant] for d in args.checkpoints]
            candidates += [Path(d) / variant / CHECKPOINT_NAMES[variant] for d in args.checkpoints]
        found = next((c for c in candidates if c.exists()), None)
        if found is None:
            where = ", ".join(str(c) for c in candidates) or "no --checkpoints/--checkpoint given"
            raise MissingCheckpoint(f"missing checkpoint for variant {variant!r} (looked in: {where}); "
                                    f"run train-oracle/distill first")
        paths[variant] = found
    return paths


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluation import VARIANTS, evaluate, report
    from .oracle import load_teacher
    from .student import load_student

    variants = [v for v in args.variants.split(",") if v]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"--variants: unknown variant {v!r}; expected one of {VARIANTS}")
    if args.seeds is not None:
        cfg.eval.seeds = list(range(args.seeds))
    if args.noise is not None:
        cfg.eval.noise = args.noise
    if args.episodes_per_env is not None:
        cfg.eval.episodes_per_env = args.episodes_per_env
    paths = _checkpoint_paths(args, variants)
    policies = {v: load_teacher(p) if v == "oracle" else load_student(p) for v, p in paths.items()}
    out = Path(args.out)
    write_run_metadata(out, cfg, args.seed, "eval " + ",".join(variants))
    records = evaluate(policies, cfg, families=_families(args.families))
    files = report(records, out, plots=not args.no_plots)
    sys.stdout.write((out / "table.txt").read_text())
    for name in sorted(files):
        print(files[name])
    return 0


def cmd_noise_probe(args, cfg: RunConfig) -> int:
    """Each row is one episode's corruption of the same clean scan."""
    from . import noise as nz
    from .terrain import SCAN_OFFSETS, generate, sample_scan

    tspec = cfg.noise.terrain_spec()
    terrain = generate(args.family, args.level / cfg.terrain.max_level, args.seed)
    x = 2.0
    clean = sample_scan(terrain, x, float(terrain.height_at(x)) + 1.0)
    rows = []
    for k in range(args.n):
        rng = nz.episode_stream(args.seed, 0, k)
        draw = nz.draw_terrain_noise(tspec, rng, tspec.l_end)
        eps = nz.sample_gp_noise(nz.SCAN_OFFSETS, tspec, rng, draw.length_scale)
        rows.append(nz.corrupt_scan(clean, draw, args.intensity, eps))
    w = csv.writer(sys.stdout)
    w.writerow([f"scan_{o:+.1f}" for o in SCAN_OFFSETS])
    for r in rows:
        w.writerow([f"{v:.6f}" for v in r])
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        for r in rows:
            ax.plot(SCAN_OFFSETS, r, alpha=0.6)
        ax.plot(SCAN_OFFSETS, clean, "k", lw=2, label="clean")
        ax.set_xlabel("offset ahead of root (m)")
        ax.set_ylabel("relative height (m)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        plt.close(fig)
    return 0


def cmd_sim_trace(args, cfg: RunConfig) -> int:
    from .autodiff import LstmState
    from .sim.observations import extract_privileged_obs
    from .sim.walker import Command, PdGains, PhysicsParams, TraceWriter, WalkerBatch, initial_state
    from .terrain import generate

    terrain = generate(args.family, args.level / cfg.terrain.max_level, args.seed)
    physics = PhysicsParams(gains=PdGains(kp=cfg.sim.kp, kd=cfg.sim.kd, torque_limit=cfg.sim.torque_limit))
    batch = WalkerBatch(1, terrain.cell_size, len(terrain.heights))
    batch.set_terrain(0, terrain)
    batch.set_physics(0, physics)
    batch.set_state(0, initial_state(terrain))
    teacher = state = None
    if args.teacher:
        from .oracle import load_teacher

        teacher = load_teacher(args.teacher)
        state: LstmState = teacher.actor.lstm.initial_state(1)
    cmd = Command(float(np.mean(cfg.sim.command_lin_vel)), 0.0)
    action = np.zeros(4)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    times, heights, speeds = [], [], []
    with TraceWriter(out) as tw:
        for k in range(args.steps):
            st = batch.get_state(0)
            if teacher is not None:
                obs = extract_privileged_obs(st, cmd, terrain, action)
                action, state = teacher.act(obs[None], state)
                action = np.clip(action[0], -cfg.sim.action_clip, cfg.sim.action_clip)
            tw.write(k, st, action)
            times.append(st.time)
            heights.append(st.root_position[1])
            speeds.append(st.root_lin_vel[0])
            batch.step(action[None])
            fallen, _ = batch.termination(cfg.sim.episode_seconds)
            if fallen[0]:
                break
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        axes[0].plot(times, heights)
        axes[0].set_title("root height (m)")
        axes[1].plot(times, speeds)
        axes[1].set_title("forward speed (m/s)")
        for ax in axes:
            ax.set_xlabel("time (s)")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        plt.close(fig)
    print(out)
    return 0


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "export":
            return cmd_export(args)
        cfg = load_config(args.config)
        _apply_workers(cfg, args.workers)
        handler = {"train-oracle": cmd_train_oracle, "distill": cmd_distill, "eval": cmd_eval,
                   "noise-probe": cmd_noise_probe, "sim-trace": cmd_sim_trace}[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"hpc: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"hpc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
