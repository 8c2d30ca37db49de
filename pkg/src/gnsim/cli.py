"""Command-line entry points: generate, train, rollout, export-vtk, gradcheck.

Every subcommand accepts ``--config FILE`` pointing at a JSON object whose
keys mirror the flag names (underscores for dashes); explicit flags
override the file.  Reports go to stdout as JSON, progress logging to
stderr.  Exit codes: 0 success, 2 bad input or unusable path, 3
checkpoint/model mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward
from .dataset import (
    CodecError,
    MetadataError,
    TrajectorySet,
    Trajectory,
    enumerate_windows,
    read_metadata,
    read_npz,
    write_metadata,
    write_npz,
)
from .model import ModelConfig, RolloutError, init_model_params, rollout
from .reference import ConfigError, GeneratorConfig, generate_reference
from .training import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    ddp_train,
    load_checkpoint,
    save_checkpoint,
    window_loss,
)
from .vtk import write_vtk_series

EXIT_BAD_INPUT = 2
EXIT_MODEL_MISMATCH = 3


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _fail(code: int, msg: str) -> int:
    _log(f"error: {msg}")
    return code


def _emit(report: dict) -> None:
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="gnsim",
        description="Train and roll out a learned particle-dynamics simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate reference trajectory datasets")
    g.add_argument("--config", type=str, default=None,
                   help="JSON file of flag defaults")
    g.add_argument("--out", type=str, required=True, help="output directory")
    g.add_argument("--particles", type=int, default=64)
    g.add_argument("--steps", type=int, default=200, help="frames per trajectory")
    g.add_argument("--trajectories", type=int, default=30,
                   help="training trajectories")
    g.add_argument("--valid-trajectories", type=int, default=2)
    g.add_argument("--test-trajectories", type=int, default=2)
    g.add_argument("--dim", type=int, default=2, choices=(2, 3))
    g.add_argument("--dt", type=float, default=0.0025)
    g.add_argument("--gravity", type=float, default=-9.81,
                   help="gravity along the last axis")
    g.add_argument("--restitution", type=float, default=0.5)
    g.add_argument("--stiffness", type=float, default=3000.0)
    g.add_argument("--repulsion-range", type=float, default=0.025)
    g.add_argument("--bounds-low", type=float, default=0.1)
    g.add_argument("--bounds-high", type=float, default=0.9)
    g.add_argument("--connectivity-radius", type=float, default=0.03)
    g.add_argument("--initial-speed", type=float, default=0.2)
    g.add_argument("--material-types", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train the simulator on a dataset")
    t.add_argument("--config", type=str, default=None)
    t.add_argument("--data", type=str, required=True,
                   help="directory with metadata.json and train.npz")
    t.add_argument("--out", type=str, default=None,
                   help="checkpoint/log directory (default: DATA/run)")
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--batch", type=int, default=2, help="batch size per worker")
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--lr-final", type=float, default=1e-6)
    t.add_argument("--noise-std", type=float, default=1e-4)
    t.add_argument("--checkpoint-interval", type=int, default=500)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", type=str, default=None, help="checkpoint to continue")
    t.add_argument("--message-steps", type=int, default=10)
    t.add_argument("--latent", type=int, default=128)
    t.add_argument("--mlp-hidden", type=int, default=128)
    t.add_argument("--mlp-layers", type=int, default=2)
    t.add_argument("--type-embedding", type=int, default=16)
    t.add_argument("--num-types", type=int, default=8)
    t.add_argument("--no-layer-norm", action="store_true")
    t.add_argument("--no-residual", action="store_true")
    t.add_argument("--log-every", type=int, default=100,
                   help="stderr progress interval")

    r = sub.add_parser("rollout", help="roll out a trained model on test data")
    r.add_argument("--config", type=str, default=None)
    r.add_argument("--data", type=str, required=True,
                   help="directory with metadata.json and test.npz")
    r.add_argument("--checkpoint", type=str, required=True)
    r.add_argument("--steps", type=int, default=None,
                   help="rollout steps (default: rest of each trajectory)")
    r.add_argument("--out", type=str, default=None,
                   help="directory for predictions.npz (default: DATA)")

    v = sub.add_parser("export-vtk", help="export trajectory frames as VTK files")
    v.add_argument("--config", type=str, default=None)
    v.add_argument("--input", type=str, required=True, help="trajectory npz")
    v.add_argument("--trajectory", type=int, default=0)
    v.add_argument("--out", type=str, required=True, help="output directory")
    v.add_argument("--prefix", type=str, default="frame")

    c = sub.add_parser(
        "gradcheck",
        help="compare reverse-mode gradients against finite differences",
    )
    c.add_argument("--config", type=str, default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--particles", type=int, default=5)
    c.add_argument("--message-steps", type=int, default=2)
    c.add_argument("--latent", type=int, default=16)
    c.add_argument("--tolerance", type=float, default=1e-4)

    return parser, {"generate": g, "train": t, "rollout": r,
                    "export-vtk": v, "gradcheck": c}


def _apply_config_file(argv: list[str], args: argparse.Namespace,
                       parser: argparse.ArgumentParser,
                       subparser: argparse.ArgumentParser) -> argparse.Namespace:
    """Re-parse with the JSON config as defaults so flags win over the file."""
    if not getattr(args, "config", None):
        return args
    path = Path(args.config)
    try:
        defaults = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"--config {path}: {e}") from e
    if not isinstance(defaults, dict):
        raise ConfigError(f"--config {path}: expected a JSON object")
    known = {a.dest for a in subparser._actions}
    unknown = set(defaults) - known
    if unknown:
        raise ConfigError(
            f"--config {path}: unknown key(s) {', '.join(sorted(unknown))}"
        )
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _cmd_generate(args) -> int:
    bounds = tuple((args.bounds_low, args.bounds_high) for _ in range(args.dim))
    gravity = tuple([0.0] * (args.dim - 1) + [args.gravity])
    try:
        config = GeneratorConfig(
            num_particles=args.particles,
            num_steps=args.steps,
            num_trajectories=args.trajectories,
            dim=args.dim,
            dt=args.dt,
            gravity=gravity,
            restitution=args.restitution,
            repulsion_stiffness=args.stiffness,
            repulsion_range=args.repulsion_range,
            bounds=bounds,
            connectivity_radius=args.connectivity_radius,
            initial_speed=args.initial_speed,
            material_types=args.material_types,
        )
        config.validate()
    except ConfigError as e:
        if "bounds" in str(e):
            return _fail(EXIT_BAD_INPUT, f"{e} (see --bounds-low/--bounds-high)")
        return _fail(EXIT_BAD_INPUT, str(e))

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(EXIT_BAD_INPUT, f"cannot create --out directory {out}: {e}")

    splits = {
        "train": (args.trajectories, args.seed),
        "valid": (args.valid_trajectories, args.seed + 1),
        "test": (args.test_trajectories, args.seed + 2),
    }
    files = {}
    meta = None
    try:
        for name, (count, seed) in splits.items():
            split_cfg = GeneratorConfig(**{**vars(config), "num_trajectories": count})
            traj_set, split_meta = generate_reference(split_cfg, seed)
            if name == "train":
                meta = split_meta   # normalization statistics come from train only
            path = out / f"{name}.npz"
            write_npz(path, traj_set)
            files[name] = str(path)
            _log(f"wrote {path} ({count} trajectories)")
        meta_path = out / "metadata.json"
        write_metadata(meta_path, meta)
        files["metadata"] = str(meta_path)
    except OSError as e:
        return _fail(EXIT_BAD_INPUT, f"cannot write dataset: {e}")
    _emit({"files": files, "dim": args.dim, "particles": args.particles,
           "steps": args.steps, "seed": args.seed})
    return 0


def _load_dataset(data_dir: Path, split: str):
    meta = read_metadata(data_dir / "metadata.json")
    traj_set = read_npz(data_dir / f"{split}.npz")
    if traj_set.dim != meta.dim:
        raise MetadataError(
            f"{split}.npz is {traj_set.dim}-D but metadata says dim={meta.dim}"
        )
    return traj_set, meta


def _cmd_train(args) -> int:
    data_dir = Path(args.data)
    try:
        traj_set, meta = _load_dataset(data_dir, "train")
    except (OSError, MetadataError, CodecError) as e:
        return _fail(EXIT_BAD_INPUT, f"cannot load dataset from {data_dir}: {e}")

    model_config = ModelConfig(
        dim=meta.dim,
        latent_width=args.latent,
        mlp_hidden_width=args.mlp_hidden,
        mlp_hidden_layers=args.mlp_layers,
        message_passing_steps=args.message_steps,
        num_particle_types=args.num_types,
        type_embedding_width=args.type_embedding,
        residual=not args.no_residual,
        layer_norm=not args.no_layer_norm,
    )
    config = TrainConfig(
        batch_per_worker=args.batch,
        num_workers=args.workers,
        lr_init=args.lr,
        lr_final=args.lr_final,
        num_steps=args.steps,
        noise_std=args.noise_std,
        checkpoint_interval=args.checkpoint_interval,
        seed=args.seed,
        model=model_config,
    )
    try:
        config.validate()
    except ValueError as e:
        return _fail(EXIT_BAD_INPUT, str(e))

    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except CheckpointError as e:
            return _fail(EXIT_BAD_INPUT, str(e))

    out = Path(args.out) if args.out else data_dir / "run"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(EXIT_BAD_INPUT, f"cannot create --out directory {out}: {e}")
    log_path = out / "loss_log.csv"
    new_log = not log_path.exists()

    last_ckpt_path = None
    final_loss = None
    t_start = time.perf_counter()
    try:
        with open(log_path, "a", newline="") as log_file:
            writer = csv.writer(log_file)
            if new_log:
                writer.writerow(["step", "loss", "seconds"])
            for event in ddp_train(traj_set, meta, config, resume=resume):
                writer.writerow(
                    [event.step, repr(event.loss), f"{event.seconds:.6f}"]
                )
                final_loss = event.loss
                if (event.step + 1) % args.log_every == 0:
                    _log(f"step {event.step + 1}/{config.num_steps} "
                         f"loss {event.loss:.6f}")
                if event.checkpoint is not None:
                    path = out / f"checkpoint_{event.step + 1:07d}.ckpt"
                    save_checkpoint(path, event.checkpoint)
                    last_ckpt_path = path
    except CheckpointError as e:
        return _fail(EXIT_BAD_INPUT, str(e))
    _emit({
        "steps": config.num_steps,
        "final_loss": final_loss,
        "checkpoint": str(last_ckpt_path) if last_ckpt_path else None,
        "loss_log": str(log_path),
        "seconds": time.perf_counter() - t_start,
    })
    return 0


def _cmd_rollout(args) -> int:
    data_dir = Path(args.data)
    try:
        traj_set, meta = _load_dataset(data_dir, "test")
    except (OSError, MetadataError, CodecError) as e:
        return _fail(EXIT_BAD_INPUT, f"cannot load dataset from {data_dir}: {e}")
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        return _fail(EXIT_MODEL_MISMATCH, str(e))
    params = ckpt.params
    if params.config.dim != meta.dim:
        return _fail(
            EXIT_MODEL_MISMATCH,
            f"checkpoint is {params.config.dim}-D but dataset is {meta.dim}-D",
        )
    window = params.config.input_positions

    out = Path(args.out) if args.out else data_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(EXIT_BAD_INPUT, f"cannot create --out directory {out}: {e}")

    per_traj_errors = []
    predicted = []
    total_steps = 0
    t0 = time.perf_counter()
    for j, traj in enumerate(traj_set):
        if traj.n_time_steps < window:
            return _fail(
                EXIT_BAD_INPUT,
                f"test trajectory {j} has {traj.n_time_steps} frames; "
                f"need at least {window}",
            )
        steps = args.steps if args.steps is not None else traj.n_time_steps - window
        if steps < 0:
            return _fail(EXIT_BAD_INPUT, "--steps must be >= 0")
        try:
            frames = rollout(traj.positions[:window], traj.types, params, meta, steps)
        except RolloutError as e:
            return _fail(EXIT_MODEL_MISMATCH, f"trajectory {j}: {e}")
        predicted.append(Trajectory(positions=frames, types=traj.types))
        total_steps += steps
        truth_steps = min(steps, traj.n_time_steps - window)
        errors = [
            float(((frames[window + k] - traj.positions[window + k]) ** 2).mean())
            for k in range(truth_steps)
        ]
        per_traj_errors.append(errors)
    seconds = time.perf_counter() - t0

    pred_path = out / "predictions.npz"
    try:
        write_npz(pred_path, TrajectorySet(predicted))
    except OSError as e:
        return _fail(EXIT_BAD_INPUT, f"cannot write predictions: {e}")

    depth = min((len(e) for e in per_traj_errors), default=0)
    per_step = [
        float(np.mean([e[k] for e in per_traj_errors])) for k in range(depth)
    ]
    _emit({
        "per_step_mse": per_step,
        "final_step_mse": per_step[-1] if per_step else None,
        "rollout_seconds": seconds,
        "steps_per_second": total_steps / seconds if seconds > 0 else None,
        "num_trajectories": len(traj_set),
        "predictions": str(pred_path),
    })
    return 0


def _cmd_export_vtk(args) -> int:
    try:
        traj_set = read_npz(args.input)
    except (OSError, CodecError) as e:
        return _fail(EXIT_BAD_INPUT, f"cannot read {args.input}: {e}")
    if not (0 <= args.trajectory < len(traj_set)):
        return _fail(
            EXIT_BAD_INPUT,
            f"--trajectory {args.trajectory} out of range "
            f"[0, {len(traj_set)})",
        )
    traj = traj_set[args.trajectory]
    try:
        paths = write_vtk_series(traj.positions, traj.types, args.out,
                                 prefix=args.prefix)
    except OSError as e:
        return _fail(EXIT_BAD_INPUT, f"cannot write VTK files: {e}")
    _emit({"frames": len(paths), "first": str(paths[0]), "last": str(paths[-1])})
    return 0


def _cmd_gradcheck(args) -> int:
    from .dataset import Metadata, TrainingWindow

    rng = np.random.default_rng(args.seed)
    dim = 2
    config = ModelConfig(
        dim=dim,
        latent_width=args.latent,
        mlp_hidden_width=args.latent,
        message_passing_steps=args.message_steps,
        num_particle_types=2,
    )
    params = init_model_params(config, args.seed)
    n = args.particles
    meta = Metadata(
        bounds=np.array([[0.0, 1.0]] * dim),
        sequence_length=10,
        default_connectivity_radius=0.5,
        dim=dim,
        dt=0.0025,
        vel_mean=np.zeros(dim),
        vel_std=np.ones(dim) * 0.1,
        acc_mean=np.zeros(dim),
        acc_std=np.ones(dim) * 0.1,
    )
    inputs = 0.25 + 0.5 * rng.random((config.input_positions, n, dim))
    window = TrainingWindow(
        trajectory_index=0,
        start=0,
        inputs=inputs,
        target=inputs[-1] + 0.01 * rng.standard_normal((n, dim)),
        types=rng.integers(0, 2, size=n),
    )

    tape = Tape()
    l = window_loss(window, params, meta, tape)
    grads = backward(tape, l)
    loss_value = float(l.value[0, 0])

    def forward() -> float:
        return float(window_loss(window, params, meta, None).value[0, 0])

    # Central differences carry cancellation noise of about eps*|f|/(2h);
    # coordinates are compared as |ad - fd| <= atol + rtol*max(|ad|, |fd|)
    # with atol a safety margin above that noise floor.
    h = 1e-6
    rtol = args.tolerance
    atol = 20.0 * np.finfo(np.float64).eps * max(1.0, abs(loss_value)) / (2.0 * h)
    max_scaled = 0.0
    checked = 0
    for t in params.flatten():
        g = grads.get(t, np.zeros(t.shape))
        flat_value = t.value.ravel()
        flat_grad = g.ravel()
        for i in range(flat_value.size):
            orig = flat_value[i]
            flat_value[i] = orig + h
            f_plus = forward()
            flat_value[i] = orig - h
            f_minus = forward()
            flat_value[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            scaled = abs(flat_grad[i] - fd) / (
                atol + rtol * max(abs(flat_grad[i]), abs(fd))
            )
            max_scaled = max(max_scaled, float(scaled))
            checked += 1
    passed = max_scaled <= 1.0
    _emit({
        "coordinates_checked": checked,
        "max_scaled_error": max_scaled,
        "rtol": rtol,
        "atol": atol,
        "passed": passed,
    })
    return 0 if passed else 1


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = _build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(argv, args, parser, subparsers[args.command])
    except ConfigError as e:
        return _fail(EXIT_BAD_INPUT, str(e))

    handlers = {
        "generate": _cmd_generate,
        "train": _cmd_train,
        "rollout": _cmd_rollout,
        "export-vtk": _cmd_export_vtk,
        "gradcheck": _cmd_gradcheck,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
