"""Command-line interface.

Subcommands: generate-data, train, eval, check-equivariance, count-tp,
gradcheck.  Every run echoes its fully resolved configuration; exit codes
are stable for CI: 0 success, 2 configuration or data error, 3 numerical
failure.

Run configuration files are flat `key=value` text (one pair per line,
`#` comments); unknown keys are rejected.  CLI flags override file values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _set_thread_env(n: int) -> None:
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ[var] = str(n)


def _parse_scalar(text: str):
    low = text.strip()
    if low in ("true", "True", "on", "yes"):
        return True
    if low in ("false", "False", "off", "no"):
        return False
    try:
        return int(low)
    except ValueError:
        pass
    try:
        return float(low)
    except ValueError:
        pass
    return low


def read_run_config(path):
    """Parse a flat key=value run configuration file."""
    from .errors import ConfigurationError

    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{ln}: expected key=value, got {raw.rstrip()!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = _parse_scalar(val)
    return out


def build_configs(file_values: dict, overrides: dict):
    """Split merged key=value settings into ModelConfig and TrainConfig,
    rejecting unknown keys."""
    from .errors import ConfigurationError
    from .nn import ModelConfig
    from .train import TrainConfig

    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - model_keys - train_keys
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    if "seed" in merged:
        # a single seed drives both model init and batching
        seed = merged["seed"]
    else:
        seed = 0
    mc = ModelConfig(**{k: v for k, v in merged.items() if k in model_keys})
    tc = TrainConfig(**{k: v for k, v in merged.items() if k in train_keys})
    return mc, tc, dict(merged, seed=seed)


def _echo_config(label: str, cfg: dict) -> None:
    print(f"{label}: {json.dumps(cfg, sort_keys=True)}")


def cmd_generate_data(args) -> int:
    from . import data

    mc, _, resolved = build_configs(
        read_run_config(args.config) if args.config else {},
        {"seed": args.seed},
    )
    _echo_config("resolved-config", dict(resolved, template=args.template, n=args.n))
    confs, manifest = data.teacher_generate(mc, seed=args.seed, n_samples=args.n, template=args.template)
    data.save_dataset(args.out, confs, manifest)
    print(f"wrote {len(confs)} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import data, train
    from .nn import QHNet

    mc, tc, resolved = build_configs(
        read_run_config(args.config) if args.config else {},
        {
            "seed": args.seed,
            "max_steps": args.max_steps,
            "warmup_steps": args.warmup_steps,
            "scheduler": args.scheduler,
        },
    )
    _echo_config("resolved-config", resolved)
    confs, manifest = data.load_dataset(args.data)
    n_val = min(args.val_n, max(0, len(confs) - 1))
    train_set = confs[: len(confs) - n_val]
    val_set = confs[len(confs) - n_val :]
    model = QHNet(mc)
    os.makedirs(args.out, exist_ok=True)
    ckpt_base = os.path.join(args.out, "ckpt")
    log_path = os.path.join(args.out, "metrics.jsonl")
    with open(log_path, "w") as log_fh:
        history, _ = train.train_loop(
            model,
            train_set,
            val_set,
            tc,
            checkpoint_path=ckpt_base,
            log_fh=log_fh,
            resume_from=args.resume,
        )
    print(f"finished {len(history)} steps; checkpoints at {ckpt_base}.best/.last, log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import data, train
    from .nn import QHNet

    model_config, store, _, _, _, _ = train.load_checkpoint(args.ckpt)
    confs, _ = data.load_dataset(args.data)
    model = QHNet(model_config)
    _echo_config("resolved-config", dict(asdict(model_config), data=args.data))
    metrics = train.evaluate(model, store, confs, occupied_only=not args.all_orbitals)
    # Hamiltonian and orbital-energy errors reported in 1e-6 Hartree
    report = {
        "mae_H_microHartree": metrics["mae_H"] * 1e6,
        "mae_eps_microHartree": metrics["mae_eps"] * 1e6,
        "cos_psi": metrics["cos_psi"],
    }
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_check_equivariance(args) -> int:
    import numpy as np

    from . import data, hamiltonian, irreps, train
    from .nn import QHNet

    if args.ckpt:
        model_config, store, _, _, _, _ = train.load_checkpoint(args.ckpt)
        model = QHNet(model_config)
    else:
        mc, _, _ = build_configs(
            read_run_config(args.config) if args.config else {}, {"seed": args.seed}
        )
        model = QHNet(mc)
        store = model.init_params(seed=args.seed)
    if args.corrupt_cg:
        # negative-control hook: break one Clebsch-Gordan block in place
        path = (1, 1, 1)
        model.cg._blocks[path] = model.cg._blocks[path] + 1e-3
    _echo_config(
        "resolved-config",
        dict(asdict(model.config), template=args.template, trials=args.trials),
    )
    atoms, base = data.TEMPLATES[args.template]
    atoms = list(atoms)
    rng = np.random.default_rng(args.seed)
    h0 = model.predict_hamiltonian(store, atoms, base)
    worst_rot = worst_trans = worst_perm = 0.0
    for _ in range(args.trials):
        r = irreps.random_rotation(rng)
        d = hamiltonian.block_rotation(atoms, r)
        h_rot = model.predict_hamiltonian(store, atoms, base @ r.T)
        worst_rot = max(worst_rot, float(np.max(np.abs(h_rot - d @ h0 @ d.T))))
        # translation drawn on the same 2^-32 grid as the template so the
        # shifted positions (and hence all position differences) are exact
        t = data.grid_snap(4.0 * rng.standard_normal(3))
        h_tr = model.predict_hamiltonian(store, atoms, base + t)
        worst_trans = max(worst_trans, float(np.max(np.abs(h_tr - h0))))
        perm = list(rng.permutation(len(atoms)))
        p = hamiltonian.orbital_permutation(atoms, perm)
        h_perm = model.predict_hamiltonian(
            store, [atoms[k] for k in perm], base[perm]
        )
        worst_perm = max(worst_perm, float(np.max(np.abs(h_perm - p @ h0 @ p.T))))
    report = {
        "rotation_residual": worst_rot,
        "translation_residual": worst_trans,
        "permutation_residual": worst_perm,
        "tolerance": args.tol,
    }
    print(json.dumps(report, sort_keys=True))
    ok = max(worst_rot, worst_trans, worst_perm) < args.tol
    print("equivariance:", "pass" if ok else "FAIL")
    return EXIT_OK if ok else 1


def cmd_count_tp(args) -> int:
    from .nn import QHNet

    mc, _, resolved = build_configs(
        read_run_config(args.config) if args.config else {},
        {"n_interaction_layers": args.layers},
    )
    _echo_config("resolved-config", resolved)
    counts = QHNet(mc).count_tp()
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .autodiff import gradcheck
    from .nn import QHNet, loss_node

    mc, _, resolved = build_configs(
        read_run_config(args.config) if args.config else {}, {"seed": args.seed}
    )
    _echo_config("resolved-config", dict(resolved, samples=args.samples, tol=args.tol))
    model = QHNet(mc)
    store = model.init_params(seed=args.seed)
    rng = np.random.default_rng(args.seed)
    atoms = [8, 1, 1]
    pos = np.array([[0.0, 0.0, 0.0], [1.8, 0.0, 0.0], [-0.45, 1.75, 0.0]])
    h = model.predict_hamiltonian(store, atoms, pos)
    label = h + 0.1 * rng.standard_normal(h.shape)

    def objective(store, tape):
        md, mo, geom, _ = model.forward(tape, store, atoms, pos)
        hp = model.hamiltonian_node(tape, md, mo, atoms, geom)
        # conditioning scale: keeps finite-difference roundoff of weakly
        # coupled coordinates below the relative-error floor
        return tape.scale(loss_node(tape, hp, label[None]), 1e-9)

    err = gradcheck(objective, store, eps=1e-6, samples=args.samples, rng=np.random.default_rng(args.seed))
    print(json.dumps({"worst_rel_err": err, "tolerance": args.tol}))
    print("gradcheck:", "pass" if err < args.tol else "FAIL")
    return EXIT_OK if err < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qhnet", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread count (default 1 for bit-reproducibility)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="teacher-labeled synthetic dataset")
    g.add_argument("--template", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="optimize on a dataset file")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int, dest="max_steps")
    t.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    t.add_argument("--scheduler", choices=["linear_warmup_decay", "reduce_on_plateau"])
    t.add_argument("--val-n", type=int, default=0, dest="val_n", help="records held out from the end of the file")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--all-orbitals", action="store_true", dest="all_orbitals", help="orbital-energy MAE over all orbitals instead of occupied only")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check-equivariance", help="rigid-motion residuals of a model")
    c.add_argument("--ckpt")
    c.add_argument("--random", action="store_true", help="random weights instead of a checkpoint")
    c.add_argument("--config")
    c.add_argument("--template", default="water")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-10)
    c.add_argument("--corrupt-cg", action="store_true", dest="corrupt_cg", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check_equivariance)

    n = sub.add_parser("count-tp", help="tensor-product invocation counters")
    n.add_argument("--config")
    n.add_argument("--layers", type=int, dest="layers", help="override n_interaction_layers")
    n.set_defaults(func=cmd_count_tp)

    d = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    d.add_argument("--config")
    d.add_argument("--samples", type=int, default=50)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--tol", type=float, default=1e-5)
    d.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_thread_env(args.threads)
    from .errors import (
        ConfigurationError,
        DataError,
        DegenerateGeometryError,
        NotPositiveDefiniteError,
        NumericalError,
        UnsupportedSystemError,
    )

    if getattr(args, "command", None) == "check-equivariance":
        if not args.ckpt and not args.random:
            print("error: check-equivariance needs --ckpt or --random", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigurationError, DataError, DegenerateGeometryError, UnsupportedSystemError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, NotPositiveDefiniteError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
