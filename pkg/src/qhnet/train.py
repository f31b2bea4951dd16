"""Training loop: Adam, learning-rate schedules, batching, checkpointing,
and JSON-lines metric logging.

Determinism contract: given (seed, config, dataset), serial training is
bit-reproducible, and resuming from a checkpoint continues the exact
trajectory of the uninterrupted run.  To keep resume stateless, the epoch
shuffle is derived from seed + epoch alone and the batch position follows
from the step counter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ParamStore, Tape, backward
from .data import Conformation
from .errors import ConfigurationError, ContractViolation, DataError, NumericalError
from .nn import ModelConfig, QHNet, loss_node
from . import spectra

CHECKPOINT_FORMAT = "qhnet-ckpt-1"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    max_steps: int = 2000
    warmup_steps: int = 1000
    lr_max: float = 5e-4
    lr_final: float = 1e-7
    batch_size: int = 8
    scheduler: str = "linear_warmup_decay"  # or "reduce_on_plateau"
    rlrop_factor: float = 0.5
    rlrop_patience: int = 5  # evaluation rounds
    rlrop_min_lr: float = 1e-6
    eval_every: int = 250
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps >= self.max_steps:
            raise ConfigurationError("warmup_steps must be < max_steps")
        if self.lr_final >= self.lr_max:
            raise ConfigurationError("lr_final must be < lr_max")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.scheduler not in ("linear_warmup_decay", "reduce_on_plateau"):
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")


class AdamState:
    def __init__(self, store: ParamStore):
        self.t = 0
        self.m = {n: np.zeros_like(store.values[n]) for n in store.names()}
        self.v = {n: np.zeros_like(store.values[n]) for n in store.names()}


def adam_step(store: ParamStore, state: AdamState, lr: float, grad_clip: float = 0.0) -> None:
    """One Adam update from store.grads into store.values.

    Raises NumericalError naming the first parameter with a non-finite
    gradient.
    """
    for name in store.names():
        if not np.all(np.isfinite(store.grads[name])):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    if grad_clip > 0.0:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in store.grads.values()))
        if total > grad_clip:
            scale = grad_clip / total
            for name in store.names():
                store.grads[name] = store.grads[name] * scale
    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    for name in store.names():
        g = store.grads[name]
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        store.values[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to lr_max at warmup_steps, then linear decay to
    exactly lr_final at max_steps."""
    if step < 0 or step > config.max_steps:
        raise ContractViolation(f"step {step} outside [0, {config.max_steps}]")
    if step <= config.warmup_steps:
        return config.lr_max * step / config.warmup_steps
    frac = (config.max_steps - step) / (config.max_steps - config.warmup_steps)
    return config.lr_final + (config.lr_max - config.lr_final) * frac


# ---------------------------------------------------------------------------
# checkpoint serialization: one JSON manifest line, then a little-endian
# float64 blob holding all arrays in manifest order


def save_checkpoint(
    path,
    model_config: ModelConfig,
    store: ParamStore,
    adam: AdamState,
    step: int,
    scheduler_state: dict,
    seed: int,
) -> None:
    names = store.names()
    arrays = []
    index = []
    for name in names:
        index.append([name, list(store.values[name].shape)])
        arrays.append(store.values[name])
    for name in names:
        arrays.append(adam.m[name])
    for name in names:
        arrays.append(adam.v[name])
    head = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model_config),
        "params": index,
        "adam_t": adam.t,
        "step": step,
        "scheduler_state": scheduler_state,
        "seed": seed,
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        fh.write(blob)


def load_checkpoint(path):
    """Returns (model_config, store, adam_state, step, scheduler_state, seed)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        head = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: bad checkpoint manifest: {e}")
    if head.get("format") != CHECKPOINT_FORMAT:
        raise DataError(
            f"{path}: checkpoint format {head.get('format')!r} is not {CHECKPOINT_FORMAT!r}"
        )
    model_config = ModelConfig(**head["model_config"])
    store = ParamStore()
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        return np.array(arr)  # writable copy

    expected = 3 * sum(int(np.prod(s)) if s else 1 for _, s in head["params"])
    if len(blob) != 8 * expected:
        raise DataError(f"{path}: blob size {len(blob)} != expected {8 * expected}")
    for name, shape in head["params"]:
        store.add(name, take(shape))
    adam = AdamState(store)
    adam.t = int(head["adam_t"])
    for name, shape in head["params"]:
        adam.m[name] = take(shape)
    for name, shape in head["params"]:
        adam.v[name] = take(shape)
    return (
        model_config,
        store,
        adam,
        int(head["step"]),
        dict(head["scheduler_state"]),
        int(head["seed"]),
    )


# ---------------------------------------------------------------------------
# training loop


def _uniform_atoms(dataset: list[Conformation]) -> list[int]:
    atoms = dataset[0].atoms
    for k, conf in enumerate(dataset):
        if conf.atoms != atoms:
            raise DataError(
                f"training requires a single molecule composition; record {k} "
                f"has atoms {conf.atoms} but record 0 has {atoms}"
            )
    return list(atoms)


def _batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Deterministic batch for a given global step: epoch shuffle from
    default_rng(seed + epoch), consecutive chunks of batch_size."""
    per_epoch = max(1, (n + batch_size - 1) // batch_size)
    epoch = step // per_epoch
    k = step % per_epoch
    perm = np.random.default_rng(seed + epoch).permutation(n)
    return perm[k * batch_size : (k + 1) * batch_size]


def evaluate(
    model: QHNet,
    store: ParamStore,
    dataset: list[Conformation],
    occupied_only: bool = True,
) -> dict[str, float]:
    """Mean metrics over a list of conformations."""
    acc = {"mae_H": 0.0, "mae_eps": 0.0, "cos_psi": 0.0}
    for conf in dataset:
        h = model.predict_hamiltonian(
            store, list(conf.atoms), conf.positions, symmetrize=True
        )
        m = spectra.metrics(
            h, conf.hamiltonian, list(conf.atoms), conf.overlap, occupied_only
        )
        for key in acc:
            acc[key] += m[key]
    return {k: v / len(dataset) for k, v in acc.items()}


def train_loop(
    model: QHNet,
    train_set: list[Conformation],
    val_set: list[Conformation],
    config: TrainConfig,
    checkpoint_path=None,
    log_fh=None,
    resume_from=None,
    stop_at: int | None = None,
) -> tuple[list[dict], ParamStore]:
    """Run (or resume) optimization; returns the metric history and the
    final parameters.

    Writes `<checkpoint_path>.last` every evaluation round and
    `<checkpoint_path>.best` on validation mae_H improvement.  On a
    non-finite loss the last good state is saved and NumericalError raised.
    `stop_at` interrupts training after that step (schedule and batching
    still follow max_steps, so resuming continues the same trajectory).
    """
    if not train_set:
        raise ConfigurationError("empty training split")
    atoms = _uniform_atoms(train_set + val_set)
    n = len(train_set)
    positions = np.stack([c.positions for c in train_set])
    labels = np.stack([c.hamiltonian for c in train_set])

    if resume_from is not None:
        ckpt_config, store, adam, start_step, sched, seed = load_checkpoint(resume_from)
        if asdict(ckpt_config) != asdict(model.config):
            raise ConfigurationError("checkpoint model config differs from requested config")
        if seed != config.seed:
            raise ConfigurationError("checkpoint seed differs from configured seed")
    else:
        store = model.init_params(seed=config.seed)
        adam = AdamState(store)
        start_step = 0
        sched = {"lr": config.lr_max, "best": None, "bad_rounds": 0, "best_val": None}

    history: list[dict] = []

    def emit(record):
        history.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")

    def save(tag, step):
        if checkpoint_path is not None:
            save_checkpoint(
                f"{checkpoint_path}.{tag}", model.config, store, adam, step, sched, config.seed
            )

    end_step = config.max_steps if stop_at is None else min(stop_at, config.max_steps)
    for step in range(start_step, end_step):
        idx = _batch_indices(n, config.batch_size, config.seed, step)
        tape = Tape()
        store.zero_grad()
        md, mo, geom, _ = model.forward(tape, store, atoms, positions[idx])
        h = model.hamiltonian_node(tape, md, mo, atoms, geom)
        loss = loss_node(tape, h, labels[idx])
        if not np.isfinite(loss.value):
            save("last", step)
            raise NumericalError(f"non-finite training loss at step {step}")
        backward(tape, loss)

        if config.scheduler == "linear_warmup_decay":
            lr = lr_schedule(step + 1, config)
        else:
            lr = sched["lr"]
        adam_step(store, adam, lr, config.grad_clip)

        record = {
            "step": step + 1,
            "lr": lr,
            "train_loss": float(loss.value),
            "val_mae_H": None,
            "val_mae_eps": None,
            "val_cos_psi": None,
        }
        last_step = step + 1 == config.max_steps
        if (step + 1) % config.eval_every == 0 or last_step:
            val = evaluate(model, store, val_set) if val_set else None
            if val is not None:
                record["val_mae_H"] = val["mae_H"]
                record["val_mae_eps"] = val["mae_eps"]
                record["val_cos_psi"] = val["cos_psi"]
                best = sched.get("best_val")
                if best is None or val["mae_H"] < best:
                    sched["best_val"] = val["mae_H"]
                    sched["bad_rounds"] = 0
                    save("best", step + 1)
                else:
                    sched["bad_rounds"] += 1
                    if (
                        config.scheduler == "reduce_on_plateau"
                        and sched["bad_rounds"] >= config.rlrop_patience
                    ):
                        sched["lr"] = max(
                            sched["lr"] * config.rlrop_factor, config.rlrop_min_lr
                        )
                        sched["bad_rounds"] = 0
            save("last", step + 1)
        emit(record)
    save("last", end_step)
    return history, store
