"""Training and evaluation harness.

The optimized objective is next-token cross entropy plus the sum of every
routed layer's load-balance loss. Logging smooths the raw loss with an
exponential moving average, s_t = (1 - alpha) * s_{t-1} + alpha * loss_t
with alpha = 0.001, seeded with the first observed loss. Runs are fully
deterministic given (seed, config): batches come from a dedicated PCG64
stream whose state rides along in checkpoints, so a resumed run continues
the uninterrupted run's log exactly.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import sample_batch, tokenize_bytes
from .model import Model, ModelSpec, build_model
from .optim import AdamW, cosine_lr

EMA_ALPHA = 0.001

RUNLOG_HEADER = ("step", "tokens_seen", "lr", "raw_loss", "ema_loss",
                 "aux_loss", "dropped_fraction", "wallclock_s")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int
    batch_size: int
    max_lr: float
    data: str
    context_length: int = 1024
    warmup_fraction: float = 0.01
    final_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    grad_clip: float = 0.5
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 500

    JSON_FIELDS = (
        "steps", "batch_size", "max_lr", "data", "context_length",
        "warmup_fraction", "final_lr_ratio", "weight_decay", "grad_clip",
        "seed", "dtype", "checkpoint_every",
    )

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.final_lr_ratio <= 1:
            raise ValueError("final_lr_ratio must be in (0, 1]")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.steps, self.max_lr, self.warmup_fraction, self.final_lr_ratio)


def load_config(path: str | Path) -> tuple[ModelSpec, TrainConfig]:
    """One flat JSON document holds both the model and training fields."""
    doc = json.loads(Path(path).read_text())
    return split_config(doc)


def split_config(doc: dict) -> tuple[ModelSpec, TrainConfig]:
    doc = dict(doc)
    unknown = set(doc) - set(ModelSpec.JSON_FIELDS) - set(TrainConfig.JSON_FIELDS)
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    train_doc = {k: doc.pop(k) for k in list(doc) if k in TrainConfig.JSON_FIELDS}
    spec = ModelSpec.from_dict(doc)
    config = TrainConfig(**train_doc)
    return spec, config


def merged_config_dict(spec: ModelSpec, config: TrainConfig) -> dict:
    doc = {name: getattr(spec, name) for name in ModelSpec.JSON_FIELDS}
    doc.update({name: getattr(config, name) for name in TrainConfig.JSON_FIELDS})
    return doc


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **kwargs):
        self.records.append(kwargs)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            self.write_csv(f)

    def write_csv(self, f):
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RUNLOG_HEADER)
        for r in self.records:
            writer.writerow([
                r["step"], r["tokens_seen"], repr(r["lr"]), repr(r["raw_loss"]),
                repr(r["ema_loss"]), repr(r["aux_loss"]),
                repr(r["dropped_fraction"]), repr(r["wallclock_s"]),
            ])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path: str | Path) -> "RunLog":
        log = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                log.append(
                    step=int(row["step"]),
                    tokens_seen=int(row["tokens_seen"]),
                    lr=float(row["lr"]),
                    raw_loss=float(row["raw_loss"]),
                    ema_loss=float(row["ema_loss"]),
                    aux_loss=float(row["aux_loss"]),
                    dropped_fraction=float(row["dropped_fraction"]),
                    wallclock_s=float(row["wallclock_s"]),
                )
        return log


class DivergenceMonitor:
    """Aborts when the raw loss exceeds twice the initial loss for 100
    consecutive steps."""

    def __init__(self, patience: int = 100, factor: float = 2.0):
        self.patience = patience
        self.factor = factor
        self.initial: float | None = None
        self.bad_streak = 0

    def observe(self, loss: float, step: int):
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * self.initial:
            self.bad_streak += 1
        else:
            self.bad_streak = 0
        if self.bad_streak >= self.patience:
            raise TrainingDiverged(
                f"loss {loss:.4f} above {self.factor} x initial ({self.initial:.4f}) "
                f"for {self.patience} consecutive steps at step {step}"
            )

    def state(self) -> dict:
        return {"initial": self.initial, "bad_streak": self.bad_streak}

    def load(self, state: dict):
        self.initial = state["initial"]
        self.bad_streak = state["bad_streak"]


def _model_arrays(model: Model, optimizer: AdamW) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in model.parameters().items()}
    arrays.update(optimizer.state_arrays())
    return arrays


def _save_training_checkpoint(path, spec, config, model, optimizer, rng, state):
    full_state = dict(state)
    full_state["opt_t"] = optimizer.t
    full_state["rng"] = rng.bit_generator.state
    save_checkpoint(path, merged_config_dict(spec, config), full_state, _model_arrays(model, optimizer))


def restore_model(path: str | Path, scan_mode: str = "sequential") -> tuple[Model, ModelSpec, TrainConfig, dict]:
    """Rebuild a model (and its config) from a checkpoint file."""
    config_doc, state, arrays = load_checkpoint(path)
    spec, config = split_config(config_doc)
    model = build_model(spec, seed=config.seed, dtype=np.dtype(config.dtype), scan_mode=scan_mode)
    for name, p in model.parameters().items():
        p.data = arrays[name].astype(p.data.dtype).reshape(p.data.shape)
    return model, spec, config, state


def train(
    spec: ModelSpec,
    config: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    log_every: int = 0,
    scan_mode: str = "sequential",
) -> RunLog:
    """Run (or resume) a training job; writes runlog.csv and checkpoint.bin
    under ``out_dir`` and returns the in-memory log of the steps it ran."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(config.dtype)
    tokens = tokenize_bytes(config.data)
    monitor = DivergenceMonitor()
    log = RunLog()

    if resume is None:
        model = build_model(spec, seed=config.seed, dtype=dtype, scan_mode=scan_mode)
        optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay,
                          grad_clip=config.grad_clip)
        rng = np.random.default_rng(config.seed + 1)  # batch stream, separate from init
        start_step = 0
        tokens_seen = 0
        ema = None
    else:
        config_doc, state, arrays = load_checkpoint(resume)
        saved_spec, saved_config = split_config(config_doc)
        if merged_config_dict(saved_spec, saved_config) != merged_config_dict(spec, config):
            raise ValueError("checkpoint config does not match the requested config")
        model = build_model(spec, seed=config.seed, dtype=dtype, scan_mode=scan_mode)
        optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay,
                          grad_clip=config.grad_clip)
        for name, p in model.parameters().items():
            p.data = arrays[name].astype(p.data.dtype).reshape(p.data.shape)
        optimizer.load_state_arrays(arrays)
        optimizer.t = state["opt_t"]
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        start_step = state["step"]
        tokens_seen = state["tokens_seen"]
        ema = state["ema_loss"]
        monitor.load(state["monitor"])

    runlog_path = out_dir / "runlog.csv"
    start_time = time.perf_counter()

    def checkpoint(step, final=False):
        name = "checkpoint.bin" if final else f"checkpoint_step{step}.bin"
        _save_training_checkpoint(
            out_dir / name, spec, config, model, optimizer, rng,
            {"step": step, "tokens_seen": tokens_seen, "ema_loss": ema,
             "monitor": monitor.state()},
        )

    try:
        for step in range(start_step + 1, config.steps + 1):
            inputs, targets = sample_batch(tokens, config.context_length, config.batch_size, rng)
            ce, aux, drops = model.loss(inputs, targets)
            objective = ce if aux is None else T.add(ce, aux)
            objective.backward()
            lr = config.lr_at(step)
            optimizer.step(lr)
            optimizer.zero_grad()

            raw = float(ce.data)
            ema = raw if ema is None else (1.0 - EMA_ALPHA) * ema + EMA_ALPHA * raw
            tokens_seen += config.batch_size * config.context_length
            log.append(
                step=step,
                tokens_seen=tokens_seen,
                lr=lr,
                raw_loss=raw,
                ema_loss=ema,
                aux_loss=0.0 if aux is None else float(aux.data),
                dropped_fraction=float(np.mean(drops)) if drops else 0.0,
                wallclock_s=time.perf_counter() - start_time,
            )
            if log_every and (step % log_every == 0 or step == config.steps):
                r = log.records[-1]
                print(f"step {step}/{config.steps}  raw {raw:.4f}  ema {ema:.4f}  "
                      f"aux {r['aux_loss']:.4f}  dropped {r['dropped_fraction']:.3f}  lr {lr:.2e}",
                      flush=True)
            monitor.observe(raw, step)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                checkpoint(step)
    except TrainingDiverged:
        log.to_csv(runlog_path)
        raise

    checkpoint(config.steps, final=True)
    log.to_csv(runlog_path)
    return log


def evaluate(model: Model, tokens: np.ndarray, context_length: int) -> float:
    """Mean per-token cross entropy over non-overlapping windows.

    Windows consume context_length + 1 bytes each (inputs plus the shifted
    targets) and are evaluated as one batch, so routed layers see the same
    token population on every call. No gradients are recorded.
    """
    n_windows = (len(tokens) - 1) // context_length
    if n_windows < 1:
        raise ValueError(
            f"need at least context_length + 1 = {context_length + 1} tokens, got {len(tokens)}"
        )
    inputs = np.stack([
        tokens[i * context_length:(i + 1) * context_length] for i in range(n_windows)
    ])
    targets = np.stack([
        tokens[i * context_length + 1:(i + 1) * context_length + 1] for i in range(n_windows)
    ])
    with T.no_grad():
        ce, _, _ = model.loss(inputs, targets)
    return float(ce.data)
