"""Experiment orchestration: configs, training runs, sweeps, and timing.

Each run owns one output directory holding its config, checkpoints, and
CSVs. Wall-clock numbers go to ``timing.csv`` and the manifest only; every
other CSV is a pure function of the config and therefore byte-identical
across re-runs with the same seed.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .beta import BetaConfig
from .core import InvalidParameterError, derive_seed, spawn_rng
from .data import (
    DatasetSplit,
    InteractionLog,
    build_eval_candidates,
    chronological_split,
    export_csv,
    generate_synthetic,
    ingest_csv,
    sample_negatives,
)
from .metrics import MetricsReport, hit_ratio_at_1, reward_win_rate
from .policy import (
    Adam,
    PolicyModel,
    ReferenceModel,
    Variant,
    likelihood_records,
    parse_variant,
    po_forward,
    save_checkpoint,
    sft_step,
)
from .selection import partition_by_gap

SB_DIAGNOSTIC_INSTANCES = 512
SB_CHECKPOINT_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

METRIC_CSVS = ("losses.csv", "sb_curve.csv", "selection_sizes.csv", "summary.csv")


class TrainingDivergedError(RuntimeError):
    """A training step produced a non-finite loss; the offending batch was dumped."""


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; serialized verbatim into the run directory."""

    data: str = ""  # CSV path; empty means the synthetic generator below
    users: int = 500
    items: int = 200
    interactions_per_user: int = 100
    noise: float = 2.5
    history_len: int = 80
    dim: int = 8
    sft_epochs: int = 5
    po_epochs: int = 3
    k: int = 15
    objective: str = "dmpo"
    variant: str = "dynamic"
    beta0: float = 1.0
    alpha: float = 0.5
    gamma: float = 6.0
    sft_lr: float = 0.01
    po_lr: float = 0.01
    batch_size: int = 256
    fixed_negatives: bool = False
    seed: int = 42
    out_dir: str = "runs/run"

    def __post_init__(self):
        if min(self.users, self.items, self.interactions_per_user, self.history_len,
               self.dim, self.sft_epochs, self.po_epochs, self.k, self.batch_size) < 1:
            raise InvalidParameterError("counts and epochs must be positive")
        if self.objective not in ("dpo", "dmpo", "sdpo", "mppo"):
            raise InvalidParameterError(f"unknown objective {self.objective!r}")
        parse_variant(self.variant)  # validates
        BetaConfig(self.beta0, self.alpha, self.gamma)  # validates
        if self.sft_lr <= 0 or self.po_lr <= 0:
            raise InvalidParameterError("learning rates must be positive")
        if self.seed < 0:
            raise InvalidParameterError("seed must be non-negative")

    @property
    def beta_config(self) -> BetaConfig:
        return BetaConfig(self.beta0, self.alpha, self.gamma)

    @property
    def parsed_variant(self) -> Variant:
        return parse_variant(self.variant)


_CONFIG_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def write_config(cfg: RunConfig, path) -> None:
    """Flat `key = value` serialization, one field per line."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidParameterError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key not in _CONFIG_TYPES:
            raise InvalidParameterError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value.strip())
    return RunConfig(**values)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, text: str):
    kind = _CONFIG_TYPES[key]
    if kind in ("bool", bool):
        if text not in ("true", "false"):
            raise InvalidParameterError(f"key {key!r}: expected true/false, got {text!r}")
        return text == "true"
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    return text


def load_dataset(cfg: RunConfig) -> InteractionLog:
    """CSV if configured (must exist), otherwise the seeded synthetic generator."""
    if cfg.data:
        if not Path(cfg.data).is_file():
            raise InvalidParameterError(f"dataset file not found: {cfg.data}")
        return ingest_csv(cfg.data)
    return generate_synthetic(cfg.users, cfg.items, cfg.dim, cfg.interactions_per_user,
                              cfg.noise, cfg.seed)


@dataclass
class TrainResult:
    config: RunConfig
    model: PolicyModel
    reference: ReferenceModel
    sft_losses: list[float]
    po_losses: list[float]
    boundary_curve: list[tuple[float, float]]
    selection_sizes: list[float] | None  # per PO epoch mean, selective variants only
    report: MetricsReport
    compute_step_seconds: list[float] = field(default_factory=list)

    @property
    def mean_selected(self) -> float | None:
        if self.selection_sizes is None:
            return None
        return math.fsum(self.selection_sizes) / len(self.selection_sizes)


def _batches(n: int, batch_size: int):
    return [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


def _dump_diverged(out_dir: Path | None, stage: str, step: int, entries) -> None:
    if out_dir is None:
        return
    np.savez(
        out_dir / "diverged_batch.npz",
        stage=stage,
        step=step,
        users=np.array([e.context.user for e in entries], dtype=np.int64),
        positions=np.array([getattr(e, "position", -1) for e in entries], dtype=np.int64),
    )


def run_training(cfg: RunConfig, log: InteractionLog | None = None,
                 sft_cache: dict | None = None, out_dir: Path | None = None) -> TrainResult:
    """Full pipeline: SFT, reference snapshot, preference optimization, evaluation.

    ``sft_cache`` lets sweeps reuse the SFT stage across configs that share
    every SFT-relevant field; the cached result is copied before further
    training, so reuse cannot change any outcome.
    """
    if log is None:
        log = load_dataset(cfg)
    split = chronological_split(log, history_len=cfg.history_len)
    if not split.train or not split.test:
        raise InvalidParameterError("dataset too small: empty train or test split after dropping short users")
    if split.vocab_size < cfg.k + 2:
        raise InvalidParameterError(f"vocabulary of {split.vocab_size} cannot support k={cfg.k}")
    variant = cfg.parsed_variant
    beta_cfg = cfg.beta_config

    model, sft_losses = _sft_stage(cfg, split, sft_cache, out_dir)
    reference = ReferenceModel(model)

    po_losses, boundary_curve, selection_sizes, compute_seconds, train_seconds, total_steps = _po_stage(
        cfg, split, model, reference, variant, beta_cfg, out_dir)

    test_entries = [(e.context, build_eval_candidates(e, split.vocab_size, cfg.seed)) for e in split.test]
    hit = hit_ratio_at_1(model, test_entries)
    eval_seed = derive_seed(cfg.seed, "eval-negatives")
    eval_instances = [sample_negatives(e, split, cfg.k, eval_seed) for e in split.test]
    win = reward_win_rate(model, reference, eval_instances, beta0=cfg.beta0)

    report = MetricsReport(
        hit_ratio_at_1=hit,
        reward_win_rate=win,
        boundary_curve=tuple(boundary_curve),
        per_step_seconds=train_seconds / total_steps,
        epoch_losses=tuple(po_losses),
    )
    return TrainResult(config=cfg, model=model, reference=reference,
                       sft_losses=sft_losses, po_losses=po_losses,
                       boundary_curve=boundary_curve, selection_sizes=selection_sizes,
                       report=report, compute_step_seconds=compute_seconds)


def _sft_key(cfg: RunConfig) -> tuple:
    return (cfg.data, cfg.users, cfg.items, cfg.interactions_per_user, cfg.noise,
            cfg.history_len, cfg.dim, cfg.sft_epochs, cfg.sft_lr, cfg.batch_size, cfg.seed)


def _sft_stage(cfg, split, sft_cache, out_dir) -> tuple[PolicyModel, list[float]]:
    key = _sft_key(cfg)
    if sft_cache is not None and key in sft_cache:
        cached_model, cached_losses = sft_cache[key]
        return cached_model.copy(), list(cached_losses)
    model = PolicyModel.initialize(split.vocab_size, cfg.dim, cfg.seed)
    opt = Adam(lr=cfg.sft_lr)
    pairs = [(e.context, e.positive) for e in split.train]
    losses = []
    step = 0
    for epoch in range(cfg.sft_epochs):
        perm = np.array(spawn_permutation(cfg.seed, "sft-shuffle", epoch, len(pairs)))
        epoch_losses = []
        for lo, hi in _batches(len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in perm[lo:hi]]
            loss = sft_step(model, batch, opt)
            step += 1
            if not math.isfinite(loss):
                _dump_diverged(out_dir, "sft", step, [split.train[i] for i in perm[lo:hi]])
                raise TrainingDivergedError(f"non-finite SFT loss at step {step}")
            epoch_losses.append(loss)
        losses.append(math.fsum(epoch_losses) / len(epoch_losses))
    if sft_cache is not None:
        sft_cache[key] = (model.copy(), list(losses))
    return model, losses


def spawn_permutation(seed: int, tag: str, epoch: int, n: int) -> np.ndarray:
    return spawn_rng(seed, tag, epoch).permutation(n)


def _po_stage(cfg, split, model, reference, variant, beta_cfg, out_dir):
    entries = list(split.train)
    n = len(entries)
    opt = Adam(lr=cfg.po_lr)
    steps_per_epoch = len(_batches(n, cfg.batch_size))
    total_steps = cfg.po_epochs * steps_per_epoch
    checkpoint_steps = sorted({round(f * total_steps) for f in SB_CHECKPOINT_FRACTIONS})

    diag_entries = entries[: min(SB_DIAGNOSTIC_INSTANCES, n)]
    diag_seed = derive_seed(cfg.seed, "sb-diagnostic")
    diag_instances = [sample_negatives(e, split, cfg.k, diag_seed) for e in diag_entries]

    def boundary_fraction() -> float:
        records = likelihood_records(model, reference, diag_instances)
        total = sum(rec.k for rec in records)
        return sum(len(partition_by_gap(rec).boundary) for rec in records) / total

    selective = variant.kind == "dynamic" and (variant.stage1 or variant.stage2)
    curve: list[tuple[float, float]] = []
    if 0 in checkpoint_steps:
        curve.append((0.0, boundary_fraction()))
    po_losses: list[float] = []
    selection_sizes: list[float] | None = [] if selective else None
    compute_seconds: list[float] = []
    train_seconds = 0.0  # everything training needs: sampling, shuffling, batching, updates
    step = 0
    for epoch in range(cfg.po_epochs):
        t_epoch = time.perf_counter()
        neg_seed = derive_seed(cfg.seed, "train-negatives", 0 if cfg.fixed_negatives else epoch)
        instances = [sample_negatives(e, split, cfg.k, neg_seed) for e in entries]
        perm = spawn_permutation(cfg.seed, "po-shuffle", epoch, n)
        epoch_losses = []
        epoch_sizes = []
        for lo, hi in _batches(n, cfg.batch_size):
            t0 = time.perf_counter()
            batch = [instances[i] for i in perm[lo:hi]]
            loss, grads, mask, _ = po_forward(model, reference, batch, cfg.objective, variant, beta_cfg)
            opt.step(model.params(), grads)
            compute_seconds.append(time.perf_counter() - t0)
            step += 1
            if not math.isfinite(loss):
                _dump_diverged(out_dir, "po", step, batch)
                raise TrainingDivergedError(f"non-finite PO loss at step {step}")
            epoch_losses.append(loss)
            if selective:
                epoch_sizes.append(mask.sum(axis=1))
            if step in checkpoint_steps:
                train_seconds += time.perf_counter() - t_epoch
                curve.append((step / total_steps, boundary_fraction()))
                t_epoch = time.perf_counter()  # diagnostics excluded from training time
        po_losses.append(math.fsum(epoch_losses) / len(epoch_losses))
        if selective:
            sizes = np.concatenate(epoch_sizes)
            selection_sizes.append(float(sizes.sum()) / len(sizes))
        train_seconds += time.perf_counter() - t_epoch
    return po_losses, curve, selection_sizes, compute_seconds, train_seconds, total_steps


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def execute_run(cfg: RunConfig, log: InteractionLog | None = None,
                sft_cache: dict | None = None) -> TrainResult:
    """Run training and write config, checkpoints, metric CSVs, and manifest."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    started = time.perf_counter()
    result = run_training(cfg, log=log, sft_cache=sft_cache, out_dir=out)
    elapsed = time.perf_counter() - started

    save_checkpoint(out / "model_sft.npz", result.reference, cfg.seed)
    save_checkpoint(out / "model_final.npz", result.model, cfg.seed)

    loss_rows = [["sft", i + 1, v] for i, v in enumerate(result.sft_losses)]
    loss_rows += [["po", i + 1, v] for i, v in enumerate(result.po_losses)]
    write_csv(out / "losses.csv", ["stage", "epoch", "mean_loss"], loss_rows)
    write_csv(out / "sb_curve.csv", ["progress", "boundary_fraction", "separated_fraction"],
              [[p, b, 1.0 - b] for p, b in result.boundary_curve])
    if result.selection_sizes is not None:
        write_csv(out / "selection_sizes.csv", ["epoch", "mean_selected"],
                  [[i + 1, v] for i, v in enumerate(result.selection_sizes)])
    write_csv(out / "summary.csv",
              ["objective", "variant", "k", "beta0", "alpha", "gamma", "seed",
               "hit_ratio_at_1", "reward_win_rate", "mean_selected_negatives",
               "final_sft_loss", "final_po_loss"],
              [[cfg.objective, cfg.variant, cfg.k, cfg.beta0, cfg.alpha, cfg.gamma, cfg.seed,
                result.report.hit_ratio_at_1, result.report.reward_win_rate,
                result.mean_selected, result.sft_losses[-1], result.po_losses[-1]]])
    compute = result.compute_step_seconds
    write_csv(out / "timing.csv",
              ["per_step_seconds", "compute_step_seconds", "total_seconds"],
              [[result.report.per_step_seconds,
                float(np.mean(compute)) if compute else 0.0, elapsed]])
    manifest = [
        "status = ok",
        f"out_dir = {cfg.out_dir}",
        f"seed = {cfg.seed}",
        f"total_seconds = {elapsed:.3f}",
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    return result


def generate_dataset(cfg: RunConfig) -> Path:
    """Write the configured dataset (synthetic or re-exported CSV) plus a manifest."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = load_dataset(cfg)
    path = out / "dataset.csv"
    export_csv(log, path)
    manifest = [
        f"rows = {len(log.rows)}",
        f"users = {log.user_count}",
        f"items = {log.vocab_size}",
        f"seed = {cfg.seed}",
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Sweeps and timing
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    "dynamic",
    "dynamic:no-stage1",
    "dynamic:no-stage2",
    "dynamic:no-stage1,no-stage2",
    "dynamic:fixed-beta",
)

SWEEP_AXES = ("k", "alpha", "gamma", "variant", "topk", "ablation")
DEFAULT_K_GRID = (3, 5, 7, 9, 11, 13, 15)


def build_grid(base: RunConfig, axis: str, values: list | None,
               variants: list[str] | None = None) -> list[RunConfig]:
    """One-axis grid of configs sharing the base seed and dataset."""
    if axis not in SWEEP_AXES:
        raise InvalidParameterError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    grid: list[RunConfig] = []
    root = Path(base.out_dir)

    def derived(label: str, **overrides) -> RunConfig:
        return dataclasses.replace(base, out_dir=str(root / f"run_{label}"), **overrides)

    if axis == "k":
        ks = [int(v) for v in (values or DEFAULT_K_GRID)]
        for k in ks:
            for var in variants or ["naive", "dynamic"]:
                grid.append(derived(f"k{k}_{_slug(var)}", k=k, variant=var))
    elif axis in ("alpha", "gamma"):
        if not values:
            raise InvalidParameterError(f"{axis} sweep needs explicit values")
        for v in values:
            grid.append(derived(f"{axis}{v}", **{axis: float(v)}))
    elif axis == "variant":
        for var in variants or ["naive", "dynamic"]:
            grid.append(derived(_slug(var), variant=var))
    elif axis == "topk":
        ks = [int(v) for v in (values or (2, 3, 4))]
        for k in ks:
            grid.append(derived(f"topk{k}", variant=f"topk:{k}"))
        grid.append(derived("dynamic", variant="dynamic"))
    else:  # ablation
        for var in ABLATION_VARIANTS:
            grid.append(derived(_slug(var), variant=var))
    return grid


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in text).strip("-")


def _axis_value(cfg: RunConfig, axis: str):
    if axis in ("k", "alpha", "gamma"):
        return getattr(cfg, axis)
    return cfg.variant


def run_sweep(base: RunConfig, axis: str, values: list | None = None,
              variants: list[str] | None = None) -> list[dict]:
    """Execute a one-axis grid; failures are recorded per row, not fatal."""
    grid = build_grid(base, axis, values, variants)
    root = Path(base.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    log = load_dataset(base)
    sft_cache: dict = {}
    rows = []
    for cfg in grid:
        row = {
            "axis": axis, "value": _axis_value(cfg, axis), "variant": cfg.variant,
            "objective": cfg.objective, "k": cfg.k, "alpha": cfg.alpha, "gamma": cfg.gamma,
            "hit_ratio_at_1": None, "reward_win_rate": None,
            "mean_selected_negatives": None, "final_po_loss": None,
            "status": "ok", "error": "",
        }
        try:
            result = execute_run(cfg, log=log, sft_cache=sft_cache)
            row.update(
                hit_ratio_at_1=result.report.hit_ratio_at_1,
                reward_win_rate=result.report.reward_win_rate,
                mean_selected_negatives=result.mean_selected,
                final_po_loss=result.po_losses[-1],
            )
        except Exception as exc:  # record and continue with the rest of the grid
            row["status"] = "error"
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    header = list(rows[0].keys())
    write_csv(root / "sweep.csv", header, [[r[h] for h in header] for r in rows])
    return rows


TIMING_REPEATS = 3


def run_timing(cfg: RunConfig) -> dict:
    """Per-step training wall time of the naive and dynamic variants.

    Per-step time is the preference-optimization stage's wall clock
    (sampling, shuffling, batching, and updates; diagnostics excluded)
    divided by the step count, mirroring how total training time is
    compared at scale. After a warmup pass of each variant (allocator and
    cache effects otherwise penalize whichever runs first), the variants
    alternate for ``TIMING_REPEATS`` measured pairs and the per-variant
    median is reported, which keeps one background-load spike from
    deciding the ratio. Repeated runs are identical by determinism, only
    timings differ.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = load_dataset(cfg)
    sft_cache: dict = {}
    samples: dict[str, list[float]] = {"naive": [], "dynamic": []}
    compute: dict[str, list[float]] = {"naive": [], "dynamic": []}
    for measured in (False,) + (True,) * TIMING_REPEATS:
        for label in ("naive", "dynamic"):
            run_cfg = dataclasses.replace(cfg, variant=label, out_dir=str(out / f"run_{label}"))
            result = execute_run(run_cfg, log=log, sft_cache=sft_cache)
            if measured:
                samples[label].append(result.report.per_step_seconds)
                compute[label].extend(result.compute_step_seconds)
    times = {label: float(np.median(vals)) for label, vals in samples.items()}
    overhead = (times["dynamic"] - times["naive"]) / times["naive"]
    report = {
        "naive_step_seconds": times["naive"],
        "dynamic_step_seconds": times["dynamic"],
        "overhead_ratio": overhead,
        "naive_compute_step_seconds": float(np.median(compute["naive"])),
        "dynamic_compute_step_seconds": float(np.median(compute["dynamic"])),
    }
    write_csv(out / "timing_report.csv", list(report.keys()), [list(report.values())])
    return report
