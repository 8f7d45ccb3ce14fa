"""Command-line surface for the forecasting and attribution toolkit.

Subcommands cover the full workflow: ``synth-gen`` writes the synthetic
dataset with its generative ground-truth explanations, ``ingest`` aligns raw
load and weather CSVs into an hourly table, ``train`` fits a forecaster and
writes a checkpoint plus a JSON-lines log, ``explain`` produces one
explanation (exact enumeration or a sampling baseline), ``global-explain``
batches explanations into importance and dependence tables, ``eval`` compares
the model against the persistence and linear baselines, and ``benchmark``
times single-explanation latency per mode.

Configuration comes from an INI file with sections [run], [model],
[training], [sampler], and [real]; every key has a default, so a plain run
needs no file at all. Each command hashes its fully resolved settings into a
16-hex-digit fingerprint that is embedded in every artifact it writes
(a leading ``# fingerprint:`` comment in CSVs, a ``fingerprint`` field in
JSON and checkpoint metadata), so outputs can always be traced back to the
configuration that produced them.

Exit codes: 0 on success, 2 for validation and configuration errors, 3 for
numerical failures such as diverged training. File outputs are written to a
temporary file and renamed into place, so readers never observe a partial
artifact.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import numkernel as nk
from .aggregate import (
    dependence_csv,
    dependence_points,
    feature_importance,
    importance_csv,
    local_explanation_csv,
    merge_day_groups,
)
from .baselines import evaluate, fit_linear, metrics_to_csv, persistence
from .explainers import (
    BackgroundData,
    SamplerConfig,
    custom_masker_explainer,
    permutation_explainer,
)
from .model import (
    ModelConfig,
    ModelParams,
    forward_arrays,
    load_checkpoint,
    save_checkpoint,
)
from .schema import (
    AlignedTable,
    FeatureSchema,
    ForecastExample,
    Standardizer,
    real_schema,
    synthetic_schema,
    windowize,
)
from .shapley import Explanation, explain
from .synthgen import (
    GroundTruthConfig,
    generate_dataset,
    ground_truth_explanation,
    read_dataset_csv,
    write_dataset_csv,
    write_ground_truth,
)
from .training import TrainConfig, train

__all__ = [
    "RunConfig",
    "RealDataConfig",
    "load_run_config",
    "config_fingerprint",
    "full_input_predictor",
    "ingest_real",
    "read_aligned_csv",
    "write_aligned_csv",
    "main",
]

SCHEMAS = ("synthetic", "real")
MODES = ("exact", "permutation", "custom-masker")

_LOAD_COLUMNS = ["utc_timestamp", "load_MW"]
_WEATHER_COLUMNS = ["utc_timestamp", "temperature_C", "precipitation_mm"]


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class RealDataConfig:
    """Paths and split fractions for the real-data ingestion path."""

    load_csv: str = ""
    weather_csv: str = ""
    holidays: str = ""
    train_fraction: float = 0.7
    val_fraction: float = 0.15

    def __post_init__(self):
        if not 0 < self.train_fraction < 1 or not 0 < self.val_fraction < 1:
            raise ValueError("split fractions must lie in (0, 1)")
        if self.train_fraction + self.val_fraction >= 1:
            raise ValueError("train and validation fractions must leave room "
                             "for a test segment")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one command invocation."""

    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"
    schema: str = "synthetic"
    mode: str = "exact"
    seed: int = 0
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    training: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sampler: SamplerConfig = dataclasses.field(default_factory=SamplerConfig)
    real: RealDataConfig = dataclasses.field(default_factory=RealDataConfig)

    def __post_init__(self):
        if self.schema not in SCHEMAS:
            raise ValueError(f"schema must be one of {SCHEMAS}, got {self.schema!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(raw: str, typ: type, key: str):
    if typ is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key} must be a boolean, got {raw!r}")
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise ValueError(f"{key} must be {typ.__name__}, got {raw!r}")


def _section_kwargs(parser: configparser.ConfigParser, section: str,
                    cls: type) -> dict:
    # Field types are read off a default instance; bool precedes int in the
    # check order because bool subclasses int.
    defaults = cls()
    known = {f.name: type(getattr(defaults, f.name))
             for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        out[key] = _coerce(raw, known[key], f"[{section}] {key}")
    return out


def load_run_config(path: str | None = None) -> RunConfig:
    """Read an INI config file; every key is optional and defaults apply.

    Sections: [run] data_dir/checkpoint_dir/output_dir/schema/mode/seed,
    [model], [training], [sampler] mirroring the respective dataclasses, and
    [real] for ingestion paths and split fractions.
    """
    if path is None:
        return RunConfig()
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    section_classes = {"model": ModelConfig, "training": TrainConfig,
                       "sampler": SamplerConfig, "real": RealDataConfig}
    kwargs: dict = {}
    for section in parser.sections():
        if section == "run":
            kwargs.update(_section_kwargs(parser, "run", RunConfig))
        elif section in section_classes:
            cls = section_classes[section]
            kwargs[section] = cls(**_section_kwargs(parser, section, cls))
        else:
            raise ValueError(f"unknown config section [{section}]")
    return RunConfig(**kwargs)


def config_fingerprint(payload: dict) -> str:
    """16 hex digits identifying a resolved configuration."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _command_fingerprint(command: str, cfg: RunConfig, **extra) -> str:
    return config_fingerprint({"command": command, "config": cfg.to_dict(),
                               **extra})


# ---------------------------------------------------------------------------
# atomic file plumbing


@contextlib.contextmanager
def _atomic_path(path: str):
    """Yield a temporary path that replaces ``path`` on success."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory,
                               prefix=os.path.basename(path) + ".",
                               suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        # mkstemp creates 0600 files; restore the usual umask-derived mode.
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_text(path: str, text: str, fingerprint: str | None = None) -> None:
    with _atomic_path(path) as tmp:
        with open(tmp, "w") as fh:
            if fingerprint is not None:
                fh.write(f"# fingerprint: {fingerprint}\n")
            fh.write(text)


# ---------------------------------------------------------------------------
# data plumbing shared by commands


def _resolve_schema(name: str) -> FeatureSchema:
    return synthetic_schema() if name == "synthetic" else real_schema()


def _identity_standardizer() -> Standardizer:
    # Synthetic data is generated directly on model scale.
    return Standardizer(target_mean=0.0, target_std=1.0,
                        covariate_means={}, covariate_stds={})


def _split_path(cfg: RunConfig, split: str) -> str:
    return os.path.join(cfg.data_dir, f"{split}.csv")


def _load_examples(path: str, schema: FeatureSchema,
                   standardizer: Standardizer) -> list[ForecastExample]:
    """Load examples for a schema from either dataset format.

    Synthetic-style per-example CSVs are read directly; an aligned hourly
    table (the ``ingest`` output) is standardized and cut into windows.
    """
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                header = line.strip().split(",")
                break
        else:
            raise ValueError(f"{path} is empty")
    if header[:2] == ["example_id", "step"]:
        return read_dataset_csv(path, schema)
    table = read_aligned_csv(path)
    return windowize(standardizer.transform_table(table), schema)


def full_input_predictor(params: ModelParams):
    """Batched full-mask forward pass as a plain array function.

    Returns a callable (past (B, L), covs (B, C, W)) -> (B, horizon) that the
    sampling explainers can drive; every group is present so masking plays no
    role in the prediction.
    """
    schema = params.schema

    def predict(past: np.ndarray, covs: np.ndarray) -> np.ndarray:
        batch = past.shape[0]
        day_bits = np.ones((batch, schema.day_groups), dtype=bool)
        cov_bits = np.ones((batch, schema.n_covariates), dtype=bool)
        with nk.no_grad():
            out = forward_arrays(np.ascontiguousarray(past, dtype=np.float32),
                                 np.ascontiguousarray(covs, dtype=np.float32),
                                 day_bits, cov_bits, params)
        return np.asarray(out.data, dtype=np.float64)

    return predict


def _predict_full(params: ModelParams, examples, chunk: int = 64) -> np.ndarray:
    predict = full_input_predictor(params)
    outs = []
    for lo in range(0, len(examples), chunk):
        batch = examples[lo:lo + chunk]
        past = np.stack([ex.past_target for ex in batch])
        covs = np.stack([ex.covariate_values for ex in batch])
        outs.append(predict(past, covs))
    return np.concatenate(outs, axis=0)


def _explain_one(mode: str, example: ForecastExample, checkpoint,
                 sampler: SamplerConfig,
                 background: BackgroundData | None) -> Explanation:
    if mode == "exact":
        if checkpoint.flavor != "shapformer":
            raise ValueError(
                "exact mode enumerates feature-group coalitions and needs a "
                "masked-trained (shapformer) checkpoint; this one has flavor "
                f"{checkpoint.flavor!r}")
        return explain(example, checkpoint.params)
    if background is None:
        raise ValueError(f"{mode} mode needs background data")
    predictor = full_input_predictor(checkpoint.params)
    if mode == "permutation":
        return permutation_explainer(example, predictor, sampler, background)
    return custom_masker_explainer(example, predictor, sampler, background)


# ---------------------------------------------------------------------------
# real-data ingestion


def _read_csv_columns(path: str, expected: list[str]) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty")
        if header != expected:
            raise ValueError(f"{path} must have columns {expected}, "
                             f"got {header}")
        rows = list(reader)
    for i, row in enumerate(rows):
        if len(row) != len(expected):
            raise ValueError(f"{path} row {i + 2} has {len(row)} fields, "
                             f"expected {len(expected)}")
    return {name: [row[j] for row in rows] for j, name in enumerate(expected)}


def _parse_timestamps(raw: list[str], path: str) -> np.ndarray:
    stamps = []
    for value in raw:
        try:
            stamps.append(np.datetime64(value.strip(), "h"))
        except ValueError:
            raise ValueError(f"{path}: bad timestamp {value!r}")
    out = np.array(stamps, dtype="datetime64[h]")
    order = np.argsort(out, kind="stable")
    out = out[order]
    dup = np.flatnonzero(np.diff(out.astype(np.int64)) == 0)
    if dup.size:
        raise ValueError(f"{path}: duplicate timestamp {out[dup[0]]} "
                         "(data must be UTC, not local time)")
    return order, out


def _parse_float_column(values: list[str], stamps: np.ndarray, column: str):
    out = np.empty(len(values), dtype=np.float64)
    for i, value in enumerate(values):
        text = value.strip()
        if not text:
            raise ValueError(f"missing {column} at {stamps[i]}")
        try:
            out[i] = float(text)
        except ValueError:
            raise ValueError(f"bad {column} value {value!r} at {stamps[i]}")
        if not np.isfinite(out[i]):
            raise ValueError(f"missing {column} at {stamps[i]}")
    return out


def _calendar_columns(stamps: np.ndarray) -> dict[str, np.ndarray]:
    # Timestamps are UTC; hours since epoch start on 1970-01-01T00, a
    # Thursday, so day-of-week needs a +3 shift to make Monday 0.
    hours = stamps.astype(np.int64)
    days = hours // 24
    months = stamps.astype("datetime64[M]").astype(np.int64)
    return {
        "hour": (hours % 24).astype(np.float64),
        "dow": ((days + 3) % 7).astype(np.float64),
        "month": (months % 12).astype(np.float64),
    }


def ingest_real(load_csv: str, weather_csv: str,
                holidays_path: str) -> AlignedTable:
    """Join raw load and weather CSVs into one aligned hourly table.

    The load file needs columns (utc_timestamp, load_MW) and the weather file
    (utc_timestamp, temperature_C, precipitation_mm); timestamps are
    inner-joined, calendar covariates are derived from the UTC timestamps,
    and the holiday flag comes from the user-supplied calendar file (one ISO
    date per line). Duplicate timestamps, hourly gaps in the joined range,
    and missing values are rejected with the offending timestamp named.
    """
    load_cols = _read_csv_columns(load_csv, _LOAD_COLUMNS)
    weather_cols = _read_csv_columns(weather_csv, _WEATHER_COLUMNS)

    load_order, load_ts = _parse_timestamps(load_cols["utc_timestamp"], load_csv)
    load_vals = _parse_float_column(
        [load_cols["load_MW"][i] for i in load_order], load_ts, "load")
    weather_order, weather_ts = _parse_timestamps(
        weather_cols["utc_timestamp"], weather_csv)
    temperature = _parse_float_column(
        [weather_cols["temperature_C"][i] for i in weather_order],
        weather_ts, "temperature")
    precipitation = _parse_float_column(
        [weather_cols["precipitation_mm"][i] for i in weather_order],
        weather_ts, "precipitation")

    common, load_idx, weather_idx = np.intersect1d(
        load_ts, weather_ts, assume_unique=True, return_indices=True)
    if common.size == 0:
        raise ValueError("load and weather files share no timestamps")
    deltas = np.diff(common.astype(np.int64))
    gaps = np.flatnonzero(deltas != 1)
    if gaps.size:
        g = gaps[0]
        raise ValueError(f"gap in the joined hourly range between "
                         f"{common[g]} and {common[g + 1]}")

    holidays = set()
    with open(holidays_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                holidays.add(np.datetime64(text, "D"))
            except ValueError:
                raise ValueError(f"{holidays_path} line {lineno}: "
                                 f"bad date {text!r}")

    covariates = _calendar_columns(common)
    dates = common.astype("datetime64[D]")
    covariates["holiday"] = np.array(
        [1.0 if d in holidays else 0.0 for d in dates])
    covariates["temperature"] = temperature[weather_idx]
    covariates["precipitation"] = precipitation[weather_idx]
    return AlignedTable(timestamps=common, target=load_vals[load_idx],
                        covariates=covariates)


def write_aligned_csv(path: str, table: AlignedTable,
                      fingerprint: str | None = None) -> None:
    """Write an aligned table as (utc_timestamp, load, covariates...)."""
    names = list(table.covariates)
    with _atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as fh:
            if fingerprint is not None:
                fh.write(f"# fingerprint: {fingerprint}\n")
            writer = csv.writer(fh)
            writer.writerow(["utc_timestamp", "load"] + names)
            for i, ts in enumerate(table.timestamps):
                row = [str(ts), "%.9g" % table.target[i]]
                row += ["%.9g" % table.covariates[name][i] for name in names]
                writer.writerow(row)


def read_aligned_csv(path: str) -> AlignedTable:
    with open(path, newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader)
        if header[:2] != ["utc_timestamp", "load"]:
            raise ValueError(f"{path} is not an aligned table "
                             f"(header starts {header[:2]})")
        rows = list(reader)
    stamps = np.array([np.datetime64(r[0], "h") for r in rows],
                      dtype="datetime64[h]")
    target = np.array([float(r[1]) for r in rows], dtype=np.float64)
    covariates = {name: np.array([float(r[2 + j]) for r in rows])
                  for j, name in enumerate(header[2:])}
    return AlignedTable(timestamps=stamps, target=target,
                        covariates=covariates)


def _real_splits(table: AlignedTable, schema: FeatureSchema,
                 real: RealDataConfig):
    """Chronological train/val/test split of an aligned table.

    The standardizer is fit on the training rows only; windows that would
    straddle a split boundary are dropped by windowize.
    """
    n = len(table.target)
    b1 = int(n * real.train_fraction)
    b2 = int(n * (real.train_fraction + real.val_fraction))
    if min(b1, b2 - b1, n - b2) < schema.window:
        raise ValueError(f"aligned table with {n} rows is too short to cut "
                         f"{schema.window}-step windows from every split")
    standardizer = Standardizer.fit(table, schema, rows=slice(0, b1))
    examples = windowize(standardizer.transform_table(table), schema,
                         boundaries=(b1, b2))
    n_train = b1 - schema.window + 1
    n_val = (b2 - b1) - schema.window + 1
    splits = {
        "train": examples[:n_train],
        "val": examples[n_train:n_train + n_val],
        "test": examples[n_train + n_val:],
    }
    return splits, standardizer


def _training_data(cfg: RunConfig, aligned_path: str | None):
    """Resolve (splits dict, standardizer) for either schema."""
    schema = _resolve_schema(cfg.schema)
    if cfg.schema == "synthetic":
        splits = {name: read_dataset_csv(_split_path(cfg, name), schema)
                  for name in ("train", "val", "test")}
        return schema, splits, _identity_standardizer()
    path = aligned_path or os.path.join(cfg.data_dir, "aligned.csv")
    table = read_aligned_csv(path)
    splits, standardizer = _real_splits(table, schema, cfg.real)
    return schema, splits, standardizer


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(args) -> int:
    sizes = {"train": args.train, "val": args.val, "test": args.test}
    fingerprint = config_fingerprint({
        "command": "synth-gen", "sizes": sizes, "seed": args.seed,
        "ground_truth": args.ground_truth,
    })
    dataset = generate_dataset(sizes, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    print("split,example_id,steps")
    for name in ("train", "val", "test"):
        examples = getattr(dataset, name)
        path = os.path.join(args.out, f"{name}.csv")
        with _atomic_path(path) as tmp:
            write_dataset_csv(tmp, examples, fingerprint=fingerprint)
        for i, ex in enumerate(examples):
            print(f"{name},{i},{ex.schema.window}")
    if args.ground_truth:
        oracle_cfg = {"resamples": args.ground_truth,
                      "permutations": args.permutations}
        explanations = {}
        for i, (ex, latents) in enumerate(zip(dataset.test,
                                              dataset.latents["test"])):
            seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
            config = GroundTruthConfig(seed=seed, **oracle_cfg)
            explanations[i] = ground_truth_explanation(ex, latents, config)
        path = os.path.join(args.out, "ground_truth.json")
        with _atomic_path(path) as tmp:
            write_ground_truth(tmp, explanations, fingerprint=fingerprint)
        print(f"wrote {path} ({len(explanations)} explanations)",
              file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    fingerprint = _command_fingerprint("train", cfg, flavor=args.flavor,
                                       resume=bool(args.resume))
    schema, splits, standardizer = _training_data(cfg, args.data)

    initial = None
    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        if checkpoint.params.schema != schema:
            raise ValueError("resume checkpoint was trained on a different "
                             "schema")
        initial = checkpoint.params

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    out_path = args.out or os.path.join(cfg.checkpoint_dir,
                                        f"{args.flavor}.npz")
    log_path = os.path.splitext(out_path)[0] + ".log.jsonl"

    def progress(entry: dict) -> None:
        # val_loss is None when the epoch aborted before validation.
        val = entry["val_loss"]
        val_text = f"{val:.6f}" if val is not None else "n/a"
        print(f"epoch {entry['epoch']}: train {entry['train_loss']:.6f} "
              f"val {val_text}", file=sys.stderr)

    params, logs = train(splits["train"], splits["val"], cfg.model,
                         cfg.training, flavor=args.flavor,
                         initial_params=initial, log_path=log_path,
                         progress=progress)
    save_checkpoint(out_path, params, standardizer, args.flavor,
                    extra={"fingerprint": fingerprint,
                           "training": dataclasses.asdict(cfg.training),
                           "schema_name": cfg.schema})
    finished = [e["val_loss"] for e in logs if e["val_loss"] is not None]
    best_val = min(finished) if finished else float("nan")
    print(f"saved {out_path} (best val {best_val:.6f}, "
          f"{len(logs)} epochs, log {log_path})")
    if logs and logs[-1].get("diverged"):
        print("training diverged; checkpoint holds the best finite "
              "parameters", file=sys.stderr)
        return 3
    return 0


def _load_checkpoint_and_examples(args, cfg: RunConfig):
    checkpoint = load_checkpoint(args.checkpoint)
    schema = checkpoint.params.schema
    standardizer = checkpoint.standardizer or _identity_standardizer()
    data_path = args.data or _split_path(cfg, "test")
    examples = _load_examples(data_path, schema, standardizer)
    if not examples:
        raise ValueError(f"no examples in {data_path}")
    return checkpoint, examples


def _sampler_from_args(cfg: RunConfig, args) -> SamplerConfig:
    return SamplerConfig(
        permutations=(args.permutations if args.permutations is not None
                      else cfg.sampler.permutations),
        samples=(args.samples if args.samples is not None
                 else cfg.sampler.samples),
        seed=cfg.sampler.seed,
    )


def cmd_explain(args) -> int:
    cfg = load_run_config(args.config)
    mode = args.mode or cfg.mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    checkpoint, examples = _load_checkpoint_and_examples(args, cfg)
    if not 0 <= args.example_id < len(examples):
        raise ValueError(f"example id {args.example_id} out of range "
                         f"(0..{len(examples) - 1})")
    sampler = _sampler_from_args(cfg, args)
    fingerprint = _command_fingerprint(
        "explain", cfg, mode=mode, example_id=args.example_id,
        sampler=dataclasses.asdict(sampler))
    background = None
    if mode != "exact":
        background = BackgroundData(examples)
    explanation = _explain_one(mode, examples[args.example_id], checkpoint,
                               sampler, background)
    text = json.dumps(explanation.to_json_dict(fingerprint), indent=2)
    if args.out:
        _write_text(args.out, text + "\n")
        print(f"wrote {args.out} (mode {explanation.mode}, "
              f"{explanation.mask_count} model calls, "
              f"{explanation.elapsed_ms:.1f} ms)")
    else:
        print(text)
    return 0


def cmd_global_explain(args) -> int:
    cfg = load_run_config(args.config)
    mode = args.mode or cfg.mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    checkpoint, examples = _load_checkpoint_and_examples(args, cfg)
    if args.limit is not None:
        examples = examples[:args.limit]
    sampler = _sampler_from_args(cfg, args)
    fingerprint = _command_fingerprint(
        "global-explain", cfg, mode=mode, limit=len(examples),
        sampler=dataclasses.asdict(sampler), merge_days=not args.keep_days)
    background = BackgroundData(examples) if mode != "exact" else None

    explanations = []
    for i, example in enumerate(examples):
        explanation = _explain_one(mode, example, checkpoint, sampler,
                                   background)
        if not args.keep_days:
            explanation = merge_day_groups(explanation)
        explanations.append(explanation)
        print(f"explained {i + 1}/{len(examples)}", file=sys.stderr)

    out_dir = args.out or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    table = feature_importance(explanations)
    importance_path = os.path.join(out_dir, "importance.csv")
    _write_text(importance_path, importance_csv(table), fingerprint)
    written = [importance_path]

    schema = checkpoint.params.schema
    for group in args.dependence or ():
        points = dependence_points(explanations, examples, group,
                                   step=args.step)
        discrete = False
        if group in {c.name for c in schema.covariates}:
            discrete = schema.covariate(group).kind == "categorical"
        path = os.path.join(out_dir, f"dependence_{group}.csv")
        _write_text(path, dependence_csv(points, discrete=discrete,
                                         jitter_seed=cfg.seed), fingerprint)
        written.append(path)

    for example_id in args.local or ():
        if not 0 <= example_id < len(examples):
            raise ValueError(f"local example id {example_id} out of range")
        path = os.path.join(out_dir, f"local_explanation_{example_id}.csv")
        _write_text(path, local_explanation_csv(
            explanations[example_id],
            examples[example_id].future_target), fingerprint)
        written.append(path)

    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    checkpoint = load_checkpoint(args.checkpoint)
    schema = checkpoint.params.schema
    standardizer = checkpoint.standardizer or _identity_standardizer()
    fingerprint = _command_fingerprint("eval", cfg, split=args.split)

    if args.data:
        table = read_aligned_csv(args.data)
        splits, standardizer = _real_splits(table, schema, cfg.real)
    else:
        splits = {name: read_dataset_csv(_split_path(cfg, name), schema)
                  for name in ("train", args.split)}
    train_examples = splits["train"]
    eval_examples = splits[args.split]
    targets = np.stack([ex.future_target for ex in eval_examples])

    reports = {}
    reports["persistence"] = evaluate(
        np.stack([persistence(ex) for ex in eval_examples]), targets,
        standardizer)
    linear = fit_linear(train_examples)
    reports["linear"] = evaluate(linear.predict_many(eval_examples), targets,
                                 standardizer)
    reports[checkpoint.flavor] = evaluate(
        _predict_full(checkpoint.params, eval_examples), targets,
        standardizer)

    text = metrics_to_csv(reports)
    print(text, end="")
    if args.out:
        _write_text(args.out, text, fingerprint)
        print(f"wrote {args.out}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = load_run_config(args.config)
    checkpoint, examples = _load_checkpoint_and_examples(args, cfg)
    if not 0 <= args.example_id < len(examples):
        raise ValueError(f"example id {args.example_id} out of range")
    example = examples[args.example_id]
    sampler = _sampler_from_args(cfg, args)
    fingerprint = _command_fingerprint(
        "benchmark", cfg, example_id=args.example_id, repeats=args.repeats,
        sampler=dataclasses.asdict(sampler))

    modes = list(args.modes) if args.modes else list(MODES)
    if checkpoint.flavor != "shapformer" and "exact" in modes:
        modes.remove("exact")
        print("skipping exact mode: checkpoint is not masked-trained",
              file=sys.stderr)
    background = BackgroundData(examples)

    # One untimed full forward warms any lazily allocated buffers.
    _predict_full(checkpoint.params, [example])
    rows = []
    medians = {}
    for mode in modes:
        seconds = []
        calls = None
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            explanation = _explain_one(mode, example, checkpoint, sampler,
                                       background)
            seconds.append(time.perf_counter() - t0)
            calls = explanation.mask_count
        medians[mode] = float(np.median(seconds))
        rows.append((mode, medians[mode], calls))

    lines = ["mode,median_seconds,model_calls,repeats"]
    for mode, median, calls in rows:
        lines.append(f"{mode},{median:.6f},{calls},{args.repeats}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if "exact" in medians and "custom-masker" in medians:
        print(f"ratio custom-masker/exact: "
              f"{medians['custom-masker'] / medians['exact']:.3f}")
    if "permutation" in medians and "exact" in medians:
        print(f"ratio permutation/exact: "
              f"{medians['permutation'] / medians['exact']:.3f}")
    if args.out:
        _write_text(args.out, text, fingerprint)
        print(f"wrote {args.out}")
    return 0


def cmd_ingest(args) -> int:
    fingerprint = config_fingerprint({
        "command": "ingest", "load": os.path.basename(args.load),
        "weather": os.path.basename(args.weather),
        "holidays": os.path.basename(args.holidays),
    })
    table = ingest_real(args.load, args.weather, args.holidays)
    write_aligned_csv(args.out, table, fingerprint)
    examples = windowize(table, real_schema())
    print(f"wrote {args.out}: {len(table.target)} aligned rows "
          f"({table.timestamps[0]} .. {table.timestamps[-1]}), "
          f"{len(examples)} windows")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flag(parser) -> None:
    parser.add_argument("--config", default=None,
                        help="INI config file (defaults apply without one)")


def _add_sampler_flags(parser) -> None:
    parser.add_argument("--permutations", type=int, default=None,
                        help="sampling permutations (overrides config)")
    parser.add_argument("--samples", type=int, default=None,
                        help="background samples per draw (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapcast",
        description="Train masked forecasters and explain their predictions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen",
                       help="generate the synthetic dataset with ground truth")
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ground-truth", type=int, default=0, metavar="K",
                   help="oracle resamples per coalition (0 disables)")
    p.add_argument("--permutations", type=int, default=4,
                   help="oracle permutation walks per explanation")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train a forecaster")
    _add_config_flag(p)
    p.add_argument("--flavor", choices=("shapformer", "transformer"),
                   default="shapformer")
    p.add_argument("--data", default=None,
                   help="aligned table CSV (real schema only)")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue optimizing from")
    p.add_argument("--out", default=None, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="explain one forecast")
    _add_config_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--example-id", type=int, required=True)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--data", default=None,
                   help="dataset CSV (default: <data_dir>/test.csv)")
    _add_sampler_flags(p)
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("global-explain",
                       help="aggregate explanations over a split")
    _add_config_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--limit", type=int, default=None,
                   help="explain only the first N examples")
    p.add_argument("--keep-days", action="store_true",
                   help="keep the seven past-load day groups separate")
    p.add_argument("--dependence", action="append", metavar="GROUP",
                   help="write a dependence panel CSV for this group")
    p.add_argument("--local", action="append", type=int, metavar="ID",
                   help="write a per-step explanation CSV for this example")
    p.add_argument("--step", type=int, default=23,
                   help="horizon step for dependence panels")
    _add_sampler_flags(p)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_global_explain)

    p = sub.add_parser("eval",
                       help="compare the model against the baselines")
    _add_config_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--data", default=None,
                   help="aligned table CSV (real schema only)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark",
                       help="time single-explanation latency per mode")
    _add_config_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--example-id", type=int, default=0)
    p.add_argument("--modes", nargs="+", choices=MODES, default=None)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--data", default=None)
    _add_sampler_flags(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ingest",
                       help="align raw load and weather CSVs")
    p.add_argument("--load", required=True, help="load CSV")
    p.add_argument("--weather", required=True, help="weather CSV")
    p.add_argument("--holidays", required=True,
                   help="holiday calendar, one ISO date per line")
    p.add_argument("--out", required=True, help="aligned table CSV")
    p.set_defaults(func=cmd_ingest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, OSError,
            configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
