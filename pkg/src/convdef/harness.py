"""Experiment driver: model zoo, baseline, evaluation loop and reports.

Named models are defined in weeks and expand against the data layout, so
the same names run on the full 77-location year and on desk-scale
synthetic data. The homogeneous Poisson baseline is always fit alongside
whatever model a run evaluates; paired differences against it are part of
every report row.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    CountMatrix,
    CsvSchema,
    DataError,
    MaskSpec,
    SynthSpec,
    apply_mask,
    concat_samples,
    ingest_csv,
    load_counts,
    split_loyo,
    synth_generate,
)
from .expfam import GammaParams, poisson_logpmf
from .inference import (
    EstimatorConfig,
    OptimizerConfig,
    fit_test,
    heldout_loglik,
    train,
)
from .model import ConfigurationError, ModelSpec, model_spec_from_dict

__all__ = [
    "MODEL_NAMES",
    "PriorSettings",
    "InferenceSettings",
    "ExperimentConfig",
    "RunRow",
    "EvalReport",
    "build_named_model",
    "hp_fit",
    "hp_heldout_loglik",
    "run_experiment",
    "run_sweep",
    "emit_report",
    "parse_report",
    "load_experiment_config",
]

logger = logging.getLogger(__name__)

HP_RATE_FLOOR = 1e-8

# (filter_weeks, stride_weeks) of the first layer, then (filter, stride) in
# first-layer nodes for each deeper layer.
_MODEL_ZOO = {
    "CDEF_1_51": ((1, 1), []),
    "CDEF_1_51_2_17": ((1, 1), [(3, 3)]),
    "CDEF_1_51_2_25": ((1, 1), [(3, 2)]),
    "CDEF_1_51_2_49": ((1, 1), [(3, 1)]),
    "CDEF_1_17": ((3, 3), []),
    "CDEF_1_25": ((3, 2), []),
    "CDEF_1_49": ((3, 1), []),
}

MODEL_NAMES = ("HP",) + tuple(_MODEL_ZOO) + ("custom",)


@dataclass(frozen=True)
class PriorSettings:
    """Gamma hyperparameters; defaults are package choices, soft (< 1) shapes."""

    top_shape: float = 0.1
    top_rate: float = 0.1
    weight_shape: float = 0.1
    weight_rate: float = 0.3
    fixed_shape: float = 0.3

    def top(self) -> GammaParams:
        return GammaParams(self.top_shape, self.top_rate)

    def weight(self) -> GammaParams:
        return GammaParams(self.weight_shape, self.weight_rate)


@dataclass(frozen=True)
class InferenceSettings:
    """Experiment-level knobs. 32 draws per iteration is deliberately above
    the library default of 8: two-layer models need the variance headroom."""

    mc_samples: int = 32
    train_iterations: int = 3000
    test_iterations: int = 1000
    eval_samples: int = 512
    step_size: float = 0.1
    decay: float = 0.9
    clip_norm: float = 10.0

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(step_size=self.step_size, decay=self.decay)

    def estimator(self, seed: int) -> EstimatorConfig:
        return EstimatorConfig(
            mc_samples=self.mc_samples, seed=seed, clip_norm=self.clip_norm
        )


@dataclass
class ExperimentConfig:
    """Everything one evaluation run needs, loadable from a config file."""

    model: str = "CDEF_1_51"
    models: list[str] = field(default_factory=list)  # sweep only
    custom_model: str | None = None
    mask: MaskSpec = field(default_factory=lambda: MaskSpec("alternate_weeks"))
    synth: SynthSpec | None = None
    csv_path: str | None = None
    csv_schema: CsvSchema = field(default_factory=CsvSchema)
    cached_path: str | None = None
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    priors: PriorSettings = field(default_factory=PriorSettings)
    folds: list[int] | None = None
    reveal_grid: list[int] | None = None
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        sources = [
            s for s in (self.synth, self.csv_path, self.cached_path) if s is not None
        ]
        if len(sources) != 1:
            raise ConfigurationError(
                "exactly one data source (synth, csv or cached) is required"
            )
        known = set(MODEL_NAMES)
        for name in [self.model] + list(self.models):
            if name not in known:
                raise ConfigurationError(
                    f"unknown model {name!r}; choose from {sorted(known)}"
                )
        if self.model == "custom" or "custom" in self.models:
            if not self.custom_model:
                raise ConfigurationError("model 'custom' needs custom_model: <path>")


def derive_seed(*keys) -> int:
    """Well-mixed integer seed from a tuple of integer keys."""
    return int(
        np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0]
    )


# ---------------------------------------------------------------------------
# Model zoo.
# ---------------------------------------------------------------------------


def build_named_model(
    name: str,
    n_days: int,
    n_locations: int,
    priors: PriorSettings,
    *,
    custom_path=None,
) -> ModelSpec:
    """Expand a model name against the data layout.

    First-layer filters and strides are whole weeks of cells (7 days times
    all locations); deeper layers are defined over first-layer nodes.
    """
    if name == "custom":
        import yaml

        with open(custom_path) as fh:
            return model_spec_from_dict(yaml.safe_load(fh))
    if name not in _MODEL_ZOO:
        raise ConfigurationError(f"unknown model {name!r}")
    (fw, sw), upper = _MODEL_ZOO[name]
    week = 7 * n_locations
    layer_cfgs = [(fw * week, sw * week, None)]
    layer_cfgs += [(f, s, None) for f, s in upper]
    cfgs = [(f, s, priors.fixed_shape) for f, s, _ in layer_cfgs]
    return ModelSpec.from_filters(
        n_days * n_locations, cfgs, top_prior=priors.top(), weight_prior=priors.weight()
    )


# ---------------------------------------------------------------------------
# Homogeneous Poisson baseline.
# ---------------------------------------------------------------------------


def hp_fit(train: CountMatrix) -> np.ndarray:
    """Maximum-likelihood per-location rates over all visible cells.

    Returns one rate per location, floored at 1e-8; a location with no
    visible cells gets the floor with a warning.
    """
    if train.n_samples == 0:
        raise DataError("cannot fit on an empty matrix")
    p = train.n_locations
    vis = train.mask.reshape(train.n_samples, train.n_days, p)
    cnt = train.counts.reshape(train.n_samples, train.n_days, p)
    totals = (cnt * vis).sum(axis=(0, 1)).astype(np.float64)
    n_vis = vis.sum(axis=(0, 1)).astype(np.float64)
    empty = n_vis == 0
    if empty.any():
        logger.warning("%d locations have no visible cells; rate floored", empty.sum())
    rates = np.where(empty, HP_RATE_FLOOR, totals / np.maximum(n_vis, 1.0))
    return np.maximum(rates, HP_RATE_FLOOR)


def hp_heldout_loglik(rates: np.ndarray, test: CountMatrix) -> float:
    """Sum of the hidden-cell Poisson log pmf under per-location rates."""
    hidden = ~test.mask
    if not hidden.any():
        raise ValueError("nothing to evaluate: the test mask hides no cells")
    locs = np.arange(test.dim) % test.n_locations
    cell_rates = np.broadcast_to(rates[locs], test.counts.shape)
    return float(
        poisson_logpmf(test.counts[hidden].astype(np.float64), cell_rates[hidden]).sum()
    )


# ---------------------------------------------------------------------------
# Reports.
# ---------------------------------------------------------------------------

_ROW_FIELDS = (
    "model",
    "fold",
    "reveal_count",
    "heldout",
    "hidden_cells",
    "hp_heldout",
    "diff_vs_hp",
)


@dataclass
class RunRow:
    model: str
    fold: int
    reveal_count: int
    heldout: float
    hidden_cells: int
    hp_heldout: float
    diff_vs_hp: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class EvalReport:
    rows: list[RunRow] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.errors)

    def aggregates(self) -> list[dict]:
        """Mean and standard error per (model, reveal_count), in sorted order."""
        groups: dict[tuple, list[RunRow]] = {}
        for row in self.rows:
            groups.setdefault((row.model, row.reveal_count), []).append(row)
        out = []
        for (model, reveal), rows in sorted(groups.items()):
            vals = np.array([r.heldout for r in rows])
            diffs = np.array([r.diff_vs_hp for r in rows])
            n = len(rows)
            se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            se_d = float(diffs.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            out.append(
                {
                    "model": model,
                    "reveal_count": reveal,
                    "n_runs": n,
                    "mean_heldout": float(vals.mean()),
                    "se_heldout": se,
                    "mean_diff_vs_hp": float(diffs.mean()),
                    "se_diff_vs_hp": se_d,
                }
            )
        return out

    def model_mean(self, model: str, reveal_count=None) -> float:
        vals = [
            r.heldout
            for r in self.rows
            if r.model == model
            and (reveal_count is None or r.reveal_count == reveal_count)
        ]
        if not vals:
            raise KeyError(f"no rows for model {model!r}")
        return float(np.mean(vals))


def _row_to_record(row: RunRow) -> dict:
    return {f: getattr(row, f) for f in _ROW_FIELDS}


def emit_report(report: EvalReport, fmt: str, out_dir) -> list[Path]:
    """Write rows, aggregates and a timing/meta sidecar.

    The rows and aggregates files carry only deterministic fields, so a
    seeded rerun reproduces them byte for byte; wall times live in
    meta.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fmt = {"json": "jsonl", "json-lines": "jsonl", "jsonl": "jsonl", "csv": "csv"}.get(
        fmt
    )
    if fmt is None:
        raise ConfigurationError("format must be 'csv' or 'json'")

    paths = []
    rows = [_row_to_record(r) for r in report.rows]
    aggs = report.aggregates()
    for stem, records, fields in (
        ("rows", rows, list(_ROW_FIELDS)),
        ("aggregates", aggs, list(aggs[0]) if aggs else [
            "model", "reveal_count", "n_runs", "mean_heldout", "se_heldout",
            "mean_diff_vs_hp", "se_diff_vs_hp",
        ]),
    ):
        path = out_dir / f"{stem}.{fmt}"
        if fmt == "csv":
            lines = [",".join(fields)]
            for rec in records:
                lines.append(",".join(_csv_cell(rec[f]) for f in fields))
            path.write_text("\n".join(lines) + "\n")
        else:
            path.write_text("".join(json.dumps(rec) + "\n" for rec in records))
        paths.append(path)

    meta = {
        "partial": report.partial,
        "errors": report.errors,
        "wall_times": [r.wall_time for r in report.rows],
    }
    meta_path = out_dir / "meta.json"
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    paths.append(meta_path)
    return paths


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_report(path) -> EvalReport:
    """Read a rows file (csv or jsonl) back into an EvalReport."""
    path = Path(path)
    records = []
    if path.suffix == ".csv":
        lines = path.read_text().splitlines()
        header = lines[0].split(",") if lines else []
        for line in lines[1:]:
            records.append(dict(zip(header, line.split(","))))
    else:
        for line in path.read_text().splitlines():
            records.append(json.loads(line))
    rows = []
    for rec in records:
        rows.append(
            RunRow(
                model=str(rec["model"]),
                fold=int(rec["fold"]),
                reveal_count=int(rec["reveal_count"]),
                heldout=float(rec["heldout"]),
                hidden_cells=int(rec["hidden_cells"]),
                hp_heldout=float(rec["hp_heldout"]),
                diff_vs_hp=float(rec["diff_vs_hp"]),
            )
        )
    return EvalReport(rows=rows)


# ---------------------------------------------------------------------------
# Experiment loop.
# ---------------------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> CountMatrix:
    if cfg.synth is not None:
        cm, _ = synth_generate(cfg.synth)
        return cm
    if cfg.csv_path is not None:
        return ingest_csv(cfg.csv_path, cfg.csv_schema)
    return load_counts(cfg.cached_path)


def _fold_run(cfg: ExperimentConfig, data: CountMatrix, model_name: str, fold: int,
              reveal_grid: list[int]) -> list[RunRow]:
    fold_seed = cfg.seed + fold
    train_cm, test_cm = split_loyo(data, fold)
    inf = cfg.inference
    opt = inf.optimizer()

    trained_w = None
    if model_name != "HP":
        spec = build_named_model(
            model_name,
            data.n_days,
            data.n_locations,
            cfg.priors,
            custom_path=cfg.custom_model,
        )
        t0 = time.perf_counter()
        vstate, _ = train(
            spec,
            train_cm,
            inf.estimator(derive_seed(fold_seed, 0)),
            opt,
            inf.train_iterations,
        )
        train_time = time.perf_counter() - t0
        trained_w = vstate.weight_params()

    rows = []
    for reveal in reveal_grid:
        ms = replace(cfg.mask, reveal_count=reveal, seed=cfg.mask.seed + fold)
        masked_test = apply_mask(test_cm, ms)
        hp_rates = hp_fit(concat_samples(train_cm, masked_test))
        hp_ll = hp_heldout_loglik(hp_rates, masked_test)
        t0 = time.perf_counter()
        if model_name == "HP":
            ll = hp_ll
        else:
            fitted = fit_test(
                spec,
                trained_w,
                masked_test,
                inf.estimator(derive_seed(fold_seed, 1, reveal)),
                opt,
                inf.test_iterations,
            )
            ll = heldout_loglik(
                spec,
                trained_w,
                fitted,
                masked_test,
                inf.eval_samples,
                derive_seed(fold_seed, 2, reveal),
            )
        wall = time.perf_counter() - t0
        if model_name != "HP" and reveal == reveal_grid[0]:
            wall += train_time
        rows.append(
            RunRow(
                model=model_name,
                fold=fold,
                reveal_count=reveal,
                heldout=ll,
                hidden_cells=masked_test.hidden_count(),
                hp_heldout=hp_ll,
                diff_vs_hp=ll - hp_ll,
                wall_time=wall,
            )
        )
    return rows


def run_sweep(cfg: ExperimentConfig, threads: int = 1) -> EvalReport:
    """Models x reveal grid x leave-one-out folds.

    Each (model, fold) trains once and reuses the weights across reveal
    levels, since training never sees the test mask. Fold seeds derive as
    ``seed + fold``; single-threaded order is the reproducibility
    reference, and the merge is ordered, so threading does not change the
    report.
    """
    data = load_data(cfg)
    models = cfg.models or [cfg.model]
    folds = cfg.folds if cfg.folds is not None else list(range(data.n_samples))
    grid = cfg.reveal_grid if cfg.reveal_grid is not None else [cfg.mask.reveal_count]

    tasks = [(m, f) for m in models for f in folds]
    report = EvalReport()
    if threads <= 1:
        results = [_try_fold(cfg, data, m, f, grid, report) for m, f in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_try_fold, cfg, data, m, f, grid, report)
                for m, f in tasks
            ]
            results = [f.result() for f in futures]
    for rows in results:
        report.rows.extend(rows)
    return report


def _try_fold(cfg, data, model_name, fold, grid, report) -> list[RunRow]:
    try:
        return _fold_run(cfg, data, model_name, fold, grid)
    except Exception as exc:  # recorded, report marked partial
        report.errors.append(f"{model_name} fold {fold}: {exc}")
        logger.exception("fold failed: %s fold %d", model_name, fold)
        return []


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> EvalReport:
    """Leave-one-out evaluation of ``cfg.model`` with the HP baseline paired."""
    return run_sweep(replace(cfg, models=[cfg.model], reveal_grid=None), threads)


# ---------------------------------------------------------------------------
# Config files.
# ---------------------------------------------------------------------------


def _strict(d: dict, allowed: set, where: str) -> dict:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


def experiment_config_from_dict(raw: dict) -> ExperimentConfig:
    raw = _strict(
        dict(raw),
        {
            "model",
            "models",
            "custom_model",
            "mask",
            "data",
            "inference",
            "priors",
            "folds",
            "reveal_grid",
            "seed",
            "out",
        },
        "experiment config",
    )
    kwargs: dict = {}
    for key in ("model", "custom_model", "seed", "out"):
        if key in raw:
            kwargs[key] = raw[key]
    if "models" in raw:
        kwargs["models"] = list(raw["models"])
    if "folds" in raw and raw["folds"] is not None:
        kwargs["folds"] = [int(f) for f in raw["folds"]]
    if "reveal_grid" in raw and raw["reveal_grid"] is not None:
        kwargs["reveal_grid"] = [int(r) for r in raw["reveal_grid"]]

    if "mask" in raw:
        m = _strict(dict(raw["mask"]), {"scheme", "reveal_count", "seed"}, "mask")
        kwargs["mask"] = MaskSpec(
            scheme=m["scheme"],
            reveal_count=int(m.get("reveal_count", 0)),
            seed=int(m.get("seed", 0)),
        )

    data = _strict(dict(raw.get("data", {})), {"synth", "csv", "cached", "schema"}, "data")
    if "synth" in data:
        s = _strict(
            dict(data["synth"]),
            {
                "n_locations",
                "n_weeks",
                "n_samples",
                "week_profile",
                "base_rates",
                "block_sigma",
                "seed",
            },
            "data.synth",
        )
        if "week_profile" in s:
            s["week_profile"] = tuple(float(v) for v in s["week_profile"])
        if "base_rates" in s and s["base_rates"] is not None:
            s["base_rates"] = tuple(float(v) for v in s["base_rates"])
        kwargs["synth"] = SynthSpec(**s)
    if "csv" in data:
        kwargs["csv_path"] = data["csv"]
        if "schema" in data:
            sc = _strict(
                dict(data["schema"]),
                {
                    "date_column",
                    "location_column",
                    "type_column",
                    "type_filter",
                    "n_locations",
                    "n_days",
                },
                "data.schema",
            )
            kwargs["csv_schema"] = CsvSchema(**sc)
    if "cached" in data:
        kwargs["cached_path"] = data["cached"]

    if "inference" in raw:
        inf = _strict(
            dict(raw["inference"]),
            {
                "mc_samples",
                "train_iterations",
                "test_iterations",
                "eval_samples",
                "step_size",
                "decay",
                "clip_norm",
            },
            "inference",
        )
        kwargs["inference"] = InferenceSettings(**inf)
    if "priors" in raw:
        pr = _strict(
            dict(raw["priors"]),
            {"top_shape", "top_rate", "weight_shape", "weight_rate", "fixed_shape"},
            "priors",
        )
        kwargs["priors"] = PriorSettings(**pr)
    return ExperimentConfig(**kwargs)


def load_experiment_config(path) -> ExperimentConfig:
    import yaml

    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    return experiment_config_from_dict(raw)
