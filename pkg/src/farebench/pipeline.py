"""End-to-end benchmark stages with config-hash keyed caching.

Stage outputs live under ``<output_dir>/cache/<stage>/<key>/`` where the key
hashes the stage's own config section together with its upstream keys, so a
change only invalidates the stages that depend on it. Reports land directly
in ``output_dir``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import gat as gat_mod
from . import gbdt as gbdt_mod
from . import tslite as ts_mod
from .config import FEATURES, MODELS, TARGET, PipelineConfig, derive_seed, stable_hash
from .dataset import ColumnTable, SplitIndex, read_trips, split_80_20
from .denoiser import AutoencoderSpec, fit_denoiser
from .errors import ConfigError, EmptyDatasetError, FarebenchError, MissingUpstreamError
from .evaluation import (
    VARIANTS,
    EvalReport,
    OodReport,
    comparison_rows,
    evaluate,
    ood_protocol,
    write_bin_mae_csv,
    write_calibration_csv,
    write_comparison_csv,
    write_json,
    write_uncertainty_csv,
)
from .nn import AdamWConfig, TrainConfig, save_checkpoint, write_history_csv
from .perturb import NoiseSpec, inject_gaussian, ks_two_sample, perturbation_report
from .preprocess import (
    COORD_COLUMNS,
    IqrFilterConfig,
    KnnImputeConfig,
    NormStats,
    SpatialBounds,
    apply_normalizer,
    engineer_features,
    fit_normalizer,
    haversine_km_array,
    iqr_filter,
    knn_impute,
)

log = logging.getLogger(__name__)

STAGES = ("ingest", "preprocess", "perturb", "denoise", "train", "evaluate", "report")
PREREQUISITE = {
    "preprocess": "ingest",
    "perturb": "preprocess",
    "denoise": "perturb",
    "train": "denoise",
    "evaluate": "train",
    "report": "evaluate",
}
MODEL_COLUMNS = FEATURES + (TARGET,)
IMPUTE_COLUMNS = COORD_COLUMNS + ("passenger_count",)


# -- small io helpers -------------------------------------------------------------


def save_table(path: Path, table: ColumnTable) -> None:
    payload = {f"col:{c}": table.column(c) for c in table.column_names}
    payload.update({f"mask:{c}": table.mask(c) for c in table.column_names})
    payload["names"] = np.array(table.column_names)
    np.savez(path, **payload)


def load_table(path: Path) -> ColumnTable:
    with np.load(path) as z:
        names = [str(n) for n in z["names"]]
        return ColumnTable(tuple(names), {c: z[f"col:{c}"].copy() for c in names}, {c: z[f"mask:{c}"].copy() for c in names})


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- workspace ------------------------------------------------------------------


class Workspace:
    """Cache layout and stage keys for one config."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.cache = self.out / "cache"
        self._keys: dict[str, str] = {}

    # keys
    def input_hash(self) -> str:
        if "input" not in self._keys:
            try:
                self._keys["input"] = file_sha256(self.cfg.input_path)
            except FileNotFoundError as exc:
                raise FileNotFoundError(f"input file not found: {self.cfg.input_path}") from exc
        return self._keys["input"]

    def key(self, stage: str) -> str:
        if stage in self._keys:
            return self._keys[stage]
        c = self.cfg
        if stage == "ingest":
            payload = {"input": self.input_hash(), "chunk_rows": c.chunk_rows}
        elif stage == "preprocess":
            payload = {"up": self.key("ingest"), "impute": asdict(c.impute), "filter": asdict(c.filter), "seed": c.seed}
        elif stage == "perturb":
            payload = {"up": self.key("preprocess"), "noise": [asdict(n) for n in c.noise], "seed": c.seed}
        elif stage == "denoise":
            payload = {"up": self.key("perturb"), "denoiser": asdict(c.denoiser), "target": c.denoise_target, "seed": c.seed}
        else:
            raise ValueError(stage)
        self._keys[stage] = stable_hash({"stage": stage, **payload})
        return self._keys[stage]

    def train_key(self, model: str, variant: str) -> str:
        section = asdict(getattr(self.cfg.models, model))
        section.pop("enabled")
        payload = {"up": self.key("denoise"), "model": model, "variant": variant, "section": section, "seed": self.cfg.seed}
        if model == "gat":
            payload["edge_mode"] = self.cfg.gat_edge_mode
        return stable_hash(payload)

    # directories
    def stage_dir(self, stage: str, key: str | None = None) -> Path:
        return self.cache / stage / (key or self.key(stage))

    def train_dir(self, model: str, variant: str) -> Path:
        return self.cache / "train" / f"{model}_{variant}_{self.train_key(model, variant)}"

    @staticmethod
    def is_done(d: Path) -> bool:
        return (d / "done").exists()

    def require(self, stage: str, d: Path, prerequisite: str | None = None) -> Path:
        if not self.is_done(d):
            raise MissingUpstreamError(stage, prerequisite or PREREQUISITE.get(stage) or stage)
        return d

    def begin(self, d: Path) -> Path:
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    @staticmethod
    def finish(d: Path) -> None:
        (d / "done").write_text("ok\n")

    # loaders
    def clean(self) -> ColumnTable:
        return load_table(self.stage_dir("preprocess") / "clean.npz")

    def split(self) -> SplitIndex:
        with np.load(self.stage_dir("preprocess") / "split.npz") as z:
            return SplitIndex(z["train"].copy(), z["test"].copy(), int(z["seed"]))

    def norm(self) -> NormStats:
        return NormStats.from_json(json.loads((self.stage_dir("preprocess") / "norm.json").read_text()))

    def variant(self, name: str) -> ColumnTable:
        if name == "clean":
            return self.clean()
        if name == "noisy":
            return load_table(self.stage_dir("perturb") / "noisy.npz")
        if name == "denoised":
            return load_table(self.stage_dir("denoise") / "denoised.npz")
        raise ConfigError(f"unknown variant {name!r}")

    def variant_stage(self, name: str) -> str:
        return {"clean": "preprocess", "noisy": "perturb", "denoised": "denoise"}[name]


# -- manifest --------------------------------------------------------------------


class Manifest:
    def __init__(self, ws: Workspace):
        self.ws = ws
        self.path = ws.out / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.data["config"] = ws.cfg.to_dict()
        self.data["versions"] = {
            "farebench": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        }
        self.data.setdefault("stages", {})

    def record(self, stage: str, seconds: float, key: str | None = None, cached: bool = False) -> None:
        self.data["stages"][stage] = {"seconds": round(seconds, 3), "key": key, "cached": cached}
        self.data.pop("failed_stage", None)
        self.data.pop("error", None)
        self.write()

    def fail(self, stage: str, exc: BaseException) -> None:
        self.data["failed_stage"] = stage
        self.data["error"] = f"{type(exc).__name__}: {exc}"
        self.write()

    def lineage(self) -> dict:
        cfg = self.ws.cfg
        variants = {
            "clean": {"derived_from": "input", "stage": "preprocess"},
            "noisy": {"derived_from": "clean", "stage": "perturb"},
            "denoised": {"derived_from": "noisy", "stage": "denoise"},
        }
        models = {}
        for m in cfg.enabled_models():
            for v in VARIANTS:
                entry = {"trained_on": v, "tested_on": [v]}
                if v == "clean":
                    entry["tested_on"] = list(VARIANTS)
                if m == "gat":
                    entry["edge_mode"] = cfg.gat_edge_mode
                models[f"{m}_{v}"] = entry
        return {"variants": variants, "models": models}

    def write(self) -> None:
        ws = self.ws
        ws.out.mkdir(parents=True, exist_ok=True)
        artifacts = {}
        for p in sorted(ws.out.rglob("*")):
            if p.is_file() and "cache" not in p.relative_to(ws.out).parts and p != self.path:
                artifacts[str(p.relative_to(ws.out))] = file_sha256(p)
        self.data["artifacts"] = artifacts
        self.data["lineage"] = self.lineage()
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# -- stages ----------------------------------------------------------------------


def stage_ingest(ws: Workspace) -> None:
    d = ws.begin(ws.stage_dir("ingest"))
    table, summary = read_trips(ws.cfg.input_path, ws.cfg.chunk_rows)
    save_table(d / "table.npz", table)
    write_json(d / "summary.json", summary.to_json())
    ws.finish(d)


def stage_preprocess(ws: Workspace) -> None:
    cfg = ws.cfg
    up = ws.require("preprocess", ws.stage_dir("ingest"))
    table = load_table(up / "table.npz")
    # rows without a fare carry no target; there is nothing to learn from them
    keep = ~table.mask(TARGET)
    dropped_missing_fare = int((~keep).sum())
    table = table.take(np.flatnonzero(keep))
    if table.n_rows == 0:
        raise EmptyDatasetError("no rows with a fare remain")
    for col in IMPUTE_COLUMNS:
        if table.mask(col).any():
            icfg = KnnImputeConfig(cfg.impute.k, cfg.impute.donor_cap, derive_seed(cfg.seed, f"impute/{col}"))
            table = knn_impute(table, col, icfg)
    f = cfg.filter
    bounds = SpatialBounds(f.lat_min, f.lat_max, f.lon_min, f.lon_max)
    table, removal = iqr_filter(table, f.columns, IqrFilterConfig(f.multiplier, bounds, f.min_fare))
    if table.n_rows == 0:
        raise EmptyDatasetError("filtering removed every row")
    table = engineer_features(table)
    split = split_80_20(table.n_rows, derive_seed(cfg.seed, "split"))
    norm = fit_normalizer(table, split.train_rows, MODEL_COLUMNS)

    d = ws.begin(ws.stage_dir("preprocess"))
    save_table(d / "clean.npz", table)
    np.savez(d / "split.npz", train=split.train_rows, test=split.test_rows, seed=split.seed)
    write_json(d / "norm.json", norm.to_json())
    report = {**removal.to_json(), "missing_fare_dropped": dropped_missing_fare, "iqr_columns": list(f.columns),
              "iqr_bounds": {c: list(b) for c, b in removal.iqr_bounds.items()}}
    write_json(d / "removal_report.json", report)
    ws.finish(d)


def recompute_distance(table: ColumnTable) -> ColumnTable:
    dist = haversine_km_array(
        table.column("pickup_latitude"), table.column("pickup_longitude"),
        table.column("dropoff_latitude"), table.column("dropoff_longitude"),
    )
    return table.with_column("haversine_km", dist)


def stage_perturb(ws: Workspace) -> None:
    cfg = ws.cfg
    ws.require("perturb", ws.stage_dir("preprocess"))
    clean = ws.clean()
    noise_seed = derive_seed(cfg.seed, "noise")
    specs = [NoiseSpec(n.column, n.level, noise_seed) for n in cfg.noise]
    noisy = inject_gaussian(clean, specs)
    if any(s.column in COORD_COLUMNS and s.level > 0 for s in specs):
        noisy = recompute_distance(noisy)
    report = perturbation_report(clean, noisy, [s.column for s in specs])

    d = ws.begin(ws.stage_dir("perturb"))
    save_table(d / "noisy.npz", noisy)
    payload = report.to_json()
    payload["levels"] = {s.column: s.level for s in specs}
    write_json(d / "ks_report.json", payload)
    report.write_csv(d / "ks_report.csv")
    ws.finish(d)


def _replace_columns(cfg: PipelineConfig) -> list[str]:
    cols = [n.column for n in cfg.noise if n.level > 0 and n.column in MODEL_COLUMNS]
    if any(c in COORD_COLUMNS for c in cols):
        cols.append("haversine_km")
    if not cfg.denoise_target and TARGET in cols:
        cols.remove(TARGET)
    return [c for c in MODEL_COLUMNS if c in cols]


def stage_denoise(ws: Workspace) -> None:
    cfg = ws.cfg
    ws.require("denoise", ws.stage_dir("perturb"))
    clean, noisy, split, norm = ws.clean(), ws.variant("noisy"), ws.split(), ws.norm()
    clean_n, noisy_n = apply_normalizer(clean, norm), apply_normalizer(noisy, norm)
    replace_cols = _replace_columns(cfg)
    dcfg = cfg.denoiser

    report: dict = {"replaced_columns": replace_cols, "denoise_target": cfg.denoise_target}
    denoised = noisy
    d = ws.begin(ws.stage_dir("denoise"))
    if replace_cols:
        seed = derive_seed(cfg.seed, "denoiser")
        spec = AutoencoderSpec(len(MODEL_COLUMNS), tuple(dcfg.encoder_dims))
        tcfg = TrainConfig(max_epochs=dcfg.max_epochs, batch_size=dcfg.batch_size, patience=dcfg.patience, seed=seed)
        model = fit_denoiser(
            noisy_n.take(split.train_rows), clean_n.take(split.train_rows), MODEL_COLUMNS, spec, tcfg,
            AdamWConfig(learning_rate=dcfg.learning_rate, weight_decay=dcfg.weight_decay),
        )
        recon = model.reconstruct(noisy_n.matrix(MODEL_COLUMNS))
        for j, c in enumerate(MODEL_COLUMNS):
            if c in replace_cols:
                sd = norm.std[c] if c not in norm.constant else 1.0
                mu = norm.mean[c] if c not in norm.constant else 0.0
                denoised = denoised.with_column(c, recon[:, j] * sd + mu, noisy.mask(c))
        save_checkpoint(d / "denoiser", model, asdict(dcfg), seed)
        write_history_csv(model.history, d / "denoiser_history.csv")

        test = split.test_rows
        x_clean = clean_n.matrix(replace_cols)[test]
        x_noisy = noisy_n.matrix(replace_cols)[test]
        x_den = apply_normalizer(denoised, norm).matrix(replace_cols)[test]
        mse_noisy = float(np.mean((x_noisy - x_clean) ** 2))
        mse_den = float(np.mean((x_den - x_clean) ** 2))
        report.update({
            "test_mse_noisy_vs_clean": mse_noisy,
            "test_mse_denoised_vs_clean": mse_den,
            "ratio": mse_den / mse_noisy if mse_noisy > 0 else None,
            "ks_p_value": {
                c: {"noisy_vs_clean": ks_two_sample(clean.column(c)[test], noisy.column(c)[test]).p_value,
                    "denoised_vs_clean": ks_two_sample(clean.column(c)[test], denoised.column(c)[test]).p_value}
                for c in replace_cols
            },
        })
    save_table(d / "denoised.npz", denoised)
    write_json(d / "denoise_report.json", report)
    ws.finish(d)


# -- training --------------------------------------------------------------------


def _holdout(rows: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(len(rows))
    n_val = max(1, int(round(len(rows) * fraction)))
    return np.sort(rows[perm[n_val:]]), np.sort(rows[perm[:n_val]])


def _eval_variants(variant: str) -> tuple[str, ...]:
    return VARIANTS if variant == "clean" else (variant,)


def train_gbdt(ws: Workspace, variant: str, d: Path) -> dict:
    cfg, sec = ws.cfg, ws.cfg.models.gbdt
    table, split = ws.variant(variant), ws.split()
    fit_rows, val_rows = _holdout(split.train_rows, sec.valid_fraction, derive_seed(cfg.seed, "gbdt/holdout"))
    x, y = table.matrix(FEATURES), table.column(TARGET)
    gcfg = gbdt_mod.GbdtConfig(eta=sec.eta, gamma=sec.gamma, n_rounds=sec.n_rounds, early_stop_rounds=sec.early_stop_rounds,
                               n_bins=sec.n_bins, seed=derive_seed(cfg.seed, "gbdt"))
    grid = gbdt_mod.grid_search(x[fit_rows], y[fit_rows], x[val_rows], y[val_rows], sec.depths, sec.lambdas, gcfg)
    grid.booster.save(d / "model.json")
    out = {}
    for ev in _eval_variants(variant):
        t = ws.variant(ev)
        out[ev] = (grid.booster.predict(t.matrix(FEATURES)[split.test_rows]), t.column(TARGET)[split.test_rows], None)
    info = {"best_depth": grid.best_depth, "best_lambda": grid.best_lambda, "rounds": len(grid.booster.trees),
            "grid": {f"{k[0]}/{k[1]}": v for k, v in sorted(grid.scores.items())}}
    return {"predictions": out, "info": info}


def _gat_graph(ws: Workspace, table: ColumnTable, norm: NormStats) -> gat_mod.TripGraph:
    sec = ws.cfg.models.gat
    feats = apply_normalizer(table.select(FEATURES), norm).matrix(FEATURES)
    return gat_mod.build_graph(table, ws.cfg.gat_edge_mode, sec.k, sec.time_window, features=feats)


def train_gat(ws: Workspace, variant: str, d: Path) -> dict:
    cfg, sec = ws.cfg, ws.cfg.models.gat
    table, split, norm = ws.variant(variant), ws.split(), ws.norm()
    mu, sd = norm.mean[TARGET], norm.std[TARGET]
    graph = _gat_graph(ws, table, norm)
    targets = (table.column(TARGET) - mu) / sd
    fit_rows, val_rows = _holdout(split.train_rows, sec.valid_fraction, derive_seed(cfg.seed, "gat/holdout"))
    models = []
    for m in range(sec.ensemble_size):
        seed = derive_seed(cfg.seed, f"gat/member{m}")
        tcfg = TrainConfig(max_epochs=sec.max_epochs, batch_size=sec.batch_size, patience=sec.patience, seed=seed, eval_batch_size=1 << 20)
        model = gat_mod.fit_gat(graph, targets, fit_rows, val_rows, tcfg,
                                AdamWConfig(learning_rate=sec.learning_rate, weight_decay=sec.weight_decay),
                                sec.hidden, sec.attention_dropout, sec.fanout)
        save_checkpoint(d / f"member{m}", model, asdict(sec), seed)
        write_history_csv(model.history, d / f"member{m}_history.csv")
        models.append(model)
    out = {}
    for ev in _eval_variants(variant):
        t = table if ev == variant else ws.variant(ev)
        g = graph if ev == variant else _gat_graph(ws, t, norm)
        mean, var = gat_mod.ensemble_predict(models, g, split.test_rows)
        out[ev] = (mean * sd + mu, t.column(TARGET)[split.test_rows], var * sd * sd)
    info = {"edge_mode": cfg.gat_edge_mode, "n_edges": graph.n_edges, "ensemble_size": sec.ensemble_size,
            "epochs": [len(m.history) for m in models]}
    return {"predictions": out, "info": info}


def _series(table: ColumnTable, rows: np.ndarray, norm: NormStats) -> tuple[ColumnTable, np.ndarray]:
    """Time-sorted, normalized slice of ``rows`` and the row order used."""
    order = rows[np.argsort(table.column("pickup_datetime")[rows], kind="stable")]
    return apply_normalizer(table.take(order).select(("pickup_datetime",) + MODEL_COLUMNS), norm), order


def train_tslite(ws: Workspace, variant: str, d: Path) -> dict:
    cfg, sec = ws.cfg, ws.cfg.models.tslite
    table, split, norm = ws.variant(variant), ws.split(), ws.norm()
    mu, sd = norm.mean[TARGET], norm.std[TARGET]
    train_series, _ = _series(table, split.train_rows, norm)
    windows = ts_mod.make_windows(train_series, MODEL_COLUMNS, TARGET, sec.window_len)
    n_val = max(1, int(round(len(windows) * sec.valid_fraction)))
    cut = len(windows) - n_val
    seed = derive_seed(cfg.seed, "tslite")
    tcfg = TrainConfig(max_epochs=sec.max_epochs, batch_size=sec.batch_size, patience=sec.patience, seed=seed, eval_batch_size=1024)
    model = ts_mod.fit_tslite(windows.subset(np.arange(cut)), windows.subset(np.arange(cut, len(windows))), tcfg,
                              AdamWConfig(learning_rate=sec.learning_rate, weight_decay=sec.weight_decay),
                              sec.d_model, sec.n_blocks, sec.dropout)
    save_checkpoint(d / "model", model, asdict(sec), seed)
    write_history_csv(model.history, d / "history.csv")
    out = {}
    for ev in _eval_variants(variant):
        t = table if ev == variant else ws.variant(ev)
        test_series, order = _series(t, split.test_rows, norm)
        tw = ts_mod.make_windows(test_series, MODEL_COLUMNS, TARGET, sec.window_len)
        pred = ts_mod.predict(model, tw) * sd + mu
        out[ev] = (pred, t.column(TARGET)[order[tw.end_rows]], None)
    return {"predictions": out, "info": {"train_windows": cut, "val_windows": n_val, "epochs": len(model.history)}}


TRAINERS = {"gbdt": train_gbdt, "gat": train_gat, "tslite": train_tslite}


def stage_train(ws: Workspace, model: str, variant: str) -> Path:
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {MODELS}")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    # the clean model is also scored on the shifted test sets
    needed = VARIANTS if variant == "clean" else (variant,)
    for v in needed:
        ws.require("train", ws.stage_dir(ws.variant_stage(v)), ws.variant_stage(v))
    d = ws.begin(ws.train_dir(model, variant))
    result = TRAINERS[model](ws, variant, d)
    arrays = {}
    for ev, (pred, actual, var) in result["predictions"].items():
        arrays[f"pred:{ev}"] = pred
        arrays[f"actual:{ev}"] = actual
        if var is not None:
            arrays[f"var:{ev}"] = var
    np.savez(d / "predictions.npz", **arrays)
    write_json(d / "info.json", result["info"])
    ws.finish(d)
    return d


def load_predictions(d: Path) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray | None]]:
    with np.load(d / "predictions.npz") as z:
        names = {k.split(":", 1)[1] for k in z.files}
        return {v: (z[f"pred:{v}"].copy(), z[f"actual:{v}"].copy(), z[f"var:{v}"].copy() if f"var:{v}" in z.files else None) for v in names}


# -- evaluation and report --------------------------------------------------------


def stage_evaluate(ws: Workspace, models: list[str] | None = None) -> None:
    cfg, e = ws.cfg, ws.cfg.eval
    models = models or cfg.enabled_models()
    eval_dir, plot_dir = ws.out / "eval", ws.out / "plots"
    eval_dir.mkdir(parents=True, exist_ok=True)
    plot_dir.mkdir(parents=True, exist_ok=True)
    for m in models:
        for v in VARIANTS:
            d = ws.require("evaluate", ws.train_dir(m, v))
            preds = load_predictions(d)
            pred, actual, var = preds[v]
            rep = evaluate(pred, actual, v, "in_distribution", var, e.n_bins, e.tolerance, e.min_abs_fare, model=m)
            rep.notes = json.loads((d / "info.json").read_text())
            write_json(eval_dir / f"{m}_{v}.json", rep.to_json())
            write_calibration_csv(plot_dir / f"{m}_{v}_calibration.csv", rep.calibration)
            write_bin_mae_csv(plot_dir / f"{m}_{v}_bin_mae.csv", rep.bin_mae)
            if var is not None:
                write_uncertainty_csv(plot_dir / f"{m}_{v}_uncertainty.csv", pred, var, actual)
            if v == "clean":
                tests = {ev: (ev, preds[ev][1]) for ev in VARIANTS}
                ood = ood_protocol(lambda ev: (preds[ev][0], preds[ev][2]), tests, e.n_bins, e.tolerance, model=m)
                write_json(eval_dir / f"{m}_ood.json", ood.to_json())


def read_reports(ws: Workspace) -> tuple[dict[tuple[str, str], EvalReport], dict[str, OodReport]]:
    eval_dir = ws.out / "eval"
    in_dist: dict[tuple[str, str], EvalReport] = {}
    ood: dict[str, OodReport] = {}
    for m in ws.cfg.enabled_models():
        for v in VARIANTS:
            p = eval_dir / f"{m}_{v}.json"
            if not p.exists():
                raise MissingUpstreamError("report", "evaluate")
            in_dist[(m, v)] = EvalReport.from_json(json.loads(p.read_text()))
        p = eval_dir / f"{m}_ood.json"
        if not p.exists():
            raise MissingUpstreamError("report", "evaluate")
        raw = json.loads(p.read_text())
        ood[m] = OodReport({k: EvalReport.from_json(r) for k, r in raw["reports"].items()}, raw["deltas"])
    return in_dist, ood


def stage_report(ws: Workspace) -> Path:
    in_dist, ood = read_reports(ws)
    path = ws.out / "comparison.csv"
    write_comparison_csv(path, comparison_rows(in_dist, ood))
    return path


def publish_stage_reports(ws: Workspace) -> None:
    """Copy per-stage JSON reports from the cache into output_dir."""
    copies = [
        ("ingest", "summary.json", "ingest_summary.json"),
        ("preprocess", "removal_report.json", "removal_report.json"),
        ("perturb", "ks_report.json", "ks_report.json"),
        ("perturb", "ks_report.csv", "plots/ks_report.csv"),
        ("denoise", "denoise_report.json", "denoise_report.json"),
    ]
    for stage, name, dest in copies:
        src = ws.stage_dir(stage) / name
        if ws.is_done(ws.stage_dir(stage)) and src.exists():
            target = ws.out / dest
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, target)
    for m in ws.cfg.enabled_models():
        for v in VARIANTS:
            d = ws.train_dir(m, v)
            if not ws.is_done(d):
                continue
            ck = ws.out / "checkpoints" / f"{m}_{v}"
            ck.mkdir(parents=True, exist_ok=True)
            for f in sorted(d.iterdir()):
                if f.name not in ("done", "predictions.npz"):
                    shutil.copyfile(f, ck / f.name)


# -- drivers -----------------------------------------------------------------------


SINGLE_STAGES = {
    "ingest": stage_ingest,
    "preprocess": stage_preprocess,
    "perturb": stage_perturb,
    "denoise": stage_denoise,
}


def run_stage(cfg: PipelineConfig, stage: str, model: str | None = None, variant: str | None = None, force: bool = True) -> Workspace:
    """Run one stage against cached upstream outputs."""
    ws = Workspace(cfg)
    ws.out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(ws)
    t0 = time.perf_counter()
    try:
        if stage in SINGLE_STAGES:
            d = ws.stage_dir(stage)
            if force or not ws.is_done(d):
                SINGLE_STAGES[stage](ws)
            key = ws.key(stage)
        elif stage == "train":
            jobs = _train_jobs(cfg, model, variant)
            _run_train_jobs(ws, jobs, force)
            key = None
        elif stage == "evaluate":
            stage_evaluate(ws, [model] if model else None)
            key = None
        elif stage == "report":
            stage_report(ws)
            key = None
        else:
            raise ConfigError(f"unknown stage {stage!r}")
        publish_stage_reports(ws)
    except BaseException as exc:
        manifest.fail(stage, exc)
        raise
    manifest.record(stage, time.perf_counter() - t0, key)
    return ws


def _train_jobs(cfg: PipelineConfig, model: str | None, variant: str | None) -> list[tuple[str, str]]:
    models = [model] if model else cfg.enabled_models()
    variants = [variant] if variant else list(VARIANTS)
    return [(m, v) for m in models for v in variants]


def _train_worker(cfg_dict: dict, model: str, variant: str) -> None:
    from .config import load_config_dict

    stage_train(Workspace(load_config_dict(cfg_dict)), model, variant)


def _run_train_jobs(ws: Workspace, jobs: list[tuple[str, str]], force: bool) -> None:
    todo = [(m, v) for m, v in jobs if force or not ws.is_done(ws.train_dir(m, v))]
    for m, v in todo:
        needed = VARIANTS if v == "clean" else (v,)
        for nv in needed:
            ws.require("train", ws.stage_dir(ws.variant_stage(nv)), ws.variant_stage(nv))
    if ws.cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=ws.cfg.workers) as pool:
            futures = [pool.submit(_train_worker, ws.cfg.to_dict(), m, v) for m, v in todo]
            for f in futures:
                f.result()
    else:
        for m, v in todo:
            log.info("train %s on %s", m, v)
            stage_train(ws, m, v)


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Every stage in order, reusing cached stage outputs whose keys match."""
    ws = Workspace(cfg)
    ws.out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(ws)
    for stage in ("ingest", "preprocess", "perturb", "denoise"):
        t0 = time.perf_counter()
        cached = ws.is_done(ws.stage_dir(stage))
        try:
            if not cached:
                log.info("stage %s", stage)
                SINGLE_STAGES[stage](ws)
        except BaseException as exc:
            manifest.fail(stage, exc)
            raise
        manifest.record(stage, time.perf_counter() - t0, ws.key(stage), cached)
    for stage, fn in (("train", lambda: _run_train_jobs(ws, _train_jobs(cfg, None, None), force=False)),
                      ("evaluate", lambda: stage_evaluate(ws)),
                      ("report", lambda: stage_report(ws))):
        t0 = time.perf_counter()
        try:
            fn()
            if stage == "report":
                publish_stage_reports(ws)
        except BaseException as exc:
            manifest.fail(stage, exc)
            raise
        manifest.record(stage, time.perf_counter() - t0)
    return manifest.data


__all__ = [
    "STAGES",
    "Workspace",
    "Manifest",
    "run_pipeline",
    "run_stage",
    "stage_train",
    "load_table",
    "save_table",
    "FarebenchError",
]
