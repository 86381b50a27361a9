"""Experiment orchestration: training with early stopping, rectification, baselines, ablation, sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .datagen import Dataset, generate, read_jsonl, split as split_dataset
from .kernel import AdamW, NonFiniteGradientError, Tape
from .kernel.checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .metrics import CSV_COLUMNS, MetricsReport, ProbeReport, embedding_probes, evaluate, reports_to_csv
from .model import Batch, FusionModel, ImputationBaseline
from .outcome import RectifierTable, fit_rectifier, rectify_array, select_kappa

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "train_total", "train_pred", "train_miss", "train_rep", "val_pred"]
ABLATION_ROWS = ("base", "+mmnar_fusion", "+reconstruction", "+rectifier")
SWEEP_GRIDS = {
    "model.dropout": ("0.1", "0.2", "0.3", "0.4", "0.5"),
    "optim.learning_rate": ("5e-05", "0.0001", "0.0002", "0.0005", "0.001"),
    "model.embed_dim": ("32", "64", "128", "256"),
    "loss.temperature": ("0.05", "0.1", "0.15", "0.2", "0.3"),
    "loss.cont_weight": ("0.1", "0.2", "0.3", "0.4", "0.5"),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch, self.detail = epoch, batch, detail


class ConfigMismatch(RuntimeError):
    pass


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    kind: str
    model: object
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    status: str = "ok"
    failure: dict | None = None
    kappa: float | None = None
    kappa_scores: dict = field(default_factory=dict)
    table: RectifierTable | None = None
    reports: dict[bool, MetricsReport] = field(default_factory=dict)
    test_probs: np.ndarray | None = None
    test_probs_rect: np.ndarray | None = None

    def metrics_rows(self) -> list[dict]:
        return [row for flag in sorted(self.reports) for row in self.reports[flag].csv_rows(self.seed)]


# ------------------------------------------------------------------ data and models

def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset_path:
        return read_jsonl(cfg.dataset_path)
    return generate(cfg.data)


def feature_dims(ds: Dataset) -> dict[str, int]:
    return {m: int(ds.features[m].shape[1]) for m in ds.modalities}


def build_model(cfg: RunConfig, ds: Dataset, seed: int, kind: str = "fusion"):
    if kind == "fusion":
        return FusionModel(feature_dims(ds), ds.modalities, ds.tasks, cfg.model, seed)
    return ImputationBaseline(feature_dims(ds), ds.modalities, ds.tasks, cfg.model, kind, seed)


def partition(cfg: RunConfig, ds: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    sp = split_dataset(ds, cfg.train.split, cfg.train.split_seed)
    return ds.subset(sp.train), ds.subset(sp.val), ds.subset(sp.test)


def _train_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 20]))


# ------------------------------------------------------------------ training loop

def fit(model, cfg: RunConfig, train_ds: Dataset, val_ds: Dataset, seed: int,
        max_epochs: int | None = None) -> tuple[list[dict], int]:
    """Minibatch AdamW on the total loss; early stopping on validation prediction loss.

    Restores the best-epoch parameters before returning ``(history, best_epoch)``.
    Raises :class:`TrainingDiverged` on a non-finite loss or gradient.
    """
    oc, tc = cfg.optim, cfg.train
    opt = AdamW(oc.learning_rate, oc.weight_decay, oc.beta1, oc.beta2, oc.epsilon)
    rng = _train_rng(seed)
    params = model.parameters()
    epochs = tc.max_epochs if max_epochs is None else max_epochs
    best, best_epoch, best_state, stale = np.inf, -1, model.state_dict(), 0
    history = []
    n = len(train_ds)
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        sums = dict.fromkeys(("total", "pred", "miss", "rep"), 0.0)
        for b, start in enumerate(range(0, n, oc.batch_size)):
            idx = np.sort(order[start:start + oc.batch_size])
            batch = Batch.from_dataset(train_ds, idx)
            with Tape() as tape:
                out = model.forward(batch, rng, training=True)
                loss = out.total
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, f"loss is {value}")
            try:
                opt.step(tape.backward(loss, params))
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from None
            w = len(idx) / n
            sums["total"] += w * value
            for k in ("pred", "miss", "rep"):
                if k in out.losses:
                    sums[k] += w * out.losses[k].item()
        val = model.pred_loss_on(val_ds)
        history.append({"epoch": epoch, "train_total": sums["total"], "train_pred": sums["pred"],
                        "train_miss": sums["miss"], "train_rep": sums["rep"], "val_pred": val})
        log.info("epoch %d total=%.4f pred=%.4f val_pred=%.4f (%.1fs)", epoch, sums["total"],
                 sums["pred"], val, time.perf_counter() - started)
        if val < best:
            best, best_epoch, best_state, stale = val, epoch, model.state_dict(), 0
        else:
            stale += 1
            if stale >= tc.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    model.load_state_dict(best_state)
    return history, best_epoch


def _postprocess(res: RunResult, cfg: RunConfig, val: Dataset, test: Dataset) -> None:
    """Fit the rectifier on validation predictions, then score the test split (labels used last)."""
    val_probs = res.model.predict_proba(val)
    test_probs = res.model.predict_proba(test)
    rc = cfg.rectifier
    if rc.enabled:
        kappa, scores = select_kappa(val_probs, val.labels, val.patterns, val.tasks, rc.kappa_grid,
                                     rc.min_support, rc.fold_seed)
        table, _ = fit_rectifier(val_probs, val.labels, val.patterns, val.tasks, kappa,
                                 rc.min_support, seed=rc.fold_seed)
        res.kappa, res.kappa_scores, res.table = kappa, scores, table
        log.info("rectifier: kappa=%s, %.0f%% of cells applied", kappa, 100 * table.fraction_applied())
    meta = {"seed": res.seed, "config_hash": cfg.hash(), "kind": res.kind, "best_epoch": res.best_epoch}
    res.test_probs = test_probs
    res.reports[False] = evaluate(test_probs, test.labels, test.patterns, test.tasks, False,
                                  cfg.support_floor, meta)
    if res.table is not None:
        res.test_probs_rect = rectify_array(test_probs, test.patterns, res.table)
        res.reports[True] = evaluate(res.test_probs_rect, test.labels, test.patterns, test.tasks, True,
                                     cfg.support_floor, {**meta, "kappa": res.kappa})


def train(cfg: RunConfig, seed: int, dataset: Dataset | None = None, out_dir=None,
          kind: str = "fusion", max_epochs: int | None = None) -> RunResult:
    """One end-to-end run: split, fit, rectify on validation, score on test, write artifacts."""
    ds = (dataset if dataset is not None else load_dataset(cfg)).public()
    tr, va, te = partition(cfg, ds)
    model = build_model(cfg, ds, seed, kind)
    if kind == "mean_impute":
        model.fit_imputer(tr)
    res = RunResult(cfg, seed, kind, model)
    try:
        res.history, res.best_epoch = fit(model, cfg, tr, va, seed, max_epochs)
    except TrainingDiverged as exc:
        res.status = "diverged"
        res.failure = {"epoch": exc.epoch, "batch": exc.batch, "detail": exc.detail}
        log.error("%s", exc)
        if out_dir is not None:
            _write_failure(Path(out_dir), res)
        return res
    _postprocess(res, cfg, va, te)
    if out_dir is not None:
        write_artifacts(Path(out_dir), res)
    return res


def baseline(cfg: RunConfig, kind: str, seed: int, dataset: Dataset | None = None, out_dir=None,
             max_epochs: int | None = None) -> RunResult:
    """Imputation baseline through the same split, training and metrics pipeline (no rectifier)."""
    if kind not in ImputationBaseline.KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return train(replace(cfg, rectifier=replace(cfg.rectifier, enabled=False)), seed, dataset, out_dir,
                 kind, max_epochs)


# ------------------------------------------------------------------ artifacts

def curve_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CURVE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _meta(res: RunResult) -> dict:
    meta = {"config": cfgmod.dumps(res.config), "config_hash": res.config.hash(), "seed": res.seed,
            "kind": res.kind, "best_epoch": res.best_epoch, "kappa": res.kappa,
            "rectifier": res.table.to_tsv() if res.table is not None else None}
    if isinstance(res.model, ImputationBaseline):
        meta["impute_means"] = {m: v.tolist() for m, v in res.model.means.items()}
    return meta


def write_artifacts(out: Path, res: RunResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", res.model.state_dict(), _meta(res))
    atomic_write_bytes(out / "config.ini", cfgmod.dumps(res.config).encode())
    atomic_write_bytes(out / "curve.csv", curve_csv(res.history).encode())
    atomic_write_bytes(out / "metrics.csv", reports_to_csv(res.metrics_rows()).encode())
    blob = {str(flag).lower(): json.loads(rep.to_json()) for flag, rep in res.reports.items()}
    blob["kappa_scores"] = {repr(k): v for k, v in res.kappa_scores.items()}
    atomic_write_bytes(out / "metrics.json", (json.dumps(blob, indent=2, sort_keys=True) + "\n").encode())
    if res.table is not None:
        res.table.save(out / "rectifier.tsv")


def _write_failure(out: Path, res: RunResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {"status": res.status, "seed": res.seed, "config_hash": res.config.hash(), **res.failure}
    atomic_write_bytes(out / "failure.json", (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())
    atomic_write_bytes(out / "curve.csv", curve_csv(res.history).encode())


# ------------------------------------------------------------------ multi-seed, ablation, sweep

def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate(reports: list[MetricsReport]) -> dict[str, dict[str, tuple[float, float]]]:
    """task -> metric -> (mean, sd) across seeds."""
    tasks = reports[0].tasks
    return {t: {k: _mean_sd([getattr(r.overall[t], k) for r in reports]) for k in ("auc", "auprc", "brier")}
            for t in tasks}


def aggregate_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "rectified", "auc_mean", "auc_sd", "auprc_mean", "auprc_sd", "brier_mean", "brier_sd",
                "n_seeds"])
    ok = [r for r in results if r.status == "ok"]
    for flag in (False, True):
        reps = [r.reports[flag] for r in ok if flag in r.reports]
        if not reps:
            continue
        for t, stats in aggregate(reps).items():
            w.writerow([t, str(flag).lower()] + [repr(x) for k in ("auc", "auprc", "brier") for x in stats[k]]
                       + [len(reps)])
    return buf.getvalue()


def run_seeds(cfg: RunConfig, dataset: Dataset | None = None, out_dir=None, kind: str = "fusion",
              max_epochs: int | None = None) -> list[RunResult]:
    ds = dataset if dataset is not None else load_dataset(cfg)
    results = []
    for s in cfg.seeds:
        sub = Path(out_dir) / f"seed_{s}" if out_dir is not None else None
        results.append(train(cfg, s, ds, sub, kind, max_epochs))
    if out_dir is not None:
        out = Path(out_dir)
        rows = [row for r in results if r.status == "ok" for row in r.metrics_rows()]
        atomic_write_bytes(out / "metrics.csv", reports_to_csv(rows).encode())
        atomic_write_bytes(out / "summary.csv", aggregate_csv(results).encode())
    return results


@dataclass
class AblationResult:
    tasks: tuple[str, ...]
    seeds: tuple[int, ...]
    # row name -> list over seeds of MetricsReport
    rows: dict[str, list[MetricsReport]]
    baselines: dict[str, list[MetricsReport]] = field(default_factory=dict)
    runs: dict[str, list[RunResult]] = field(default_factory=dict)

    def mean_auc(self, row: str, task: str | None = None) -> float:
        """Seed-mean test AUC; with ``task=None`` also macro-averaged over tasks."""
        reps = self.rows.get(row) or self.baselines[row]
        tasks = self.tasks if task is None else (task,)
        return float(np.mean([[r.overall[t].auc for t in tasks] for r in reps]))

    def table(self) -> list[dict]:
        out, prev = [], None
        for name in ABLATION_ROWS:
            row = {"row": name}
            for t in self.tasks:
                auc_m, auc_s = _mean_sd([r.overall[t].auc for r in self.rows[name]])
                apr_m, apr_s = _mean_sd([r.overall[t].auprc for r in self.rows[name]])
                row[f"{t}_auc"], row[f"{t}_auc_sd"] = auc_m, auc_s
                row[f"{t}_apr"], row[f"{t}_apr_sd"] = apr_m, apr_s
                row[f"{t}_dauc"] = None if prev is None else auc_m - prev[f"{t}_auc"]
            out.append(row)
            prev = row
        return out

    def to_csv(self) -> str:
        rows = self.table()
        cols = ["row"] + [f"{t}_{k}" for t in self.tasks
                          for k in ("auc", "auc_sd", "apr", "apr_sd", "dauc")]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["row"]] + ["" if r[c] is None else repr(r[c]) for c in cols[1:]])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'component':<18}" + "".join(f"| {t:^26}" for t in self.tasks)
        sub = f"{'':<18}" + "".join(f"| {'AUC':>8}{'APR':>8}{'dAUC':>9} " for _ in self.tasks)
        lines = [head, sub, "-" * len(sub)]
        for r in self.table():
            cells = []
            for t in self.tasks:
                d = r[f"{t}_dauc"]
                cells.append(f"| {r[f'{t}_auc']:>8.4f}{r[f'{t}_apr']:>8.4f}"
                             f"{'-' if d is None else f'{d:+.4f}':>9} ")
            lines.append(f"{r['row']:<18}" + "".join(cells))
        for name, reps in self.baselines.items():
            cells = "".join(f"| {self.mean_auc(name, t):>8.4f}"
                            f"{np.mean([x.overall[t].auprc for x in reps]):>8.4f}{'':>9} " for t in self.tasks)
            lines.append(f"{name:<18}" + cells)
        return "\n".join(lines) + "\n"


def ablate(cfg: RunConfig, dataset: Dataset | None = None, out_dir=None, baselines=("zero_fill",),
           max_epochs: int | None = None) -> AblationResult:
    """Incremental component table over ``cfg.seeds``.

    The +rectifier row reuses the +reconstruction model and only adds the
    validation-fitted correction, so each seed trains three networks.
    """
    ds = dataset if dataset is not None else load_dataset(cfg)
    variants = {"base": (False, False), "+mmnar_fusion": (True, False), "+reconstruction": (True, True)}
    rows: dict[str, list[MetricsReport]] = {name: [] for name in ABLATION_ROWS}
    runs: dict[str, list[RunResult]] = {}
    for name, (fusion, recon) in variants.items():
        vcfg = cfgmod.with_ablation(cfg, fusion, recon, rectifier=(name == "+reconstruction"))
        sub = Path(out_dir) / name.lstrip("+") if out_dir is not None else None
        runs[name] = run_seeds(vcfg, ds, sub, "fusion", max_epochs)
        _require_ok(runs[name], name)
        rows[name] = [r.reports[False] for r in runs[name]]
        if name == "+reconstruction":
            rows["+rectifier"] = [r.reports[True] for r in runs[name]]
    result = AblationResult(tuple(ds.tasks), tuple(cfg.seeds), rows, runs=runs)
    for kind in baselines:
        sub = Path(out_dir) / kind if out_dir is not None else None
        bcfg = replace(cfg, rectifier=replace(cfg.rectifier, enabled=False))
        runs[kind] = run_seeds(bcfg, ds, sub, kind, max_epochs)
        _require_ok(runs[kind], kind)
        result.baselines[kind] = [r.reports[False] for r in runs[kind]]
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_bytes(out / "ablation.csv", result.to_csv().encode())
        atomic_write_bytes(out / "ablation.txt", result.to_text().encode())
    return result


def _require_ok(results: list[RunResult], label: str) -> None:
    bad = [r for r in results if r.status != "ok"]
    if bad:
        f = bad[0].failure
        raise TrainingDiverged(f["epoch"], f["batch"], f"{label} seed {bad[0].seed}: {f['detail']}")


SWEEP_COLUMNS = ["setting", "value", "n_seeds", "mean_auc", "sd_auc", "mean_auprc", "mean_brier"]


def sweep(cfg: RunConfig, setting: str, values=None, dataset: Dataset | None = None, out_dir=None,
          max_epochs: int | None = None) -> list[dict]:
    """One row per value of ``setting``: seed-mean of the task-averaged unrectified test metrics."""
    values = tuple(values) if values else SWEEP_GRIDS.get(setting)
    if not values:
        raise cfgmod.ConfigError(f"no default grid for {setting!r}; pass explicit values")
    ds = dataset if dataset is not None else load_dataset(cfg)
    rows = []
    for v in values:
        vcfg = cfg.with_value(setting, str(v))
        results = run_seeds(vcfg, ds, None, "fusion", max_epochs)
        reps = [r.reports[False] for r in results if r.status == "ok"]
        aucs = [rep.summary()["mean_auc"] for rep in reps]
        auc_m, auc_s = _mean_sd(aucs)
        rows.append({"setting": setting, "value": str(v), "n_seeds": len(reps), "mean_auc": auc_m,
                     "sd_auc": auc_s,
                     "mean_auprc": float(np.mean([np.mean([m.auprc for m in rep.overall.values()])
                                                  for rep in reps])) if reps else float("nan"),
                     "mean_brier": float(np.mean([rep.summary()["mean_brier"] for rep in reps]))
                     if reps else float("nan")})
    if out_dir is not None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(x) if isinstance(x, float) else x) for k, x in r.items()})
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(Path(out_dir) / "sweep.csv", buf.getvalue().encode())
    return rows


# ------------------------------------------------------------------ checkpoints: evaluate / probe / rectify

@dataclass
class LoadedRun:
    config: RunConfig
    seed: int
    kind: str
    model: object
    table: RectifierTable | None
    meta: dict


def load_run(ckpt_path, dataset: Dataset, expected: RunConfig | None = None, force: bool = False) -> LoadedRun:
    """Rebuild a trained model from its checkpoint.

    With ``expected`` given, a config-hash mismatch raises :class:`ConfigMismatch`
    unless ``force``.
    """
    state, meta = load_checkpoint(ckpt_path)
    cfg = cfgmod.loads(meta["config"])
    if cfg.hash() != meta["config_hash"]:
        raise ConfigMismatch("checkpoint config text does not match its recorded hash")
    if expected is not None and expected.hash() != meta["config_hash"]:
        if not force:
            raise ConfigMismatch(f"config hash {expected.hash()[:12]} differs from checkpoint "
                                 f"{meta['config_hash'][:12]}; use --force to evaluate anyway")
        log.warning("config hash mismatch ignored (--force)")
    model = build_model(cfg, dataset, meta["seed"], meta["kind"])
    model.load_state_dict(state)
    if meta.get("impute_means"):
        model.means = {m: np.asarray(v, dtype=np.float64) for m, v in meta["impute_means"].items()}
    table = RectifierTable.from_tsv(meta["rectifier"], dataset.tasks) if meta.get("rectifier") else None
    return LoadedRun(cfg, meta["seed"], meta["kind"], model, table, meta)


def select_split(run_cfg: RunConfig, ds: Dataset, which: str) -> Dataset:
    if which == "all":
        return ds
    return dict(zip(("train", "val", "test"), partition(run_cfg, ds)))[which]


def evaluate_run(run: LoadedRun, ds: Dataset) -> list[MetricsReport]:
    probs = run.model.predict_proba(ds)
    meta = {"seed": run.seed, "config_hash": run.meta["config_hash"], "kind": run.kind,
            "best_epoch": run.meta["best_epoch"]}
    reps = [evaluate(probs, ds.labels, ds.patterns, ds.tasks, False, run.config.support_floor, meta)]
    if run.table is not None:
        rect = rectify_array(probs, ds.patterns, run.table)
        reps.append(evaluate(rect, ds.labels, ds.patterns, ds.tasks, True, run.config.support_floor,
                             {**meta, "kappa": run.meta["kappa"]}))
    return reps


def probe_run(run: LoadedRun, ds: Dataset, seed: int = 0) -> ProbeReport:
    if not isinstance(run.model, FusionModel) or run.model.miss is None:
        raise ValueError("probing needs a model with the missingness embedding (mmnar_fusion on)")
    _, z = run.model.embeddings(ds)
    return embedding_probes(z, ds.patterns, ds.labels, ds.tasks, seed)


def refit_rectifier(run: LoadedRun, val: Dataset, kappa: float | None = None) -> RectifierTable:
    """Refit the correction table on ``val`` (selecting kappa on the grid unless given)."""
    rc = run.config.rectifier
    probs = run.model.predict_proba(val)
    if kappa is None:
        kappa, _ = select_kappa(probs, val.labels, val.patterns, val.tasks, rc.kappa_grid, rc.min_support,
                                rc.fold_seed)
    table, _ = fit_rectifier(probs, val.labels, val.patterns, val.tasks, kappa, rc.min_support,
                             seed=rc.fold_seed)
    return table


__all__ = ["ABLATION_ROWS", "AblationResult", "ConfigMismatch", "CSV_COLUMNS", "RunResult", "TrainingDiverged",
           "ablate", "aggregate", "baseline", "build_model", "evaluate_run", "fit", "load_dataset", "load_run",
           "probe_run", "refit_rectifier", "run_seeds", "select_split", "sweep", "train"]
