"""Stage graph for a full run, from ingestion to the report tables.

Every stage writes into ``<run_dir>/<stage>[/<condition>]`` and finishes by
dropping a ``stage.json`` marker carrying the run's config hash. A stage
refuses to start in a non-empty directory unless forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path

import numpy as np

from . import config as C
from .classifier import ClassifierConfig, LesionClassifier
from .cycle import CycleTranslator, translate
from .dataset import CONDITION_NAMES, LabelSpec, build_condition, filter_artifacts, ingest, pool_counts, training_condition
from .evaluation import (
    DetectionResult,
    evaluate_detector,
    load_manifest_images,
    mean_metrics,
    predict,
    score_distribution,
    train_detector,
    train_grader,
    write_histogram_csv,
    write_metric_table,
    write_roc_csv,
)
from .imaging import GENERATOR_RANGE, to_generator_range
from .manifest import read_manifest, write_manifest
from .metrics import ConfusionMetrics
from .progressive import ProgressiveGAN, generate_bulk
from .toy import write_toy_corpus

logger = logging.getLogger(__name__)

STAGES = (
    "ingest",
    "train-bulk",
    "generate-nevus",
    "train-transfer",
    "apply-transfer",
    "build-dataset",
    "train-apn",
    "eval-apn",
    "train-grader",
    "eval-grading",
    "report",
)
PER_CONDITION = {"build-dataset", "train-apn", "eval-apn"}
GRADING_DATASETS = ("nevus", "nevusG", "APN_nevus", "APN_nevusG", "APN")

DEFAULT_LABELS = {
    "nevus": dict(label_structure=False, label_diagnosis="nevus", pool="nevus"),
    "apn": dict(label_structure=True, pool="APN"),
    "diag_nevus": dict(label_diagnosis="nevus"),
    "diag_melanoma": dict(label_diagnosis="melanoma"),
    "grade_test_nevus": dict(label_diagnosis="nevus"),
    "grade_test_melanoma": dict(label_diagnosis="melanoma"),
    "test_pos": dict(label_structure=True),
    "test_neg": dict(label_structure=False),
    "val_pos": dict(label_structure=True),
    "val_neg": dict(label_structure=False),
}


class MissingDependency(RuntimeError):
    def __init__(self, stage: str, detail: str = ""):
        super().__init__(f"missing: {stage}" + (f" ({detail})" if detail else ""))
        self.stage = stage


class StageError(RuntimeError):
    pass


def stage_seed(cfg: dict, name: str) -> int:
    digest = hashlib.sha256(f"{cfg['seed']}:{name}".encode()).hexdigest()
    return int(digest[:8], 16) % (2**31)


class Run:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.hash = C.run_hash(cfg)
        self.dir = C.run_dir(cfg)

    def path(self, stage: str, sub: str | None = None) -> Path:
        p = self.dir / stage
        return p / sub if sub else p

    def begin(self, stage: str, sub: str | None = None, force: bool = False) -> Path:
        d = self.path(stage, sub)
        if d.exists() and any(d.iterdir()):
            if not force:
                raise StageError(f"refusing to reuse non-empty directory {d}")
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_file = self.dir / "config.yaml"
        if not cfg_file.exists():
            cfg_file.write_text(C.dump_config(self.cfg), encoding="utf-8")
        return d

    def finish(self, stage: str, sub: str | None = None, **info) -> None:
        marker = {"stage": stage, "sub": sub, "config_hash": self.hash, "seed": self.cfg["seed"], **info}
        (self.path(stage, sub) / "stage.json").write_text(json.dumps(marker, indent=1, sort_keys=True), encoding="utf-8")

    def done(self, stage: str, sub: str | None = None) -> bool:
        return (self.path(stage, sub) / "stage.json").exists()

    def require(self, stage: str, sub: str | None = None) -> dict:
        marker = self.path(stage, sub) / "stage.json"
        if not marker.exists():
            raise MissingDependency(stage, f"condition {sub}" if sub else "")
        info = json.loads(marker.read_text(encoding="utf-8"))
        if info["config_hash"] != self.hash:
            raise StageError(f"{stage} was produced by config {info['config_hash']}, not {self.hash}")
        return info

    def manifest(self, stage: str, name: str):
        return read_manifest(self.path(stage) / "manifests" / f"{name}.jsonl")


# stages -------------------------------------------------------------------


def _pool_dirs(run: Run, out: Path) -> dict[str, Path]:
    cfg = run.cfg
    if cfg["pools"] == "toy":
        sizes = {k: C.pool_size(cfg, k) for k in C.POOL_SIZES}
        return write_toy_corpus(out / "raw", sizes, cfg["resolution"], stage_seed(cfg, "toy"))
    return {name: Path(entry["dir"] if isinstance(entry, dict) else entry) for name, entry in cfg["pools"].items()}


def _label_spec(name: str, entry, directory: Path) -> LabelSpec:
    if isinstance(entry, dict) and entry.get("labels"):
        return LabelSpec.from_file(entry["labels"])
    spec = LabelSpec(**DEFAULT_LABELS.get(name, {}))
    sidecar = directory / "artifacts.json"
    if sidecar.exists():
        spec.sidecar = str(sidecar)
    return spec


def stage_ingest(run: Run, force=False):
    cfg = run.cfg
    out = run.begin("ingest", force=force)
    dirs = _pool_dirs(run, out)
    pools = {}
    entries = cfg["pools"] if isinstance(cfg["pools"], dict) else {}
    for name, d in sorted(dirs.items()):
        spec = _label_spec(name, entries.get(name), d)
        pools[name] = ingest(d, spec, cfg["resolution"], out / "images")
    for name in ("nevus", "apn", "diag_nevus", "diag_melanoma", "test_pos", "test_neg"):
        if not pools.get(name):
            raise StageError(f"pool {name} is empty")

    nevus_all = pools["nevus"]
    clean = filter_artifacts(nevus_all, cfg["excluded_artifacts"])
    rng = np.random.default_rng(stage_seed(cfg, "transfer_sample"))
    n_transfer = min(C.pool_size(cfg, "transfer_nevus"), len(nevus_all))
    transfer = [nevus_all[i] for i in sorted(rng.choice(len(nevus_all), n_transfer, replace=False))]
    excluded_test = cfg["excluded_test_artifacts"]
    diag_train, grade_test = [], []
    for dx in ("nevus", "melanoma"):
        train, held = pools[f"diag_{dx}"], pools.get(f"grade_test_{dx}")
        if not held:
            # no separate grading split supplied: hold one out of the training pool
            n = min(C.pool_size(cfg, f"grade_test_{dx}"), len(train) // 2)
            pick = set(np.random.default_rng(stage_seed(cfg, f"grade_test_{dx}")).choice(len(train), n, replace=False).tolist())
            held = [r for i, r in enumerate(train) if i in pick]
            train = [r for i, r in enumerate(train) if i not in pick]
        diag_train += train
        grade_test += held
    outputs = {
        "nevus_all": nevus_all,
        "nevus_clean": clean,
        "transfer_nevus": transfer,
        "apn": pools["apn"],
        "diag_train": diag_train,
        "grade_test": grade_test,
        "apn_test": filter_artifacts(pools["test_pos"] + pools["test_neg"], excluded_test),
        "apn_val": filter_artifacts(pools.get("val_pos", []) + pools.get("val_neg", []), excluded_test),
    }
    for name, recs in outputs.items():
        write_manifest(recs, out / "manifests" / f"{name}.jsonl")
    run.finish("ingest", counts={k: len(v) for k, v in outputs.items()})


def _images(records, value_range=GENERATOR_RANGE):
    X = load_manifest_images(records)
    return to_generator_range(X) if value_range == GENERATOR_RANGE else X


def stage_train_bulk(run: Run, force=False):
    run.require("ingest")
    out = run.begin("train-bulk", force=force)
    X = _images(run.manifest("ingest", "nevus_clean"))
    params = {"target_resolution": run.cfg["resolution"], **run.cfg["bulk"], "seed": stage_seed(run.cfg, "bulk")}
    model = ProgressiveGAN(**params).fit(X)
    model.save(out / "generator.ckpt")
    model.write_log(out / "train_log.csv")
    run.finish("train-bulk", stage_iterations=model.stage_iterations_, model_hash=model.config_hash)


def stage_generate_nevus(run: Run, force=False):
    run.require("train-bulk")
    out = run.begin("generate-nevus", force=force)
    model = ProgressiveGAN.load(run.path("train-bulk") / "generator.ckpt")
    count = C.pool_size(run.cfg, "nevusG_bases")
    recs = generate_bulk(model, count, stage_seed(run.cfg, "generate"), out / "images")
    write_manifest(recs, out / "manifests" / "nevusG.jsonl")
    run.finish("generate-nevus", count=len(recs))


def stage_train_transfer(run: Run, force=False):
    run.require("ingest")
    out = run.begin("train-transfer", force=force)
    X_a = _images(run.manifest("ingest", "transfer_nevus"))
    X_b = _images(run.manifest("ingest", "apn"))
    model = CycleTranslator(**run.cfg["transfer"], seed=stage_seed(run.cfg, "transfer")).fit(X_a, X_b)
    model.save(out / "translator.ckpt")
    model.write_log(out / "train_log.csv")
    run.finish("train-transfer", domain_sizes=[len(X_a), len(X_b)], model_hash=model.config_hash)


def stage_apply_transfer(run: Run, force=False):
    run.require("train-transfer")
    run.require("generate-nevus")
    out = run.begin("apply-transfer", force=force)
    model = CycleTranslator.load(run.path("train-transfer") / "translator.ckpt")
    apn_nevus = translate(model, run.manifest("ingest", "nevus_all"), "a_to_b", out / "images")
    apn_nevus_g = translate(model, run.manifest("generate-nevus", "nevusG"), "a_to_b", out / "images")
    write_manifest(apn_nevus, out / "manifests" / "APN_nevus.jsonl")
    write_manifest(apn_nevus_g, out / "manifests" / "APN_nevusG.jsonl")
    run.finish("apply-transfer", counts={"APN_nevus": len(apn_nevus), "APN_nevusG": len(apn_nevus_g)})


def _pools(run: Run) -> dict:
    pools = {"nevus": run.manifest("ingest", "nevus_all"), "APN": run.manifest("ingest", "apn")}
    if run.done("generate-nevus"):
        pools["nevusG"] = run.manifest("generate-nevus", "nevusG")
    if run.done("apply-transfer"):
        pools["APN_nevus"] = run.manifest("apply-transfer", "APN_nevus")
        pools["APN_nevusG"] = run.manifest("apply-transfer", "APN_nevusG")
    return pools


def stage_build_dataset(run: Run, condition: str, force=False):
    run.require("ingest")
    cond = training_condition(condition, run.cfg["scale"])
    if set(cond.counts) & {"APN_nevus", "APN_nevusG"}:
        run.require("apply-transfer")
    if "nevusG" in cond.counts:
        run.require("generate-nevus")
    out = run.begin("build-dataset", condition, force=force)
    recs = build_condition(cond, _pools(run), stage_seed(run.cfg, f"condition:{condition}"))
    write_manifest(recs, out / "condition.jsonl")
    run.finish("build-dataset", condition, counts=pool_counts(recs))


def _clf_config(run: Run, section: str, seed: int) -> ClassifierConfig:
    return ClassifierConfig(**{**run.cfg[section], "seed": seed})


def stage_train_apn(run: Run, condition: str, force=False):
    run.require("build-dataset", condition)
    out = run.begin("train-apn", condition, force=force)
    train = read_manifest(run.path("build-dataset", condition) / "condition.jsonl")
    valid = run.manifest("ingest", "apn_val") or None
    for seed in run.cfg["detector_seeds"]:
        model = train_detector(train, _clf_config(run, "detector", seed), valid)
        model.save(out / f"detector_s{seed}.ckpt")
        (out / f"history_s{seed}.json").write_text(json.dumps(model.history_, indent=1), encoding="utf-8")
    run.finish("train-apn", condition)


def stage_eval_apn(run: Run, condition: str, force=False):
    run.require("train-apn", condition)
    out = run.begin("eval-apn", condition, force=force)
    test = run.manifest("ingest", "apn_test")
    results = []
    for seed in run.cfg["detector_seeds"]:
        model = LesionClassifier.load(run.path("train-apn", condition) / f"detector_s{seed}.ckpt")
        r = evaluate_detector(model, test, condition, seed)
        results.append(
            {"seed": seed, "auc": r.auc, "metrics": vars(r.metrics), "roc": [list(p) for p in r.roc]}
        )
    (out / "results.json").write_text(json.dumps(results, indent=1), encoding="utf-8")
    run.finish("eval-apn", condition)


def stage_train_grader(run: Run, force=False):
    run.require("ingest")
    out = run.begin("train-grader", force=force)
    train = run.manifest("ingest", "diag_train")
    heldout = run.manifest("ingest", "grade_test")
    summary = []
    for seed in run.cfg["grader_seeds"]:
        res = train_grader(train, _clf_config(run, "grader", seed), heldout)
        res.model.save(out / f"grader_s{seed}.ckpt")
        summary.append({"seed": seed, "sensitivity": res.sensitivity, "specificity": res.specificity, "f1": res.f1, "auc": res.auc})
    (out / "heldout.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    run.finish("train-grader")


def stage_eval_grading(run: Run, force=False):
    run.require("train-grader")
    run.require("apply-transfer")
    out = run.begin("eval-grading", force=force)
    pools = _pools(run)
    datasets = {name: pools[name] for name in GRADING_DATASETS}
    results = []
    for seed in run.cfg["grader_seeds"]:
        model = LesionClassifier.load(run.path("train-grader") / f"grader_s{seed}.ckpt")
        hists = score_distribution(model, datasets)
        means = {name: float(np.mean(predict(model, recs))) for name, recs in datasets.items() if recs}
        results.append({"seed": seed, "histograms": {k: v.tolist() for k, v in hists.items()}, "mean_scores": means})
    (out / "distributions.json").write_text(json.dumps(results, indent=1), encoding="utf-8")
    run.finish("eval-grading")


def stage_report(run: Run, force=False):
    conditions = run.cfg["conditions"]
    for c in conditions:
        run.require("eval-apn", c)
    run.require("eval-grading")
    run.require("train-grader")
    out = run.begin("report", force=force)

    per_condition = {}
    detection = []
    for c in conditions:
        rows = json.loads((run.path("eval-apn", c) / "results.json").read_text(encoding="utf-8"))
        results = [
            DetectionResult(c, r["seed"], ConfusionMetrics(**r["metrics"]), r["auc"], [tuple(p) for p in r["roc"]])
            for r in rows
        ]
        per_condition[c] = results
        detection.extend(results)
    label = {c: f"({c}) {CONDITION_NAMES[c]}" for c in conditions}
    write_metric_table([(label[c], *mean_metrics(per_condition[c])) for c in conditions], out / "detection_metrics.csv")
    write_metric_table([(f"{label[c]} seed={r.seed}", r.metrics, r.auc) for c in conditions for r in per_condition[c]],
                       out / "detection_metrics_per_seed.csv")
    write_roc_csv(detection, out / "roc.csv")

    grading = json.loads((run.path("eval-grading") / "distributions.json").read_text(encoding="utf-8"))
    hists = [(name, g["seed"], np.asarray(m)) for g in grading for name, m in g["histograms"].items()]
    write_histogram_csv(hists, out / "score_histogram.csv")
    heldout = json.loads((run.path("train-grader") / "heldout.json").read_text(encoding="utf-8"))

    summary = {
        "config_hash": run.hash,
        "seed": run.cfg["seed"],
        "detector_seeds": run.cfg["detector_seeds"],
        "grader_seeds": run.cfg["grader_seeds"],
        "auc": {c: [r.auc for r in per_condition[c]] for c in conditions},
        "mean_auc": {c: mean_metrics(per_condition[c])[1] for c in conditions},
        "grader_heldout": heldout,
        "grading_mean_scores": [{"seed": g["seed"], **g["mean_scores"]} for g in grading],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    run.finish("report")
    return summary


def run_stage(run: Run, stage: str, condition: str | None = None, force: bool = False):
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    fn = globals()["stage_" + stage.replace("-", "_")]
    if stage in PER_CONDITION:
        conditions = [condition] if condition else run.cfg["conditions"]
        for c in conditions:
            fn(run, c, force=force)
        return None
    return fn(run, force=force)


def run_all(cfg: dict, force: bool = False) -> dict:
    run = Run(cfg)
    for stage in STAGES:
        logger.info("stage %s", stage)
        result = run_stage(run, stage, force=force)
    return result
