"""Command-line entry point: ``gliotl <command> --config run.yaml [--set k=v ...]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 missing input file. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pydantic

from . import __version__
from .config import ExperimentConfig, config_snapshot, load_config
from .errors import ValidationError

log = logging.getLogger("gliotl")

COMMANDS = ("synth", "preprocess", "train", "study", "evaluate", "compare", "infer")


class ConfigError(Exception):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _write_run_info(cfg: ExperimentConfig, out: Path, command: str, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    info = {"command": command, "seed": cfg.seed, "version": __version__, **extra, "config": config_snapshot(cfg)}
    (out / f"{command}_run.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is not set", field=what)
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _manifest(cfg: ExperimentConfig, which: str):
    from .core_data import read_manifest

    path = _require(getattr(cfg.data, f"{which}_manifest"), f"data.{which}_manifest")
    return read_manifest(path, which.upper(), check_files=cfg.data.check_files)


# -- commands ---------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, out: Path) -> dict:
    from .core_data import write_manifest
    from .synthgen import generate_cohort

    cohort = generate_cohort(cfg.synth_spec(), out)
    written = {
        "had_manifest": write_manifest(cohort.had, out / "had_manifest.csv"),
        "wad_manifest": write_manifest(cohort.wad, out / "wad_manifest.csv"),
    }
    if cohort.external is not None:
        written["external_manifest"] = write_manifest(cohort.external, out / "external_manifest.csv")
    with open(out / "wad_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["map_id", "true_label"])
        for k in sorted(cohort.wad_truth):
            w.writerow([k, cohort.wad_truth[k].value])
    return {k: str(v) for k, v in written.items()}


PAIR_COLUMNS = ("previous_path", "current_path")


def cmd_preprocess(cfg: ExperimentConfig, out: Path) -> dict:
    from .core_data import MANIFEST_COLUMNS, build_manifest, write_manifest
    from .preprocess import STAGE_ORDER, StageDescriptor, load_volume, make_difference_map, save_volume

    pairs = _require(cfg.preprocess.pairs, "preprocess.pairs")
    with open(pairs, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    stages = []
    for name in STAGE_ORDER:
        tpl = getattr(cfg.preprocess, name)
        if tpl:
            stages.append(StageDescriptor(name, tpl, timeout=cfg.preprocess.timeout))
        else:
            stages.append(StageDescriptor.bypass(name, "not configured"))
    maps_dir = out / "maps"
    manifest_rows, provenance = [], []
    for i, row in enumerate(rows):
        missing = [c for c in (*MANIFEST_COLUMNS[:-1], *PAIR_COLUMNS) if c not in row]
        if missing:
            raise ValidationError(f"{pairs} row {i}: missing columns {missing}")
        prev_p, cur_p = (pairs.parent / row[c] if not Path(row[c]).is_absolute() else Path(row[c]) for c in PAIR_COLUMNS)
        for p in (prev_p, cur_p):
            if not p.exists():
                raise FileNotFoundError(f"scan not found: {p}")
        diff, prov = make_difference_map(
            load_volume(prev_p), load_volume(cur_p), stages, cfg.data.input_grid, cfg.preprocess.use_brain_mask
        )
        target = save_volume(diff, maps_dir / f"{row['map_id']}{cfg.data.volume_format}")
        manifest_rows.append({**{c: row[c] for c in MANIFEST_COLUMNS[:-1]}, "volume_path": str(target)})
        provenance.append({"map_id": row["map_id"], "stages": prov})
    manifest = build_manifest(manifest_rows, cfg.preprocess.cohort)
    path = write_manifest(manifest, out / f"{cfg.preprocess.cohort.lower()}_manifest.csv")
    with open(out / "preprocess_log.jsonl", "w") as fh:
        for p in provenance:
            fh.write(json.dumps(p, sort_keys=True) + "\n")
    return {"manifest": str(path), "n_maps": len(manifest)}


def _fold_for(cfg: ExperimentConfig, had):
    from .experiment import CVPlan, make_subject_folds, subject_majority_labels

    plan = CVPlan(cfg.cv.k, cfg.cv.val_fraction, cfg.cv_seed, cfg.cv.stratify)
    folds = make_subject_folds(had.subjects, plan, subject_majority_labels(had))
    if cfg.train.fold >= len(folds):
        raise ConfigError(f"train.fold must be < cv.k={cfg.cv.k}", field="train.fold")
    return folds[cfg.train.fold]


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    from .core_data import threshold_manifest
    from .evaluation import full_report, write_metrics_report, write_predictions
    from .experiment import predict_dataset, filter_wad_for_fold, write_evaluation_curves
    from .models import save_checkpoint
    from .training import TLStrategy, VolumeSource, write_epoch_log, apply_tl_strategy

    had = _manifest(cfg, "had")
    strategy = TLStrategy(cfg.train.strategy)
    wad = _manifest(cfg, "wad") if strategy is not TLStrategy.NONE else None
    fold = _fold_for(cfg, had)
    spec = cfg.architecture()
    source = VolumeSource(spec.input_shape)
    train_ds = source.dataset(had.for_subjects(fold.train_subjects), "train")
    val_ds = source.dataset(had.for_subjects(fold.val_subjects), "val")
    wad_ds = None
    if wad is not None:
        wad_ds = source.dataset(threshold_manifest(filter_wad_for_fold(wad, fold), cfg.train.fraction_of_wad), "wad")
    model, res = apply_tl_strategy(
        strategy, spec, wad_ds, train_ds, val_ds, cfg.train_config(), cfg.policy(),
        pretrain_val_fraction=cfg.train.pretrain_val_fraction,
    )
    test_ds = source.dataset(had.for_subjects(fold.test_subjects), "test")
    preds = predict_dataset(model, test_ds, fold.fold_id, cfg.evaluate.threshold)
    save_checkpoint(model, out / "model.pt", epoch=res.best_epoch, val_auc=res.best_val_auc, seed=cfg.seed)
    write_epoch_log(out / "epoch_log.csv", res)
    if res.pretrain is not None:
        write_epoch_log(out / "pretrain_epoch_log.csv", res.pretrain)
    write_predictions(preds, out / "test_predictions.csv", cfg.evaluate.threshold)
    write_metrics_report(full_report(preds, cfg.evaluate.threshold), out / "metrics.json",
                         model=cfg.name, seed=cfg.seed, fold=fold.fold_id)
    write_evaluation_curves(preds, out, cfg.name)
    return {"best_epoch": res.best_epoch, "best_val_auc": res.best_val_auc}


def cmd_study(cfg: ExperimentConfig, out: Path) -> dict:
    from .experiment import CVPlan, ExperimentSpec, run_experiment

    had = _manifest(cfg, "had")
    wad = _manifest(cfg, "wad") if cfg.hpo.kind == "tl" else None
    spec = ExperimentSpec(
        model=cfg.architecture(),
        kind=cfg.hpo.kind,
        had=had,
        wad=wad,
        cv_plan=CVPlan(cfg.cv.k, cfg.cv.val_fraction, cfg.cv_seed, cfg.cv.stratify),
        space=cfg.search_space(),
        sampler=cfg.hpo.sampler,
        budget=cfg.budget(),
        pruner=cfg.pruner(),
        batch_size=cfg.train.batch_size,
        max_epochs=cfg.train.max_epochs,
        early_stop_patience=cfg.train.early_stop_patience,
        policy=cfg.policy(),
        pretrain_val_fraction=cfg.train.pretrain_val_fraction,
        seed=cfg.seed,
        threshold=cfg.evaluate.threshold,
        parallelism=cfg.parallelism,
        n_startup=cfg.hpo.n_startup,
        name=cfg.name,
    )
    result = run_experiment(spec, out_dir=out)
    return {"AUC": result.metrics.auc, "AUPR": result.metrics.aupr, "n": result.metrics.n}


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> dict:
    from .evaluation import full_report, read_predictions, write_metrics_report
    from .experiment import write_evaluation_curves

    path = cfg.evaluate.predictions or out / "predictions.csv"
    preds = read_predictions(_require(path, "evaluate.predictions"))
    report = full_report(preds, cfg.evaluate.threshold)
    write_metrics_report(report, out / "metrics.json", model=cfg.name, seed=cfg.seed)
    write_evaluation_curves(preds, out, cfg.name)
    return {"AUC": report.auc, "AUPR": report.aupr}


def aligned_scores(path_a: Path, path_b: Path):
    from .evaluation import read_predictions

    a, b = read_predictions(path_a), read_predictions(path_b)
    ea = {e.map_id: e for e in a.entries}
    eb = {e.map_id: e for e in b.entries}
    if set(ea) != set(eb):
        raise ValidationError(
            f"prediction files cover different records ({len(set(ea) ^ set(eb))} map_ids differ)"
        )
    ids = sorted(ea)
    for m in ids:
        if ea[m].true_label != eb[m].true_label:
            raise ValidationError(f"{m}: true labels disagree between prediction files")
    labels = np.array([int(ea[m].true_label) for m in ids])
    return labels, np.array([ea[m].probability for m in ids]), np.array([eb[m].probability for m in ids])


def cmd_compare(cfg: ExperimentConfig, out: Path) -> dict:
    from .stats import PairedComparison, paired_auc_permutation_test, write_comparison_report

    st = cfg.stats
    pa = _require(st.predictions_a, "stats.predictions_a")
    pb = _require(st.predictions_b, "stats.predictions_b")
    y, a, b = aligned_scores(pa, pb)
    cmp = PairedComparison(y, a, b, st.n_permutations, st.alpha, cfg.seed)
    res = paired_auc_permutation_test(cmp, n_jobs=cfg.parallelism)
    write_comparison_report(res, out / "comparison.json", st.name_a, st.name_b, st.alpha)
    return {"delta": res.observed_delta, "p_value": res.p_value}


def cmd_infer(cfg: ExperimentConfig, out: Path) -> dict:
    from .evaluation import full_report, write_metrics_report, write_predictions
    from .experiment import run_external_inference, write_evaluation_curves
    from .models import load_checkpoint, with_input_shape
    from .training import VolumeSource

    paths = list(cfg.infer.checkpoints)
    if not paths and cfg.infer.study_dir is not None:
        study_dir = _require(cfg.infer.study_dir, "infer.study_dir")
        paths = sorted(study_dir.glob("fold_*/best_model.pt"))
    if not paths:
        raise ConfigError("set infer.checkpoints or infer.study_dir", field="infer")
    models = [load_checkpoint(_require(p, "infer.checkpoints"))[0] for p in paths]
    external = _manifest(cfg, "external")
    source = VolumeSource(models[0].spec.input_shape)
    preds = run_external_inference(models, external, source, cfg.evaluate.threshold)
    write_predictions(preds, out / "external_predictions.csv", cfg.evaluate.threshold)
    report = full_report(preds, cfg.evaluate.threshold)
    write_metrics_report(report, out / "external_metrics.json", model=cfg.name, seed=cfg.seed)
    write_evaluation_curves(preds, out, cfg.name)
    return {"AUC": report.auc, "n": report.n}


HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "study": cmd_study,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "infer": cmd_infer,
}


# -- plumbing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gliotl", description="Change detection on longitudinal difference maps.")
    p.add_argument("--version", action="version", version=f"gliotl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} step")
        sp.add_argument("--config", type=Path, help="YAML experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config field (dotted path); repeatable")
        sp.add_argument("--output", type=Path, help="output directory (overrides output.directory)")
        sp.add_argument("--parallelism", type=int, help="trial / permutation parallelism")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _diagnostic(code: int, kind: str, message: str, **extra) -> int:
    body = {"status": "error", "exit_code": code, "kind": kind, "message": " ".join(str(message).split()), **extra}
    print(json.dumps(body, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, parallelism=args.parallelism,
                          output=str(args.output) if args.output else None)
    except pydantic.ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(x) for x in err["loc"]) or None
        msg = err["msg"].removeprefix("Value error, ")
        if field is None and ": " in msg:
            # module-level checks are prefixed with their section
            field, msg = msg.split(": ", 1)
        return _diagnostic(2, "invalid_config", msg, field=field)
    except FileNotFoundError as exc:
        return _diagnostic(3, "missing_file", str(exc), path=str(args.config))
    except (ValidationError, ValueError) as exc:
        return _diagnostic(2, "invalid_config", str(exc))

    out = Path(cfg.output.directory)
    try:
        summary = HANDLERS[args.command](cfg, out)
        _write_run_info(cfg, out, args.command)
    except ConfigError as exc:
        return _diagnostic(2, "invalid_config", str(exc), field=exc.field)
    except FileNotFoundError as exc:
        path = exc.filename or str(exc).split(": ", 1)[-1]
        return _diagnostic(3, "missing_file", str(exc), path=str(path))
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit 1 with a diagnostic
        log.debug("command failed", exc_info=True)
        return _diagnostic(1, "runtime_error", f"{type(exc).__name__}: {exc}")
    print(json.dumps({"status": "ok", "command": args.command, "output": str(out), "seed": cfg.seed,
                      **{k: v for k, v in summary.items()}}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
