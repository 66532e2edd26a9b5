"""Command-line entry points.

Runs are driven by flat JSON config files; any key can be overridden on
the command line with --set key=value. Every command writes its delimited
outputs (CSV/JSON) plus rendered figures into the output directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import anns, dataset as ds_mod, evaluation, plots, trainer
from .errors import ConfigError, DataError, NumericalError, XcmixError

THREADS_ENV = "XC_ASTRA_THREADS"

_TRAIN_CONFIG_KEYS = {f.name for f in dataclasses.fields(trainer.TrainConfig)}
_DATA_KEYS = {"dataset", "eval_dataset", "tfidf", "augment_label_text", "subset_labels", "subset_seed"}
_ABLATE_KEYS = {"arms"}


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")


def _load_config(config_path, overrides, allowed_extra=frozenset()):
    try:
        with open(config_path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key, raw in overrides:
        try:
            doc[key] = json.loads(raw)
        except json.JSONDecodeError:
            doc[key] = raw
    allowed = _TRAIN_CONFIG_KEYS | _DATA_KEYS | allowed_extra
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _split_train_config(doc) -> trainer.TrainConfig:
    kwargs = {k: v for k, v in doc.items() if k in _TRAIN_CONFIG_KEYS}
    try:
        return trainer.TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc))


def _load_dataset(doc, key="dataset"):
    path = doc.get(key)
    if key == "dataset" and not path:
        raise ConfigError("config is missing the 'dataset' path")
    if not path:
        return None
    if not Path(path).exists():
        raise DataError(f"dataset file not found: {path}")
    ds = ds_mod.load_cache(path) if str(path).endswith(".bin") else ds_mod.parse_xc_file(path)
    if doc.get("tfidf"):
        ds = ds_mod.tfidf_normalize(ds)
    if key == "dataset" and doc.get("subset_labels"):
        rng = np.random.default_rng(int(doc.get("subset_seed", 0)))
        chosen = rng.choice(ds.n_labels, size=int(doc["subset_labels"]), replace=False)
        ds = ds_mod.subset_by_labels(ds, chosen)
    if key == "dataset" and doc.get("augment_label_text"):
        ds = ds_mod.augment_with_label_text(ds)
    return ds


def _run(fn):
    try:
        fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(3)
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        sys.exit(4)
    except XcmixError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@click.group()
def main():
    """Train and evaluate sampled-negative extreme multilabel classifiers."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--set", "overrides", multiple=True, type=(str, str), help="Override a config key.")
@click.option("--out", "out_dir", default="runs/train", type=click.Path())
def train(config_path, overrides, out_dir):
    """Train one model; writes checkpoint, log CSV/JSON, metrics, figures.

    Log CSV header: epoch,wall_seconds,mean_slate_loss,probe_full_loss,p_at_1,p_at_5,snapshot_epoch
    """

    def go():
        doc = _load_config(config_path, overrides)
        config = _split_train_config(doc)
        train_ds = _load_dataset(doc)
        eval_ds = _load_dataset(doc, "eval_dataset")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        encoder, bank, log = trainer.train(
            train_ds, config, eval_dataset=eval_ds, checkpoint_path=out / "model.xast"
        )
        log.to_csv(out / "log.csv")
        log.to_json(out / "log.json")
        plots.save_training_curves(log, out / "training_curves.png")
        if eval_ds is not None:
            report = evaluation.evaluate(eval_ds, encoder, bank)
            report.to_json(out / "metrics.json")
            click.echo(json.dumps(report.to_json(), sort_keys=True))
        click.echo(f"wrote {out / 'model.xast'}")

    _run(go)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--set", "overrides", multiple=True, type=(str, str))
@click.option("--out", "out_dir", default="runs/ablate", type=click.Path())
def ablate(config_path, overrides, out_dir):
    """Run strategy arms with identical seeds/budgets; emit curves + summary."""

    def go():
        doc = _load_config(config_path, overrides, allowed_extra=_ABLATE_KEYS)
        arms = doc.get("arms")
        if not arms:
            raise ConfigError("ablate config needs a nonempty 'arms' list")
        from .sampler import STRATEGY_KINDS

        for arm in arms:
            if arm not in STRATEGY_KINDS and arm != "FullLoss":
                raise ConfigError(f"unknown ablation arm {arm!r}")
        train_ds = _load_dataset(doc)
        eval_ds = _load_dataset(doc, "eval_dataset")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        arm_logs = {}
        summary = []
        for arm in arms:
            if arm == "FullLoss":
                config = _split_train_config({**doc, "strategy": "Mixture"})
                _, _, log = trainer.train_full_loss_baseline(train_ds, config, eval_dataset=eval_ds)
            else:
                config = _split_train_config({**doc, "strategy": arm})
                _, _, log = trainer.train(train_ds, config, eval_dataset=eval_ds)
            arm_logs[arm] = log
            with open(out / f"curve_{arm}.csv", "w") as fh:
                fh.write("epoch,wall_seconds,p_at_1\n")
                wall = 0.0
                for r in log.records:
                    wall += r.wall_seconds
                    if r.p_at_1 is not None:
                        fh.write(f"{r.epoch},{wall:.6f},{r.p_at_1:.6f}\n")
            final = [r for r in log.records if r.p_at_1 is not None]
            summary.append(
                {
                    "arm": arm,
                    "final_p_at_1": final[-1].p_at_1 if final else None,
                    "final_p_at_5": final[-1].p_at_5 if final else None,
                    "total_wall_seconds": sum(r.wall_seconds for r in log.records),
                    "mean_epoch_seconds": float(np.mean([r.wall_seconds for r in log.records])),
                }
            )
        with open(out / "summary.csv", "w") as fh:
            fh.write("arm,final_p_at_1,final_p_at_5,total_wall_seconds,mean_epoch_seconds\n")
            for s in summary:
                fh.write(
                    f"{s['arm']},{s['final_p_at_1']},{s['final_p_at_5']},"
                    f"{s['total_wall_seconds']:.6f},{s['mean_epoch_seconds']:.6f}\n"
                )
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
        plots.save_ablation_curves(arm_logs, out / "ablation.png")
        click.echo(json.dumps(summary))

    _run(go)


@main.command("eval")
@click.argument("checkpoint", type=click.Path())
@click.argument("dataset_path", type=click.Path())
@click.option("--ks", default="1,3,5", help="Comma-separated k values.")
@click.option("--mode", default="exact", type=click.Choice(["exact", "anns"]))
@click.option("--tfidf", is_flag=True, default=False)
@click.option("--out", "out_dir", default="runs/eval", type=click.Path())
def eval_cmd(checkpoint, dataset_path, ks, mode, tfidf, out_dir):
    """Evaluate a checkpoint on a dataset; prints and writes the metric JSON."""

    def go():
        if not Path(checkpoint).exists():
            raise DataError(f"checkpoint not found: {checkpoint}")
        if not Path(dataset_path).exists():
            raise DataError(f"dataset file not found: {dataset_path}")
        encoder, bank, _config = trainer.load_checkpoint(checkpoint)
        ds = ds_mod.load_cache(dataset_path) if str(dataset_path).endswith(".bin") else ds_mod.parse_xc_file(dataset_path)
        if tfidf:
            ds = ds_mod.tfidf_normalize(ds)
        if ds.n_features != encoder.n_features:
            raise DataError(
                f"dataset has {ds.n_features} features but the checkpoint encoder expects {encoder.n_features}"
            )
        if ds.n_labels != bank.n_labels:
            raise DataError(
                f"dataset has {ds.n_labels} labels but the checkpoint bank holds {bank.n_labels}"
            )
        k_list = [int(x) for x in ks.split(",")]
        report = evaluation.evaluate(ds, encoder, bank, ks=k_list, mode=mode)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.to_json(out / f"metrics_{mode}.json")
        click.echo(json.dumps(report.to_json(), sort_keys=True))

    _run(go)


@main.command("gen-synth")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--set", "overrides", multiple=True, type=(str, str))
@click.option("--out", "out_dir", default="runs/synth", type=click.Path())
def gen_synth(config_path, overrides, out_dir):
    """Generate a planted synthetic dataset pair in the sparse text format."""

    def go():
        keys = {
            "n_points", "n_features", "n_labels", "labels_per_point", "noise_level",
            "seed", "test_fraction", "group_size", "group_coherence",
        }
        doc = _load_config(config_path, overrides, allowed_extra=keys)
        missing = {"n_points", "n_features", "n_labels", "labels_per_point"} - set(doc)
        if missing:
            raise ConfigError(f"gen-synth config is missing {sorted(missing)}")
        train_ds, test_ds = ds_mod.generate_synthetic(
            int(doc["n_points"]),
            int(doc["n_features"]),
            int(doc["n_labels"]),
            int(doc["labels_per_point"]),
            float(doc.get("noise_level", 0.05)),
            int(doc.get("seed", 0)),
            test_fraction=float(doc.get("test_fraction", 0.2)),
            group_size=int(doc.get("group_size", 1)),
            group_coherence=float(doc.get("group_coherence", 0.0)),
        )
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds_mod.write_xc_file(train_ds, out / "train.txt")
        ds_mod.write_xc_file(test_ds, out / "test.txt")
        if train_ds.label_features is not None:
            lf = ds_mod.SparseDataset(
                train_ds.n_labels,
                train_ds.n_features,
                train_ds.n_labels,
                train_ds.label_features,
                [np.array([l], dtype=np.int32) for l in range(train_ds.n_labels)],
            )
            ds_mod.write_xc_file(lf, out / "label_features.txt")
        click.echo(f"wrote {out / 'train.txt'} and {out / 'test.txt'}")

    _run(go)


@main.command("index-recall")
@click.argument("checkpoint", type=click.Path())
@click.option("--k", default=10, type=int)
@click.option("--n-queries", default=200, type=int)
@click.option("--max-degree", default=32, type=int)
@click.option("--build-beam", default=64, type=int)
@click.option("--query-beam", default=128, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", default="runs/recall", type=click.Path())
def index_recall(checkpoint, k, n_queries, max_degree, build_beam, query_beam, seed, out_dir):
    """Recall@k of the graph index vs exact search over a checkpoint's classifiers."""

    def go():
        if not Path(checkpoint).exists():
            raise DataError(f"checkpoint not found: {checkpoint}")
        _encoder, bank, _config = trainer.load_checkpoint(checkpoint)
        exact = anns.build_exact(bank.weights)
        approx = anns.build_approx(bank.weights, max_degree, build_beam, seed=seed)
        rng = np.random.default_rng(seed)
        queries = rng.standard_normal((n_queries, bank.dim)).astype(np.float32)
        recall = anns.measure_recall(approx, exact, queries, k, query_beam)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            "recall_at_k": recall,
            "k": k,
            "n_queries": n_queries,
            "max_degree": max_degree,
            "build_beam": build_beam,
            "query_beam": query_beam,
        }
        with open(out / "recall.json", "w") as fh:
            json.dump(doc, fh, indent=2)
        click.echo(json.dumps(doc))

    _run(go)


if __name__ == "__main__":
    main()
