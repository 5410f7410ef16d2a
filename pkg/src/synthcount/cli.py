"""Command-line entry points: generate, train, infer, evaluate, ablate.

Every command reads one YAML experiment file with sections ``data``,
``model``, ``train`` and ``infer``; ``--set section.key=value`` flags
override it and the merged result is written next to the outputs.  Paths
in the config are relative to the data root (``$SYNTHCOUNT_DATA`` or
``data.root``).  Failures exit nonzero with a JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from PIL import UnidentifiedImageError

from . import dcgp, genclient, train
from .manifest import ManifestError, load_image, read_manifest, resolve, save_image, write_manifest
from .models import CountingModel, EncoderConfig
from .scene_lab import SceneSpec, render_scene

log = logging.getLogger("synthcount")

DATA_ENV = "SYNTHCOUNT_DATA"

DEFAULTS: dict = {
    "data": {
        "root": "data",
        "backend": "oracle",
        "remote_url": "http://localhost:8000",
        "remote_timeout": 60.0,
        "seed": 0,
        "workers": 1,
        "oracle": {"canvas": [96, 96], "object_size": 3.5, "object_style": "person", "label_noise": 0.0},
        "sorting": {"dir": "sorting", "n_refs": 125, "n_minus": 2, "n_plus": 2, "count_range": [1, 50]},
        "count": {"dir": "count", "n_images": 150, "prompt_counts": list(genclient.DEFAULT_PROMPT_COUNTS), "zero_count": 800},
        # rendered like the eval images so density verdicts see the same resize path;
        # the count zero pool is rendered at another canvas, so it is not reused here
        "density": {"dir": "density", "per_class": 100, "reuse_zero": False, "canvas": [192, 192], "object_size": 7.0},
        "eval": {"dir": "eval", "n": 50, "count_range": [100, 400], "canvas": [192, 192], "object_size": 7.0},
    },
    "model": {"feature_dim": 64, "downsample_factor": 8, "input_size": 96, "widths": [8, 16, 32], "highpass": 9, "density_context": 5},
    "train": {
        "checkpoint": "checkpoints/model",
        "sort": {"lr_head": 1e-3, "lr_encoder": 3e-4, "epochs": 60, "batch_size": 16, "seed": 0, "lambda_weight": 5.0, "lambda_bb": 0.5},
        "count": {"lr_head": 1e-2, "lr_encoder": 1e-4, "epochs": 200, "batch_size": 64, "seed": 0, "mode": "probe", "filter": True},
        "density": {"lr_head": 1e-2, "epochs": 15, "batch_size": 256, "seed": 0},
    },
    "infer": {"strategy": "dcgp", "M": 3, "tau": 0.5, "hires": True},
}


class CliError(Exception):
    hint = ""


class ConfigError(CliError):
    pass


class MissingDependency(CliError):
    pass


class MissingPrediction(CliError):
    pass


# ---------------------------------------------------------------- config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the YAML file, then ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            text = Path(path).read_text()
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f" at line {mark.line + 1}" if mark else ""
            raise ConfigError(f"{path}{where}: {getattr(e, 'problem', e)}") from e
        except OSError as e:
            raise ConfigError(str(e)) from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}; expected {sorted(DEFAULTS)}")
        cfg = _merge(cfg, user)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    if os.environ.get(DATA_ENV):
        cfg["data"]["root"] = os.environ[DATA_ENV]
    return cfg


def data_path(cfg: dict, rel: str | Path) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(cfg["data"]["root"]) / p


def save_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))


def _train_config(section: dict, **extra) -> train.TrainConfig:
    fields = train.TrainConfig.__dataclass_fields__
    return train.TrainConfig(**{k: v for k, v in {**section, **extra}.items() if k in fields})


def _backend(cfg: dict, **oracle_over):
    d = cfg["data"]
    if d["backend"] == "oracle":
        o = {**d["oracle"], **oracle_over}
        return genclient.OracleBackend(
            canvas=tuple(o["canvas"]),
            object_size=o["object_size"],
            object_style=o["object_style"],
            label_noise=o.get("label_noise", 0.0),
        )
    if d["backend"] == "remote":
        return genclient.RemoteBackend(d["remote_url"], timeout=d["remote_timeout"])
    raise ConfigError(f"unknown backend {d['backend']!r}; use oracle or remote")


# -------------------------------------------------------------- generate


def reference_scenes(n: int, count_range: Sequence[int], cfg: dict, seed: int) -> list:
    """Oracle reference images for the sorting builder."""
    o = cfg["data"]["oracle"]
    rng = np.random.default_rng([seed, 3571])
    refs = []
    for i in range(n):
        spec = SceneSpec(
            seed=seed * 100_003 + i,
            count=int(rng.integers(count_range[0], count_range[1] + 1)),
            canvas=tuple(o["canvas"]),
            background_id=int(rng.integers(16)),
            object_style=o["object_style"],
            object_size=o["object_size"],
        )
        refs.append(render_scene(spec))
    return refs


def cmd_generate(cfg: dict, kind: str, out: Optional[str] = None) -> dict:
    d = cfg["data"]
    seed, workers = int(d["seed"]), int(d["workers"])
    section = d[kind]
    out_dir = data_path(cfg, out or section["dir"])
    if kind == "sorting":
        if d["backend"] != "oracle":
            raise ConfigError("sorting references come from the oracle renderer; use backend: oracle")
        refs = reference_scenes(section["n_refs"], section["count_range"], cfg, seed)
        res = genclient.build_sorting_dataset(refs, _backend(cfg), out_dir, section["n_minus"], section["n_plus"], seed=seed, workers=workers)
    elif kind == "count":
        schedule = genclient.default_schedule(section["n_images"], section["prompt_counts"])
        res = genclient.build_count_dataset(schedule, section["zero_count"], _backend(cfg), out_dir, seed=seed, workers=workers)
    elif kind == "density":
        zero_pool, zero_dir = (), None
        count_manifest = data_path(cfg, d["count"]["dir"]) / "count.jsonl"
        if section.get("reuse_zero") and count_manifest.exists():
            zero_pool = [r for r in read_manifest(count_manifest, "count") if int(r["prompt_count"]) == 0][: section["per_class"]]
            zero_dir = count_manifest.parent
        backend = _backend(cfg, canvas=section.get("canvas", d["oracle"]["canvas"]), object_size=section.get("object_size", d["oracle"]["object_size"]))
        res = genclient.build_density_dataset(section["per_class"], backend, out_dir, zero_pool, zero_dir, seed=seed, workers=workers)
    elif kind == "eval":
        res = genclient.build_eval_dataset(
            section["n"],
            tuple(section["count_range"]),
            out_dir,
            canvas=tuple(section["canvas"]),
            object_size=section["object_size"],
            object_style=d["oracle"]["object_style"],
            seed=seed,
        )
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    save_config(cfg, out_dir / "config.yaml")
    return {"kind": kind, "manifest": str(res.manifest), "attempted": res.attempted, "written": res.written, "failed": res.failed}


# ----------------------------------------------------------------- train


def _load_checkpoint(path: Path, need: Sequence[str] = ()) -> CountingModel:
    if not (path / "manifest.json").exists():
        err = MissingDependency(f"no checkpoint at {path}")
        err.hint = "run `synthcount train --stage sort` first"
        raise err
    model = CountingModel.load(path)
    missing = [s for s in need if s not in model.meta.get("stages", [])]
    if missing:
        err = MissingDependency(f"checkpoint {path} lacks stage(s) {missing}")
        err.hint = " then ".join(f"`synthcount train --stage {s}`" for s in missing)
        raise err
    return model


def _manifest(cfg: dict, kind: str, override: Optional[str]) -> Path:
    path = Path(override) if override else data_path(cfg, cfg["data"][kind]["dir"]) / f"{kind}.jsonl"
    if not path.exists():
        err = MissingDependency(f"{kind} manifest not found at {path}")
        err.hint = f"run `synthcount generate --kind {kind}` first"
        raise err
    return path


def cmd_train(cfg: dict, stage: str, manifest: Optional[str] = None, checkpoint: Optional[str] = None) -> dict:
    ckpt = data_path(cfg, checkpoint or cfg["train"]["checkpoint"])
    section = cfg["train"][stage]
    log_path = ckpt / f"train_{stage}.jsonl"
    if stage == "sort":
        path = _manifest(cfg, "sorting", manifest)
        rows = read_manifest(path, "sorting")
        ckpt.mkdir(parents=True, exist_ok=True)
        model, tlog = train.pretrain_sorting(rows, path, _train_config(section), EncoderConfig(**cfg["model"]), log_path=log_path)
        model.meta["stages"] = ["sort"]
        summary = {"initial_loss": model.meta["sort_initial_loss"], "final_loss": model.meta["sort_final_loss"]}
    elif stage == "count":
        model = _load_checkpoint(ckpt, ["sort"])
        path = _manifest(cfg, "count", manifest)
        rows = read_manifest(path, "count")
        images, feats = train.features_for(model, path, rows)
        report = {}
        if section.get("filter", True):
            cats = [int(r["prompt_count"]) for r in rows]
            table = train.compute_prototypes(feats, cats)
            rows, report = train.filter_outliers(rows, feats, table)
            write_manifest(path.with_name("count_filtered.jsonl"), "count", rows)
        train.train_count(rows, model, _train_config(section), features=feats, images=images, mode=section.get("mode", "probe"), log_path=log_path)
        model.meta["stages"] = sorted(set(model.meta.get("stages", [])) | {"count"})
        kept = sum(bool(r["kept"]) for r in rows)
        summary = {"rows": len(rows), "kept": kept, "filter_report": {str(k): v for k, v in report.items()}}
    elif stage == "density":
        model = _load_checkpoint(ckpt, ["sort"])
        path = _manifest(cfg, "density", manifest)
        rows = read_manifest(path, "density")
        _, maps = train.feature_maps_for(model, path, rows)
        train.train_density(rows, model, maps, _train_config(section), log_path=log_path)
        model.meta["stages"] = sorted(set(model.meta.get("stages", [])) | {"density"})
        summary = {"rows": len(rows)}
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    model.save(ckpt)
    save_config(cfg, ckpt / f"config_{stage}.yaml")
    return {"stage": stage, "checkpoint": str(ckpt), **summary}


# ----------------------------------------------------------------- infer


def run_strategy(image: np.ndarray, model: CountingModel, strategy: str, M: int, tau: float = 0.5, hires: bool = True) -> dcgp.InferenceResult:
    if strategy not in dcgp.STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; use one of {sorted(dcgp.STRATEGIES)}")
    return dcgp.STRATEGIES[strategy](image, model, M, use_hires=hires, tau=tau)


def infer_paths(paths: Sequence[Path], model: CountingModel, strategy: str, M: int, tau: float = 0.5, hires: bool = True, overlay_dir: Optional[Path] = None) -> tuple[list[dict], list[dict]]:
    """Per-image report dicts; unreadable images are skipped and listed."""
    reports, skipped = [], []
    for p in paths:
        try:
            image = load_image(p)
        except (OSError, UnidentifiedImageError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", p, e)
            skipped.append({"path": str(p), "error": f"{type(e).__name__}: {e}"})
            continue
        res = run_strategy(image, model, strategy, M, tau, hires)
        rec = {"path": str(p), **res.to_dict()}
        if overlay_dir is not None and res.count_map is not None:
            out = overlay_dir / (Path(p).stem + "_overlay.png")
            save_image(dcgp.overlay(image, res.count_map), out)
            rec["overlay"] = str(out)
        reports.append(rec)
    return reports, skipped


def _checkpoint_for_inference(cfg: dict, checkpoint: Optional[str], strategy: str) -> CountingModel:
    need = ["sort", "count"] + (["density"] if strategy in ("dcgp", "gated") else [])
    return _load_checkpoint(data_path(cfg, checkpoint or cfg["train"]["checkpoint"]), need)


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_infer(cfg: dict, images: Sequence[str], out: str, checkpoint: Optional[str] = None, overlay: bool = False) -> dict:
    inf = cfg["infer"]
    model = _checkpoint_for_inference(cfg, checkpoint, inf["strategy"])
    paths: list[Path] = []
    for item in images:
        p = Path(item)
        if p.suffix == ".jsonl":
            paths += [resolve(p, r["path"]) for r in read_manifest(p)]
        elif p.is_dir():
            paths += sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".jpg", ".jpeg"))
        else:
            paths.append(p)
    out_path = Path(out)
    reports, skipped = infer_paths(paths, model, inf["strategy"], int(inf["M"]), float(inf["tau"]), bool(inf["hires"]), out_path.parent / "overlays" if overlay else None)
    _write_jsonl(out_path, reports)
    save_config(cfg, out_path.with_suffix(".config.yaml"))
    return {"reports": str(out_path), "n": len(reports), "skipped": skipped}


# -------------------------------------------------------------- evaluate


@dataclass
class EvalReport:
    """Counting errors.  ``mse`` is the root of the mean squared error."""

    n: int
    mae: float
    mse: float
    per_image: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n": self.n, "mae": self.mae, "mse": self.mse, "per_image": [list(p) for p in self.per_image]}


def evaluate(truth: Sequence[float], predicted: Sequence[float]) -> EvalReport:
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.shape != p.shape:
        raise MissingPrediction(f"{len(t)} truths but {len(p)} predictions")
    if not len(t):
        return EvalReport(0, 0.0, 0.0, [])
    err = p - t
    mae = float(np.abs(err).mean())
    rmse = float(math.sqrt((err**2).mean()))
    return EvalReport(len(t), mae, max(rmse, mae), list(zip(t.tolist(), p.tolist())))


def evaluate_rows(truth_rows: Sequence[dict], prediction_rows: Sequence[dict]) -> EvalReport:
    """Match predictions to truth by ``path``; every truth row needs one."""
    pred = {}
    for r in prediction_rows:
        value = r.get("final_count", r.get("predicted"))
        if value is None:
            raise MissingPrediction(f"prediction row for {r.get('path')!r} has no final_count")
        pred[str(r["path"])] = float(value)
    truths, preds = [], []
    for r in truth_rows:
        key = str(r["path"])
        if key not in pred:
            raise MissingPrediction(f"no prediction for {key}")
        truths.append(float(r["true_count"]))
        preds.append(pred[key])
    return evaluate(truths, preds)


def cmd_evaluate(manifest: str, predictions: str, out: Optional[str] = None) -> dict:
    truth = read_manifest(manifest, "eval")
    for r in truth:
        r["path"] = str(resolve(manifest, r["path"]))
    report = evaluate_rows(truth, read_manifest(predictions)).to_dict()
    if out:
        Path(out).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


# ---------------------------------------------------------------- ablate

PARTITION_VARIANTS = (("fixed", 1), ("fixed", 2), ("fixed", 3), ("gated", 3), ("dcgp", 3))


def _load_eval(manifest: Path) -> tuple[list[np.ndarray], np.ndarray]:
    rows = read_manifest(manifest, "eval")
    return [load_image(resolve(manifest, r["path"])) for r in rows], np.array([r["true_count"] for r in rows], float)


def _score(images, truth, model, strategy: str, M: int, tau: float, hires: bool) -> EvalReport:
    preds = [run_strategy(im, model, strategy, M, tau, hires).final_count for im in images]
    return evaluate(truth, preds)


def ablate_partition(images, truth, model, tau: float = 0.5, hires: bool = True) -> list[dict]:
    rows = []
    for strategy, M in PARTITION_VARIANTS:
        r = _score(images, truth, model, strategy, M, tau, hires)
        rows.append({"variant": f"{strategy}-{M}x{M}", "mae": r.mae, "mse": r.mse})
    return rows


def ablate_resolution(images, truth, model, M: int = 3, tau: float = 0.5) -> list[dict]:
    rows = []
    for hires in (False, True):
        r = _score(images, truth, model, "dcgp", M, tau, hires)
        rows.append({"variant": f"dcgp-{M}x{M}-{'hires' if hires else 'lowres'}", "mae": r.mae, "mse": r.mse})
    return rows


def ablate_count_train(images, truth, model: CountingModel, count_manifest: Path, section: dict) -> list[dict]:
    rows_all = read_manifest(count_manifest, "count")
    imgs, feats = train.features_for(model, count_manifest, rows_all)
    out = []
    for mode in ("scratch", "finetune", "probe"):
        trial = copy.deepcopy(model)
        train.train_count(rows_all, trial, _train_config(section), features=feats, images=imgs, mode=mode)
        r = evaluate(truth, trial.predict_count(images))
        out.append({"variant": mode, "mae": r.mae, "mse": r.mse})
    return out


def cmd_ablate(cfg: dict, which: str, manifest: str, out: str, checkpoint: Optional[str] = None, count_manifest: Optional[str] = None) -> dict:
    inf = cfg["infer"]
    if which == "count_train":
        model = _load_checkpoint(data_path(cfg, checkpoint or cfg["train"]["checkpoint"]), ["sort"])
    else:
        model = _checkpoint_for_inference(cfg, checkpoint, "dcgp")
    images, truth = _load_eval(Path(manifest))
    if which == "partition":
        table = ablate_partition(images, truth, model, float(inf["tau"]), bool(inf["hires"]))
    elif which == "resolution":
        table = ablate_resolution(images, truth, model, int(inf["M"]), float(inf["tau"]))
    elif which == "count_train":
        table = ablate_count_train(images, truth, model, _manifest(cfg, "count", count_manifest), cfg["train"]["count"])
    else:
        raise ConfigError(f"unknown ablation {which!r}")
    result = {"ablation": which, "n": len(truth), "rows": table}
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps(result, indent=2, sort_keys=True))
    save_config(cfg, Path(out).with_suffix(".config.yaml"))
    return result


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="synthcount", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value, e.g. train.sort.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="build a dataset manifest")
    g.add_argument("--kind", required=True, choices=["sorting", "count", "density", "eval"])
    g.add_argument("--out", help="output directory (default from config)")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", required=True, choices=["sort", "count", "density"])
    t.add_argument("--manifest")
    t.add_argument("--checkpoint")

    i = sub.add_parser("infer", parents=[common], help="count objects in images")
    i.add_argument("images", nargs="+", help="image files, directories or eval manifests")
    i.add_argument("--out", required=True, help="report file (JSON lines)")
    i.add_argument("--checkpoint")
    i.add_argument("--strategy", choices=sorted(dcgp.STRATEGIES))
    i.add_argument("--M", type=int)
    i.add_argument("--no-hires", action="store_true", help="crop patches from the inference-resolution image")
    i.add_argument("--overlay", action="store_true", help="write count-map overlays")

    e = sub.add_parser("evaluate", parents=[common], help="MAE and RMSE of predictions")
    e.add_argument("--manifest", required=True, help="eval manifest with true_count")
    e.add_argument("--predictions", required=True, help="infer report file")
    e.add_argument("--out")

    a = sub.add_parser("ablate", parents=[common], help="compare inference or training variants")
    a.add_argument("--which", required=True, choices=["partition", "count_train", "resolution"])
    a.add_argument("--manifest", required=True, help="eval manifest")
    a.add_argument("--out", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--count-manifest")
    return ap


def _apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["data"]["seed"] = args.seed
    if getattr(args, "strategy", None):
        cfg["infer"]["strategy"] = args.strategy
    if getattr(args, "M", None) is not None:
        cfg["infer"]["M"] = args.M
    if getattr(args, "no_hires", False):
        cfg["infer"]["hires"] = False
    return cfg


def dispatch(args: argparse.Namespace) -> dict:
    cfg = _apply_flags(load_config(args.config, args.set), args)
    if args.command == "generate":
        return cmd_generate(cfg, args.kind, args.out)
    if args.command == "train":
        return cmd_train(cfg, args.stage, args.manifest, args.checkpoint)
    if args.command == "infer":
        return cmd_infer(cfg, args.images, args.out, args.checkpoint, args.overlay)
    if args.command == "evaluate":
        return cmd_evaluate(args.manifest, args.predictions, args.out)
    return cmd_ablate(cfg, args.which, args.manifest, args.out, args.checkpoint, args.count_manifest)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except (CliError, ManifestError, train.TrainError, genclient.GenError, dcgp.BadM, ValueError, OSError) as e:
        record = {"error": type(e).__name__, "message": str(e)}
        if getattr(e, "hint", ""):
            record["hint"] = e.hint
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
