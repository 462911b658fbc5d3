"""Command-line front end: gen-data, train, eval, ablate.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 artifact conflict.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import evalmetrics as em
from . import nets, toysim, trainer

log = logging.getLogger("spigan")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CONFLICT = 4

SPLITS = ("source", "target", "eval", "eval_source")
ABLATION_MODES = ("source_only", "base", "no_pi", "spigan")
FEATURE_EXTRACTOR_NOTE = f"frozen random conv pyramid (seed {nets.PHI_SEED}) in place of pretrained VGG19"

# one colour per toy class; ignore pixels render black
PALETTE = np.array([
    [70, 130, 180],   # sky
    [128, 64, 128],   # road
    [70, 70, 70],     # building
    [107, 142, 35],   # vegetation
    [0, 0, 142],      # vehicle
], dtype=np.uint8)
IGNORE_COLOR = np.array([0, 0, 0], dtype=np.uint8)


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# small helpers


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"{what} not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"{what} is not valid JSON ({path}): {e}")


def prepare_out_dir(path: Path, force: bool) -> None:
    """Refuse to write into a non-empty directory unless ``force``, which wipes it."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CliError(f"{path} exists and is not empty (use --force to overwrite)", EXIT_CONFLICT)
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def colorize(label: np.ndarray) -> np.ndarray:
    """(H, W) class map -> (H, W, 3) uint8."""
    label = np.asarray(label)
    bad = (label >= len(PALETTE)) & (label != em.IGNORE_LABEL)
    if bad.any():
        raise ValueError(f"label values outside the palette: {np.unique(label[bad])}")
    out = np.empty(label.shape + (3,), dtype=np.uint8)
    out[:] = IGNORE_COLOR
    valid = label != em.IGNORE_LABEL
    out[valid] = PALETTE[label[valid]]
    return out


def decolorize(rgb: np.ndarray) -> np.ndarray:
    """Inverse of :func:`colorize`; unknown colours raise."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    codes = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    table = {int(c[0]) << 16 | int(c[1]) << 8 | int(c[2]): k for k, c in enumerate(PALETTE)}
    table[0] = em.IGNORE_LABEL
    out = np.empty(codes.shape, dtype=np.uint8)
    for code in np.unique(codes):
        if int(code) not in table:
            raise ValueError(f"colour {int(code):06x} is not in the palette")
        out[codes == code] = table[int(code)]
    return out


def strip(*panels: np.ndarray) -> np.ndarray:
    """Concatenate (H, W, 3) uint8 panels left to right."""
    return np.concatenate(panels, axis=1)


def to_rgb(image: np.ndarray) -> np.ndarray:
    return toysim.image_to_u8(image).transpose(1, 2, 0)


def report_schema() -> dict:
    return json.loads(resources.files("spigan").joinpath("eval_report.schema.json").read_text())


def _nan_to_none(x):
    x = float(x)
    return None if np.isnan(x) else x


# ---------------------------------------------------------------------------
# gen-data


GEN_DEFAULTS = {
    "target_preset": "severe",
    "n_source": 400,
    "n_target": 400,
    "n_eval": 100,
    "n_eval_source": 100,
    "height": 32,
    "width": 64,
    "target_overrides": {},
}


def split_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def gen_data(cfg: dict, out_dir, seed: int = 0, threads: int = 1, force: bool = False) -> dict:
    """Render and write the four splits; returns {split: content hash}."""
    unknown = set(cfg) - set(GEN_DEFAULTS)
    if unknown:
        raise CliError(f"unknown data config keys: {sorted(unknown)}")
    c = {**GEN_DEFAULTS, **cfg}
    try:
        size = dict(height=int(c["height"]), width=int(c["width"]))
        src_cfg = toysim.preset("source", **size)
        tgt_cfg = toysim.preset(c["target_preset"], **size, **c["target_overrides"])
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(f"bad data config: {e}")
    if tgt_cfg.domain != "target":
        raise CliError("target_preset must name a target-domain preset")
    plan = {
        "source": (src_cfg, c["n_source"], split_seed(seed, 0), False),
        "target": (tgt_cfg, c["n_target"], split_seed(seed, 1), False),
        "eval": (tgt_cfg, c["n_eval"], split_seed(seed, 2), True),
        "eval_source": (src_cfg, c["n_eval_source"], split_seed(seed, 3), False),
    }
    for name, (_, n, _, _) in plan.items():
        if not isinstance(n, int) or n < 1:
            raise CliError(f"split {name} needs a positive integer size, got {n!r}")
    out = Path(out_dir)
    prepare_out_dir(out, force)
    hashes = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        for name, (dcfg, n, s, eval_only) in plan.items():
            ds = toysim.make_dataset(dcfg, n, s, eval_only=eval_only, map_fn=ex.map)
            hashes[name] = toysim.save_dataset(ds, out / name)
    manifest = {"format": "spigan-data-1", "seed": seed, "config": c, "content_hashes": hashes}
    (out / "data_manifest.json").write_text(canonical_json(manifest))
    return hashes


def cmd_gen_data(args) -> int:
    cfg = read_json(args.config, "data config") if args.config else {}
    if args.preset:
        cfg["target_preset"] = args.preset
    if args.n is not None:
        for k in ("n_source", "n_target", "n_eval", "n_eval_source"):
            cfg[k] = args.n
    if not args.out:
        raise CliError("gen-data needs --out")
    hashes = gen_data(cfg, args.out, seed=args.seed or 0, threads=args.threads or 1, force=args.force)
    for name in SPLITS:
        print(f"{name}\t{hashes[name]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def build_train_config(cfg: dict, seed: int | None = None, mode: str | None = None) -> trainer.TrainConfig:
    d = dict(cfg)
    if seed is not None:
        d["seed"] = seed
    if mode is not None:
        d["mode"] = mode
    try:
        return trainer.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad train config: {e}")


def load_split(data_dir: Path, name: str) -> tuple[toysim.Dataset, str]:
    d = data_dir / name
    if not (d / "manifest.json").exists():
        raise CliError(f"dataset split missing: {d}")
    return toysim.load_dataset(d), toysim.content_hash(d)


def run_manifest(cfg: trainer.TrainConfig, hashes: dict) -> dict:
    s = cfg.seed
    return {
        "format": "spigan-run-1",
        "mode": cfg.mode,
        "seeds": {
            "train": s,
            "init": {"G": [s, 10], "D": [s, 11], "T": [s, 12], "P": [s, 13]},
            "data_order": [s, 1], "target_order": [s, 2], "augment": [s, 3],
            "dropout_generator_side": [s, 4], "dropout_discriminator_side": [s, 5],
            "feature_extractor": nets.PHI_SEED,
        },
        "config": cfg.to_dict(),
        "effective_weights": asdict(cfg.effective_weights()),
        "datasets": hashes,
        "feature_extractor": FEATURE_EXTRACTOR_NOTE,
    }


def _latest_epoch_checkpoint(run: Path) -> Path | None:
    cks = sorted((run / "checkpoints").glob("epoch_*.zip"))
    return cks[-1] if cks else None


def _truncate_csv(path: Path, last_epoch: int) -> None:
    """Drop log rows past the checkpointed epoch (a crash mid-epoch leaves some)."""
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    keep = [r for r in rows if int(r["epoch"]) <= last_epoch]
    path.write_text(trainer.rows_to_csv(keep))


def train_run(cfg: trainer.TrainConfig, data_dir, run_dir, force: bool = False, resume: bool = False) -> dict:
    """Train one run into ``run_dir``; returns the run summary."""
    data = Path(data_dir)
    run = Path(run_dir)
    source, h_src = load_split(data, "source")
    target, h_tgt = (None, None) if cfg.mode == "source_only" else load_split(data, "target")
    man = run_manifest(cfg, {"source": h_src, "target": h_tgt})
    man_text = canonical_json(man)
    man_hash = sha256_bytes(man_text.encode())

    resume_from = None
    existing = run.exists() and any(run.iterdir())
    if existing and resume and not force:
        old = run / "run_manifest.json"
        if not old.exists() or sha256_file(old) != man_hash:
            raise CliError(f"{run} holds a different run; refusing to resume into it", EXIT_CONFLICT)
        if (run / "checkpoints" / "final.zip").exists():
            log.info("%s already complete", run)
            return json.loads((run / "run_summary.json").read_text())
        resume_from = _latest_epoch_checkpoint(run)
        if resume_from is not None:
            epoch = trainer.load_checkpoint(resume_from).epoch
            _truncate_csv(run / "loss.csv", epoch)
    elif existing:
        prepare_out_dir(run, force)
    run.mkdir(parents=True, exist_ok=True)
    (run / "run_manifest.json").write_text(man_text)

    try:
        trainer.validate_inputs(cfg, source, target)
    except ValueError as e:
        raise CliError(str(e))
    try:
        res = trainer.train(cfg, source, target, out_dir=run, resume_from=resume_from,
                            manifest_extra={"run_manifest_hash": man_hash})
    except trainer.NumericError as e:
        dump = {"error": str(e), "step": e.step, "batch_indices": e.batch_indices, "run_manifest_hash": man_hash}
        (run / "nan_dump.json").write_text(canonical_json(dump))
        raise CliError(f"numeric failure at step {e.step}; offending source batch indices "
                       f"{e.batch_indices} (dump in {run / 'nan_dump.json'})", EXIT_NUMERIC)
    st = res.state
    es = st.early_stop
    summary = {
        "run_manifest_hash": man_hash,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "epochs_run": st.epoch + 1,
        "steps": st.step,
        "generator_side_steps": st.gen_steps,
        "discriminator_steps": st.disc_steps,
        "early_stop": None if es is None else {
            "epoch": es.epoch,
            "window_loss_d": es.window_d,
            "window_loss_g": es.window_g,
            "window_mean_d": float(np.mean(es.window_d)),
            "window_mean_g": float(np.mean(es.window_g)),
        },
        "loss_csv_sha256": sha256_file(run / "loss.csv"),
        "final_checkpoint_sha256": sha256_file(run / "checkpoints" / "final.zip"),
    }
    (run / "run_summary.json").write_text(canonical_json(summary))
    return summary


def cmd_train(args) -> int:
    cfg = build_train_config(read_json(args.config, "train config") if args.config else {},
                             seed=args.seed, mode=args.mode)
    if not args.out or not args.data:
        raise CliError("train needs --data and --out")
    run = Path(args.out)
    if run.exists() and any(run.iterdir()) and not (args.resume or args.force):
        raise CliError(f"{run} exists and is not empty (use --resume to continue or --force to overwrite)",
                       EXIT_CONFLICT)
    summary = train_run(cfg, args.data, run, force=args.force, resume=args.resume)
    es = summary["early_stop"]
    print(f"run {run}: mode={summary['mode']} epochs={summary['epochs_run']} steps={summary['steps']}"
          + (f" early_stop_epoch={es['epoch']}" if es else ""))
    print(f"run_manifest_hash\t{summary['run_manifest_hash']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def load_trained(ckpt) -> tuple[trainer.TrainState, dict]:
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    _, manifest = nets.load_archive(ckpt)
    return trainer.load_checkpoint(ckpt), manifest


def evaluate(state: trainer.TrainState, ds: toysim.Dataset) -> tuple[em.ConfusionMatrix, np.ndarray, np.ndarray]:
    preds = trainer.predict_labels(state.nets["T"], ds.images)
    cm = em.ConfusionMatrix(state.cfg.n_classes)
    for p, g in zip(preds, ds.labels):
        em.accumulate(cm, p, g)
    return cm, em.per_image_miou(preds, ds.labels, state.cfg.n_classes), preds


def build_report(state, manifest, ckpt_hash, ds_hash, cm, per_image, baseline=None, baseline_name=None) -> dict:
    ious = em.iou(cm)
    nt = None
    if baseline is not None:
        base = np.array([np.nan if v is None else v for v in baseline["per_image_miou"]], dtype=np.float64)
        if base.shape != per_image.shape:
            raise CliError(f"baseline report covers {base.size} images, this evaluation {per_image.size}")
        nt = {"baseline": baseline_name, "baseline_mode": baseline["mode"],
              "rate": em.negative_transfer_rate(per_image, base)}
    report = {
        "format": "spigan-eval-report-1",
        "mode": state.cfg.mode,
        "n_images": int(per_image.size),
        "class_names": list(toysim.CLASS_NAMES[:state.cfg.n_classes]),
        "per_class_iou": {n: _nan_to_none(v) for n, v in zip(toysim.CLASS_NAMES, ious)},
        "miou_pooled": _nan_to_none(em.mean_iou(cm)),
        "miou_per_image_mean": _nan_to_none(np.nanmean(per_image)) if np.any(~np.isnan(per_image)) else None,
        "per_image_miou": [_nan_to_none(v) for v in per_image],
        "negative_transfer": nt,
        "checkpoint_sha256": ckpt_hash,
        "dataset_hash": ds_hash,
        "run_manifest_hash": manifest.get("run_manifest_hash"),
        "feature_extractor": FEATURE_EXTRACTOR_NOTE,
    }
    jsonschema.validate(report, report_schema())
    return report


def check_compatible(state: trainer.TrainState, ds: toysim.Dataset) -> None:
    if ds.cfg.n_classes != state.cfg.n_classes:
        raise CliError(f"checkpoint predicts {state.cfg.n_classes} classes, dataset has {ds.cfg.n_classes}")
    if ds.cfg.height % 4 or ds.cfg.width % 4:
        raise CliError("image size must be divisible by 4")
    if not ds.has_labels:
        raise CliError("evaluation split carries no labels")


def write_strips(out: Path, state, ds: toysim.Dataset, preds: np.ndarray, n: int,
                 source_ds: toysim.Dataset | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    k = min(n, len(ds))
    for i in range(k):
        toysim.write_ppm_rgb(out / f"seg_{i:04d}.ppm",
                             strip(to_rgb(ds[i].image), colorize(preds[i]), colorize(ds[i].label)))
    if source_ds is not None and "G" in state.nets:
        m = min(n, len(source_ds))
        adapted = trainer.adapt_images(state.nets["G"], source_ds.images[:m])
        for i in range(m):
            toysim.write_ppm_rgb(out / f"adapt_{i:04d}.ppm", strip(to_rgb(source_ds[i].image), to_rgb(adapted[i])))
    return k


def eval_run(ckpt, data_dir, out_dir, baseline_path=None, strips: int = 4, source_dir=None,
             force: bool = False) -> dict:
    state, manifest = load_trained(ckpt)
    ds = toysim.load_dataset(data_dir) if (Path(data_dir) / "manifest.json").exists() else None
    if ds is None:
        raise CliError(f"not a dataset directory: {data_dir}")
    check_compatible(state, ds)
    baseline = None
    if baseline_path is not None:
        baseline = read_json(baseline_path, "baseline report")
        try:
            jsonschema.validate(baseline, report_schema())
        except jsonschema.ValidationError as e:
            raise CliError(f"baseline report fails the schema: {e.message}")
    out = Path(out_dir)
    prepare_out_dir(out, force)
    cm, per_image, preds = evaluate(state, ds)
    report = build_report(state, manifest, sha256_file(ckpt), toysim.content_hash(data_dir), cm, per_image,
                          baseline, None if baseline_path is None else str(baseline_path))
    (out / "report.json").write_text(canonical_json(report))
    (out / "report.schema.json").write_text(canonical_json(report_schema()))
    src = toysim.load_dataset(source_dir) if source_dir else None
    if strips:
        write_strips(out / "strips", state, ds, preds, strips, src)
    return report


def cmd_eval(args) -> int:
    if not (args.checkpoint and args.data and args.out):
        raise CliError("eval needs --checkpoint, --data and --out")
    rep = eval_run(args.checkpoint, args.data, args.out, args.baseline, args.strips, args.source_data, args.force)
    line = f"mIoU pooled {rep['miou_pooled']:.4f}  per-image mean {rep['miou_per_image_mean']:.4f}"
    if rep["negative_transfer"]:
        line += f"  neg-rate vs {rep['negative_transfer']['baseline_mode']} {rep['negative_transfer']['rate']:.3f}"
    print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


PLAN_KEYS = {"data", "seeds", "modes", "train", "mode_overrides", "workers", "keep_epoch_checkpoints"}


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _ablation_member(job: dict) -> dict:
    """Train and evaluate one (mode, seed); never raises."""
    run = Path(job["run_dir"])
    t0 = time.perf_counter()
    try:
        cfg = build_train_config(job["train"], seed=job["seed"], mode=job["mode"])
        summary = train_run(cfg, job["data"], run, force=True)
        state, _ = load_trained(run / "checkpoints" / "final.zip")
        ds, ds_hash = load_split(Path(job["data"]), "eval")
        check_compatible(state, ds)
        cm, per_image, _ = evaluate(state, ds)
        if not job["keep_epoch_checkpoints"]:
            for p in (run / "checkpoints").glob("epoch_*.zip"):
                p.unlink()
        return {"ok": True, "mode": job["mode"], "seed": job["seed"], "iou": [_nan_to_none(v) for v in em.iou(cm)],
                "miou": em.mean_iou(cm), "per_image": per_image.tolist(), "summary": summary, "dataset_hash": ds_hash,
                "wall_seconds": time.perf_counter() - t0}
    except CliError as e:
        return {"ok": False, "mode": job["mode"], "seed": job["seed"], "error": str(e), "code": e.code}
    except Exception as e:  # a member failure must not sink the table
        log.exception("ablation member %s/%s failed", job["mode"], job["seed"])
        return {"ok": False, "mode": job["mode"], "seed": job["seed"], "error": f"{type(e).__name__}: {e}",
                "code": EXIT_NUMERIC if isinstance(e, FloatingPointError) else EXIT_CONFIG}


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.6f}"


def ablation_table(results: list[dict], modes, seeds, n_classes: int) -> str:
    cls = list(toysim.CLASS_NAMES[:n_classes])
    header = ["mode", "seed"] + [f"iou_{c}" for c in cls] + ["miou", "neg_rate_vs_source_only", "status"]
    by = {(r["mode"], r["seed"]): r for r in results}
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    stats = {}
    for mode in modes:
        cols = []
        for seed in seeds:
            r = by[(mode, seed)]
            if not r["ok"]:
                wr.writerow([mode, seed] + ["FAILED"] * (n_classes + 2) + ["failed: " + r["error"].replace("\n", " ")])
                continue
            base = by.get(("source_only", seed))
            neg = None
            if base is not None and base["ok"]:
                neg = em.negative_transfer_rate(r["per_image"], base["per_image"])
            vals = r["iou"] + [r["miou"], neg]
            cols.append(vals)
            wr.writerow([mode, seed] + [_fmt(v) for v in vals] + ["ok"])
        stats[mode] = cols
    for mode in modes:
        cols = stats[mode]
        if not cols:
            wr.writerow([mode, "mean±std"] + ["FAILED"] * (n_classes + 2) + ["failed"])
            continue
        arr = np.array([[np.nan if v is None else v for v in c] for c in cols], dtype=np.float64)
        cells = []
        for j in range(arr.shape[1]):
            col = arr[:, j][~np.isnan(arr[:, j])]
            cells.append("NA" if col.size == 0 else f"{col.mean():.6f}±{col.std():.6f}")
        status = "ok" if len(cols) == len(seeds) else f"partial ({len(cols)}/{len(seeds)} seeds)"
        wr.writerow([mode, "mean±std"] + cells + [status])
    return buf.getvalue()


def ablate(plan: dict, plan_dir: Path, out_dir, seed: int | None = None, force: bool = False) -> tuple[str, list]:
    unknown = set(plan) - PLAN_KEYS
    if unknown:
        raise CliError(f"unknown plan keys: {sorted(unknown)}")
    if "data" not in plan:
        raise CliError("plan needs a 'data' directory")
    data = Path(plan["data"])
    if not data.is_absolute():
        data = plan_dir / data
    seeds = plan.get("seeds") or [0 if seed is None else seed]
    modes = plan.get("modes") or list(ABLATION_MODES)
    bad = [m for m in modes if m not in trainer.MODES]
    if bad:
        raise CliError(f"unknown modes in plan: {bad}")
    if "source_only" not in modes:
        modes = ["source_only"] + list(modes)
    base_train = plan.get("train", {})
    overrides = plan.get("mode_overrides", {})
    for m in modes:  # fail fast on config errors before spending compute
        build_train_config(_deep_merge(base_train, overrides.get(m, {})), seed=seeds[0], mode=m)
    for name in ("source", "target", "eval"):
        if not (data / name / "manifest.json").exists():
            raise CliError(f"plan data dir lacks the {name} split: {data / name}")
    out = Path(out_dir)
    prepare_out_dir(out, force)
    jobs = [{"mode": m, "seed": s, "train": _deep_merge(base_train, overrides.get(m, {})), "data": str(data),
             "run_dir": str(out / "runs" / f"{m}_seed{s}"),
             "keep_epoch_checkpoints": bool(plan.get("keep_epoch_checkpoints", False))}
            for m in modes for s in seeds]
    workers = int(plan.get("workers", 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_ablation_member, jobs))
    else:
        results = [_ablation_member(j) for j in jobs]
    n_classes = build_train_config(base_train).n_classes
    table = ablation_table(results, modes, seeds, n_classes)
    (out / "ablation.csv").write_text(table)
    members = {f"{r['mode']}_seed{r['seed']}": (r["summary"]["run_manifest_hash"] if r["ok"] else None)
               for r in results}
    (out / "ablation_manifest.json").write_text(canonical_json({
        "format": "spigan-ablation-1", "plan": plan, "modes": modes, "seeds": seeds,
        "run_manifest_hashes": members, "ablation_csv_sha256": sha256_bytes(table.encode()),
        "feature_extractor": FEATURE_EXTRACTOR_NOTE}))
    return table, results


def cmd_ablate(args) -> int:
    path = args.plan or args.config
    if not path:
        raise CliError("ablate needs a plan file (positional or --config)")
    if not args.out:
        raise CliError("ablate needs --out")
    plan = read_json(path, "ablation plan")
    table, results = ablate(plan, Path(path).parent, args.out, seed=args.seed, force=args.force)
    sys.stdout.write(table)
    failed = [r for r in results if not r["ok"]]
    if failed:
        for r in failed:
            print(f"FAILED {r['mode']} seed {r['seed']}: {r['error']}", file=sys.stderr)
        return EXIT_NUMERIC if any(r["code"] == EXIT_NUMERIC for r in failed) else EXIT_CONFIG
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="master seed")
    p.add_argument("--config", default=d, help="JSON config for the subcommand")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="overwrite a non-empty output directory")
    p.add_argument("--threads", type=int, default=d, help="worker threads for data generation")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spigan", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render source/target/eval splits")
    _global_flags(g, suppress=True)
    g.add_argument("--n", type=int, help="size of every split")
    g.add_argument("--preset", help="target appearance preset (mild|severe)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run")
    _global_flags(t, suppress=True)
    t.add_argument("--data", help="directory written by gen-data")
    t.add_argument("--mode", choices=trainer.MODES)
    t.add_argument("--resume", action="store_true", help="continue an interrupted run in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _global_flags(e, suppress=True)
    e.add_argument("--checkpoint", help="checkpoint zip")
    e.add_argument("--data", help="labelled split directory")
    e.add_argument("--baseline", help="report.json of a baseline run for the negative-transfer rate")
    e.add_argument("--strips", type=int, default=4, help="number of image strips to write")
    e.add_argument("--source-data", help="source split for input|adapted strips")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="four-mode ablation over seeds")
    _global_flags(a, suppress=True)
    a.add_argument("plan", nargs="?", help="ablation plan JSON")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
