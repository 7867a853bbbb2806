"""Command-line pipeline: gen-data, train-source, pseudo-label, adapt, eval, ablate, render."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import engine, metrics, synthgen
from .engine import DENOISE_MODES, TrainConfig
from .io_formats import ensure_dir, write_image_ppm
from .rng import derive_seed
from .segnet import load_checkpoint, params_hash, save_checkpoint
from .synthgen import CLASS_NAMES

log = logging.getLogger("dpl")

SPLITS = ("source", "target_train", "target_test")
RUN_CONFIG = "run_config.txt"
RUN_KEYS = {"n_source": 200, "n_target_train": 60, "n_target_test": 40}


class CliError(Exception):
    pass


# -- configuration ----------------------------------------------------------


def _parse_value(text: str, like):
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(parts) != len(like):
            raise ValueError(f"expected {len(like)} comma-separated values, got {text!r}")
        return tuple(type(like[0])(p) for p in parts)
    if isinstance(like, bool):
        return text.lower() in ("1", "true", "yes")
    return type(like)(text)


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    defaults = TrainConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(TrainConfig)} | RUN_KEYS
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _parse_value(value, known[key])
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


FLAG_KEYS = {
    "seed": "seed", "lr": "lr", "batch_size": "batch_size", "epochs": "epochs",
    "source_epochs": "source_epochs", "gamma": "gamma", "eta": "eta", "k": "k",
    "dropout": "dropout", "mode": "denoise_mode",
}


def resolve_config(args) -> tuple[TrainConfig, dict]:
    """Defaults < config file < flags < DPL_SEED."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "size", None) is not None:
        values["image_size"] = (args.size, args.size)
    if os.environ.get("DPL_SEED"):
        values["seed"] = int(os.environ["DPL_SEED"])
    run = {k: values.pop(k, RUN_KEYS[k]) for k in RUN_KEYS}
    for k in RUN_KEYS:
        flag = getattr(args, k, None)
        if flag is not None:
            run[k] = flag
    try:
        cfg = TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    return cfg, run


def write_run_config(out: Path, command: str, cfg: TrainConfig, extra: dict) -> None:
    lines = [f"command = {command}"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    (out / RUN_CONFIG).write_text("\n".join(lines) + "\n" + cfg.describe())


# -- helpers ----------------------------------------------------------------


def resolve_dataset(path, split: str) -> Path:
    path = Path(path)
    if (path / synthgen.MANIFEST).exists():
        return path
    if (path / split / synthgen.MANIFEST).exists():
        return path / split
    raise CliError(f"dataset not found: neither {path / synthgen.MANIFEST} nor {path / split / synthgen.MANIFEST} exists")


def _load_model(path):
    path = Path(path)
    if not (path / "index.txt").exists():
        raise CliError(f"model checkpoint not found: {path / 'index.txt'}")
    return load_checkpoint(path)[0]


def _prepare_out(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"output directory {path} is not empty (use --force)")
    return ensure_dir(path)


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg, run = resolve_config(args)
    out = _prepare_out(args.out, args.force)
    h, w = cfg.image_size
    params = {
        "source": synthgen.default_source_params(),
        "target_train": synthgen.default_target_params(),
        "target_test": synthgen.default_target_params(),
    }
    counts = {"source": run["n_source"], "target_train": run["n_target_train"], "target_test": run["n_target_test"]}
    for split in SPLITS:
        d = out / split
        if d.exists():
            shutil.rmtree(d)
        synthgen.gen_dataset(derive_seed(cfg.seed, split), params[split], counts[split], h, w, d)
        log.info("wrote %d %s images to %s", counts[split], split, d)
    write_run_config(out, "gen-data", cfg, counts)
    print(f"wrote {sum(counts.values())} images under {out}")
    return 0


def cmd_train_source(args) -> int:
    cfg, _ = resolve_config(args)
    data = resolve_dataset(args.data, "source")
    out = _prepare_out(args.out, args.force)
    dataset = synthgen.load_dataset(data)
    try:
        params, tlog = engine.train_source(dataset, cfg, checkpoint_dir=out)
    except engine.TrainingDiverged as exc:
        save_checkpoint(out, exc.last_good)
        raise CliError(f"training diverged ({exc}); last good checkpoint written to {out}") from exc
    (out / "train_log.csv").write_text(tlog.to_csv())
    write_run_config(out, "train-source", cfg, {"data": data, "model_hash": params_hash(params)})
    print(f"source model {params_hash(params)} written to {out}")
    return 0


def cmd_pseudo_label(args) -> int:
    cfg, _ = resolve_config(args)
    params = _load_model(args.model)
    data = resolve_dataset(args.data, "target_train")
    out = _prepare_out(args.out, args.force)
    dataset = synthgen.load_dataset(data, with_labels=False)
    pset = engine.prepare_pseudo_labels(params, dataset.images, dataset.stems, cfg)
    engine.write_pseudo_set(pset, out)
    write_run_config(out, "pseudo-label", cfg, {"model": args.model, "data": data})
    rates = pset.selection_rates()
    print("selection rate " + " ".join(f"{n} {rates[c]:.4f}" for c, n in enumerate(CLASS_NAMES)))
    return 0


def cmd_adapt(args) -> int:
    cfg, _ = resolve_config(args)
    params = _load_model(args.model)
    data = resolve_dataset(args.data, "target_train")
    pset = engine.read_pseudo_set(args.pseudo)
    out = _prepare_out(args.out, args.force)
    dataset = synthgen.load_dataset(data, with_labels=False)
    if dataset.stems != pset.stems:
        raise CliError(f"pseudo labels in {args.pseudo} do not match the manifest of {data}")
    report = [f"source_model_hash = {params_hash(params)}", f"pseudo_model_hash = {pset.model_hash}",
              f"pseudo_mode = {pset.mode}"]
    if pset.model_hash != params_hash(params):
        msg = f"provenance mismatch: pseudo labels come from model {pset.model_hash}, adapting {params_hash(params)}"
        log.warning(msg)
        report.append(f"warning = {msg}")
    try:
        adapted, tlog = engine.adapt(params, dataset.images, pset, cfg)
    except engine.TrainingDiverged as exc:
        save_checkpoint(out, exc.last_good)
        raise CliError(f"adaptation diverged ({exc}); last good checkpoint written to {out}") from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    save_checkpoint(out, adapted)
    (out / "train_log.csv").write_text(tlog.to_csv())
    report += [f"adapted_model_hash = {params_hash(adapted)}", f"batches = {len(tlog.rows)}",
               f"empty_mask_batches = {tlog.stats['empty_mask']}",
               f"final_loss = {tlog.rows[-1][2]:.9g}" if tlog.rows else "final_loss = nan"]
    (out / "adapt_report.txt").write_text("\n".join(report) + "\n")
    write_run_config(out, "adapt", cfg, {"model": args.model, "data": data, "pseudo": args.pseudo})
    print(f"adapted model {params_hash(adapted)} written to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg, _ = resolve_config(args)
    params = _load_model(args.model)
    data = resolve_dataset(args.data, "target_test")
    out = _prepare_out(args.out, args.force)
    report = metrics.evaluate(params, synthgen.load_dataset(data), cfg)
    (out / "eval_report.txt").write_text(report.to_text())
    (out / "eval_per_image.csv").write_text(report.to_csv())
    write_run_config(out, "eval", cfg, {"model": args.model, "data": data})
    print(report.to_text(), end="")
    return 0


def pooled_pl_accuracy(pset: engine.PseudoSet, labels: np.ndarray) -> list[float | None]:
    accs = []
    for c in range(len(CLASS_NAMES)):
        correct = selected = 0
        for i, e in enumerate(pset.entries):
            a, s = metrics.pl_counts(e.label[..., c], e.mask[..., c], labels[i, ..., c])
            correct += a
            selected += s
        accs.append(correct / selected if selected else None)
    return accs


def run_ablation(source_params, target_train, target_test, cfg: TrainConfig, out: Path) -> list[dict]:
    """Pseudo-label, adapt and evaluate under every denoising mode from one source model."""
    rows = []
    baseline = metrics.evaluate(source_params, target_test, cfg)
    for mode in DENOISE_MODES:
        mcfg = replace(cfg, denoise_mode=mode)
        pset = engine.prepare_pseudo_labels(source_params, target_train.images, target_train.stems, mcfg)
        engine.write_pseudo_set(pset, out / mode / "pseudo")
        adapted, tlog = engine.adapt(source_params, target_train.images, pset, mcfg)
        save_checkpoint(out / mode / "model", adapted)
        (out / mode / "model" / "train_log.csv").write_text(tlog.to_csv())
        report = metrics.evaluate(adapted, target_test, mcfg)
        ensure_dir(out / mode / "eval")
        (out / mode / "eval" / "eval_report.txt").write_text(report.to_text())
        (out / mode / "eval" / "eval_per_image.csv").write_text(report.to_csv())
        accs = pooled_pl_accuracy(pset, target_train.labels) if target_train.labels is not None else [None, None]
        rates = pset.selection_rates()
        for c, name in enumerate(CLASS_NAMES):
            s = report.summary[name]
            rows.append({
                "mode": mode, "class": name, "dice_mean": s.dice_mean, "dice_std": s.dice_std,
                "asd_mean": s.asd_mean, "asd_std": s.asd_std, "pl_accuracy": accs[c],
                "selection_rate": float(rates[c]),
                "baseline_dice": baseline.summary[name].dice_mean, "baseline_asd": baseline.summary[name].asd_mean,
                "model_hash": params_hash(source_params),
            })
    return rows


ABLATION_COLUMNS = ("mode", "class", "dice_mean", "dice_std", "asd_mean", "asd_std", "pl_accuracy",
                    "selection_rate", "baseline_dice", "baseline_asd", "model_hash")


def ablation_csv(rows: list[dict]) -> str:
    def fmt(v):
        if v is None:
            return ""
        return f"{v:.9f}" if isinstance(v, float) else str(v)
    lines = [",".join(ABLATION_COLUMNS)]
    lines += [",".join(fmt(r[c]) for c in ABLATION_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def ablation_text(rows: list[dict]) -> str:
    first = {r["class"]: r for r in rows if r["mode"] == DENOISE_MODES[0]}
    lines = ["w/o adaptation: " + "  ".join(
        f"{n} dice {100 * first[n]['baseline_dice']:.2f} asd {first[n]['baseline_asd']:.3f}" for n in CLASS_NAMES)]
    lines.append(f"{'mode':<6}  " + "  ".join(f"{n + ' dice':>10} {n + ' asd':>9} {n + ' pl-acc':>11}" for n in CLASS_NAMES))
    for mode in DENOISE_MODES:
        cells = []
        for n in CLASS_NAMES:
            r = next(r for r in rows if r["mode"] == mode and r["class"] == n)
            acc = "n/a" if r["pl_accuracy"] is None else f"{100 * r['pl_accuracy']:.2f}"
            cells.append(f"{100 * r['dice_mean']:>10.2f} {r['asd_mean']:>9.3f} {acc:>11}")
        lines.append(f"{mode:<6}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg, _ = resolve_config(args)
    out = _prepare_out(args.out, args.force)
    target_train = synthgen.load_dataset(resolve_dataset(args.data, "target_train"))
    target_test = synthgen.load_dataset(resolve_dataset(args.data, "target_test"))
    if args.model:
        source_params = _load_model(args.model)
    else:
        source = synthgen.load_dataset(resolve_dataset(args.data, "source"))
        source_params, tlog = engine.train_source(source, cfg, checkpoint_dir=out / "source_model")
        (out / "source_model" / "train_log.csv").write_text(tlog.to_csv())
    rows = run_ablation(source_params, target_train, target_test, cfg, out)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    text = ablation_text(rows)
    (out / "ablation.txt").write_text(text)
    write_run_config(out, "ablate", cfg, {"data": args.data, "model": args.model or out / "source_model"})
    print(text, end="")
    return 0


CONTOUR_COLORS = {
    ("gt", "disc"): (0.0, 1.0, 0.0),
    ("gt", "cup"): (0.0, 0.6, 1.0),
    ("pred", "disc"): (1.0, 0.0, 0.0),
    ("pred", "cup"): (1.0, 1.0, 0.0),
}


def render_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray | None) -> np.ndarray:
    """Image with ground-truth contours, then predicted contours drawn on top."""
    out = image.astype(np.float32).copy()
    layers = ([("gt", gt)] if gt is not None else []) + [("pred", pred)]
    for kind, lab in layers:
        for c, name in enumerate(CLASS_NAMES):
            out[metrics.boundary(lab[..., c])] = CONTOUR_COLORS[(kind, name)]
    return out


def uncertainty_heatmap(u: np.ndarray) -> np.ndarray:
    """Black-red-yellow ramp; 0.5 (largest possible std of [0,1] values) is full scale."""
    v = np.clip(np.asarray(u, dtype=np.float64) / 0.5, 0.0, 1.0)
    return np.stack([np.minimum(1.0, 2.0 * v), np.clip(2.0 * v - 1.0, 0.0, 1.0), np.zeros_like(v)], axis=-1)


def cmd_render(args) -> int:
    from . import core
    from .rng import Rng
    from .segnet import forward, mc_passes

    cfg, _ = resolve_config(args)
    params = _load_model(args.model)
    data = resolve_dataset(args.data, "target_test")
    out = _prepare_out(args.out, args.force)
    dataset = synthgen.load_dataset(data, with_labels=True)
    for i, stem in enumerate(dataset.stems):
        image = dataset.images[i]
        prob, _, _ = forward(params, image, "eval")
        pred = (prob >= metrics.EVAL_THRESHOLD).astype(np.uint8)
        write_image_ppm(out / f"{stem}.overlay.ppm", render_overlay(image, pred, dataset.labels[i]))
        u = core.uncertainty(mc_passes(params, image, cfg.k, Rng(derive_seed(cfg.seed, "mc", i))))
        for c, name in enumerate(CLASS_NAMES):
            write_image_ppm(out / f"{stem}.u.{name}.ppm", uncertainty_heatmap(u[..., c]))
    write_run_config(out, "render", cfg, {"model": args.model, "data": data})
    print(f"rendered {len(dataset)} images to {out}")
    return 0


# -- argument parsing -------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", help="flat 'key = value' config file")
    g.add_argument("--seed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int, help="adaptation epochs")
    g.add_argument("--source-epochs", type=int)
    g.add_argument("--gamma", type=float, help="pseudo-label probability threshold")
    g.add_argument("--eta", type=float, help="uncertainty threshold")
    g.add_argument("--k", type=int, help="stochastic forward passes")
    g.add_argument("--dropout", type=float)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write source/target_train/target_test datasets")
    _add_config_flags(p)
    p.add_argument("--n-source", type=int)
    p.add_argument("--n-target-train", type=int)
    p.add_argument("--n-target-test", type=int)
    p.add_argument("--size", type=int, help="square image size (even)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="supervised training on the source dataset")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_source)
    # --epochs on train-source means source epochs
    p.set_defaults(_epochs_are_source=True)

    p = sub.add_parser("pseudo-label", help="fixed pseudo labels and selection masks from a source model")
    _add_config_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=DENOISE_MODES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("adapt", help="self-train on denoised pseudo labels")
    _add_config_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="Dice and ASD of a model on a labelled dataset")
    _add_config_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="plain/pixel/class/full denoising arms from one source model")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="gen-data output root")
    p.add_argument("--model", help="existing source checkpoint (trained in-run if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="contour overlays and uncertainty heatmaps")
    _add_config_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "_epochs_are_source", False) and args.epochs is not None:
        args.source_epochs, args.epochs = args.epochs, None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
