"""Run-directory level steps behind the CLI verbs.

Every step writes ``config.txt`` (the fully resolved configuration) into its
output directory, so a run can be repeated from its own outputs.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .classifier import AnalyticClassifier, ConvClassifier, train_conv_classifier
from .config import ConfigError, RunConfig
from .data_io import (
    GaussianBlockSpec,
    ShapesSpec,
    gen_gaussian_blocks,
    gen_shapes,
    read_checkpoint,
    read_cdt,
    read_manifest,
    write_cdt,
    write_checkpoint,
    write_dataset,
    write_pgm,
)
from .denoiser import AnalyticGaussianDenoiser, TinyCondUNet
from .metrics import EvalReport, average_otsu_masks, otsu_mask, score_image
from .saliency import SaliencyConfig, compute_saliency
from .schedule import NoiseSchedule, linear_schedule
from .training import TrainConfig, train_diffusion, write_loss_csv

log = logging.getLogger(__name__)

METHODS = ("cdm", "cg-cdm", "cg-diff")
AXES = {"Q": "q_noise_level", "R": "r_steps", "tau": "tau", "s": "guidance_scale"}
CHUNK = 32


class PipelineError(RuntimeError):
    pass


def run_dir(cfg: RunConfig, out: str | None) -> Path:
    if out:
        path = Path(out)
    else:
        path = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def echo_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.to_text())


def _resolve(value: str, default: Path) -> Path:
    return Path(value) if value else default


def schedule_from(cfg: RunConfig) -> NoiseSchedule:
    return linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def block_spec(cfg: RunConfig) -> GaussianBlockSpec:
    return GaussianBlockSpec(
        height=cfg.image_size,
        width=cfg.image_size,
        block=(cfg.block_top, cfg.block_left, cfg.block_height, cfg.block_width),
        background=cfg.background,
        delta=cfg.delta,
        sigma0=cfg.sigma,
        sigma1=cfg.sigma,
        positive_fraction=cfg.positive_fraction,
    )


def shapes_spec(cfg: RunConfig) -> ShapesSpec:
    return ShapesSpec(
        size=cfg.image_size,
        texture_amplitude=cfg.texture_amplitude,
        lesion_intensity=cfg.lesion_intensity,
        positive_fraction=cfg.positive_fraction,
    )


# ------------------------------------------------------------------ generate


def generate(cfg: RunConfig, out: Path) -> Path:
    if cfg.dataset == "gaussian_blocks":
        samples = gen_gaussian_blocks(block_spec(cfg), cfg.n_images, cfg.seed)
    else:
        samples = gen_shapes(shapes_spec(cfg), cfg.n_images, cfg.seed)
    data = _resolve(cfg.data_dir, out / "data")
    write_dataset(samples, data, cfg.test_fraction)
    echo_config(cfg, out)
    log.info("wrote %d samples to %s", len(samples), data)
    return data


# --------------------------------------------------------------------- train


def _analytic_tensors(cfg: RunConfig):
    if cfg.dataset != "gaussian_blocks":
        raise ConfigError("analytic models exist only for dataset = gaussian_blocks", "analytic")
    spec = block_spec(cfg)
    spec.validate()
    mu0, mu1 = spec.means()
    return {"mu0": mu0, "mu1": mu1}, {"sigma0": spec.sigma0, "sigma1": spec.sigma1}


def train(cfg: RunConfig, out: Path) -> Path:
    path = out / "model.ckpt"
    echo_config(cfg, out)
    if cfg.analytic:
        tensors, meta = _analytic_tensors(cfg)
        write_checkpoint(path, tensors, {"kind": "analytic", **meta})
        return path
    manifest = read_manifest(_resolve(cfg.data_dir, out / "data"))
    x, y, _ = manifest.load_arrays(split="train")
    sched = schedule_from(cfg)
    model = TinyCondUNet(x.shape[1], cfg.channels, cfg.emb_dim, seed=cfg.seed, sched=sched)
    tcfg = TrainConfig(cfg.lr, cfg.weight_decay, cfg.batch, cfg.iters, cfg.seed, cfg.checkpoint_interval)
    train_diffusion(model, x, y, sched, tcfg, out)
    model.save(path, _unet_meta(cfg, x.shape[1]))
    return path


def _unet_meta(cfg: RunConfig, in_channels: int) -> dict:
    return {"kind": "unet", "in_channels": in_channels, "channels": cfg.channels, "emb_dim": cfg.emb_dim}


def classify_train(cfg: RunConfig, out: Path) -> Path:
    path = out / "classifier.ckpt"
    echo_config(cfg, out)
    if cfg.analytic:
        tensors, meta = _analytic_tensors(cfg)
        meta["prior1"] = min(max(cfg.positive_fraction, 1e-6), 1 - 1e-6)
        write_checkpoint(path, tensors, {"kind": "analytic_classifier", **meta})
        return path
    manifest = read_manifest(_resolve(cfg.data_dir, out / "data"))
    x, y, _ = manifest.load_arrays(split="train")
    sched = schedule_from(cfg)
    clf, curve = train_conv_classifier(
        x, y, sched, cfg.classifier_iters,
        max_t=cfg.classifier_max_t or cfg.q_noise_level,
        lr=cfg.classifier_lr, weight_decay=cfg.weight_decay, batch=cfg.batch,
        seed=cfg.seed, channels=cfg.channels, emb_dim=cfg.emb_dim,
    )
    clf.save(path, _unet_meta(cfg, x.shape[1]) | {"kind": "conv_classifier"})
    write_loss_csv(out / "classifier_loss.csv", curve)
    if manifest.select(split="test"):
        xt, yt, _ = manifest.load_arrays(split="test")
        acc = float((clf.predict_label(xt, 1) == yt).mean())
        (out / "classifier_metrics.json").write_text(json.dumps({"clean_accuracy": acc}, indent=2) + "\n")
    return path


def load_model(path, sched: NoiseSchedule):
    tensors, meta = read_checkpoint(path)
    kind = meta.get("kind")
    if kind == "analytic":
        return AnalyticGaussianDenoiser(tensors["mu0"], tensors["mu1"], meta["sigma0"], meta["sigma1"], sched)
    if kind == "unet":
        model = TinyCondUNet(meta["in_channels"], meta["channels"], meta["emb_dim"], sched=sched)
        model.load_state_dict(tensors)
        return model
    raise PipelineError(f"{path}: not a denoiser checkpoint (kind={kind!r})")


def load_classifier(path, sched: NoiseSchedule):
    tensors, meta = read_checkpoint(path)
    kind = meta.get("kind")
    if kind == "analytic_classifier":
        return AnalyticClassifier(
            tensors["mu0"], tensors["mu1"], meta["sigma0"], meta["sigma1"], sched, meta.get("prior1", 0.5)
        )
    if kind == "conv_classifier":
        clf = ConvClassifier(meta["in_channels"], meta["channels"], meta["emb_dim"], sched=sched)
        clf.load_state_dict(tensors)
        return clf
    raise PipelineError(f"{path}: not a classifier checkpoint (kind={kind!r})")


# ------------------------------------------------------------------ saliency


def eval_records(manifest):
    """Positives of the test split, or all positives when there is no test split."""
    recs = manifest.select(split="test", label=1)
    return recs or manifest.select(label=1)


def saliency_config(cfg: RunConfig, method: str, seed: int) -> SaliencyConfig:
    s = cfg.guidance_scale
    if method == "cdm" and s > 0:
        log.warning("method cdm is unguided; ignoring guidance_scale = %s", s)
        s = 0.0
    return SaliencyConfig(cfg.q_noise_level, cfg.r_steps, cfg.tau, s, seed, cfg.normalization)


def saliency(cfg: RunConfig, out: Path, method: str, base: Path | None = None) -> Path:
    """Write one normalised map (CDT1 + PGM) per evaluation image and protocol repeat.

    ``base`` is where default model/data paths are looked up (defaults to ``out``).
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}", "method")
    base = base or out
    sched = schedule_from(cfg)
    model = load_model(_resolve(cfg.model_path, base / "model.ckpt"), sched)
    classifier = None
    if method in ("cg-cdm", "cg-diff"):
        cpath = _resolve(cfg.classifier_path, base / "classifier.ckpt")
        if not cpath.exists():
            raise PipelineError(f"method {method} needs a classifier; {cpath} not found")
        classifier = load_classifier(cpath, sched)
    manifest = read_manifest(_resolve(cfg.data_dir, base / "data"))
    recs = eval_records(manifest)
    if not recs:
        raise PipelineError("no positive images to explain")
    x = np.stack([manifest.load_image(r) for r in recs])
    maps_root = out / "maps"
    seeds = [cfg.seed + k for k in range(cfg.protocol_repeats)]
    for seed in seeds:
        scfg = saliency_config(cfg, method, seed)
        d = maps_root / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        for start in range(0, len(x), CHUNK):
            sm = compute_saliency(method, model, model.embedding, x[start : start + CHUNK], scfg, sched,
                                  classifier, index_offset=start)
            for i in range(len(sm.normalized)):
                rec = recs[start + i]
                img = sm.image(i)
                write_cdt(d / f"{rec.id}.cdt", img)
                write_pgm(d / f"{rec.id}.pgm", img, 0.0, 1.0)
    run = {"method": method, "seeds": seeds, "ids": [r.id for r in recs], "config": cfg.to_text()}
    (maps_root / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    echo_config(cfg, out)
    return maps_root


# ---------------------------------------------------------------------- eval


def _run_dirs(pred_dir: Path) -> list[Path]:
    subs = sorted(p for p in pred_dir.glob("seed_*") if p.is_dir())
    return subs or [pred_dir]


def evaluate(cfg: RunConfig, pred_dir: Path, out: Path, base: Path | None = None) -> EvalReport:
    """Score every run directory under ``pred_dir`` and write the per-image CSV and aggregate JSON."""
    base = base or out
    manifest = read_manifest(_resolve(cfg.data_dir, base / "data"))
    recs = eval_records(manifest)
    report = EvalReport()
    for rd in _run_dirs(pred_dir):
        maps, gts, ids = [], [], []
        for r in recs:
            p = rd / f"{r.id}.cdt"
            if not p.exists():
                report.missing.append(f"{rd.name}/{r.id}")
                continue
            sal = read_cdt(p)
            maps.append(sal[0] if sal.ndim == 3 and sal.shape[0] == 1 else sal)
            gts.append(manifest.load_mask(r))
            ids.append(r.id)
        if cfg.threshold_mode == "average" and maps:
            masks = average_otsu_masks(maps)
        else:
            masks = [otsu_mask(m) for m in maps]
        report.runs[rd.name] = [score_image(i, m, g) for i, m, g in zip(ids, masks, gts)]
    write_report(report, out)
    return report


def write_report(report: EvalReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_per_image.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "image", "dice", "iou", "hd95"])
        for run, scores in report.runs.items():
            for s in scores:
                w.writerow([run, s.image_id, repr(s.dice), repr(s.iou), "skipped" if s.hd95 is None else repr(s.hd95)])
    agg = report.aggregate()
    agg["per_run"] = {k: vars(v) for k, v in report.summaries().items()}
    (out / "eval_report.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")


# -------------------------------------------------------------------- ablate


def parse_values(axis: str, text: str) -> list:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}", "axis")
    conv = int if axis in ("Q", "R") else float
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse values {text!r} for axis {axis}", AXES[axis]) from None


def _ablate_point(args):
    cfg, sub, method, base = args
    maps = saliency(cfg, sub, method, base=base)
    return evaluate(cfg, maps, sub, base=base).aggregate()


def ablate(cfg: RunConfig, out: Path, method: str, axis: str, values: list) -> Path:
    key = AXES[axis]
    # validate every point before running any of them
    points = [(v, cfg.replace(**{key: v})) for v in values]
    if not points:
        raise ConfigError("no ablation values given", key)
    base = out
    jobs = [(c, out / f"ablate_{axis}" / f"{axis}={v}", method, base) for v, c in points]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_ablate_point, jobs))
    else:
        results = [_ablate_point(j) for j in jobs]
    csv_path = out / f"ablation_{axis}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "dice_mean", "dice_std", "iou_mean", "iou_std", "hd95_mean", "hd95_std"])
        for (v, _), agg in zip(points, results):
            w.writerow([v] + [repr(agg[m][k]) for m in ("dice", "iou", "hd95") for k in ("mean", "std")])
    plot_sweep(out / f"ablation_{axis}.png", axis, [v for v, _ in points], results)
    echo_config(cfg, out)
    return csv_path


def plot_sweep(path: Path, axis: str, values: list, results: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    means = [r["dice"]["mean"] for r in results]
    stds = [r["dice"]["std"] for r in results]
    ax.errorbar(values, means, yerr=stds, marker="o", capsize=3)
    ax.set_xlabel(axis)
    ax.set_ylabel("Dice")
    ax.set_title(f"Dice vs {axis}")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
