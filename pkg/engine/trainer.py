"""
Trainer — the unsupervised domain adaptation loop.

Each step:
  1. source batch (with masks) → U-Net → segmentation loss
  2. source + target batch features at the configured tap
  3. both KDEs scored on the union of those feature rows → p_s, p_t
  4. loss = seg + λ · D[p_s, p_t]  → backward → one optimizer update

The KDE sample banks (N images per domain, pushed through the current
network) are redrawn every F epochs and are detached: between refreshes they
are a fixed density snapshot, and gradients reach the encoder only through
the current batches' features. Target images never carry masks in here.

fit() repeats the whole thing for each split seed, keeps the checkpoint with
the lowest source-validation loss per split, and writes metrics.csv and
summary.csv (per-split rows + mean/std).

Usage:
    artifacts = fit(preset_config("smoke"), source, target, run_dir=Path("runs/demo"))
"""

import hashlib
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from engine import segnet, settings
from engine.autograd import Tensor, backward
from engine.config import DivergenceKind, ExperimentConfig, config_from_flat, config_to_flat
from engine.density import build_kde, safe_bandwidth
from engine.divergence import combined_loss, dice_loss, matching_loss, segmentation_loss
from engine.errors import EmptyDatasetError, UsageError
from engine.train_state import (
    Optimizer, RunArtifacts, TrainState, grad_norm, make_rngs, rng_states, rngs_from_states,
)
from sources.dataset import Dataset, split
from warehouse.checkpoint import (
    model_from_records, model_records, read_records, read_sidecar, save_model, write_records, write_sidecar,
)
from warehouse.loader import append_rows, read_table, with_aggregates, write_table
from warehouse.schema import METRICS_COLUMNS, SUMMARY_COLUMNS, RunLayout, write_config_text

logger = logging.getLogger(__name__)

KDE_KINDS = (DivergenceKind.JSD, DivergenceKind.KL)


def needs_banks(config: ExperimentConfig) -> bool:
    """Does this divergence need the scheduled KDE/bandwidth refresh at all?"""
    return config.divergence.kind in KDE_KINDS or config.divergence.kind is DivergenceKind.MMD_B


def make_optimizer(config: ExperimentConfig) -> Optimizer:
    return Optimizer(config.optimizer, lr=config.lr, weight_decay=config.weight_decay, momentum=config.momentum)


def init_state(config: ExperimentConfig, split_index: int = 0, seed: int = 0) -> TrainState:
    return TrainState(
        model=segnet.init(config.unet, seed),
        optimizer=make_optimizer(config),
        rngs=make_rngs(seed),
        split=split_index,
    )


def frozen(model: segnet.UNetModel) -> segnet.UNetModel:
    """Same weights, no graph: for evaluation-only forward passes."""
    return segnet.UNetModel(model.config, {n: p.detach() for n, p in model.parameters.items()})


def features_at(model: segnet.UNetModel, images: np.ndarray, tap: str) -> Tensor:
    """[B, 1, H, W] images → flattened tap features [B, D] (part of the graph)."""
    _, taps = segnet.forward(model, Tensor(images), stop_at=tap)
    return segnet.flatten_tap(taps, tap)


def _bank_features(model: segnet.UNetModel, dataset: Dataset, indices: np.ndarray, tap: str,
                   chunk: int) -> np.ndarray:
    still = frozen(model)
    rows = [
        features_at(still, dataset.image_batch(indices[i:i + chunk]), tap).data
        for i in range(0, len(indices), chunk)
    ]
    return np.concatenate(rows, axis=0)


def _distinct(features: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """One feature row per distinct drawn image, in draw order. A single image keeps the bank as is."""
    _, first = np.unique(indices, return_index=True)
    if len(first) < 2:
        return features
    return features[np.sort(first)]


def _draw(rng: np.random.Generator, pool: int, count: int) -> np.ndarray:
    """count indices, without replacement unless the pool is too small."""
    return rng.choice(pool, size=count, replace=pool < count)


# ─── KDE REFRESH ───

def refresh_kde(state: TrainState, config: ExperimentConfig, source_train: Dataset,
                target_pool: Dataset) -> TrainState:
    """
    Redraw N images per domain, push them to the tap, and rebuild both KDEs
    with their own bandwidths. Also sets the pooled MMD-B bandwidth.
    """
    if len(target_pool) == 0:
        raise EmptyDatasetError("target pool is empty, nothing to build a target KDE from")
    if len(source_train) == 0:
        raise EmptyDatasetError("source training set is empty")
    n = config.kde_samples
    rng = state.rngs["kde"]
    src_idx = _draw(rng, len(source_train), n)
    tgt_idx = _draw(rng, len(target_pool), n)
    chunk = config.batch_size
    src = _bank_features(state.model, source_train, src_idx, config.tap_name, chunk)
    tgt = _bank_features(state.model, target_pool, tgt_idx, config.tap_name, chunk)

    # a bank drawn with replacement repeats rows; σ comes from the distinct ones
    src_rows, tgt_rows = _distinct(src, src_idx), _distinct(tgt, tgt_idx)
    sigma_src = safe_bandwidth(src_rows, config.bw_mode, label="source")
    sigma_tgt = safe_bandwidth(tgt_rows, config.bw_mode, label="target")
    state.kde_source = build_kde(src, sigma_src)
    state.kde_target = build_kde(tgt, sigma_tgt)
    state.mmd_sigma = safe_bandwidth(np.concatenate([src_rows, tgt_rows]), config.bw_mode, label="pooled")
    logger.debug(
        f"[KDE] split {state.split} epoch {state.epoch}: N={n} d={src.shape[1]} "
        f"σ_src={sigma_src:.4g} σ_tgt={sigma_tgt:.4g} σ_mmd={state.mmd_sigma:.4g}"
    )
    return state


# ─── ONE STEP ───

def _seg_loss(config: ExperimentConfig, logits: Tensor, labels: np.ndarray) -> Tensor:
    if config.seg_loss == "dice":
        return dice_loss(logits, labels)
    return segmentation_loss(logits, labels)


def train_step(state: TrainState, config: ExperimentConfig, source_images: np.ndarray,
               source_masks: np.ndarray, target_images: np.ndarray | None) -> dict[str, float]:
    """One update on a labeled source batch and an unlabeled target batch."""
    if len(source_images) == 0:
        raise UsageError("empty source batch")
    model = state.model
    model.zero_grad()

    logits, taps = segnet.forward(model, Tensor(source_images))
    seg = _seg_loss(config, logits, source_masks)

    div_term = None
    if config.divergence.kind is not DivergenceKind.NONE:
        if target_images is None or len(target_images) == 0:
            raise UsageError("empty target batch")
        source_features = segnet.flatten_tap(taps, config.tap_name)
        target_features = features_at(model, target_images, config.tap_name)
        div_term = matching_loss(
            config.divergence, source_features, target_features,
            state.kde_source, state.kde_target, state.mmd_sigma,
        )

    loss = combined_loss(seg, div_term, config.divergence)
    backward(loss)
    norm = grad_norm(model.parameters)
    state.optimizer.step(model.parameters)
    return {
        "seg_loss": seg.item(),
        "div_loss": div_term.item() if div_term is not None else math.nan,
        "grad_norm": norm,
    }


def validation_loss(model: segnet.UNetModel, config: ExperimentConfig, val: Dataset) -> float:
    """Mean per-image segmentation loss over the source-val set."""
    still = frozen(model)
    total = 0.0
    for start in range(0, len(val), config.batch_size):
        idx = np.arange(start, min(start + config.batch_size, len(val)))
        logits, _ = segnet.forward(still, Tensor(val.image_batch(idx)))
        total += _seg_loss(config, logits, val.mask_batch(idx)).item() * len(idx)
    return total / len(val)


def run_epoch(state: TrainState, config: ExperimentConfig, train: Dataset, pool: Dataset) -> dict[str, float]:
    if needs_banks(config) and (state.epoch % config.bw_refresh_epochs == 0 or state.kde_source is None):
        refresh_kde(state, config, train, pool)

    order = state.rngs["order"].permutation(len(train))
    steps = math.ceil(len(train) / config.batch_size)
    seg_losses, div_losses = [], []
    for s in range(steps):
        idx = order[s * config.batch_size:(s + 1) * config.batch_size]
        target_images = None
        if config.divergence.kind is not DivergenceKind.NONE:
            target_images = pool.image_batch(state.next_target_indices(len(pool), len(idx)))
        metrics = train_step(state, config, train.image_batch(idx), train.mask_batch(idx), target_images)
        seg_losses.append(metrics["seg_loss"])
        div_losses.append(metrics["div_loss"])
    return {
        "seg_loss": float(np.mean(seg_losses)),
        "div_loss": float(np.mean(div_losses)) if config.divergence.kind is not DivergenceKind.NONE else math.nan,
    }


# ─── SAVE / RESUME ───

def _state_dict(state: TrainState) -> dict:
    return {
        "split": state.split,
        "epoch": state.epoch,
        "best_val_loss": state.best_val_loss if math.isfinite(state.best_val_loss) else None,
        "best_epoch": state.best_epoch,
        "rng": rng_states(state.rngs),
        "sigma_src": state.kde_source.bandwidth if state.kde_source else None,
        "sigma_tgt": state.kde_target.bandwidth if state.kde_target else None,
        "mmd_sigma": state.mmd_sigma,
        "opt_steps": state.optimizer.steps,
        "target_order": [int(i) for i in state.target_order],
        "target_pos": state.target_pos,
    }


def save_state(state: TrainState, config: ExperimentConfig, path: str | Path):
    """Everything needed to continue this split exactly where it stopped."""
    records = model_records(state.model)
    records.update(state.optimizer.moment_records())
    if state.kde_source is not None:
        records["kde.source"] = state.kde_source.samples.data
        records["kde.target"] = state.kde_target.samples.data
    write_records(path, records)
    write_sidecar(path, config_to_flat(config), _state_dict(state))


def load_state(path: str | Path, config: ExperimentConfig | None = None) -> tuple[TrainState, ExperimentConfig]:
    records = read_records(path)
    sidecar = read_sidecar(path)
    config = config or config_from_flat(sidecar["config"])
    info = sidecar["state"]

    optimizer = make_optimizer(config)
    optimizer.load_moments(records, info["opt_steps"])
    state = TrainState(
        model=model_from_records(records, str(path)),
        optimizer=optimizer,
        rngs=rngs_from_states(info["rng"]),
        split=info["split"],
        epoch=info["epoch"],
        best_val_loss=math.inf if info["best_val_loss"] is None else info["best_val_loss"],
        best_epoch=info["best_epoch"],
        mmd_sigma=info["mmd_sigma"],
        target_order=np.asarray(info["target_order"], dtype=np.int64),
        target_pos=info["target_pos"],
    )
    if "kde.source" in records:
        state.kde_source = build_kde(records["kde.source"], info["sigma_src"])
        state.kde_target = build_kde(records["kde.target"], info["sigma_tgt"])
    return state, config


# ─── FIT ───

def run_name(config: ExperimentConfig) -> str:
    label = config.divergence.label.lower().replace(" ", "-")
    flat = "\n".join(f"{k}={v}" for k, v in sorted(config_to_flat(config).items()))
    return f"{label}_{hashlib.md5(flat.encode()).hexdigest()[:8]}"


def _drop_metrics_from(path: Path, split_index: int, epoch: int):
    """Forget logged epochs ≥ `epoch` of one split (they'll be re-run)."""
    if not path.exists():
        return
    df = read_table(path, METRICS_COLUMNS)
    keep = (df["split"] != split_index) | (df["epoch"] < epoch)
    write_table(df[keep], path, METRICS_COLUMNS)


_NO_LOSSES = {"seg_loss": math.nan, "div_loss": math.nan}


def _last_logged(path: Path, split_index: int) -> dict:
    """seg/div loss of the last logged epoch of one split, NaN if none."""
    if not path.exists():
        return dict(_NO_LOSSES)
    df = read_table(path, METRICS_COLUMNS)
    rows = df[df["split"] == split_index]
    if rows.empty:
        return dict(_NO_LOSSES)
    row = rows.loc[rows["epoch"].idxmax()]
    return {"seg_loss": float(row["seg_loss"]), "div_loss": float(row["div_loss"])}


def fit_split(config: ExperimentConfig, source: Dataset, target: Dataset, split_index: int, seed: int,
              layout: RunLayout, progress: bool = True, resume: bool = False) -> dict:
    """Train one split; returns its summary row."""
    train, val, pool = split(source, target, config.val_fraction, config.target_fraction, seed)
    state_path = layout.state(split_index)
    if resume and state_path.exists():
        state, _ = load_state(state_path, config)
        _drop_metrics_from(layout.metrics_csv, split_index, state.epoch)
        logger.info(f"[TRAIN] split {split_index}: resuming at epoch {state.epoch}")
    else:
        state = init_state(config, split_index, seed)

    # a resumed run that is already complete reports its last logged epoch
    last = _last_logged(layout.metrics_csv, split_index) if resume else dict(_NO_LOSSES)
    epochs = tqdm(range(state.epoch, config.epochs), desc=f"split {split_index}",
                  disable=not progress, leave=False)
    for epoch in epochs:
        last = run_epoch(state, config, train, pool)
        val_loss = validation_loss(state.model, config, val)
        append_rows(layout.metrics_csv, [{
            "split": split_index, "epoch": epoch, **last, "val_loss": val_loss,
            "sigma_src": state.sigma_src, "sigma_tgt": state.sigma_tgt,
        }], METRICS_COLUMNS)
        state.epoch = epoch + 1
        if val_loss < state.best_val_loss:
            state.best_val_loss, state.best_epoch = val_loss, epoch
            save_model(state.model, layout.checkpoint(split_index))
            write_sidecar(layout.checkpoint(split_index), config_to_flat(config), _state_dict(state))
        save_state(state, config, state_path)
        epochs.set_postfix(seg=f"{last['seg_loss']:.4f}", val=f"{val_loss:.4f}")
        logger.debug(
            f"[TRAIN] split {split_index} epoch {epoch}: seg={last['seg_loss']:.5f} "
            f"div={last['div_loss']:.5g} val={val_loss:.5f}"
        )

    logger.info(
        f"[TRAIN] split {split_index} done: best val {state.best_val_loss:.5f} at epoch {state.best_epoch}"
    )
    return {
        "split": split_index, "seed": seed, "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "final_seg_loss": last["seg_loss"], "final_div_loss": last["div_loss"],
    }


def fit(config: ExperimentConfig, source: Dataset, target: Dataset, run_dir: str | Path | None = None,
        progress: bool = True, resume: bool = False) -> RunArtifacts:
    """All splits of one experiment, best checkpoint per split, metrics + summary tables."""
    if not source.labeled:
        raise UsageError("the source dataset needs masks")
    if source.image_size != config.unet.input_size:
        raise UsageError(
            f"images are {source.image_size}px but the model expects {config.unet.input_size}px"
        )
    layout = RunLayout(Path(run_dir) if run_dir else settings.runs_dir() / run_name(config)).create()
    write_config_text(layout.config_txt, config_to_flat(config))
    if not resume and layout.metrics_csv.exists():
        layout.metrics_csv.unlink()

    seeds = config.split_seeds()
    logger.info(f"[TRAIN] {config.divergence.label}: {len(seeds)} splits → {layout.root}")
    rows = [
        fit_split(config, source, target, k, seed, layout, progress=progress, resume=resume)
        for k, seed in enumerate(seeds)
    ]
    summary = with_aggregates(pd.DataFrame(rows, columns=SUMMARY_COLUMNS), "split",
                              ["best_val_loss", "final_seg_loss", "final_div_loss"])
    write_table(summary, layout.summary_csv, SUMMARY_COLUMNS)
    return RunArtifacts(
        run_dir=layout.root,
        checkpoints=[layout.checkpoint(k) for k in range(len(seeds))],
        metrics_csv=layout.metrics_csv,
        summary_csv=layout.summary_csv,
        metrics=read_table(layout.metrics_csv, METRICS_COLUMNS),
        summary=summary,
        split_seeds=seeds,
    )
