"""Training and evaluation loops for the three fine-tuning modes."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cad.backbone import load_cached_embeddings, precompute_embeddings
from cad.config import RunConfig
from cad.data import Rng, SampleRecord, gen_dataset
from cad.errors import StaleCacheError
from cad.formats import read_checkpoint, write_checkpoint
from cad.memory import report_for
from cad.model import SegModel, build_model
from cad.seg import AdamW, EvalResult, evaluate_masks, predict_mask, seg_loss
from cad.spectral import build_adapter_input
from cad.tensor import backward

log = logging.getLogger(__name__)

EVAL_BATCH = 10


@dataclass
class Split:
    samples: list[SampleRecord]
    images: np.ndarray
    masks: np.ndarray
    embeddings: np.ndarray | None = None
    adapter_inputs: np.ndarray | None = None

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


@dataclass
class TrainResult:
    mode: str
    step_losses: list[float] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    initial: EvalResult | None = None
    final: EvalResult | None = None
    model: SegModel | None = field(default=None, repr=False)


def make_splits(cfg: RunConfig) -> tuple[list[SampleRecord], list[SampleRecord]]:
    d = cfg.data
    train = gen_dataset(d.kind, d.n_train, d.size, d.seed, cfg.backbone.patch)
    test = gen_dataset(d.kind, d.n_test, d.size, d.seed, cfg.backbone.patch, start=d.n_train)
    return train, test


def _split(samples: list[SampleRecord], model: SegModel, use_cache: bool, cache_dir) -> Split:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    split = Split(samples, images, masks)
    if model.mode != "inblock":
        if use_cache:
            split.embeddings = load_cached_embeddings(samples, model.backbone_cfg, cache_dir)
        else:
            split.embeddings = model.embed(images)
    if model.mode == "cad":
        split.adapter_inputs = build_adapter_input(images, model.hfc_cfg).data
    return split


def _take(arr: np.ndarray | None, idx: np.ndarray) -> np.ndarray | None:
    return None if arr is None else arr[idx]


def evaluate(model: SegModel, split: Split) -> EvalResult:
    preds = []
    for lo in range(0, len(split.samples), EVAL_BATCH):
        idx = np.arange(lo, min(lo + EVAL_BATCH, len(split.samples)))
        logits = model.forward(
            split.images[idx], train=False, embeddings=_take(split.embeddings, idx), adapter_inputs=_take(split.adapter_inputs, idx)
        )
        preds.extend(predict_mask(logits.data)[:, 0])
    return evaluate_masks(preds, split.masks[:, 0], split.ids)


def train(
    cfg: RunConfig,
    use_cache: bool = False,
    samples: tuple[list[SampleRecord], list[SampleRecord]] | None = None,
    log_path: Path | None = None,
    eval_every_epoch: bool = True,
) -> TrainResult:
    """Full loop: BCE + soft-IoU loss, AdamW, per-epoch test metrics.

    With ``use_cache`` the frozen encoder never runs; embeddings come from the
    cache directory and must have been written by :func:`precompute_embeddings`.
    """
    mode = cfg.train.mode
    if use_cache and mode == "inblock":
        raise StaleCacheError("in-block mode trains inside the encoder; cached embeddings are incompatible")
    train_s, test_s = samples if samples is not None else make_splits(cfg)
    model = build_model(mode, cfg.backbone_cfg(), cfg.adapter_cfg(), cfg.decoder_cfg(), cfg.hfc_cfg(), seed=cfg.train.seed)
    tr = _split(train_s, model, use_cache, cfg.paths.cache_dir)
    te = _split(test_s, model, use_cache, cfg.paths.cache_dir)
    opt = AdamW(list(model.trainable_parameters().values()), cfg.optim_hyper())
    modeled = report_for(
        mode, cfg.backbone_cfg(), cfg.adapter_cfg(), cfg.decoder_cfg(), cfg.data.size, cfg.train.batch_size
    ).total_bytes

    result = TrainResult(mode=mode, model=model)
    result.initial = evaluate(model, te)
    rng = Rng(cfg.train.seed ^ 0x5EED)
    bs = cfg.train.batch_size
    sink = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, cfg.train.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_s))
            losses = []
            for lo in range(0, len(order), bs):
                idx = order[lo : lo + bs]
                opt.zero_grad()
                logits = model.forward(
                    tr.images[idx], train=True, embeddings=_take(tr.embeddings, idx), adapter_inputs=_take(tr.adapter_inputs, idx)
                )
                loss = seg_loss(logits, tr.masks[idx])
                backward(loss)
                opt.step()
                losses.append(float(loss.data[0]))
            result.step_losses.extend(losses)
            row = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "test_dice": None,
                "test_iou": None,
                "wall_ms": 0.0,
                "modeled_memory_bytes": modeled,
            }
            if eval_every_epoch or epoch == cfg.train.epochs:
                ev = evaluate(model, te)
                row["test_dice"], row["test_iou"] = ev.dice, ev.iou
                result.final = ev
            row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 1)
            result.epochs.append(row)
            log.info("epoch %d loss %.4f dice %s", epoch, row["train_loss"], row["test_dice"])
            if sink is not None:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    if result.final is None:
        result.final = result.initial
    return result


def save_checkpoint(path, model: SegModel, cfg: RunConfig) -> None:
    write_checkpoint(path, model.state_dict(), meta={"mode": model.mode, "config": cfg.to_dict()})


def load_model(path, cfg: RunConfig | None = None) -> tuple[SegModel, dict]:
    from cad.config import from_dict

    state, meta = read_checkpoint(path)
    if cfg is None:
        cfg = from_dict(meta["config"])
    model = build_model(meta["mode"], cfg.backbone_cfg(), cfg.adapter_cfg(), cfg.decoder_cfg(), cfg.hfc_cfg(), seed=cfg.train.seed)
    model.load_state_dict(state)
    return model, meta


def precompute(cfg: RunConfig, samples: list[SampleRecord]) -> dict:
    return precompute_embeddings(samples, cfg.backbone_cfg(), cfg.paths.cache_dir, inblock=cfg.train.mode == "inblock")


def evaluate_split(model: SegModel, samples: list[SampleRecord], cfg: RunConfig, use_cache: bool = False) -> EvalResult:
    return evaluate(model, _split(samples, model, use_cache, cfg.paths.cache_dir))
