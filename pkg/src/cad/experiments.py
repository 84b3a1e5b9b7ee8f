"""Experiment drivers shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

from cad.config import RunConfig, load_config
from cad.memory import MemoryReport, report_for
from cad.train import make_splits, train

# Pinned training seeds for the ordering experiment. Data seed stays at the config default.
ORDERING_SEEDS = (0, 1, 2)
SWEEP_DEPTHS = (2, 4, 8, 12)


@dataclass
class OrderingResult:
    seeds: tuple[int, ...]
    dice: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def median(self, arm: str) -> float:
        return statistics.median(self.dice[arm])

    def margins(self) -> dict[str, float]:
        return {
            "cad_minus_decoder": self.median("cad") - self.median("decoder"),
            "decoder_minus_untrained": self.median("decoder") - self.median("untrained"),
        }

    def to_json(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "dice": self.dice,
            "median": {k: self.median(k) for k in self.dice},
            "margins": self.margins(),
            "seconds": round(self.seconds, 1),
        }


def ordering_experiment(cfg: RunConfig | None = None, seeds=ORDERING_SEEDS, progress=None) -> OrderingResult:
    """Decoder-only vs CAD test Dice per seed, plus the untrained decoder as floor.

    The untrained arm is the decoder-only model evaluated before its first step,
    so all three arms share one initialization per seed.
    """
    cfg = cfg or RunConfig().validate()
    samples = make_splits(cfg)
    out = OrderingResult(tuple(seeds), {"untrained": [], "decoder": [], "cad": []})
    t0 = time.perf_counter()
    for seed in seeds:
        for mode in ("decoder", "cad"):
            run = load_config(None, {**_flat(cfg), "train.seed": seed, "train.mode": mode})
            res = train(run, samples=samples, eval_every_epoch=False)
            if mode == "decoder":
                out.dice["untrained"].append(res.initial.dice)
            out.dice[mode].append(res.final.dice)
            if progress is not None:
                progress(seed, mode, res)
    out.seconds = time.perf_counter() - t0
    return out


def _flat(cfg: RunConfig) -> dict:
    return {f"{sec}.{k}": v for sec, body in cfg.to_dict().items() for k, v in body.items()}


def depth_sweep(cfg: RunConfig, depths=SWEEP_DEPTHS, modes=("decoder", "inblock", "cad")) -> dict[str, dict[int, MemoryReport]]:
    """Memory reports for every mode at every backbone depth, other settings fixed."""
    out: dict[str, dict[int, MemoryReport]] = {m: {} for m in modes}
    for depth in depths:
        run = load_config(None, {**_flat(cfg), "backbone.depth": depth})
        for m in modes:
            out[m][depth] = report_for(
                m, run.backbone_cfg(), run.adapter_cfg(), run.decoder_cfg(), run.data.size, run.train.batch_size
            )
    return out
