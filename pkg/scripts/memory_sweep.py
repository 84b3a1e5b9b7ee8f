#!/usr/bin/env python3
"""Modeled training memory of each mode as the frozen encoder gets deeper.

Defaults to configs/memory_wide.json, where the encoder is wide relative to
the adapter as in a ViT backbone. Pass --config configs/desk.json for the
width actually trained at desk scale.
"""

import argparse
import json
from pathlib import Path

from cad.config import load_config
from cad.experiments import SWEEP_DEPTHS, depth_sweep
from cad.memory import MIB

HERE = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "memory_wide.json"))
    ap.add_argument("--depths", type=int, nargs="+", default=list(SWEEP_DEPTHS))
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = ap.parse_args()

    cfg = load_config(args.config)
    sweep = depth_sweep(cfg, args.depths)
    if args.json:
        print(json.dumps({m: {d: r.to_json() for d, r in rows.items()} for m, rows in sweep.items()}, indent=2))
        return
    print(f"embed_dim {cfg.backbone.embed_dim}, batch {cfg.train.batch_size}, image {cfg.data.size}px")
    print(f"{'depth':>5} {'mode':<8} {'params':>10} {'retained MiB':>13} {'total MiB':>10}")
    for d in args.depths:
        for m, rows in sweep.items():
            r = rows[d]
            print(f"{d:>5} {m:<8} {r.trainable_params:>10,} {r.retained_activation_bytes / MIB:>13.3f} {r.total_bytes / MIB:>10.3f}")
        ratio = sweep["inblock"][d].retained_activation_bytes / sweep["cad"][d].retained_activation_bytes
        print(f"{'':>5} inblock/cad retained ratio {ratio:.2f}")


if __name__ == "__main__":
    main()
