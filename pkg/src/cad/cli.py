"""``cad`` command line: data generation, HFC, caching, training, evaluation, reports."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from cad.errors import CadError, ConfigError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_CHECK = 0, 2, 3, 4


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _config(args, **extra):
    from cad.config import load_config, parse_override

    overrides = dict(parse_override(o) for o in args.set or [])
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(args.config, overrides)


def _samples(cfg):
    """Train and test samples from ``paths.data_dir`` if gen-data wrote there, else regenerated."""
    from cad.train import make_splits

    root = Path(cfg.paths.data_dir) / cfg.data.kind
    meta_path = root / "meta.json"
    if not meta_path.exists():
        return make_splits(cfg)
    meta = json.loads(meta_path.read_text())
    want = {k: getattr(cfg.data, k) for k in ("kind", "n_train", "n_test", "size", "seed")}
    if {k: meta.get(k) for k in want} != want:
        return make_splits(cfg)
    return _load_dir(root, meta)


def _load_dir(root: Path, meta: dict):
    from cad.data import SampleRecord
    from cad.formats import read_mask, read_ppm, to_unit_float

    recs = []
    for i, sid in enumerate(meta["ids"]):
        img = to_unit_float(read_ppm(root / f"img_{i:05d}.ppm"))
        recs.append(SampleRecord(img, read_mask(root / f"msk_{i:05d}.pgm"), sid))
    return recs[: meta["n_train"]], recs[meta["n_train"] :]


def cmd_gen_data(args) -> int:
    from cad.data import content_hash
    from cad.formats import write_mask, write_ppm
    from cad.train import make_splits

    cfg = _config(args, **{"data.kind": args.kind, "data.seed": args.seed, "data.size": args.size})
    train, test = make_splits(cfg)
    root = Path(args.out or cfg.paths.data_dir) / cfg.data.kind
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, s in enumerate(train + test):
        rgb = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        write_ppm(root / f"img_{i:05d}.ppm", rgb)
        write_mask(root / f"msk_{i:05d}.pgm", s.mask)
        # ids follow the quantized pixels so reloaded samples hash the same
        ids.append(content_hash(rgb.astype(np.float32) / np.float32(255.0), s.mask))
    meta = {**{k: getattr(cfg.data, k) for k in ("kind", "n_train", "n_test", "size", "seed")}, "n": len(ids), "ids": ids}
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    _emit({"out": str(root), "count": len(ids)})
    return EXIT_OK


def cmd_hfc(args) -> int:
    from cad.formats import read_ppm, to_unit_float, write_cadt, write_ppm
    from cad.spectral import HfcConfig, extract_hfc, hfc_visual

    try:
        cfg = HfcConfig(args.tau)
    except ValueError as exc:
        raise ConfigError(f"hfc.tau: {exc}") from None
    hfc = extract_hfc(to_unit_float(read_ppm(args.input)).astype(np.float64), cfg)
    out = Path(args.out)
    if out.suffix == ".ppm":
        write_ppm(out, hfc_visual(hfc))
    else:
        write_cadt(out, hfc.astype(np.float32))
    _emit({"out": str(out), "shape": list(hfc.shape), "max_abs": float(np.abs(hfc).max())})
    return EXIT_OK


def cmd_precompute(args) -> int:
    from cad.train import precompute

    cfg = _config(args, **{"train.mode": args.mode})
    train, test = _samples(cfg)
    manifest = precompute(cfg, train + test)
    _emit({"cache": cfg.paths.cache_dir, "sample_count": manifest["sample_count"], "config_hash": manifest["config_hash"]})
    return EXIT_OK


def cmd_train(args) -> int:
    from cad.train import save_checkpoint, train

    cfg = _config(args, **{"train.mode": args.mode, "train.epochs": args.epochs, "train.seed": args.seed})
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    result = train(cfg, use_cache=args.use_cache, samples=_samples(cfg), log_path=out / "log.jsonl")
    save_checkpoint(out / "checkpoint.cadk", result.model, cfg)
    summary = {
        "mode": result.mode,
        "initial": {"dice": result.initial.dice, "iou": result.initial.iou},
        "final": {"dice": result.final.dice, "iou": result.final.iou},
        "checkpoint": str(out / "checkpoint.cadk"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    from cad.config import from_dict
    from cad.formats import read_checkpoint
    from cad.train import evaluate_split, load_model

    _, meta = read_checkpoint(args.checkpoint)
    cfg = _config(args) if args.config or args.set else from_dict(meta["config"])
    model, _ = load_model(args.checkpoint, cfg)
    _, test = _samples(cfg)
    res = evaluate_split(model, test, cfg, use_cache=args.use_cache)
    payload = {"mode": model.mode, **res.to_json()}
    if not args.per_sample:
        payload.pop("per_sample", None)
    _emit(payload)
    return EXIT_OK


def cmd_memory_report(args) -> int:
    from cad.memory import render_table, report_for

    cfg = _config(args, **{"backbone.depth": args.depth})
    bs = args.batch_size or cfg.train.batch_size
    modes = ("decoder", "inblock", "cad")
    reports = {
        m: report_for(m, cfg.backbone_cfg(), cfg.adapter_cfg(), cfg.decoder_cfg(), cfg.data.size, bs) for m in modes
    }
    if args.table and not args.json:
        print(render_table(reports, cfg.backbone.depth, bs))
        return EXIT_OK
    payload = {"depth": cfg.backbone.depth, "batch_size": bs, "reports": {m: r.to_json() for m, r in reports.items()}}
    if args.mode:
        payload["mode"] = args.mode
        payload["report"] = payload["reports"][args.mode]
    _emit(payload)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from cad.gradcheck import TOLERANCE, run_suite

    results = run_suite(seed=args.seed, full_graph=not args.ops_only)
    rows = [{"check": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed} for r in results]
    ok = all(r.passed for r in results)
    _emit({"tolerance": TOLERANCE, "passed": ok, "checks": rows})
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cad", description="Parallel convolutional adapter on a frozen toy encoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        return sp

    g = with_config(sub.add_parser("gen-data", help="write a synthetic dataset as PPM/PGM"))
    g.add_argument("--kind", choices=["camo", "shadow"])
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--out", help="parent directory (default paths.data_dir)")
    g.set_defaults(func=cmd_gen_data)

    h = sub.add_parser("hfc", help="high-frequency component of one PPM image")
    h.add_argument("--in", dest="input", required=True)
    h.add_argument("--tau", type=float, default=0.25)
    h.add_argument("--out", required=True, help=".ppm for a visual, anything else for CADT float32")
    h.set_defaults(func=cmd_hfc)

    pc = with_config(sub.add_parser("precompute", help="cache frozen-encoder embeddings"))
    pc.add_argument("--mode")
    pc.set_defaults(func=cmd_precompute)

    t = with_config(sub.add_parser("train", help="train one mode and write log + checkpoint"))
    t.add_argument("--mode")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--use-cache", action="store_true")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = with_config(sub.add_parser("eval", help="metrics of a checkpoint on the test split"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--use-cache", action="store_true")
    e.add_argument("--per-sample", action="store_true")
    e.set_defaults(func=cmd_eval)

    m = with_config(sub.add_parser("memory-report", help="modeled training memory of all three modes"))
    m.add_argument("--mode", choices=["cad", "inblock", "decoder"])
    m.add_argument("--depth", type=int)
    m.add_argument("--batch-size", type=int)
    fmt = m.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true")
    fmt.add_argument("--table", action="store_true")
    m.set_defaults(func=cmd_memory_report)

    gc = sub.add_parser("gradcheck", help="float64 finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--ops-only", action="store_true")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except CadError as exc:
        kind = "config error" if exc.exit_code == EXIT_CONFIG else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
