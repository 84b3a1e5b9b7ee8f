import json

import numpy as np
import pytest

from cad.cli import main
from cad.config import RunConfig, from_dict, load_config, parse_override
from cad.errors import ConfigError

TINY = [
    "--set", "data.n_train=6",
    "--set", "data.n_test=3",
    "--set", "data.size=16",
    "--set", "backbone.embed_dim=8",
    "--set", "backbone.depth=2",
    "--set", "adapter.block_channels=[4,4,4]",
    "--set", "decoder.channels=[4,4,4]",
    "--set", "train.epochs=2",
    "--set", "train.batch_size=3",
]  # fmt: skip


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def with_paths(tmp_path):
    return [
        "--set", f"paths.cache_dir={tmp_path / 'cache'}",
        "--set", f"paths.data_dir={tmp_path / 'data'}",
    ]  # fmt: skip


# ------------------------------------------------------------------ config


def test_defaults_validate_and_mirror_training_setup():
    cfg = RunConfig().validate()
    assert (cfg.train.epochs, cfg.train.batch_size) == (20, 4)
    assert cfg.adapter_cfg().embed_dim == 32 and cfg.embed_hw() == (8, 8)


@pytest.mark.parametrize(
    "override,key",
    [
        ({"data.size": 60}, "data.size"),
        ({"hfc.tau": 1.0}, "hfc.tau"),
        ({"backbone.patch": 7}, "backbone.patch"),
        ({"backbone.patch": 4}, "backbone.patch"),
        ({"adapter.block_channels": [4, 4]}, "adapter.block_channels"),
        ({"decoder.channels": [8, 8]}, "decoder.channels"),
        ({"decoder.stages": 2}, "decoder.stages"),
        ({"optim.lr": 0}, "optim.lr"),
        ({"train.mode": "lora"}, "train.mode"),
        ({"data.kind": "street"}, "data.kind"),
        ({"train.batch_size": 0}, "train.batch_size"),
    ],
)
def test_validation_names_the_key(override, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(None, override)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match=r"train\.speed"):
        from_dict({"train": {"speed": 3}})
    with pytest.raises(ConfigError, match="model"):
        from_dict({"model": {}})


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochs": 3}, "hfc": {"tau": 0.1}}))
    cfg = load_config(p, {"train.epochs": 5})
    assert cfg.train.epochs == 5 and cfg.hfc.tau == 0.1
    assert from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_parse_override():
    assert parse_override("train.epochs=5") == ("train.epochs", 5)
    assert parse_override("adapter.block_channels=[1,2,3]") == ("adapter.block_channels", [1, 2, 3])
    assert parse_override("train.mode=cad") == ("train.mode", "cad")
    with pytest.raises(ConfigError):
        parse_override("epochs=5")


def test_decoder_only_alias():
    assert load_config(None, {"train.mode": "decoder-only"}).train.mode == "decoder"


def test_shipped_configs_validate():
    from pathlib import Path

    root = Path(__file__).resolve().parent.parent / "configs"
    assert load_config(root / "desk.json").to_dict() == RunConfig().validate().to_dict()
    assert load_config(root / "memory_wide.json").backbone.embed_dim == 384


# ------------------------------------------------------------------ cli


def test_gen_data_and_hfc(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", *TINY, "--out", str(tmp_path / "d"))
    assert code == 0
    root = tmp_path / "d" / "camo"
    meta = json.loads((root / "meta.json").read_text())
    assert (meta["kind"], meta["n"], meta["size"], meta["seed"]) == ("camo", 9, 16, 2024)
    assert len(list(root.glob("img_*.ppm"))) == 9 and len(list(root.glob("msk_*.pgm"))) == 9
    code, out, _ = run(capsys, "hfc", "--in", str(root / "img_00000.ppm"), "--out", str(tmp_path / "h.cadt"))
    assert code == 0 and json.loads(out)["shape"] == [3, 16, 16]
    code, _, _ = run(capsys, "hfc", "--in", str(root / "img_00000.ppm"), "--out", str(tmp_path / "h.ppm"))
    assert code == 0 and (tmp_path / "h.ppm").exists()


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n000")
    assert run(capsys, "hfc", "--in", str(bad), "--out", str(tmp_path / "x.cadt"))[0] == 3
    code, _, err = run(capsys, "hfc", "--in", str(bad), "--tau", "1.5", "--out", "x")
    assert code == 2 and "tau" in err
    code, _, err = run(capsys, "train", "--set", "backbone.patch=7")
    assert code == 2 and "backbone.patch" in err
    assert run(capsys, "train", "--mode", "lora")[0] == 2


def test_train_cache_equivalence_and_eval(tmp_path, capsys):
    paths = with_paths(tmp_path)
    assert run(capsys, "gen-data", *TINY, *paths)[0] == 0
    code, out, _ = run(capsys, "precompute", *TINY, *paths)
    assert code == 0 and json.loads(out)["sample_count"] == 9
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "train", "--mode", "cad", *TINY, *paths, "--out", str(a))[0] == 0
    assert run(capsys, "train", "--mode", "cad", "--use-cache", *TINY, *paths, "--out", str(b))[0] == 0
    la = [json.loads(x) for x in (a / "log.jsonl").read_text().splitlines()]
    lb = [json.loads(x) for x in (b / "log.jsonl").read_text().splitlines()]
    assert len(la) == 2
    assert set(la[0]) == {"epoch", "train_loss", "test_dice", "test_iou", "wall_ms", "modeled_memory_bytes"}
    for ra, rb in zip(la, lb):
        ra.pop("wall_ms"), rb.pop("wall_ms")
        assert ra == rb
    code, out, _ = run(capsys, "eval", "--checkpoint", str(a / "checkpoint.cadk"))
    res = json.loads(out)
    assert code == 0 and res["mode"] == "cad"
    assert res["dice"] == json.loads((a / "summary.json").read_text())["final"]["dice"]


def test_use_cache_without_cache_fails(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--mode", "cad", "--use-cache", *TINY, *with_paths(tmp_path), "--out", str(tmp_path / "o"))
    assert code == 2 and "cache" in err
    code, _, _ = run(capsys, "train", "--mode", "inblock", "--use-cache", *TINY, *with_paths(tmp_path), "--out", str(tmp_path / "o"))
    assert code == 2


def test_rerun_is_reproducible(tmp_path, capsys):
    outs = []
    for name in ("r1", "r2"):
        run(capsys, "train", "--mode", "decoder", *TINY, "--set", "train.epochs=1", *with_paths(tmp_path), "--out", str(tmp_path / name))
        outs.append(json.loads((tmp_path / name / "summary.json").read_text()))
    outs[0].pop("checkpoint"), outs[1].pop("checkpoint")
    assert outs[0] == outs[1]


def test_memory_report_depth_independence(capsys):
    reps = {}
    for depth in (2, 12):
        code, out, _ = run(capsys, "memory-report", "--mode", "cad", "--depth", str(depth), "--json")
        assert code == 0
        reps[depth] = json.loads(out)["reports"]
    assert reps[2]["cad"]["retained_activation_bytes"] == reps[12]["cad"]["retained_activation_bytes"]
    assert reps[2]["inblock"]["retained_activation_bytes"] < reps[12]["inblock"]["retained_activation_bytes"]
    code, out, _ = run(capsys, "memory-report", "--depth", "4", "--table")
    assert code == 0 and "Trainable Parameters" in out


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops-only")
    res = json.loads(out)
    assert code == 0 and res["passed"] and {r["check"] for r in res["checks"]} >= {"conv2d", "batchnorm2d"}


def test_gradcheck_failure_exit(monkeypatch, capsys):
    import cad.gradcheck as gc

    monkeypatch.setattr(gc, "run_suite", lambda **_: [gc.CheckResult("fake", 1.0, 0.0)])
    assert run(capsys, "gradcheck")[0] == 4


def test_loaded_data_matches_generated(tmp_path, capsys):
    """PPM quantization aside, samples read back from disk keep their masks."""
    from cad.cli import _samples

    run(capsys, "gen-data", *TINY, *with_paths(tmp_path))
    cfg = load_config(None, dict(parse_override(s) for s in TINY[1::2] + with_paths(tmp_path)[1::2]))
    train, test = _samples(cfg)
    from cad.train import make_splits

    gtrain, _ = make_splits(cfg)
    assert len(train) == 6 and len(test) == 3
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(train, gtrain))
    assert max(float(np.abs(a.image - b.image).max()) for a, b in zip(train, gtrain)) <= 0.5 / 255 + 1e-6
