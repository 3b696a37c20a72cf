import csv
import json
from pathlib import Path

import numpy as np
import pytest

from patchfool.cli import build_parser, main
from patchfool.harness import Dataset, load_dataset, save_dataset

SNAPSHOTS = Path(__file__).parent / "snapshots"
COMMANDS = ["train", "attack", "eval", "sweep", "transfer", "export-attn"]


def tiny_data(path, split_seed, count=12):
    rng = np.random.default_rng(split_seed)
    labels = rng.integers(0, 2, count)
    images = np.clip(0.3 + 0.1 * rng.standard_normal((count, 8, 8, 3)), 0, 1)
    images[labels == 1, :4] += 0.4
    save_dataset(Dataset(np.clip(images, 0, 1), labels, 2, "train"), path)
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    tiny_data(d / "train.pfds", 0, 32)
    tiny_data(d / "test.pfds", 1, 12)
    code = main(["train", "--model", "vit", "--data", str(d / "train.pfds"), "--epochs", "2",
                 "--lr", "1e-3", "--seed", "1", "--out", str(d / "vit.pfml")])
    assert code == 0
    return d


def attack_argv(d, out, *extra):
    return ["attack", "--model-ckpt", str(d / "vit.pfml"), "--data", str(d / "test.pfds"),
            "--iters", "4", "--limit", "5", "--out", str(out), *extra]


def test_no_subcommand_and_bad_flags_exit_one(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["attack", "--bogus"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["attack", "--data", "x.pfds"]) == 1  # missing --out / --model-ckpt
    assert main(["--help"]) == 0


def test_attack_config_errors_are_usage_errors(workdir, tmp_path):
    assert main(attack_argv(workdir, tmp_path / "o", "--variant", "sparse")) == 1
    assert main(attack_argv(workdir, tmp_path / "o", "--variant", "mild-l2")) == 1


def test_runtime_failure_exits_two(workdir, tmp_path):
    argv = attack_argv(workdir, tmp_path / "o")
    argv[argv.index("--model-ckpt") + 1] = str(tmp_path / "missing.pfml")
    assert main(argv) == 2


@pytest.mark.parametrize("command", COMMANDS)
def test_help_snapshot(command, monkeypatch, capsys):
    monkeypatch.setenv("COLUMNS", "100")
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    text = sub.format_help()
    snap = SNAPSHOTS / f"{command}_help.txt"
    if not snap.exists():
        pytest.fail(f"missing snapshot {snap.name}; regenerate with tests/snapshots/regenerate.py")
    assert text == snap.read_text()


def test_every_flag_documents_a_default():
    parser = build_parser()
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        for action in sub._actions:
            if action.dest in ("help",):
                continue
            assert "default" in (action.help or "") or "required" in (action.help or "") \
                or "explicit flags win" in (action.help or ""), (name, action.dest)


def test_attack_defaults_recorded_in_manifest(workdir, tmp_path):
    out = tmp_path / "run"
    argv = ["attack", "--model-ckpt", str(workdir / "vit.pfml"), "--data", str(workdir / "test.pfds"),
            "--variant", "vanilla", "--patches", "1", "--limit", "2", "--out", str(out)]
    assert main(argv) == 0
    man = json.loads((out / "manifest.json").read_text())
    cfg = man["attack_config"]
    assert (cfg["alpha"], cfg["eta0"], cfg["iters"], cfg["layer_l"]) == (0.002, 0.2, 250, 5)
    assert man["model_sha256"] and man["dataset_sha256"] and man["started_at"] and man["finished_at"]
    rep = json.loads((out / "report.json").read_text())
    assert rep["wall_ms"] is None and rep["manifest"] == "manifest.json"
    assert sorted(p.name for p in (out / "adv").iterdir()) == [f"{r['index']:04d}.pfds" for r in rep["records"]]


def test_attack_runs_are_byte_identical(workdir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(attack_argv(workdir, a, "--variant", "sparse", "--k", "6", "--select", "random")) == 0
    assert main(attack_argv(workdir, b, "--variant", "sparse", "--k", "6", "--select", "random")) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    files = sorted(p.name for p in (a / "adv").iterdir())
    assert files == sorted(p.name for p in (b / "adv").iterdir()) and len(files) == 5
    for name in files:
        assert (a / "adv" / name).read_bytes() == (b / "adv" / name).read_bytes()
        ds = load_dataset(a / "adv" / name)
        assert ds.images.shape == (1, 8, 8, 3)


def test_config_file_flag_wins_with_notice(workdir, tmp_path, caplog):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"iters": 3, "alpha": 0.5, "limit": 3}))
    out = tmp_path / "o"
    argv = ["eval", "--config", str(conf), "--model-ckpt", str(workdir / "vit.pfml"),
            "--data", str(workdir / "test.pfds"), "--alpha", "0.1", "--out", str(out)]
    with caplog.at_level("WARNING"):
        assert main(argv) == 0
    assert any("overrides config" in r.message for r in caplog.records)
    cfg = json.loads((out / "manifest.json").read_text())["attack_config"]
    assert (cfg["iters"], cfg["alpha"]) == (3, 0.1)
    assert len(json.loads((out / "report.json").read_text())["records"]) == 3
    assert not (out / "adv").exists()
    conf.write_text(json.dumps({"nonsense": 1}))
    assert main(argv) == 1


def test_pf_seed_fallback(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("PF_SEED", "17")
    out = tmp_path / "o"
    assert main(attack_argv(workdir, out)) == 0
    assert json.loads((out / "manifest.json").read_text())["seeds"]["seed"] == 17
    assert main(attack_argv(workdir, tmp_path / "p", "--seed", "3")) == 0
    assert json.loads((tmp_path / "p" / "report.json").read_text())["seed"] == 3


def test_sweep_writes_grid(workdir, tmp_path):
    out = tmp_path / "sw"
    argv = ["sweep", "--model-ckpt", str(workdir / "vit.pfml"), "--data", str(workdir / "test.pfds"),
            "--patches", "1,2", "--epsilon", "0.05,0.1", "--variant", "mild-linf", "--iters", "3",
            "--limit", "4", "--out", str(out)]
    assert main(argv) == 0
    rows = list(csv.DictReader((out / "grid.csv").read_text().splitlines()))
    assert [(r["patches"], r["epsilon"]) for r in rows] == [("1", "0.05"), ("1", "0.1"), ("2", "0.05"), ("2", "0.1")]
    rep = json.loads((out / "report.json").read_text())
    assert len(rep["cells"]) == 4 and rep["cells"][3]["report"]["config"]["num_patches"] == 2
    assert main(argv[:-2] + ["--patches", "1", "--epsilon", "0.1", "--out", str(out)]) == 1


def test_transfer_and_export(workdir, tmp_path):
    out = tmp_path / "tr"
    argv = ["transfer", "--model-ckpt", str(workdir / "vit.pfml"), "--data", str(workdir / "test.pfds"),
            "--source", "1", "--iters", "3", "--limit", "6", "--out", str(out)]
    assert main(argv) == 0
    rep = json.loads((out / "report.json").read_text())
    assert np.array(rep["robust_accuracy"]).shape == (2, 2)
    assert len((out / "grid.csv").read_text().splitlines()) == 5
    ex = tmp_path / "ex"
    argv = ["export-attn", "--model-ckpt", str(workdir / "vit.pfml"), "--data", str(workdir / "test.pfds"),
            "--index", "2", "--query", "0", "--adv-variant", "vanilla", "--out", str(ex)]
    assert main(argv) == 0
    assert {p.name for p in ex.iterdir()} == {"manifest.json", "clean.csv", "clean.pfds", "adv.csv", "adv.pfds"}
    assert main(argv[:-2] + ["--index", "99", "--out", str(ex)]) == 1
