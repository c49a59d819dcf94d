"""Command-line smoke tests on a tiny synthetic dataset."""
import csv

import pytest

from retina_ssl.cli import main


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth-gen", "--n", "5", "--size", "32", "--seed", "3", "--out", str(root)]) == 0
    return root / "dataset.manifest"


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_synth_gen_writes_manifest(dataset):
    assert dataset.exists()
    assert (dataset.parent / "config.txt").exists()
    assert len(dataset.read_text().splitlines()) == 5


def test_pretrain_finetune_evaluate_probe_chain(dataset, tmp_path, capsys):
    pre = tmp_path / "pre"
    code, _, _ = _run(capsys, "pretrain", "--data", dataset, "--epochs", 1, "--batch-size", 2,
                      "--queue-length", 4, "--resize-crop-size", 32, "--view-crop-size", 16, "--out", pre)
    assert code == 0 and (pre / "encoder.ntc").exists()
    assert _rows(pre / "pretrain_loss.csv")[0].keys() == {"epoch", "step", "loss", "lr"}

    ft = tmp_path / "ft"
    code, out, _ = _run(capsys, "finetune", "--data", dataset, "--init-encoder", pre / "encoder.ntc",
                        "--epochs", 2, "--batch-size", 2, "--checkpoint-every", 1, "--out", ft)
    assert code == 0 and (ft / "best.ntc").exists()
    assert [r["epoch"] for r in _rows(ft / "history.csv")] == ["1", "2"]

    ev = tmp_path / "ev"
    code, out, _ = _run(capsys, "evaluate", "--checkpoint", ft / "best.ntc", "--test", dataset,
                        "--train", dataset, "--metric", "both", "--out", ev)
    assert code == 0 and "dice:" in out
    row = _rows(ev / "report.csv")[0]
    assert 0.0 <= float(row["dice"]) <= 1.0 and 0.0 <= float(row["auprc"]) <= 1.0

    pr = tmp_path / "pr"
    code, out, _ = _run(capsys, "probe", "--data", dataset, "--checkpoint", pre / "encoder.ntc",
                        "--targets", "vessels,lesions", "--units", "0,3", "--compare-random", "true",
                        "--out", pr)
    assert code == 0
    assert len(_rows(pr / "correlation_pretrained.csv")) == 128 * 2
    assert len(list(pr.glob("**/*.png"))) >= 2


def test_stats_command(tmp_path, capsys):
    for name, vals in (("a", [3, 4, 5, 6]), ("b", [2, 2, 2, 2])):
        with open(tmp_path / f"{name}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["split", "dice"])
            w.writerows([[i, v] for i, v in enumerate(vals)])
    code, out, _ = _run(capsys, "stats", "--a", tmp_path / "a.csv", "--b", tmp_path / "b.csv",
                        "--out", tmp_path / "st")
    assert code == 0
    row = _rows(tmp_path / "st" / "interval.csv")[0]
    assert float(row["lower"]) == pytest.approx(0.981, abs=1e-3)


def test_gradcheck_command(tmp_path, capsys):
    code, out, _ = _run(capsys, "gradcheck", "--seeds", 1, "--unet", "false", "--out", tmp_path)
    assert code == 0
    assert len(_rows(tmp_path / "gradcheck.csv")) > 20


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("n=2\nsize=32\n")
    out = tmp_path / "g"
    code, _, _ = _run(capsys, "synth-gen", "--config", cfg, "--size", 16, "--out", out)
    assert code == 0
    written = (out / "config.txt").read_text()
    assert "n=2" in written and "size=16" in written


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("colour=red\n")
    code, _, err = _run(capsys, "synth-gen", "--config", cfg, "--out", tmp_path / "x")
    assert code == 2 and "colour" in err


def test_missing_manifest_fails_cleanly(tmp_path, capsys):
    out = tmp_path / "nothing"
    code, _, err = _run(capsys, "finetune", "--data", tmp_path / "absent.tsv", "--out", out)
    assert code == 2 and err.startswith("error:")
    assert not (out / "history.csv").exists()


def test_generated_run_directory(tmp_path, capsys):
    code, _, _ = _run(capsys, "synth-gen", "--n", 1, "--size", 16, "--out-root", tmp_path)
    assert code == 0
    (run,) = list(tmp_path.iterdir())
    assert run.name.startswith("synth-gen-") and (run / "config.txt").exists()


def test_explicit_validation_manifest(dataset, tmp_path, capsys):
    out = tmp_path / "ft"
    code, _, _ = _run(capsys, "finetune", "--data", dataset, "--val", dataset, "--epochs", 1,
                      "--batch-size", 5, "--checkpoint-every", 1, "--out", out)
    assert code == 0
    roles = [r["role"] for r in _rows(out / "split.csv")]
    assert roles.count("train") == 5 and roles.count("val") == 5


def test_preset_then_file_then_flags(tmp_path, capsys):
    from retina_ssl.cli import build_parser, resolve
    cfg = tmp_path / "c.txt"
    cfg.write_text("lr-max=0.5\n")
    ns = build_parser().parse_args(["finetune", "--preset", "finetune-idrid", "--config", str(cfg),
                                    "--epochs", "7"])
    r = resolve("finetune", ns)
    assert r["schedule"] == "constant" and r["conv-skip"] is True and r["target"] == "EX"
    assert r["lr-max"] == 0.5 and r["epochs"] == 7
    code, _, err = _run(capsys, "finetune", "--preset", "nope", "--out", tmp_path / "x")
    assert code == 2 and "nope" in err
