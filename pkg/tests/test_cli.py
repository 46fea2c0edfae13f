import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from statdetect.cli import load_schema, main, verify_manifest
from statdetect.data import load_csv, synth_digits

BASE = {
    "seed": 1,
    "dataset": {"source": "synth_digits", "per_class": 20},
    "model": {"family": "mlp", "train": {"hidden": [32], "epochs": 10}},
    "attacks": [{"kind": "fgsm", "epsilon": 0.275}],
}


def write_config(path, **changes):
    cfg = json.loads(json.dumps(BASE))
    cfg.update(changes)
    path.write_text(json.dumps(cfg))
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def digests(out):
    return {f["path"]: f["digest"] for f in json.loads((out / "manifest.json").read_text())["files"]}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    cfg = write_config(d / "cfg.json")
    assert main(["train", "--config", cfg, "--out", str(d / "run")]) == 0
    return d, cfg


# ---------------------------------------------------------------- train

def test_train_outputs(trained, capsys):
    d, cfg = trained
    out = d / "run"
    assert (out / "model.json").exists() and verify_manifest(out / "manifest.json")
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0.0 <= metrics["test_accuracy"] <= 1.0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["seed"] == 1 and "train" in man["timings"]
    assert all(len(f["digest"]) == 16 for f in man["files"])


def test_train_logreg_prints_accuracy(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", model={"family": "logreg"})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("test accuracy")][0]
    assert 0.0 <= float(line.split()[-1]) <= 1.0


def test_train_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a/model.json").read_bytes() == (tmp_path / "b/model.json").read_bytes()
    assert digests(tmp_path / "a") == digests(tmp_path / "b")


def test_seed_flag_wins(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["train", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "b/manifest.json").read_text())["config"]["seed"] == 7
    assert digests(tmp_path / "a")["model.json"] != digests(tmp_path / "b")["model.json"]


@pytest.mark.parametrize("change, field", [
    ({"dataset": {"source": "csv", "path": "missing.csv"}}, "dataset.path"),
    ({"dataset": {"source": "idx", "images": "x.idx"}}, "dataset"),
    ({"model": {"family": "forest"}}, "model.family"),
    ({"model": {"family": "mlp", "train": {"dropout": 1.5}}}, "model.train.dropout"),
    ({"attacks": [{"kind": "fgsm"}]}, "attacks.0"),
    ({"colour": "blue"}, "<root>"),
])
def test_config_errors_exit_2(tmp_path, capsys, change, field):
    cfg = write_config(tmp_path / "c.json", **change)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert field in capsys.readouterr().err


def test_unreadable_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert "line 1" in capsys.readouterr().err


def test_schema_is_valid_json_schema():
    import jsonschema

    jsonschema.Draft202012Validator.check_schema(load_schema())


# ---------------------------------------------------------------- attack

def test_attack_outputs(trained):
    d, cfg = trained
    out = d / "atk"
    assert main(["attack", "--config", cfg, "--model", str(d / "run/model.json"), "--epsilon", "0.275",
                 "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["epsilon"] == 0.275 and summary["attack"]["epsilon"] == 0.275
    crafted = rows(out / "adversarial.csv")
    assert list(crafted[0])[:3] == ["original_label", "predicted_label", "features_changed"]
    assert len(crafted) == summary["n"] == 20
    ds = load_csv(out / "adversarial.csv", label_column=0, has_header=True, ignore_columns=[1, 2])
    feats = np.array([[float(r[f"x{j}"]) for j in range(64)] for r in crafted])
    np.testing.assert_array_equal(ds.features, feats)
    assert ds.dim == 64


def test_attack_deterministic(trained, tmp_path):
    d, cfg = trained
    for name in ("a", "b"):
        main(["attack", "--config", cfg, "--model", str(d / "run/model.json"), "--attack", "jsma", "--budget", "5",
              "--out", str(tmp_path / name)])
    assert digests(tmp_path / "a") == digests(tmp_path / "b")


def test_attack_empty_dataset(trained, tmp_path):
    d, _ = trained
    data = tmp_path / "empty.csv"
    data.write_text(",".join([f"x{j}" for j in range(64)] + ["y"]) + "\n")
    assert main(["attack", "--model", str(d / "run/model.json"), "--data", str(data), "--header",
                 "--attack", "fgsm", "--epsilon", "0.1", "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o/adversarial.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("original_label,predicted_label,features_changed,x0")
    assert json.loads((tmp_path / "o/summary.json").read_text())["no_samples"] is True


def test_attack_incompatible(trained, tmp_path, capsys):
    d, cfg = trained
    rc = main(["attack", "--config", cfg, "--model", str(d / "run/model.json"), "--attack", "dt_path",
               "--budget", "3", "--out", str(tmp_path / "o")])
    assert rc == 3 and "decision_tree" in capsys.readouterr().err


def test_attack_missing_parameter(trained, tmp_path):
    d, _ = trained
    assert main(["attack", "--model", str(d / "run/model.json"), "--attack", "jsma",
                 "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------- stat

@pytest.fixture(scope="module")
def pools(tmp_path_factory):
    d = tmp_path_factory.mktemp("pools")
    rng = np.random.default_rng(0)

    def dump(name, x, y):
        np.savetxt(d / name, np.column_stack([x, y]), delimiter=",", fmt="%.17g")
        return str(d / name)

    ref = dump("ref.csv", rng.random((120, 3)), rng.integers(0, 2, 120))
    same = dump("same.csv", rng.random((120, 3)), rng.integers(0, 2, 120))
    far = dump("far.csv", rng.random((120, 3)) + 3, rng.integers(0, 2, 120))
    return d, ref, same, far


def test_stat_identical_files(pools, tmp_path, capsys):
    _, ref, _, _ = pools
    assert main(["stat", "--reference", ref, "--candidate", ref, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "p-value 1" in out
    report = json.loads((tmp_path / "o/report.json").read_text())
    assert report["p_value"] == 1.0 and report["alpha"] == 0.05


def test_stat_sweep_rows(pools, tmp_path):
    _, ref, _, far = pools
    rc = main(["stat", "--reference", ref, "--candidate", far, "--mode", "sweep", "--sizes", "10,50,100",
               "--repetitions", "5", "--bootstrap", "50", "--out", str(tmp_path / "o")])
    assert rc == 0
    table = rows(tmp_path / "o/sweep.csv")
    assert [r["size"] for r in table] == ["10", "50", "100"]
    assert list(table[0]) == ["size", "acceptance_frequency", "R"]
    assert all(float(r["acceptance_frequency"]) == 0.0 and r["R"] == "5" for r in table)


def test_stat_mixture(pools, tmp_path):
    _, ref, same, far = pools
    rc = main(["stat", "--reference", ref, "--candidate", far, "--benign", same, "--mode", "mixture",
               "--sizes", "20", "--fractions", "0,0.5,1", "--repetitions", "10", "--bootstrap", "50",
               "--out", str(tmp_path / "o")])
    assert rc == 0
    table = rows(tmp_path / "o/mixture.csv")
    assert list(table[0]) == ["benign_fraction", "size", "acceptance_frequency", "R"]
    assert [float(r["benign_fraction"]) for r in table] == [0.0, 0.5, 1.0]


def test_stat_classwise_uses_crafted_labels(trained, pools, tmp_path):
    d, cfg = trained
    main(["attack", "--config", cfg, "--model", str(d / "run/model.json"), "--out", str(tmp_path / "atk")])
    ref = tmp_path / "ref.csv"
    r = synth_digits(10, seed=9)
    np.savetxt(ref, np.column_stack([r.features, r.labels]), delimiter=",", fmt="%.17g")
    rc = main(["stat", "--reference", str(ref), "--candidate", str(tmp_path / "atk/adversarial.csv"),
               "--mode", "classwise", "--grouping", "O", "--sizes", "2", "--repetitions", "3",
               "--bootstrap", "20", "--out", str(tmp_path / "o")])
    assert rc == 0
    report = json.loads((tmp_path / "o/report.json").read_text())
    assert report["grouping"] == "O" and report["per_class"]


def test_stat_parse_error(pools, tmp_path, capsys):
    _, ref, _, _ = pools
    bad = tmp_path / "bad.csv"
    bad.write_text("0.1,0.2,0.3,1\n0.1,0.2,1\n")
    assert main(["stat", "--reference", ref, "--candidate", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert "row 2" in capsys.readouterr().err


def test_stat_needs_sizes_for_sweep(pools, tmp_path):
    _, ref, same, _ = pools
    assert main(["stat", "--reference", ref, "--candidate", same, "--mode", "sweep",
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["stat", "--reference", ref, "--candidate", same, "--mode", "sweep", "--sizes", "1",
                 "--out", str(tmp_path / "o")]) == 2


def test_stat_deterministic(pools, tmp_path):
    _, ref, same, _ = pools
    for name in ("a", "b"):
        main(["stat", "--reference", ref, "--candidate", same, "--mode", "sweep", "--sizes", "10,20",
              "--repetitions", "5", "--bootstrap", "50", "--seed", "3", "--out", str(tmp_path / name)])
    assert digests(tmp_path / "a") == digests(tmp_path / "b")


# ---------------------------------------------------------------- defend

@pytest.fixture(scope="module")
def defended(tmp_path_factory):
    d = tmp_path_factory.mktemp("defend")
    cfg = write_config(d / "cfg.json", defense={"eval_attacks": [{"kind": "fgsm", "epsilon": 0.275},
                                                                 {"kind": "jsma", "budget": 5}]})
    assert main(["defend", "--config", cfg, "--adaptive", "--blackbox", "bb,bb+1", "--out", str(d / "o")]) == 0
    return d, cfg


def test_defend_breakdown_sums_to_one(defended):
    d, _ = defended
    table = rows(d / "o/breakdown.csv")
    assert len(table) == 2
    for r in table:
        assert float(r["recovered"]) + float(r["detected"]) + float(r["error"]) == pytest.approx(1.0, abs=1e-12)


def test_defend_adaptive_and_blackbox(defended):
    d, _ = defended
    adaptive = rows(d / "o/adaptive.csv")
    assert [(r["train_attack"], r["eval_attack"]) for r in adaptive] == [("fgsm:0.275", "fgsm"),
                                                                       ("fgsm:0.275", "jsma")]
    bb = rows(d / "o/blackbox.csv")
    assert {r["substitute"] for r in bb} == {"bb", "bb+1"}
    assert len(bb) == 4


def test_defend_confusion_and_manifest(defended):
    d, _ = defended
    cm = rows(d / "o/confusion.csv")
    assert list(cm[0])[0] == "true_label" and len(cm) == 11 and len(cm[0]) == 12
    base = rows(d / "o/confusion_base.csv")
    assert len(base) == 10
    assert verify_manifest(d / "o/manifest.json")
    metrics = json.loads((d / "o/metrics.json").read_text())
    assert 0 <= metrics["false_outlier_rate"] <= 1


def test_defend_deterministic(defended):
    d, cfg = defended
    assert main(["defend", "--config", cfg, "--adaptive", "--blackbox", "bb,bb+1", "--out", str(d / "again")]) == 0
    assert digests(d / "o") == digests(d / "again")


def test_defend_needs_attacks(tmp_path):
    cfg = write_config(tmp_path / "c.json", attacks=[])
    assert main(["defend", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------- repro

def test_repro_table1(tmp_path, capsys):
    assert main(["repro", "table1", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o/report.json").read_text())
    names = {c["name"]: c["passed"] for c in report["checks"]}
    assert "mmd_fgsm_large_gt_benign" in names
    table = rows(tmp_path / "o/table1.csv")
    assert {"manipulation", "parameters", "mmd", "ed"} <= set(table[0])
    assert "PASS" in capsys.readouterr().out or "FAIL" in (tmp_path / "o/report.txt").read_text()


def test_repro_fig3(tmp_path):
    assert main(["repro", "fig3", "--repetitions", "20", "--bootstrap", "100", "--out", str(tmp_path / "o")]) == 0
    table = rows(tmp_path / "o/fig3.csv")
    assert "benign_fraction" in table[0]
    report = json.loads((tmp_path / "o/report.json").read_text())
    assert report["checks"][0]["name"] == "acceptance_monotone_in_benign_fraction"


def test_repro_deterministic(tmp_path):
    for name in ("a", "b"):
        main(["repro", "table1", "--seed", "2", "--out", str(tmp_path / name)])
    assert digests(tmp_path / "a") == digests(tmp_path / "b")


def test_repro_unknown_table(capsys):
    assert main(["repro", "table9"]) == 2
    err = capsys.readouterr().err
    for name in ("table1", "table2a", "table2b", "table3", "table5", "table6", "fig3"):
        assert name in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "statdetect", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "statdetect" in proc.stdout
