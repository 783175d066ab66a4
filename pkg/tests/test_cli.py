import csv
import json

import pytest

from c2detect.cli import EXIT_DATA, EXIT_MODEL, EXIT_USAGE, main
from c2detect.features import FEATURE_NAMES


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def day(tmp_path_factory):
    d = tmp_path_factory.mktemp("day")
    assert main(["--seed", "4", "synth", "--bot-hosts", "100", "--normal-hosts", "900",
                 "--out-flows", str(d / "flows.csv"), "--out-truth", str(d / "truth.csv")]) == 0
    assert main(["extract", str(d / "flows.csv"), "--labels", str(d / "truth.csv"),
                 "--out", str(d / "feat.csv")]) == 0
    assert main(["--seed", "1", "train", str(d / "feat.csv"), "--n-trees", "20", "--mtry", "5",
                 "--training-set", str(d / "train.csv"), "--report", str(d / "report.json"),
                 "--out", str(d / "model.json")]) == 0
    return d


def test_extract_one_row_per_host(day):
    rows = rows_of(day / "feat.csv")
    assert rows[0] == ["host_ip", "label", *FEATURE_NAMES]
    assert len(rows) == 1001
    labels = [r[1] for r in rows[1:]]
    assert labels.count("unknown") == 900


def test_extract_without_labels_leaves_column_empty(day, tmp_path):
    assert main(["extract", str(day / "flows.csv"), "--out", str(tmp_path / "f.csv")]) == 0
    assert {r[1] for r in rows_of(tmp_path / "f.csv")[1:]} == {""}


def test_empty_flow_file(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    assert main(["extract", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "f.csv")]) == 0
    assert rows_of(tmp_path / "f.csv") == [["host_ip", "label", *FEATURE_NAMES]]


def test_corrupt_line_lenient_and_strict(day, tmp_path):
    lines = (day / "flows.csv").read_text().splitlines()[:50]
    lines.insert(10, "not,a,flow")
    (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
    assert main(["extract", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "f.csv")]) == 0
    manifest = json.loads((tmp_path / "f.csv.manifest.json").read_text())
    assert manifest["stats"]["skipped_lines"] == 1 and manifest["stats"]["lines"] == 51
    assert main(["--strict", "extract", str(tmp_path / "bad.csv"),
                 "--out", str(tmp_path / "g.csv")]) == EXIT_DATA


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", str(tmp_path / "x.csv")]) == EXIT_USAGE  # --out missing
    (tmp_path / "bad.toml").write_text("n_trees = [")
    assert main(["synth", "--config", str(tmp_path / "bad.toml"), "--out-flows",
                 str(tmp_path / "a"), "--out-truth", str(tmp_path / "b")]) == EXIT_USAGE


def test_missing_input_is_data_error(tmp_path):
    assert main(["extract", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "f.csv")]) == EXIT_DATA


def test_single_class_training_fails(day, tmp_path):
    (tmp_path / "bl.csv").write_text("")
    assert main(["train", str(day / "feat.csv"), "--labels", str(tmp_path / "bl.csv"),
                 "--out", str(tmp_path / "m.json")]) == EXIT_DATA
    assert not (tmp_path / "m.json").exists()


def test_train_outputs(day):
    report = json.loads((day / "report.json").read_text())
    assert report["n_malicious"] == 100 and report["n_rows"] == 1000
    manifest = json.loads((day / "model.json.manifest.json").read_text())
    for key in ("command", "inputs", "config", "config_digest", "seed", "tool_version",
                "started_at", "finished_at", "outputs", "stats"):
        assert key in manifest
    assert manifest["seed"] == 1 and manifest["command"] == "train"


def test_no_balance_changes_model(day, tmp_path):
    args = ["--seed", "1", "train", str(day / "feat.csv"), "--n-trees", "20", "--mtry", "5"]
    assert main(args + ["--no-balance", "--out", str(tmp_path / "m.json")]) == 0
    assert (tmp_path / "m.json").read_bytes() != (day / "model.json").read_bytes()
    doc = json.loads((tmp_path / "m.json.manifest.json").read_text())
    assert doc["config"]["train"]["balance"] is False


def test_predict_threshold(day, tmp_path):
    for t in ("0.5", "0.9"):
        assert main(["predict", str(day / "model.json"), str(day / "feat.csv"), "--threshold", t,
                     "--out", str(tmp_path / f"p{t}.csv")]) == 0
    loose, strict = (rows_of(tmp_path / f"p{t}.csv") for t in ("0.5", "0.9"))
    assert loose[0] == ["host_ip", "label", "score"] and len(loose) == 1001
    scores = [float(r[2]) for r in strict[1:]]
    assert scores == sorted(scores, reverse=True)
    for _, label, score in strict[1:]:
        assert (label == "malicious") == (float(score) >= 0.9)
    n = lambda rows: sum(r[1] == "malicious" for r in rows[1:])
    assert n(strict) <= n(loose)


def test_predict_empty_features(day, tmp_path):
    (tmp_path / "e.csv").write_text(",".join(["host_ip", "label", *FEATURE_NAMES]) + "\n")
    assert main(["predict", str(day / "model.json"), str(tmp_path / "e.csv"),
                 "--out", str(tmp_path / "p.csv")]) == 0
    assert rows_of(tmp_path / "p.csv") == [["host_ip", "label", "score"]]


def test_schema_mismatch(day, tmp_path):
    rows = rows_of(day / "feat.csv")
    with open(tmp_path / "short.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(r[:-1] for r in rows)
    assert main(["predict", str(day / "model.json"), str(tmp_path / "short.csv"),
                 "--out", str(tmp_path / "p.csv")]) == EXIT_MODEL
    (tmp_path / "m.json").write_text("{}")
    assert main(["predict", str(tmp_path / "m.json"), str(day / "feat.csv"),
                 "--out", str(tmp_path / "p.csv")]) == EXIT_MODEL


def test_evaluate(day, tmp_path, capsys):
    assert main(["evaluate", str(day / "model.json"), str(day / "feat.csv"),
                 "--labels", str(day / "truth.csv"), "--out", str(tmp_path / "e.json")]) == 0
    cm = json.loads((tmp_path / "e.json").read_text())
    assert cm["tp"] + cm["fn"] == 100 and cm["tn"] + cm["fp"] == 900
    assert (tmp_path / "e.json.manifest.json").exists()


def test_explain_defaults(day, tmp_path):
    out = tmp_path / "x"
    assert main(["explain", str(day / "model.json"), str(day / "train.csv"),
                 "--out-dir", str(out), "--repeats", "1"]) == 0
    assert len(list(out.glob("pdp_*.csv"))) == 2
    table = rows_of(out / "multiway_importance.csv")
    assert len(table) == len(FEATURE_NAMES) + 1
    assert sum(r[-1] == "1" for r in table[1:]) == 11
    assert (out / "summary.json").exists() and (out / "explain.manifest.json").exists()


def test_explain_every_feature(day, tmp_path):
    args = ["explain", str(day / "model.json"), str(day / "train.csv"),
            "--out-dir", str(tmp_path), "--repeats", "1"]
    for f in FEATURE_NAMES:
        args += ["--pdp-feature", f]
    assert main(args) == 0
    assert len(list(tmp_path.glob("pdp_*.csv"))) == 27


def test_explain_unknown_feature(day, tmp_path):
    assert main(["explain", str(day / "model.json"), str(day / "train.csv"), "--out-dir",
                 str(tmp_path), "--pdp-feature", "nonsense"]) == EXIT_MODEL


def test_explain_one_tree_model(day, tmp_path):
    assert main(["train", str(day / "feat.csv"), "--n-trees", "1", "--training-set",
                 str(tmp_path / "t.csv"), "--out", str(tmp_path / "m.json")]) == 0
    assert main(["explain", str(tmp_path / "m.json"), str(tmp_path / "t.csv"),
                 "--out-dir", str(tmp_path / "x"), "--repeats", "1"]) == 0


def test_threads_do_not_change_model(day, tmp_path):
    base = ["--seed", "1", "train", str(day / "feat.csv"), "--n-trees", "20", "--mtry", "5"]
    assert main(["--threads", "3"] + base + ["--out", str(tmp_path / "m.json")]) == 0
    assert (tmp_path / "m.json").read_bytes() == (day / "model.json").read_bytes()


def test_config_digest_stable(day, tmp_path):
    for name in ("a", "b"):
        assert main(["extract", str(day / "flows.csv"), "--out", str(tmp_path / name)]) == 0
    digest = lambda n: json.loads((tmp_path / f"{n}.manifest.json").read_text())["config_digest"]
    assert digest("a") == digest("b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_export_timeseries_and_match(day, tmp_path):
    assert main(["export-timeseries", str(day / "flows.csv"), "--labels", str(day / "truth.csv"),
                 "--out", str(tmp_path / "ts.csv")]) == 0
    rows = rows_of(tmp_path / "ts.csv")
    assert len(rows[0]) == 866 and len(rows) == 1001
    assert main(["predict", str(day / "model.json"), str(day / "feat.csv"),
                 "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["match-blacklist", str(tmp_path / "p.csv"), "--blacklist", str(day / "truth.csv"),
                 "--out", str(tmp_path / "m.csv"), "--summary", str(tmp_path / "m.json")]) == 0
    summary = json.loads((tmp_path / "m.json").read_text())
    assert summary["match_rate"] >= 0.8
