import json

import pytest

from domgen.cli import main

GEN = {
    "mother": {"shift_magnitude": 2.0, "base_classes": 8, "input_dim": 6},
    "lt": {"N": 4, "K": 3, "A": 20, "n_val_domains": 1, "n_test_domains": 2,
           "train_eval_per_class": 5, "val_per_class": 5, "test_per_class": 10},
    "seed": 1,
}
PROTO = {"proto": {"T": 20, "d_D": 8, "N_s": 4, "N_q": 4, "hidden": [16], "mixup_enabled": True}}
TRAIN = {"train": {"T": 30, "d_feat": 16, "d_mlp": 16, "penalty": "MMD"}, "variant": "Prototype"}
ABLATE = {
    "experiment": {
        "mother": {"base_classes": 8, "input_dim": 6},
        "lt": {"N": 4, "K": 3, "A": 20, "n_val_domains": 1, "n_test_domains": 2,
               "train_eval_per_class": 5, "val_per_class": 5, "test_per_class": 10},
        "proto": {"T": 10, "d_D": 8, "N_s": 4, "N_q": 4, "hidden": [16]},
        "train": {"T": 20, "d_feat": 16, "d_mlp": 16},
    },
    "seeds": [0, 1],
    "f_values": [0.1, 1.0],
}


def cfg(tmp_path, name, doc):
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(doc))
    return str(p)


def run_pipeline(tmp_path, tag):
    root = tmp_path / tag
    assert main(["gen", "--config", cfg(tmp_path, "gen", GEN), "--out", str(root / "g"), "--no-timestamp"]) == 0
    data = str(root / "g" / "dataset.jsonl")
    assert main(["train-proto", "--config", cfg(tmp_path, "proto", PROTO), "--data", data,
                 "--out", str(root / "p"), "--no-timestamp"]) == 0
    assert main(["train", "--config", cfg(tmp_path, "train", TRAIN), "--data", data, "--proto", str(root / "p"),
                 "--out", str(root / "m"), "--no-timestamp"]) == 0
    assert main(["eval", "--model", str(root / "m" / "model.json"), "--data", data,
                 "--out", str(root / "e"), "--no-timestamp"]) == 0
    return root


def all_files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    first = all_files(run_pipeline(base, "a"))
    root = run_pipeline(base, "a")
    return root, first


def test_pipeline_outputs(pipelines):
    root, _ = pipelines
    names = {str(p) for p in all_files(root)}
    for expected in ("g/dataset.jsonl", "g/manifest.json", "p/embedding.json", "p/prototypes.json",
                     "p/proto_log.csv", "m/model.json", "m/train_log.csv"):
        assert expected in names
    reports = [n for n in names if n.startswith("e/report_") and n.endswith(".json")]
    assert len(reports) == 1
    report = json.loads((root / reports[0]).read_text())
    assert set(report["aggregate"]) == {"train", "val", "test"}
    assert len((root / "m" / "train_log.csv").read_text().splitlines()) == 31


def test_byte_identical_reruns(pipelines):
    root, first = pipelines
    assert all_files(root) == first


def test_timestamp_present_by_default(tmp_path):
    assert main(["gen", "--config", cfg(tmp_path, "gen", GEN), "--out", str(tmp_path / "g")]) == 0
    assert "created" in json.loads((tmp_path / "g" / "manifest.json").read_text())


def test_eval_prototypes_from_eval_inputs(pipelines, tmp_path):
    root, _ = pipelines
    assert main(["eval", "--model", str(root / "m" / "model.json"), "--data", str(root / "g" / "dataset.jsonl"),
                 "--out", str(tmp_path), "--proto-source", "eval"]) == 0


def test_unknown_config_key(tmp_path, capsys):
    assert main(["gen", "--config", cfg(tmp_path, "bad", {"lt": {"bogus": 1}}), "--out", str(tmp_path / "o")]) == 2
    assert "lt.bogus" in capsys.readouterr().err


def test_bad_config_value(tmp_path):
    assert main(["gen", "--config", cfg(tmp_path, "bad", {"lt": {"K": 500}}), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["gen", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 3


def test_missing_dataset(tmp_path):
    assert main(["train-proto", "--config", cfg(tmp_path, "proto", PROTO), "--data", str(tmp_path / "none.jsonl"),
                 "--out", str(tmp_path / "o")]) == 3


def test_numeric_failure(pipelines, tmp_path):
    root, _ = pipelines
    boom = {"train": {"T": 50, "sgd": {"learning_rate": 1e30}}, "variant": "None"}
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--config", cfg(tmp_path, "boom", boom), "--data", str(root / "g" / "dataset.jsonl"),
                     "--out", str(tmp_path / "o")])
    assert code == 4


def test_unknown_ablation(tmp_path, capsys):
    assert main(["ablate", "bogus", "--config", cfg(tmp_path, "a", ABLATE), "--out", str(tmp_path / "o")]) == 2
    assert "tail-index" in capsys.readouterr().err


def test_eval_without_test_split(pipelines, tmp_path):
    root, _ = pipelines
    lines = (root / "g" / "dataset.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    header["splits"] = {k: v for k, v in header["splits"].items() if k != "test"}
    kept = [json.dumps(header)] + [ln for ln in lines[1:] if json.loads(ln)["split"] != "test"]
    data = tmp_path / "notest.jsonl"
    data.write_text("\n".join(kept) + "\n")
    assert main(["eval", "--model", str(root / "m" / "model.json"), "--data", str(data), "--out", str(tmp_path / "o")]) == 2


def test_prototype_variant_needs_proto_dir(pipelines, tmp_path):
    root, _ = pipelines
    assert main(["train", "--config", cfg(tmp_path, "t", TRAIN), "--data", str(root / "g" / "dataset.jsonl"),
                 "--out", str(tmp_path / "o")]) == 2


def test_ablate_tail_index(tmp_path):
    out = tmp_path / "o"
    assert main(["ablate", "tail-index", "--config", cfg(tmp_path, "a", ABLATE), "--out", str(out), "--seed", "0"]) == 0
    csvs = list(out.glob("tail-index_*_s0.csv"))
    assert len(csvs) == 1
    lines = csvs[0].read_text().splitlines()
    assert len(lines) == 1 + 8 + 4


def test_consistency_command(tmp_path):
    doc = {"experiment": ABLATE["experiment"], "n_grid": [16, 64, 256], "trials": 5}
    out = tmp_path / "o"
    assert main(["consistency", "--config", cfg(tmp_path, "c", doc), "--out", str(out)]) == 0
    curve = json.loads(next(out.glob("consistency_*.json")).read_text())
    assert curve["n"] == [16, 64, 256] and curve["slope"] < 0
