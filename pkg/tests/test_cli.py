import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from manage import cli

TINY_CONFIG = {
    "decoder": {"num_queries": 4, "num_layers": 1, "model_dim": 16, "num_heads": 2, "mlp_hidden": 16},
    "encoder": {"dim": 16, "grid_side": 6},
    "train": {"epochs": 1, "batch_size": 4, "lr_max": 1e-3, "lr_min": 1e-5, "seed": 7},
}


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner(mix_stderr=False)


@pytest.fixture
def generated(runner, tmp_path) -> Path:
    out = tmp_path / "data"
    result = runner.invoke(cli, ["gen-data", "--out", str(out), "--train", "9", "--val", "1", "--test", "2", "--seed", "7"])
    assert result.exit_code == 0, result.stderr
    return out


@pytest.fixture
def checkpoint(runner, tmp_path, generated) -> Path:
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")
    ckpt = tmp_path / "model.json"
    result = runner.invoke(cli, ["train", "--data", str(generated), "--config", str(config), "--out", str(ckpt)])
    assert result.exit_code == 0, result.stderr
    return ckpt


def test_gen_data_is_deterministic(runner, tmp_path):
    for name in ("a", "b"):
        result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path / name), "--train", "2", "--val", "0", "--test", "1", "--seed", "3"])
        assert result.exit_code == 0
    left = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    right = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert left == right
    for rel in left:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_gen_data_seed_from_environment(runner, tmp_path):
    args = ["--train", "1", "--val", "0", "--test", "0", "--no-images"]
    runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "env"), *args], env={"CROPFORGE_SEED": "21"})
    runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "flag"), "--seed", "21", *args])
    sample = "train/train-00000.json"
    assert (tmp_path / "env" / sample).read_bytes() == (tmp_path / "flag" / sample).read_bytes()


def test_gen_data_empty_train_warns(runner, tmp_path):
    result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "d"), "--train", "0", "--val", "0", "--test", "1"])
    assert result.exit_code == 0
    assert "warning" in result.stderr


def test_gen_data_missing_vocab(runner, tmp_path):
    result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "d"), "--vocab", str(tmp_path / "none.txt")])
    assert result.exit_code == 2
    assert "vocabulary file not found" in result.stderr


def test_bad_flag_value_is_a_usage_error(runner, tmp_path):
    result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "d"), "--train", "-3"])
    assert result.exit_code == 2


def test_train_writes_checkpoint_and_log(checkpoint):
    doc = json.loads(checkpoint.read_text(encoding="utf-8"))
    assert doc["metadata"]["epoch"] == 1
    assert len(doc["metadata"]["config_hash"]) == 64
    log = checkpoint.with_name(checkpoint.name + ".log.jsonl")
    records = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
    assert [r["epoch"] for r in records] == [1]


def test_train_rejects_bad_config(runner, tmp_path, generated):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"train": {"lr_max": -1.0}}), encoding="utf-8")
    result = runner.invoke(cli, ["train", "--data", str(generated), "--config", str(config), "--out", str(tmp_path / "m.json")])
    assert result.exit_code == 2
    assert "invalid configuration" in result.stderr


def test_resume_continues_epochs(runner, tmp_path, generated, checkpoint):
    config = tmp_path / "tiny.json"
    out = tmp_path / "resumed.json"
    result = runner.invoke(
        cli,
        ["train", "--data", str(generated), "--config", str(config), "--out", str(out), "--resume", str(checkpoint), "--epochs", "2"],
    )
    assert result.exit_code == 0, result.stderr
    assert json.loads(out.read_text(encoding="utf-8"))["metadata"]["epoch"] == 2


def test_eval_checkpoint_is_reproducible(runner, tmp_path, generated, checkpoint):
    reports = []
    for name in ("r1.json", "r2.json"):
        report = tmp_path / name
        result = runner.invoke(cli, ["eval", "--data", str(generated), "--ckpt", str(checkpoint), "--report", str(report)])
        assert result.exit_code == 0, result.stderr
        reports.append(report.read_bytes())
    assert reports[0] == reports[1]
    doc = json.loads(reports[0])
    assert doc["units"] == 2
    assert set(doc["aggregates"]) == {"IoU-Mean", "IoU-Max", "ACC_1/5", "ACC_1/10"}


def test_eval_baselines(runner, tmp_path, generated):
    oracle = tmp_path / "oracle.json"
    csv_path = tmp_path / "oracle.csv"
    result = runner.invoke(
        cli, ["eval", "--data", str(generated / "test"), "--baseline", "oracle", "--report", str(oracle), "--csv", str(csv_path)]
    )
    assert result.exit_code == 0, result.stderr
    assert json.loads(oracle.read_text())["aggregates"]["ACC_1/5"] == 1.0
    assert csv_path.read_text().startswith("metric,value,units")

    rand = tmp_path / "random.json"
    result = runner.invoke(cli, ["eval", "--data", str(generated), "--baseline", "random", "--metrics", "iou", "--report", str(rand)])
    assert result.exit_code == 0
    assert set(json.loads(rand.read_text())["aggregates"]) == {"IoU-Mean", "IoU-Max"}


def test_eval_needs_exactly_one_source(runner, tmp_path, generated):
    result = runner.invoke(cli, ["eval", "--data", str(generated), "--report", str(tmp_path / "r.json")])
    assert result.exit_code == 2
    assert "exactly one" in result.stderr


def test_eval_unknown_metric(runner, tmp_path, generated):
    result = runner.invoke(
        cli, ["eval", "--data", str(generated), "--baseline", "oracle", "--metrics", "f1", "--report", str(tmp_path / "r.json")]
    )
    assert result.exit_code == 2


def test_crop_writes_ranked_crops(runner, tmp_path, generated, checkpoint):
    split = generated / "test"
    image = split / "images" / "test-00000.ppm"
    meta = split / "test-00000.json"
    text = json.loads(meta.read_text())["annotations"][0]["text"]
    out = tmp_path / "crops"
    result = runner.invoke(
        cli,
        ["crop", "--image", str(image), "--meta", str(meta), "--text", text, "--ckpt", str(checkpoint), "--top-k", "2", "--out", str(out)],
    )
    assert result.exit_code == 0, result.stderr
    doc = json.loads((out / "crops.json").read_text())
    assert [c["rank"] for c in doc["crops"]] == [1, 2]
    assert doc["crops"][0]["score"] >= doc["crops"][1]["score"]
    assert (out / "crop_1.ppm").is_file() and (out / "crop_2.ppm").is_file()


def test_crop_with_image_query(runner, tmp_path, generated, checkpoint):
    split = generated / "test"
    result = runner.invoke(
        cli,
        [
            "crop",
            "--image", str(split / "images" / "test-00000.ppm"),
            "--meta", str(split / "test-00000.json"),
            "--query-image", str(split / "images" / "test-00001.ppm"),
            "--query-meta", str(split / "test-00001.json"),
            "--ckpt", str(checkpoint),
            "--out", str(tmp_path / "crops"),
        ],
    )
    assert result.exit_code == 0, result.stderr
    assert json.loads((tmp_path / "crops" / "crops.json").read_text())["config"]["query_mode"] == "image"


def test_crop_rejects_top_k_above_queries(runner, tmp_path, generated, checkpoint):
    split = generated / "test"
    result = runner.invoke(
        cli,
        [
            "crop",
            "--image", str(split / "images" / "test-00000.ppm"),
            "--meta", str(split / "test-00000.json"),
            "--text", "a dog",
            "--ckpt", str(checkpoint),
            "--top-k", "5",
            "--out", str(tmp_path / "crops"),
        ],
    )
    assert result.exit_code == 2


def test_crop_missing_checkpoint(runner, tmp_path, generated):
    split = generated / "test"
    result = runner.invoke(
        cli,
        [
            "crop",
            "--image", str(split / "images" / "test-00000.ppm"),
            "--meta", str(split / "test-00000.json"),
            "--text", "a dog",
            "--ckpt", str(tmp_path / "absent.json"),
            "--out", str(tmp_path / "crops"),
        ],
    )
    assert result.exit_code == 2


def test_gradcheck_command(runner):
    result = runner.invoke(cli, ["gradcheck", "--trials", "1", "--composition-trials", "1"])
    assert result.exit_code == 0, result.stderr
    assert "checks passed" in result.stdout


def test_eval_external_predictions(runner, tmp_path, generated):
    from cropforge.evalsuite import oracle_predictions, save_predictions
    from cropforge.models.core import load_manifest, load_samples

    samples = load_samples(load_manifest(generated / "test"))
    preds = save_predictions(tmp_path / "preds.json", oracle_predictions(samples))
    report = tmp_path / "r.json"
    result = runner.invoke(cli, ["eval", "--data", str(generated), "--predictions", str(preds), "--report", str(report)])
    assert result.exit_code == 0, result.stderr
    assert json.loads(report.read_text())["config"]["predictions"] == str(preds)


def test_data_dir_from_environment(runner, tmp_path, generated):
    report = tmp_path / "r.json"
    result = runner.invoke(cli, ["eval", "--baseline", "oracle", "--report", str(report)], env={"CROPFORGE_DATA_DIR": str(generated)})
    assert result.exit_code == 0, result.stderr
