import hashlib
import json
import shutil

import pytest

from chainsight.cli import main
from chainsight.datasetgen import DISTRIBUTION_NAMES
from chainsight.fixture import generate_fixture
from chainsight.ingest import read_blocks, validate_chain
from chainsight.pipeline import STORE_ENV


def tree_digest(root):
    """sha256 of every file below root, keyed by relative path."""
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.suffix != ".lock"}


@pytest.fixture
def workdir(fixture_dir, tmp_path):
    dst = tmp_path / "run"
    shutil.copytree(fixture_dir, dst, ignore=shutil.ignore_patterns("store"))
    return dst


def run(workdir, *args):
    return main([args[0], "--config", str(workdir / "config.json"), *args[1:]])


def test_fixture_is_deterministic(tmp_path):
    generate_fixture(tmp_path / "a", seed=3, n_blocks=50, n_accounts=20)
    generate_fixture(tmp_path / "b", seed=3, n_blocks=50, n_accounts=20)
    generate_fixture(tmp_path / "c", seed=4, n_blocks=50, n_accounts=20)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_fixture_chain_is_valid(fixture_dir):
    blocks = list(read_blocks(fixture_dir / "blocks.jsonl"))
    assert len(blocks) == 1000
    assert validate_chain(blocks).ok


def test_fixture_rejects_zero_blocks(tmp_path):
    with pytest.raises(ValueError):
        generate_fixture(tmp_path, n_blocks=0)
    assert main(["generate-fixture", "--out", str(tmp_path / "x"), "--n-blocks", "0"]) == 1


def test_dataset_command(workdir, capsys):
    for stage in ("ingest", "properties", "distributions"):
        assert run(workdir, stage) == 0
    assert run(workdir, "dataset", "--preset", "8", "--wn", "8", "--norm", "image",
               "--target", "highPrice_rel") == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    data = open(out, "rb").read()
    assert data[:4] == b"BPD1"
    header = json.loads(data[8:8 + int.from_bytes(data[4:8], "little")])
    assert [p["name"] for p in header["properties"]] == list(DISTRIBUTION_NAMES)
    assert header["input_shape"] == [88 + 88 + 23 + 3, 92, 8]
    assert header["target"]["name"] == "highPrice_rel"


def test_evaluate_persistence_on_prices(workdir, capsys):
    assert run(workdir, "ingest") == 0
    assert run(workdir, "properties") == 0
    common = ("--preset", "3", "--target", "highPrice", "--norm", "prop", "--model", "persistence")
    assert run(workdir, "dataset", *common) == 0
    capsys.readouterr()
    assert run(workdir, "evaluate", *common) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["r2"] > 0.9
    assert (workdir / "store" / "artifacts" / "predictions.csv").exists()


def test_run_all_matches_individual_stages(fixture_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        shutil.copytree(fixture_dir, d, ignore=shutil.ignore_patterns("store"))
    assert run(a, "run-all") == 0
    for stage in ("ingest", "properties", "distributions", "dataset", "train", "evaluate"):
        assert run(b, stage) == 0
    da, db = tree_digest(a / "store"), tree_digest(b / "store")
    assert da == db
    assert "artifacts/metrics.json" in da and "artifacts/predictions.csv" in da


def test_threads_do_not_change_output(fixture_dir, tmp_path):
    digests = []
    for n in (1, 2):
        d = tmp_path / f"t{n}"
        shutil.copytree(fixture_dir, d, ignore=shutil.ignore_patterns("store"))
        for stage in ("ingest", "properties", "distributions"):
            assert run(d, stage, "--threads", str(n)) == 0
        digests.append(tree_digest(d / "store"))
    assert digests[0] == digests[1]


def test_stages_are_idempotent(workdir):
    assert run(workdir, "ingest") == 0
    assert run(workdir, "properties") == 0
    first = tree_digest(workdir / "store")
    assert run(workdir, "ingest") == 0
    assert run(workdir, "properties") == 0
    assert tree_digest(workdir / "store") == first


def test_env_store_override(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv(STORE_ENV, str(tmp_path / "envstore"))
    assert run(workdir, "ingest") == 0
    assert (tmp_path / "envstore" / "artifacts" / "ingest.json").exists()
    assert not (workdir / "store").exists()
    assert run(workdir, "ingest", "--store", str(tmp_path / "flagstore")) == 0
    assert (tmp_path / "flagstore" / "artifacts" / "ingest.json").exists()


def test_exit_codes(workdir, tmp_path):
    # missing prior stage output is a validation error
    assert run(workdir, "properties") == 1
    assert run(workdir, "train") == 1
    # unknown config field
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["ingest", "--config", str(bad)]) == 1
    # a referenced file that does not exist fails validation
    cfg = json.loads((workdir / "config.json").read_text())
    cfg["blocks"] = str(tmp_path / "nowhere.jsonl")
    missing = workdir / "missing.json"
    missing.write_text(json.dumps(cfg))
    assert main(["ingest", "--config", str(missing)]) == 1
    # a store that cannot be created is an I/O error
    blocker = tmp_path / "not_a_dir"
    blocker.write_text("x")
    assert run(workdir, "ingest", "--store", str(blocker / "store")) == 2


def test_malformed_input_exit_code(workdir):
    with open(workdir / "blocks.jsonl", "a") as fh:
        fh.write("{broken\n")
    assert run(workdir, "ingest") == 1
    assert run(workdir, "ingest", "--skip-bad-records") == 0
    summary = json.loads((workdir / "store" / "artifacts" / "ingest.json").read_text())
    assert summary["skipped"]["blocks"] == 1
