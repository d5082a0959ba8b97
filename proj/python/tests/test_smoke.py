import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

import mkbe

DATA = Path(os.environ.get("MKBE_TEST_DATA", Path(__file__).resolve().parents[2] / "tests" / "data"))


@pytest.fixture()
def tiny(tmp_path):
    shutil.copytree(DATA / "tiny", tmp_path / "tiny")
    return tmp_path / "tiny" / "config.json"


def test_git_blob_sha1():
    assert mkbe.git_blob_sha1(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_build_kb_stats(tiny):
    kb = mkbe.build_kb(str(tiny))
    assert kb.num_entities == 40
    assert kb.modality("born") == "numeric"
    assert kb.num_triples("test") == 15
    stats = kb.stats()
    assert stats["entities"] == 40
    path = tiny.parent / "copy.kb"
    kb.save(str(path))
    assert mkbe.KB.load(str(path)).relations() == kb.relations()


def test_cli_pipeline_and_checkpoint(tiny):
    code, out, err = mkbe.run("train", str(tiny), seed=2)
    assert code == 0, err
    ckpt = out.strip()
    assert ckpt.endswith("checkpoint.ckpt") and "-s2" in ckpt
    code, out, err = mkbe.run("eval", str(tiny), seed=2)
    assert code == 0, err
    summary = json.loads(out)

    kb = mkbe.build_kb(str(tiny))
    ck = mkbe.Checkpoint.load(ckpt)
    assert ck.config["model"]["dim"] == 8
    again = ck.evaluate(kb, split="test", task="links", ks=[1, 3, 10])
    assert again["mrr"] == pytest.approx(summary["mrr"], abs=1e-12)
    scores = ck.score_objects(kb, "p0", "knows")
    assert scores.shape == (40,)
    assert np.all(np.isfinite(scores))


def test_fit_in_process(tiny):
    kb = mkbe.build_kb(str(tiny))
    config = {"model": {"dim": 8}, "epochs": 2, "eval_every": 2, "batch_size": 32, "groups": ["S"]}
    ck = mkbe.Checkpoint.fit(kb, config)
    assert ck.epoch >= 1
    assert 0.0 < ck.valid_mrr <= 1.0


def test_errors_map_to_exit_codes_and_exceptions(tiny, tmp_path):
    assert mkbe.run("eval", str(tiny))[0] == 3
    assert mkbe.run("prepare", str(tmp_path / "missing.json"))[0] == 2
    kb = mkbe.build_kb(str(tiny))
    with pytest.raises(mkbe.InputError):
        kb.modality("nope")
    with pytest.raises(ValueError):
        mkbe.Checkpoint.fit(kb, {"epochs": 1, "typo": 3})
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(mkbe.StateError):
        mkbe.Checkpoint.load(str(bad))
