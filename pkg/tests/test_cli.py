import json
import subprocess
import sys

import pytest

from alignlm.cli import main
from alignlm.data import load_manifest
from alignlm.metrics import read_predictions, srcc
from alignlm.numeric import Checkpoint
from alignlm.pipeline import read_log


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen-synthetic followed by the three stages, all through the command line."""
    out = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--n", "40", "--seed", "3", "--teacher-seed", "3", "--out-dir", str(out)]) == 0
    for stage in (1, 2, 3):
        cfg = out / f"stage{stage}.cfg"
        assert main([f"stage{stage}", "--config", str(cfg), "--out", str(out / f"stage{stage}.ck")]) == 0
    return out


def test_gen_synthetic_writes_corpus_and_configs(chain, capsys):
    names = {p.name for p in chain.iterdir()}
    for name in ("pretrain.tsv", "pseudo_val.tsv", "finetune_train.tsv", "finetune_val.tsv", "finetune_test.tsv",
                 "stage1.cfg", "stage2.cfg", "stage3.cfg"):
        assert name in names
    assert "data_root" not in (chain / "stage2.cfg").read_text()


def test_gen_synthetic_prints_sizes(tmp_path, capsys):
    assert main(["gen-synthetic", "--n", "20", "--seed", "1", "--teacher-seed", "1", "--out-dir", str(tmp_path)]) == 0
    sizes = json.loads(capsys.readouterr().out)
    assert sizes["pretrain"] == 20 and sum(sizes.values()) > 20


def test_stage_chain_outputs(chain):
    s1, s2, s3 = (Checkpoint.load(chain / f"stage{i}.ck") for i in (1, 2, 3))
    assert (s1.stage, s2.stage, s3.stage) == ("stage1", "stage2", "stage3")
    assert s2.params.names() == s1.params.names() + ["score_head.weight", "score_head.bias"]
    log = read_log(chain / "stage3.ck.log.jsonl")
    assert [r["epoch"] for r in log if r["metric"] == "loss"] == list(range(1, 16))
    assert any(r["metric"] == "selected_epoch" for r in log)


def test_eval_and_ensemble(chain, capsys):
    test = chain / "finetune_test.tsv"
    for i in (2, 3):
        code = main(["eval", "--ckpt", str(chain / f"stage{i}.ck"), "--manifest", str(test),
                     "--report", str(chain / f"r{i}.json"), "--predictions", str(chain / f"p{i}.tsv")])
        assert code == 0
    report = json.loads((chain / "r3.json").read_text())
    preds = read_predictions(chain / "p3.tsv")
    labels = {r.id: r.label for r in load_manifest(test)}
    assert abs(srcc(preds, labels) - report["srcc"]) < 1e-12

    capsys.readouterr()
    code = main(["ensemble", "--inputs", str(chain / "p2.tsv"), str(chain / "p3.tsv"), "--range", "0,1",
                 "--out", str(chain / "ens.tsv"), "--labels", str(test)])
    assert code == 0
    assert "srcc" in capsys.readouterr().out
    combined = read_predictions(chain / "ens.tsv")
    assert set(combined) == set(labels)
    assert min(combined.values()) >= 0.0 and max(combined.values()) <= 1.0


def test_stage_mismatch_is_config_error(chain):
    assert main(["stage1", "--config", str(chain / "stage2.cfg"), "--out", str(chain / "x.ck")]) == 2


def test_unknown_config_key_is_config_error(tmp_path):
    (tmp_path / "bad.cfg").write_text("stage = 2\nlr = 1e-3\nepochs = 1\nwarmup = 3\n")
    assert main(["stage2", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "x.ck")]) == 2


def test_headless_eval_is_config_error(chain):
    code = main(["eval", "--ckpt", str(chain / "stage1.ck"), "--manifest", str(chain / "finetune_test.tsv"),
                 "--report", str(chain / "bad.json")])
    assert code == 2


def test_missing_files_are_data_errors(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.ck"), "--manifest", str(tmp_path / "none.tsv"),
                 "--report", str(tmp_path / "r.json")]) == 3
    assert main(["ensemble", "--inputs", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "e.tsv")]) == 3


def test_bad_range(tmp_path):
    (tmp_path / "p.tsv").write_text("id\tscore\na\t1\nb\t2\n")
    assert main(["ensemble", "--inputs", str(tmp_path / "p.tsv"), "--range", "1,0", "--out", str(tmp_path / "e.tsv")]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "alignlm", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("alignlm ")
