import json

import pytest

from edgedistill.cli import main
from edgedistill.pipeline import RunDirectory, read_ablation_table, read_report

TINY = "configs/tiny.toml"


def run(*argv, out):
    return main([*argv, "--config", TINY, "--out", str(out)])


@pytest.fixture(scope="module")
def distilled_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("distill", out=out) == 0
    assert run("synthesize", out=out) == 0
    return out


def test_distill_and_synthesize_artifacts(distilled_run):
    names = {p.name for p in distilled_run.iterdir()}
    assert {"pretrained.pt", "checkpoint.pt", "training_log.jsonl", "distilled", "run.json"} <= names
    desc = json.loads((distilled_run / "run.json").read_text())
    entry = desc["commands"]["synthesize"]
    assert entry["seed"] == 0 and entry["artifacts"]["distilled"] == "distilled/manifest.jsonl"
    assert entry["config"]["synthesis"]["pair_count"] == 8


def test_eval_report_fields(distilled_run, capsys):
    assert run("eval", "--seeds", "0,3", out=distilled_run) == 0
    report = read_report(distilled_run / "metrics.json")
    assert set(report.per_seed) == {0, 3}
    for key in ("IR@1", "IR@5", "IR@10", "TR@1", "TR@5", "TR@10", "alignment"):
        assert key in report.mean and key in report.std
    assert report.meta["pair_count"] == 8 and report.meta["loss_mask"] == "contrastive_diversity"
    assert report.meta["provenance_digest"]
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["command"] == "eval"


def test_ablation_table_round_trip(distilled_run):
    assert run("ablate", "--masks", "mse_only,plus_contrastive,plus_contrastive_diversity,"
               "edge_plus_caption_synthesis", out=distilled_run) == 0
    table = read_ablation_table(distilled_run / "ablation.json")
    assert [r.mask for r in table.rows] == ["mse_only", "plus_contrastive",
                                            "plus_contrastive_diversity", "edge_plus_caption_synthesis"]
    assert {r.n_images for r in table.rows} == {4}
    assert [r.pair_count for r in table.rows] == [4, 4, 4, 8]
    assert table.header["eval_seeds"] == [0, 1]
    again = type(table).from_json(table.to_json())
    assert again.to_json() == table.to_json()


def test_caption_command(distilled_run):
    assert main(["caption", "--input", str(distilled_run / "distilled"), "--cpi", "4",
                 "--config", TINY, "--out", str(distilled_run)]) == 0
    lines = (distilled_run / "captioned" / "manifest.jsonl").read_text().splitlines()
    assert all(len(json.loads(line)["captions"]) == 4 for line in lines)


def test_seed_reproducibility(tmp_path):
    for name in ("a", "b"):
        assert main(["baseline", "--kind", "random", "--config", TINY, "--seed", "11",
                     "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "baseline_random" / "manifest.jsonl").read_bytes()
    b = (tmp_path / "b" / "baseline_random" / "manifest.jsonl").read_bytes()
    assert a == b
    assert main(["baseline", "--kind", "random", "--config", TINY, "--seed", "12",
                 "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "baseline_random" / "manifest.jsonl").read_bytes() != a


def test_malformed_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nbatch_size = 'eight'\n")
    assert main(["distill", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "train.batch_size" in capsys.readouterr().err


def test_bad_override_and_arguments(tmp_path):
    assert main(["distill", "--config", TINY, "--set", "train.nope=1", "--out", str(tmp_path)]) == 2
    assert main(["ablate", "--masks", "bogus", "--config", TINY]) == 2
    assert main(["frobnicate"]) == 2


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    assert main(["synthesize", "--config", TINY, "--out", str(tmp_path)]) == 3
    assert "checkpoint" in capsys.readouterr().err
    code = main(["distill", "--config", TINY, "--out", str(tmp_path),
                 "--set", f"pretrain.checkpoint='{tmp_path / 'nope.pt'}'"])
    assert code == 2


def test_mllm_without_endpoint(tmp_path, monkeypatch):
    monkeypatch.delenv("EDGEDISTILL_CAPTIONER_ENDPOINT", raising=False)
    code = main(["baseline", "--kind", "pretrained", "--config", TINY, "--out", str(tmp_path),
                 "--set", "captioner.kind='mllm'"])
    assert code == 2


def test_locked_run_directory(tmp_path):
    with RunDirectory(tmp_path, "distill"):
        assert main(["baseline", "--kind", "random", "--config", TINY, "--out", str(tmp_path)]) == 3


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "distill" in capsys.readouterr().out
