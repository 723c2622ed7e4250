import csv
import json
from pathlib import Path

import pytest

from mpcc import pipeline as mpcc_pipeline
from mpcc.cli import main
from mpcc.config import KEYS

TINY = {
    "data.train_scenes": 80, "data.eval_scenes": 60,
    "policy.embed_dim": 4, "policy.hidden_dim": 8, "policy.max_len": 16,
    "policy.pretrain_examples": 60, "policy.pretrain_steps": 10,
    "sft.steps": 4, "sft.batch_size": 4,
    "rft.steps": 3, "rft.batch_queries": 2, "rft.group_size": 3,
}


def run(out, command, *extra, **over):
    sets = {**TINY, **over}
    argv = [command, "--out", str(out)] + [a for k, v in sets.items() for a in ("--set", f"{k}={v}")]
    return main(argv + list(extra))


def pipeline(out, strategies=("prompt", "sft+rft"), **over):
    for cmd in ("genworld", "gendata", "genbench"):
        assert run(out, cmd, **over) == 0
    for s in strategies:
        assert run(out, "train", "--strategy", s, **over) == 0
        assert run(out, "eval", "--strategy", s, **over) == 0


def manifest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


def files(out):
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(Path(out).rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    pipeline(out)
    return out


def test_pipeline_is_reproducible(run_dir, tmp_path):
    mpcc_pipeline._BASE_CACHE.clear()  # rebuild the base policy from scratch too
    pipeline(tmp_path / "again")
    a, b = files(run_dir), files(tmp_path / "again")
    assert a.keys() == b.keys()
    strip_out = lambda blob: [l for l in blob.decode().splitlines() if not l.startswith("out =")]
    assert strip_out(a.pop("config.txt")) == strip_out(b.pop("config.txt"))
    assert a == b


def test_manifest_references_every_output(run_dir):
    m = manifest(run_dir)
    refs = list(m["artifacts"].values())
    assert len(refs) == len(set(refs))
    assert set(refs) == set(files(run_dir))
    assert (run_dir / "config.txt").read_text().startswith("seed = 0\n")


def test_ood_partition_is_disjoint(run_dir):
    part = manifest(run_dir)["ood_partition"]
    assert part["disjoint"] and not set(part["train_families"]) & set(part["test_families"])
    assert part["train_families"] and part["test_families"]


def test_prompt_strategy_is_evaluation_only(run_dir):
    m = manifest(run_dir)
    assert m["runs"]["prompt/full"] == {"mode": "evaluation-only", "phases": []}
    assert not list((run_dir / "checkpoints").glob("prompt*"))


def test_sft_rft_phases_chain(run_dir):
    phases = manifest(run_dir)["runs"]["sft+rft/full"]["phases"]
    assert [p["phase"] for p in phases] == ["sft", "rft"]
    assert phases[1]["init_hash"] == phases[0]["final_hash"]


def test_reports_carry_random_and_oracle_rows(run_dir):
    rows = list(csv.reader((run_dir / "reports" / "sft_rft-full-choice.csv").open()))
    names = [r[0] for r in rows[1:]]
    assert names == ["sft+rft", "random", "oracle"]
    rand = rows[2]
    assert rand[1:7] == ["25.00", "14.29"] * 3 and rand[-1] == "117.86"
    oracle = rows[3]
    assert all(c != "NA" for c in oracle[1:])


def test_eval_twice_is_identical(run_dir):
    before = (run_dir / "reports" / "sft_rft-full-choice.csv").read_bytes()
    assert run(run_dir, "eval", "--strategy", "sft+rft") == 0
    assert (run_dir / "reports" / "sft_rft-full-choice.csv").read_bytes() == before


def test_prior_sampling_without_annotations_equals_rft(tmp_path):
    out = tmp_path / "nothink"
    for cmd in ("genworld", "gendata"):
        assert run(out, cmd, **{"data.think_fraction": 0.0}) == 0
    for s in ("rft", "rft+prior"):
        assert run(out, "train", "--strategy", s, **{"data.think_fraction": 0.0}) == 0
    assert (out / "metrics/rft-full-rft.csv").read_bytes() == (out / "metrics/rft_prior-full-rft.csv").read_bytes()


def test_filter_monotonicity(tmp_path):
    counts = []
    for i, thr in enumerate((2.5, 1.5, 0.5)):
        out = tmp_path / f"f{i}"
        over = {"data.filter_max": thr, "data.moderate_max": min(1.5, thr), "data.easy_max": min(0.5, thr)}
        assert run(out, "genworld", **over) == 0
        assert run(out, "gendata", **over) == 0
        counts.append(sum(1 for _ in (out / "data/train.jsonl").open()))
    assert counts == sorted(counts, reverse=True)


def test_report_sorting_and_absent_cells(run_dir, tmp_path, capsys):
    assert main(["report", str(run_dir)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "strategy,id_cho_e,id_cho_h,ood_cho_e,ood_cho_h"
    assert [l.split(",")[0] for l in lines[1:]] == ["prompt", "sft+rft"]
    assert all(l.endswith(",NA,NA") for l in lines[1:])
    out = tmp_path / "r.csv"
    assert main(["report", str(run_dir / "manifest.json"), "--output", str(out)]) == 0
    assert out.read_text().splitlines() == lines


def test_single_manifest_single_row(tmp_path, capsys):
    m = {"evals": {"rft/ood": {"strategy": "rft", "split": "ood", "ave_e": 40.0, "ave_h": 30.0}}}
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    assert main(["report", str(tmp_path)]) == 0
    assert capsys.readouterr().out.splitlines()[1:] == ["rft,NA,NA,40.00,30.00"]


def test_score_external_cli(run_dir, tmp_path, capsys):
    q = run_dir / "bench/eval_questions.jsonl"
    a = run_dir / "reports/sft_rft-full-answers.jsonl"
    assert main(["score-external", str(q), str(a)]) == 0
    out = capsys.readouterr().out.splitlines()
    report = list(csv.reader((run_dir / "reports/sft_rft-full-choice.csv").open()))[1]
    assert out[1].split(",") == report[1:]


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


def test_invalid_key_names_key_and_accepted(tmp_path, capsys):
    assert main(["genworld", "--out", str(tmp_path), "--set", "rft.stepz=3"]) == 2
    line = error_line(capsys)
    assert line.startswith("error kind=config message=") and "rft.stepz" in line and "rft.steps" in line


def test_bad_flag_is_a_one_line_config_error(capsys):
    assert main(["train", "--strategy", "dpo"]) == 2
    assert error_line(capsys).startswith("error kind=config")


def test_missing_dataset_hint(tmp_path, capsys):
    assert run(tmp_path, "genworld") == 0
    assert run(tmp_path, "train") == 2
    line = error_line(capsys)
    assert line.startswith("error kind=input") and "mpcc gendata" in line


def test_missing_world_hint(tmp_path, capsys):
    assert run(tmp_path, "gendata") == 2
    assert "mpcc genworld" in error_line(capsys)


def test_data_config_mismatch(run_dir, capsys):
    assert run(run_dir, "gendata", **{"world.n_objects": 30}) == 2
    assert "fresh --out" in error_line(capsys)


def test_vocab_mismatch_names_both_hashes(run_dir, tmp_path, capsys):
    other = tmp_path / "other"
    pipeline(other, strategies=("sft",), **{"world.n_objects": 30})
    ckpt = other / "checkpoints/sft-full.ckpt"
    assert run(run_dir, "eval", "--strategy", "sft", "--checkpoint", str(ckpt)) == 2
    line = error_line(capsys)
    assert line.count("hash") >= 2 and "does not match" in line


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert all(k in text for k in KEYS)
