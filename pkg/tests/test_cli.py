import csv
import json
import shutil

import pytest

from routelab import cli


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_corpus_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(capsys, "gen-corpus", "--out", a, "--problems", 30)[0] == 0
    assert run(capsys, "gen-corpus", "--out", b, "--problems", 30)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    man = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert man["kind"] == "corpus" and man["config"]["corpus"]["problems"] == 30


def test_invalid_config_reports_json_error(tmp_path, capsys):
    code, out, err = run(capsys, "gen-corpus", "--out", tmp_path / "c.jsonl", "--problems", 0)
    assert code != 0 and out == ""
    assert "error" in json.loads(err.strip().splitlines()[-1])


def test_unknown_config_section_rejected(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"bogus": {}}))
    code, _, err = run(capsys, "gen-corpus", "--out", tmp_path / "c.jsonl", "--config", conf)
    assert code == 2 and "bogus" in err


def test_config_layering(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"corpus": {"problems": 77, "modulus": 7}}))
    args = cli.build_parser().parse_args(["gen-corpus", "--profile", "smoke", "--config", str(conf),
                                          "--out", "x", "--problems", "5"])
    cfg = cli.resolve_config(args)
    assert cfg["corpus"]["problems"] == 5 and cfg["corpus"]["modulus"] == 7


def test_missing_manifest_refused_unless_forced(smoke_runs, tmp_path, capsys):
    src = smoke_runs[0]
    ck = tmp_path / "standard.ckpt"
    shutil.copy(src / "standard.ckpt", ck)
    args = ("harvest", "--profile", "smoke", "--checkpoint", ck, "--corpus", src / "corpus.jsonl",
            "--out", tmp_path / "t.jsonl", "--problems", 3)
    code, _, err = run(capsys, *args)
    assert code == 2 and "manifest" in err
    assert run(capsys, *args, "--force")[0] == 0


def test_mismatched_trajectories_refused(smoke_runs, tmp_path, capsys):
    src = smoke_runs[0]
    # the EPO checkpoint did not produce these trajectories
    args = ("analyze", "--profile", "smoke", "--checkpoint", src / "epo.ckpt",
            "--trajectories", src / "trajectories.jsonl", "--out", tmp_path / "a.json")
    code, _, err = run(capsys, *args)
    assert code == 2 and "different" in err
    assert run(capsys, *args, "--force")[0] == 0


def test_tampered_file_refused(smoke_runs, tmp_path, capsys):
    src = smoke_runs[0]
    for name in ("corpus.jsonl", "corpus.jsonl.manifest.json"):
        shutil.copy(src / name, tmp_path / name)
    with open(tmp_path / "corpus.jsonl", "a") as fh:
        fh.write("\n")
    code, _, err = run(capsys, "pretrain", "--corpus", tmp_path / "corpus.jsonl", "--out", tmp_path / "m.ckpt")
    assert code == 2 and "sha256" in err


def test_analyze_layers_cover_same_tokens(smoke_runs):
    src = smoke_runs[0]
    first = json.loads((src / "analysis_first.json").read_text())
    last = json.loads((src / "analysis_last.json").read_text())
    assert first["tokens"] == last["tokens"] > 0
    assert first["layer"] == 0 and last["layer"] == 0  # the smoke model has one block
    with open(src / "analysis_last.csv") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    assert len(rows) == last["tokens"]


def test_epo_diff_manifest(smoke_runs):
    diff = json.loads((smoke_runs[0] / "epo.ckpt.diff.json").read_text())
    assert sorted(diff["changed"]) == ["blocks.0.router.bias", "blocks.0.router.weight"]


def test_passk_compares_both_checkpoints(smoke_runs):
    src = smoke_runs[0] / "passk"
    with open(src / "curves.csv") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    assert {r["tag"] for r in rows} == {"standard", "epo"}
    assert (src / "outcomes_standard.csv").is_file() and (src / "outcomes_epo.csv").is_file()
    for r in rows:
        assert float(r["ci_lo"]) <= float(r["mean"]) + 1e-12 <= float(r["ci_hi"]) + 2e-12


def test_report_bin_table_layout(smoke_runs):
    with open(smoke_runs[0] / "report" / "bins_last.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][1:] == ["Confident", "Ambiguous", "Fragile"]
    labels = [r[0] for r in rows[1:]]
    assert labels == ["Tokens (%)", "Top-1 (%)", "Top-5 (%)", "Top-10 (%)", "p_std (%)", "p_best (%)",
                      "Gap (pp)", "count"]


def test_report_marks_absent_bins(tmp_path, capsys):
    summary = {"config": {"ks": [1, 5, 10]}, "layer": 0, "tokens": 1,
               "bins": {"Confident": None, "Ambiguous": None,
                        "Fragile": {"Tokens (%)": 100.0, "Top-1 (%)": 100.0, "Top-5 (%)": 100.0,
                                    "Top-10 (%)": 100.0, "p_std (%)": 10.0, "p_best (%)": 10.0,
                                    "Gap (pp)": 0.0, "count": 1}}}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(summary))
    cli.write_manifest(path, "analysis-summary", {})
    assert run(capsys, "report", "--analysis", f"x={path}", "--out-dir", tmp_path / "rep")[0] == 0
    with open(tmp_path / "rep" / "bins_x.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[1][1:3] == ["absent", "absent"]
    assert rows[-1] == ["count", "absent", "absent", "1"]


def test_pipeline_manifest(smoke_runs):
    man = json.loads((smoke_runs[0] / "pipeline.json").read_text())
    assert man["profile"] == "smoke"
    for art in man["artifacts"].values():
        assert (smoke_runs[0] / art["path"]).is_file()
    assert man["epo"]["pairs_built"] >= 0


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0
    assert "routelab" in capsys.readouterr().out
