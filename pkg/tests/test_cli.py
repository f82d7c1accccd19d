import argparse
import subprocess
import sys

import pytest

from conftest import toy_lines, write_lines
from lookuplm import cli
from lookuplm.config import ALL_KEYS, ConfigError, RunConfig, parse_kv_lines
from lookuplm.trainer import load_checkpoint


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def tsv_dict(out):
    return dict(line.split("\t", 1) for line in out.strip().splitlines())


@pytest.fixture
def workspace(tmp_path, capsys):
    corpus = write_lines(tmp_path / "corpus.txt", toy_lines())
    assert run(["build-vocab", "--corpus", str(corpus), "--out", str(tmp_path / "vocab.txt"),
                "--max-size", "64"], capsys)[0] == 0
    return tmp_path


def train_args(ws, out="m.lkm", *extra):
    return ["train", "--corpus", str(ws / "corpus.txt"), "--vocab", str(ws / "vocab.txt"),
            "--out", str(ws / out), "--steps", "3", "--set", "H=8", "--set", "D_in=4",
            "--set", "U=32", "--set", "E_n=2", "--set", "n=2", "--set", "batch_size=4", *extra]


def test_config_parsing_and_precedence(tmp_path):
    cfg = write_lines(tmp_path / "run.cfg", ["# comment", "H = 12", "n=3  # inline", "",
                                             "include_current=true", "decay_steps=none"])
    rc = RunConfig.from_sources(cfg, {"H": "20", "seed": None})
    assert rc.get("H") == 20 and rc.get("n") == 3 and rc.get("include_current") is True
    assert rc.model_config(40).H == 20
    assert rc.train_config().decay_steps is None
    echo = dict(line.split("=", 1) for line in rc.echo())
    assert set(echo) == {k for k in ALL_KEYS if k not in ("corpus", "vocab", "out", "table_dir")}
    assert echo["lr0"] == "0.001"


@pytest.mark.parametrize("lines", [["bogus=1"], ["H"], ["H=abc"], ["include_current=maybe"]])
def test_config_errors(tmp_path, lines):
    with pytest.raises(ConfigError):
        RunConfig.from_sources(write_lines(tmp_path / "bad.cfg", lines)).model_config(10)


def test_config_validation_errors_surface_as_config_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_sources(None, {"H": "0"}).model_config(10)
    with pytest.raises(ConfigError):
        parse_kv_lines(["steps=1", "nope=2"])


def test_train_is_deterministic_and_reports_checksum(workspace, capsys):
    code, out1, err = run(train_args(workspace, "a.lkm"), capsys)
    assert code == 0
    assert "H=8" in err.splitlines() and "lr0=0.001" in err.splitlines()
    _, out2, _ = run(train_args(workspace, "b.lkm"), capsys)
    r1, r2 = tsv_dict(out1), tsv_dict(out2)
    assert r1["sha256"] == r2["sha256"] and len(r1["sha256"]) == 64
    ckpt = load_checkpoint(workspace / "a.lkm")
    assert int(r1["dense_params"]) == ckpt.dense_params
    assert int(r1["sparse_params"]) == 2 * 32 * 2


def test_config_file_with_flag_override(workspace, capsys):
    cfg = write_lines(workspace / "run.cfg", [f"corpus={workspace / 'corpus.txt'}",
                                               f"vocab={workspace / 'vocab.txt'}",
                                               "H=6", "D_in=3", "U=16", "E_n=2", "steps=9"])
    code, out, err = run(["train", "--config", str(cfg), "--out", str(workspace / "c.lkm"),
                          "--steps", "2", "--set", "H=5"], capsys)
    assert code == 0
    assert "steps=2" in err.splitlines() and "H=5" in err.splitlines()
    ckpt = load_checkpoint(workspace / "c.lkm")
    assert ckpt.step == 2 and ckpt.config.H == 5


def test_eval_masked_prints_both_and_eos_relation(workspace, capsys):
    run(train_args(workspace), capsys)
    head = write_lines(workspace / "head.tsv", [f"{s}\t11111" for s in toy_lines()[:4]])
    code, out, _ = run(["eval", "--ckpt", str(workspace / "m.lkm"), "--testset", str(head),
                        "--masked"], capsys)
    assert code == 0
    rows = {r.split("\t")[1]: r.split("\t") for r in out.strip().splitlines()[1:]}
    assert set(rows) == {"masked", "unmasked", "eos"}
    masked_total, unmasked_total, eos_total = (float(rows[k][4]) for k in ("masked", "unmasked", "eos"))
    assert abs(unmasked_total - eos_total - masked_total) < 1e-5
    assert int(rows["unmasked"][3]) == int(rows["masked"][3]) + 4


def test_eval_empty_selection_fails_cleanly(workspace, capsys):
    run(train_args(workspace), capsys)
    ts = write_lines(workspace / "rare_a.tsv", ["w1 w2\t00"])
    code, out, err = run(["eval", "--ckpt", str(workspace / "m.lkm"), "--testset", str(ts),
                          "--masked"], capsys)
    assert code == 1 and out == ""
    assert err.strip().splitlines()[-1].startswith("error=CliError message=")


def test_hash_stats_table_of_one(workspace, capsys):
    code, out, _ = run(["hash-stats", "--corpus", str(workspace / "corpus.txt"), "--vocab",
                        str(workspace / "vocab.txt"), "--order", "4", "--table-size", "1"], capsys)
    stats = tsv_dict(out)
    assert code == 0 and stats["distinct_ids"] == "1"
    assert set(stats) == {"distinct_ngrams", "distinct_ids", "load_factor", "max_bucket"}


def test_rescore_and_bad_lines(workspace, capsys):
    run(train_args(workspace), capsys)
    nbest = write_lines(workspace / "nb.tsv", ["u1\tw1 w2\t-1.0\t-2.0", "u1\tw3\t-1.5\t-2.0",
                                               "u2\tw4\toops\t0"])
    code, out, err = run(["rescore", "--ckpt", str(workspace / "m.lkm"), "--nbest", str(nbest),
                          "--lambda1", "0.5", "--lambda2", "0.1"], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("utt_id\ttext") and len(lines) == 3
    assert "skipped_line=3 utt_id=u2" in err


def test_rescale_and_curate(workspace, capsys):
    dup = write_lines(workspace / "dup.txt", ["a"] * 100 + ["b"])
    assert run(["rescale", "--corpus", str(dup), "--out", str(workspace / "r.txt")], capsys)[0] == 0
    assert (workspace / "r.txt").read_text().split() == ["a"] * 5 + ["b"]
    a = write_lines(workspace / "a.txt", ["go to main"] * 6)
    held = write_lines(workspace / "h.txt", ["go to foo", "go main"])
    code, out, _ = run(["curate", "--corpus-a", str(a), "--corpus-b", str(a), "--heldout",
                        str(held), "--out-dir", str(workspace / "ts")], capsys)
    assert code == 0
    assert (workspace / "ts" / "rare_both.tsv").read_text() == "go to foo\t001\n"
    assert "Head\t2\t" in out


def test_sweep_writes_table_and_figure(workspace, capsys):
    ts = workspace / "ts"
    ts.mkdir()
    write_lines(ts / "head.tsv", [f"{s}\t11111" for s in toy_lines()[:3]])
    write_lines(ts / "rare_both.tsv", ["w1 w9 w2\t010"])
    grid = write_lines(workspace / "grid.txt", [
        "# baseline then one table size",
        "name=base injection=none", "U=16", "U=16 injection=layer0-only"])
    code, out, err = run(["sweep", "--grid", str(grid), "--corpus", str(workspace / "corpus.txt"),
                          "--testsets", str(ts), "--out", str(workspace / "sweep.tsv"),
                          "--seeds", "0,1", "--set", "steps=2", "--set", "H=4", "--set", "D_in=2",
                          "--set", "E_n=2"], capsys)
    assert code == 0, err
    table = (workspace / "sweep.tsv").read_text()
    assert table == out
    rows = table.strip().splitlines()
    assert len(rows) == 4 and rows[1].startswith("base\t") and rows[3].startswith("Lookup-16-2-4+l0")
    png = workspace / "sweep.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_missing_input_is_one_error_line(tmp_path, capsys):
    code, out, err = run(["hash-stats", "--corpus", str(tmp_path / "none.txt"), "--vocab",
                          str(tmp_path / "v.txt"), "--table-size", "8"], capsys)
    assert code == 1 and out == ""
    assert len(err.strip().splitlines()) == 1 and err.startswith("error=FileNotFoundError")


def test_train_requires_paths(tmp_path, capsys):
    code, _, err = run(["train", "--steps", "1"], capsys)
    assert code == 1 and "--corpus is required" in err


def _flags(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sub in action.choices.items():
                yield from ((name, sub, a) for a in sub._actions)
        else:
            yield None, parser, action


def test_help_lists_every_flag():
    parser = cli.build_parser()
    for _, owner, action in _flags(parser):
        help_text = owner.format_help()
        for opt in action.option_strings:
            assert opt in help_text
        assert action.help, f"undocumented flag {action.option_strings or action.dest}"


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "lookuplm.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("build-vocab", "rescale", "synth", "train", "eval", "curate", "hash-stats",
                "rescore", "sweep"):
        assert sub in res.stdout
