from __future__ import annotations

import io
import shutil

import pytest

from artifact.cli import main
from artifact.corpus import demo_corpus_dir
from artifact.indexer import SUBINDEXES, read_corpus
from artifact.textpipe import Lexicon

from oracle import scan_matches

SMALL = "cluster_size = 4K\nfl_area_clusters = 8\ncache.total = 4M\nreread_source = false\n"


def run(*argv) -> tuple[int, str]:
    buf = io.StringIO()
    code = main([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "small.conf"
    p.write_text(SMALL)
    return p


@pytest.fixture(scope="module")
def demo_index(tmp_path_factory):
    d = tmp_path_factory.mktemp("demo")
    conf = d / "c.conf"
    conf.write_text(SMALL + "experiment = 2\n")
    code, _ = run("build", "--corpus", demo_corpus_dir() / "part1", "--config", conf,
                  "--out", d / "ix")
    assert code == 0
    code, _ = run("update", "--corpus", demo_corpus_dir() / "part2", "--out", d / "ix")
    assert code == 0
    return d / "ix"


def test_demo_build_update_verify(demo_index):
    code, out = run("verify", "--index", demo_index)
    assert code == 0 and out.strip().endswith("0 problems")


def test_search_matches_scan(demo_index):
    lex = Lexicon.load()
    texts = read_corpus(demo_corpus_dir() / "part1") + read_corpus(demo_corpus_dir() / "part2")
    expect = scan_matches(list(enumerate((t for _, t in texts), 1)), lex, ["who", "is"], 1)
    code, out = run("search", "--index", demo_index, "--query", "who is", "--limit", "0")
    assert code == 0
    lines = out.splitlines()
    assert lines[-1] == f"# {len(expect)} documents, plan stopseq"
    assert sorted(int(x.split("\t")[0]) for x in lines[:-1]) == sorted(expect)


def test_stats_csv_is_deterministic(tmp_path, conf):
    outs = []
    for name in ("a", "b"):
        assert run("build", "--corpus", demo_corpus_dir() / "part1", "--config", conf,
                   "--out", tmp_path / name)[0] == 0
        code, out = run("stats", "--index", tmp_path / name, "--csv")
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    head, *rows = outs[0].splitlines()
    assert head.split(",")[0] == "index" and [r.split(",")[0] for r in rows] == list(SUBINDEXES)


def test_empty_corpus(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("build", "--corpus", tmp_path / "empty", "--out", tmp_path / "ix")[0] == 0
    code, out = run("verify", "--index", tmp_path / "ix")
    assert code == 0
    assert run("stats", "--index", tmp_path / "ix")[0] == 0


def test_exit_codes(tmp_path, conf, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("strategies = C1,CH\n")
    assert run("build", "--corpus", tmp_path, "--config", bad, "--out", tmp_path / "x")[0] == 1
    assert "CH requires S" in capsys.readouterr().err
    assert run("build", "--corpus", tmp_path / "missing", "--out", tmp_path / "y")[0] == 3
    assert run("verify", "--index", tmp_path / "nothing")[0] == 2
    assert run("--lexicon-dir", tmp_path / "nolex", "stats", "--index", tmp_path)[0] == 1


def test_update_rejects_reingest_and_build_refuses_overwrite(tmp_path, conf):
    corpus = demo_corpus_dir() / "part1"
    assert run("build", "--corpus", corpus, "--config", conf, "--out", tmp_path / "ix")[0] == 0
    assert run("update", "--corpus", corpus, "--out", tmp_path / "ix")[0] == 3
    assert run("build", "--corpus", corpus, "--out", tmp_path / "ix")[0] == 2


def test_update_grows_the_ledger_and_empty_update_is_a_no_op(tmp_path, conf):
    ix = tmp_path / "ix"
    run("build", "--corpus", demo_corpus_dir() / "part1", "--config", conf, "--out", ix)
    before = run("stats", "--index", ix, "--csv")[1]
    (tmp_path / "none").mkdir()
    assert run("update", "--corpus", tmp_path / "none", "--out", ix)[0] == 0
    assert run("stats", "--index", ix, "--csv")[1] == before
    run("update", "--corpus", demo_corpus_dir() / "part2", "--out", ix)
    after = run("stats", "--index", ix, "--csv")[1]
    ops = lambda text: sum(int(r.split(",")[-1]) + int(r.split(",")[-2])  # noqa: E731
                           for r in text.splitlines()[1:])
    assert ops(after) > ops(before)


def test_verify_detects_damage(tmp_path, conf):
    ix = tmp_path / "ix"
    run("build", "--corpus", demo_corpus_dir() / "part1", "--config", conf, "--out", ix)
    dat = ix / "ordinary_known.dat"
    raw = bytearray(dat.read_bytes())
    raw[4096 * 9:] = bytes(len(raw) - 4096 * 9)
    dat.write_bytes(bytes(raw))
    code, out = run("verify", "--index", ix)
    assert code == 2 and "problems" in out


def test_experiment_table_shape(tmp_path, conf):
    code, out = run("experiment", "--generate", "0.2", "--parts", "2", "--config", conf,
                    "--out", tmp_path / "exp", "--csv", tmp_path / "t.csv", "--verify")
    assert code == 0
    assert "# verify: 0 problems" in out
    rows = (tmp_path / "t.csv").read_text().splitlines()[1:]
    assert len(rows) == 5 * 3
    for title in ("Bytes written or read", "I/O operations"):
        assert title in out
    shutil.rmtree(tmp_path / "exp")
