import csv
import io
import subprocess
import sys

import pytest

from soldertree import sqlfront as sf
from soldertree.cli import EXIT_ABORT, EXIT_INVALID, EXIT_OK, main


def _plan_text(tmp_path, *extra):
    out = tmp_path / "plan.txt"
    assert main(["plan", "--fixture", "q1", "--m", "4", "--n", "8", "-o", str(out), *extra]) == EXIT_OK
    return out.read_text()


def test_plan_is_deterministic(tmp_path):
    a = _plan_text(tmp_path, "--emit-circuits")
    b = _plan_text(tmp_path, "--emit-circuits")
    assert a == b
    assert a.startswith("plan v1\n")
    assert a.rstrip().splitlines()[-1].startswith("digest: ")


def test_plan_lists_shapes(tmp_path):
    text = _plan_text(tmp_path, "--shapes")
    lines = text.splitlines()
    assert sum(ln.startswith("candidate ") for ln in lines) == 5
    assert sum(ln.startswith("monolithic ") for ln in lines) == 1


def test_plan_from_files(tmp_path):
    assert main(["fixture", "q3", "--m", "3", "--n", "4", "--out-dir", str(tmp_path)]) == EXIT_OK
    out = tmp_path / "p.txt"
    rc = main(["plan", "--query", str(tmp_path / "query.sql"), "--schema", str(tmp_path / "schema.ini"),
               "-o", str(out)])
    assert rc == EXIT_OK
    assert "parties: 3" in out.read_text()


def test_fixture_writes_files(tmp_path):
    assert main(["fixture", "q1", "--m", "2", "--n", "4", "--out-dir", str(tmp_path)]) == EXIT_OK
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["diagnoses@P1.csv", "diagnoses@P2.csv", "query.sql", "schema.ini"]


def _read(path):
    return list(csv.reader(io.StringIO(path.read_text())))


def test_run_matches_oracle(tmp_path, capsys):
    out, met = tmp_path / "out.csv", tmp_path / "metrics.txt"
    rc = main(["run", "--fixture", "q1", "--m", "3", "--n", "6", "--kappa", "64",
               "--check-oracle", "-o", str(out), "--metrics", str(met)])
    assert rc == EXIT_OK
    assert "oracle: match" in capsys.readouterr().err
    rows = _read(out)
    assert rows[0] == ["diag", "cnt"]
    fx = sf.fixture("q1", 3, 6, 0.5, 0)
    assert [tuple(map(int, r)) for r in rows[1:]] == sf.oracle(fx.query, fx.schema, fx.data)
    assert met.read_text().startswith("rounds=")


def test_run_from_csv_files(tmp_path):
    d = tmp_path / "fx"
    assert main(["fixture", "tpch_rev", "--m", "3", "--n", "5", "--out-dir", str(d)]) == EXIT_OK
    out = tmp_path / "out.csv"
    rc = main(["run", "--query", str(d / "query.sql"), "--schema", str(d / "schema.ini"),
               "--data-dir", str(d), "--kappa", "64", "--transport", "socket", "--parallel",
               "--check-oracle", "-o", str(out)])
    assert rc == EXIT_OK
    assert _read(out)[0] == ["nation", "rev"]


def test_run_tamper_aborts(tmp_path, capsys):
    rc = main(["run", "--fixture", "q1", "--m", "4", "--n", "8", "--kappa", "64",
               "--tamper", "p2:order", "-o", str(tmp_path / "x.csv")])
    assert rc == EXIT_ABORT
    err = capsys.readouterr().err
    assert "edge=p2" in err and "unit=u2-3" in err


def test_run_over_bound_is_invalid(tmp_path, capsys):
    d = tmp_path / "fx"
    main(["fixture", "q1", "--m", "2", "--n", "3", "--out-dir", str(d)])
    p = d / "diagnoses@P1.csv"
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines + lines[1:]) + "\n")
    rc = main(["run", "--query", str(d / "query.sql"), "--schema", str(d / "schema.ini"),
               "--data-dir", str(d), "-o", str(tmp_path / "x.csv")])
    assert rc == EXIT_INVALID
    assert "exceed" in capsys.readouterr().err


def test_unsupported_sql_is_invalid(tmp_path, capsys):
    d = tmp_path / "fx"
    main(["fixture", "q1", "--m", "2", "--n", "3", "--out-dir", str(d)])
    (d / "query.sql").write_text("SELECT diag FROM diagnoses@P1 WHERE diag LIKE '1%'\n")
    rc = main(["plan", "--query", str(d / "query.sql"), "--schema", str(d / "schema.ini")])
    assert rc == EXIT_INVALID
    assert "LIKE" in capsys.readouterr().err


def test_cost_writes_report_files(tmp_path, capsys):
    lat = tmp_path / "lat.txt"
    lat.write_text("0 1 1 1\n1 0 1 1\n1 1 0 9\n1 1 9 0\n")
    d = tmp_path / "cost"
    rc = main(["cost", "--fixture", "q1", "--m", "4", "--n", "8", "--latency", str(lat),
               "--out-dir", str(d)])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith("chosen_shape: ")
    assert (d / "cost.txt").read_text() == text
    assert _read(d / "cost.csv")[0] == ["node", "offline", "online", "solder", "subtree", "total"]
    assert (d / "cost.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_asymmetric_latency_rejected(tmp_path, capsys):
    lat = tmp_path / "lat.txt"
    lat.write_text("0 1\n2 0\n")
    rc = main(["cost", "--fixture", "q1", "--m", "2", "--n", "4", "--latency", str(lat)])
    assert rc == EXIT_INVALID
    assert "symmetric" in capsys.readouterr().err


def test_latency_size_mismatch_rejected(tmp_path):
    lat = tmp_path / "lat.txt"
    lat.write_text("0 1\n1 0\n")
    assert main(["cost", "--fixture", "q1", "--m", "3", "--n", "4", "--latency", str(lat)]) == EXIT_INVALID


def test_bench_writes_csv_text_and_png(tmp_path):
    d = tmp_path / "bench"
    rc = main(["bench", "--fixtures", "q1", "--m-list", "2", "--n-list", "4", "--ff-list", "0.5",
               "--out-dir", str(d)])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((d / "bench.csv").read_text())))
    assert [r["variant"] for r in rows] == ["monolithic", "decomposed", "decomposed+split"]
    assert all(r["ok"] == "True" for r in rows)
    assert "variant" in (d / "bench.txt").read_text()
    assert (d / "bench.png").read_bytes()[:4] == b"\x89PNG"


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "soldertree.cli", "plan", "--fixture", "q1", "--m", "2",
                        "--n", "4"], capture_output=True, text=True)
    assert r.returncode == 0
    assert r.stdout.startswith("plan v1")


def test_missing_arguments_is_invalid(capsys):
    assert main(["plan"]) == EXIT_INVALID
    with pytest.raises(SystemExit):
        main(["plan", "--fixture", "q7"])
