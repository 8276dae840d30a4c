"""Command-line front-end: exit codes, report shapes, determinism."""

import json

import pytest

from muspec.cli import main

LISTING_BS = """\
Main:
  x <- 0
  store secret, p
  store pub, p
  beqz x, End
  load y, p
  load z, A + y
  temp <- z
End:
  skip
"""

POLICY_BS = {
    "public_registers": ["p", "pub", "A"],
    "public_memory": [],
    "init_registers": {"p": 16, "pub": 1, "A": 64, "x": 0, "y": 0,
                       "z": 0, "temp": 0},
    "init_memory": [{"addr": 64 + i, "value": 0} for i in range(4)],
}


@pytest.fixture
def listing(tmp_path):
    prog = tmp_path / "listing_bs.muasm"
    prog.write_text(LISTING_BS)
    pol = tmp_path / "listing_bs.policy.json"
    pol.write_text(json.dumps(POLICY_BS))
    return str(prog), str(pol)


def test_run_emits_trace_with_markers(listing, capsys):
    prog, pol = listing
    rc = main(["run", prog, "--sem", "b+s", "--mode", "concrete",
               "--policy", pol, "--json"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    kinds = [o["t"] for o in out["trace"]]
    assert "start" in kinds and "skip" in kinds and "rollback" in kinds
    assert out["status"] == "terminated"
    assert all(o["t"] not in ("start", "rollback", "skip")
               for o in out["projection"])


def test_run_empty_program(tmp_path, capsys):
    prog = tmp_path / "empty.muasm"
    prog.write_text("Main:\n  skip\n")
    rc = main(["run", str(prog), "--sem", "b", "--json"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["trace"] == []


def test_run_parse_error_exit_2(tmp_path, capsys):
    prog = tmp_path / "bad.muasm"
    prog.write_text("Main:\n  frobnicate x\n  beqz x, Nowhere\n")
    rc = main(["run", str(prog)])
    assert rc == 2
    err = capsys.readouterr().err
    assert ":2:" in err and ":3:" in err  # line-numbered diagnostics


def test_check_insecure_exit_1_with_witness(listing, capsys):
    prog, pol = listing
    rc = main(["check", prog, "--sem", "b+s", "--policy", pol, "--json"])
    assert rc == 1
    out = json.loads(capsys.readouterr().out)
    assert out["verdict"] == "insecure"
    assert "witness" in out and out["witness"]["trace1"]
    assert out["config"]["sem"] == "b+s"


def test_check_secure_exit_0(listing, capsys):
    prog, pol = listing
    rc = main(["check", prog, "--sem", "b", "--policy", pol, "--json"])
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["verdict"] == "secure"


def test_check_symbolic_mode_agrees(listing, capsys):
    prog, pol = listing
    rc = main(["check", prog, "--sem", "b+s", "--policy", pol,
               "--mode", "symbolic", "--json"])
    assert rc == 1
    assert json.loads(capsys.readouterr().out)["verdict"] == "insecure"


def test_report_determinism(listing, capsys):
    prog, pol = listing
    main(["check", prog, "--sem", "b+s", "--policy", pol, "--json"])
    first = capsys.readouterr().out
    main(["check", prog, "--sem", "b+s", "--policy", pol, "--json"])
    second = capsys.readouterr().out
    assert first == second


def test_run_determinism(listing, capsys):
    prog, pol = listing
    main(["run", prog, "--sem", "b+s+r", "--policy", pol, "--json"])
    first = capsys.readouterr().out
    main(["run", prog, "--sem", "b+s+r", "--policy", pol, "--json"])
    second = capsys.readouterr().out
    assert first == second


def test_corpus_comb_all_match(capsys):
    rc = main(["corpus", "comb", "--json"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"] is True
    assert len(out["cells"]) == 56


def test_corpus_single_sem_filter(capsys):
    rc = main(["corpus", "rsb", "--sem", "r", "--json"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["cells"]) == 15


def test_bad_flag_values_exit_2(listing):
    prog, pol = listing
    assert main(["run", prog, "--window", "-1"]) == 2
