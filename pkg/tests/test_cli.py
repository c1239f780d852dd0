from __future__ import annotations

import json
import subprocess
import sys

import pytest

from nasxform.cli import main
from nasxform.ir import ConvSpec, conv_nest
from nasxform.transforms import group

SAMPLE = ConvSpec(Ci=4, Co=4, H=4, W=4, Kh=3, Kw=3, pad=1)


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "conv.json"
    p.write_text(json.dumps({"schema_version": 1, "spec": SAMPLE.to_dict()}))
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    lines = out.out.rstrip("\n").splitlines()
    assert lines[-1] == f"RESULT {'ok' if code == 0 else 'fail'} {code}"
    return code, out.out, out.err


def test_dump(capsys, spec_file, tmp_path):
    code, out, _ = run(capsys, "dump", "--config", spec_file, "--out", str(tmp_path / "d.txt"))
    assert code == 0
    assert conv_nest(SAMPLE).serialize() in out
    assert (tmp_path / "d.txt").read_text() == conv_nest(SAMPLE).serialize() + "\n"


def test_top_level_spec_fields(capsys, tmp_path):
    p = tmp_path / "flat.json"
    p.write_text(json.dumps({"schema_version": 1, **SAMPLE.to_dict()}))
    assert run(capsys, "dump", "--config", str(p))[0] == 0


def test_transform_group(capsys, spec_file):
    code, out, _ = run(capsys, "transform", "--config", spec_file, "--sequence", "group(co,ci,2)")
    assert code == 0
    assert group(conv_nest(SAMPLE), "co", "ci", 2).serialize() in out
    assert "macs 2304 -> 1152 (x0.5000)" in out
    assert "derived " in out


def test_transform_empty_sequence(capsys, spec_file):
    code, out, _ = run(capsys, "transform", "--config", spec_file)
    assert code == 0 and conv_nest(SAMPLE).serialize() in out


def test_transform_errors(capsys, spec_file):
    code, out, _ = run(capsys, "transform", "--config", spec_file, "--sequence", "tile(h,2) | bottleneck(co,3)")
    assert code == 4 and "step 1" in out and "NonDivisible" in out
    code, out, _ = run(capsys, "transform", "--config", spec_file, "--sequence", "tile(h")
    assert code == 4


def test_verify_semantic(capsys, spec_file):
    code, out, _ = run(capsys, "verify", "--config", spec_file, "--sequence", "tile(h,2) | interchange(co,ci)")
    assert code == 0
    assert "semantic [tile(h,2) | interchange(co,ci)]: legal" in out
    assert "oracle: equal" in out


def test_verify_neural(capsys, spec_file):
    code, out, _ = run(capsys, "verify", "--config", spec_file, "--sequence", "tile(h,2) | bottleneck(co,2)")
    assert code == 0
    assert "neural [bottleneck(co,2)]: semantic check not-applicable" in out
    assert "oracle-equal" in out and "not equivalent to the original" in out


def test_verify_cap(capsys, spec_file):
    code, out, _ = run(capsys, "verify", "--config", spec_file, "--sequence", "tile(h,2)", "--caps", "100")
    assert code == 5 and "--caps" in out


def test_fisher(capsys, tmp_path):
    code, out, _ = run(capsys, "fisher", "--out", str(tmp_path / "f.json"))
    assert code == 0 and "total" in out
    first = json.loads((tmp_path / "f.json").read_text())
    run(capsys, "fisher", "--out", str(tmp_path / "g.json"))
    assert json.loads((tmp_path / "g.json").read_text()) == first
    code, out, _ = run(capsys, "fisher", "--seed", "3")
    assert code == 0 and "fisher seed=3" in out


def test_fisher_config_errors(capsys, tmp_path):
    p = tmp_path / "net.json"
    p.write_text(json.dumps({"schema_version": 1, "layers": [{"Ci": 2, "Co": 2, "H": 2, "W": 2, "colour": 1}]}))
    code, out, _ = run(capsys, "fisher", "--config", str(p))
    assert code == 3 and "colour" in out


def test_search(capsys, tmp_path):
    cfg = tmp_path / "search.json"
    cfg.write_text(json.dumps({"schema_version": 1, "search": {"candidate_count": 6, "seed": 2},
                               "network": {"layers": [{"Ci": 4, "Co": 4, "H": 4, "W": 4, "Kh": 3, "Kw": 3, "pad": 1}] * 2}}))
    outs = []
    for name in ("a.json", "b.json"):
        code, out, _ = run(capsys, "search", "--config", str(cfg), "--out", str(tmp_path / name))
        assert code == 0 and "rejection rate" in out
        d = json.loads((tmp_path / name).read_text())
        d.pop("timing")
        outs.append(d)
    assert outs[0] == outs[1]
    assert (tmp_path / "a.csv").exists()
    code, _, _ = run(capsys, "search", "--config", str(cfg), "--seed", "7", "--jobs", "2")
    assert code == 0


@pytest.mark.parametrize("payload,expected", [
    ({"schema_version": 2, "spec": SAMPLE.to_dict()}, 3),
    ({"schema_version": 1, "spec": {"Ci": 2}}, 3),
    ({"schema_version": 1, "spec": dict(SAMPLE.to_dict(), groups=3)}, 3),
])
def test_config_error_codes(capsys, tmp_path, payload, expected):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(payload))
    assert run(capsys, "dump", "--config", str(p))[0] == expected


def test_io_and_usage_errors(capsys, tmp_path, spec_file):
    assert run(capsys, "dump", "--config", str(tmp_path / "nope.json"))[0] == 6
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run(capsys, "dump", "--config", str(bad))[0] == 3
    assert run(capsys, "dump", "--config", spec_file, "--out", str(tmp_path / "no" / "x"))[0] == 6
    for argv in (["frobnicate"], [], ["dump"], ["search", "--jobs", "0"], ["fisher", "--seed", "-1"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2
        assert capsys.readouterr().out.rstrip().endswith("RESULT fail 2")


def test_module_entry_point(spec_file):
    res = subprocess.run([sys.executable, "-m", "nasxform", "verify", "--config", spec_file,
                          "--sequence", "interchange(h,w)"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0
    assert res.stdout.rstrip().splitlines()[-1] == "RESULT ok 0"
