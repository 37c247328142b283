import json
import os
import subprocess
import sys

import pytest

from longattn import __version__
from longattn.cli import main, module_rng
from longattn.config import ParseError, SchemaError, load_config, parse_config


def _write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc, encoding="utf-8")
    return str(path)


def _run(tmp_path, command, doc, out="out", extra=()):
    out_dir = tmp_path / out
    code = main([command, "--config", _write(tmp_path, doc), "--out", str(out_dir), *extra])
    return code, out_dir


def test_minimal_config_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, {}))
    assert cfg.sparsity.last_q == 64 and cfg.sparsity.chunk_len == 256
    assert cfg.seed == 0


def test_chunk_size_violation_names_field():
    with pytest.raises(SchemaError) as e:
        parse_config({"chunk": {"chunkSize": 12, "trainLen": 10}})
    assert "chunkSize" in e.value.field


def test_unknown_field_rejected():
    with pytest.raises(SchemaError) as e:
        parse_config({"foo": 1})
    assert e.value.field == "foo"
    with pytest.raises(SchemaError) as e:
        parse_config({"refine": {"calibration": {"foo": 1}}})
    assert e.value.field == "refine.calibration.foo"


def test_other_validation_errors():
    with pytest.raises(SchemaError) as e:
        parse_config({"attention": {"heads": 6, "kvHeads": 4}})
    assert e.value.field == "attention.kvHeads"
    with pytest.raises(SchemaError):
        parse_config({"refine": {"threshold": 1.5}})
    with pytest.raises(SchemaError):
        parse_config({"sparsity": {"positionMode": "diagonal"}})


def test_parse_errors(tmp_path):
    with pytest.raises(ParseError):
        load_config(str(tmp_path / "missing.json"))
    with pytest.raises(ParseError):
        load_config(_write(tmp_path, "{not json"))
    with pytest.raises(SchemaError):
        load_config(_write(tmp_path, "[1, 2]"))


def test_config_hash_tracks_content():
    a, b = parse_config({}), parse_config({"seed": 1})
    assert a.config_hash() == parse_config({}).config_hash()
    assert a.config_hash() != b.config_hash()


def test_module_generators_are_independent():
    a = module_rng(0, "data-forge").random(3)
    assert (a == module_rng(0, "data-forge").random(3)).all()
    assert not (a == module_rng(0, "engine-sim").random(3)).any()


def test_attn_check_passes(tmp_path):
    code, out = _run(tmp_path, "attn-check", {"attention": {"n": 64, "dim": 8}})
    assert code == 0
    rows = (out / "attn-check_metrics.csv").read_text().splitlines()
    assert rows[0].startswith("# config_hash=") and rows[0].endswith(f"version={__version__}")
    assert any(r.startswith("max_abs_diff,") and r.endswith(",<= 1e-9,true") for r in rows)


def test_refine_empty_calibration(tmp_path, capsys):
    code, _ = _run(tmp_path, "refine", {"refine": {"calibration": {"samples": 0}}})
    assert code != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "empty_calibration"


def test_forge_zero_count(tmp_path):
    code, out = _run(tmp_path, "forge", {"forge": {"count": 0}})
    assert code == 0
    assert (out / "corpus.jsonl").read_text() == ""


def test_invalid_config_exit(tmp_path, capsys):
    code, _ = _run(tmp_path, "engine-sim", {"engine": {"decoder": 0}})
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "schema" and err["field"] == "engine.decoder"


def test_failed_assertion_exits_nonzero(tmp_path, capsys):
    # an unreachable recall bound must fail loudly, naming the metric
    doc = {
        "sparsity": {
            "n": 256,
            "dim": 64,
            "plantedColumns": [],
            "plantedSlashes": [],
            "minRecall": 1.0,
            "forced": False,
            "budget": {"vertical": 0, "slash": 0},
            "lastQ": 16,
        }
    }
    code, out = _run(tmp_path, "sparsity", doc)
    assert code == 1
    assert "recall" in json.loads(capsys.readouterr().err)["metrics"]
    summary = json.loads((out / "sparsity_summary.json").read_text())
    assert "recall" in summary["failures"]


@pytest.mark.parametrize(
    "command", ["attn-check", "extrapolate", "sparsity", "refine", "engine-sim", "forge"]
)
def test_reports_byte_identical(tmp_path, command):
    doc = {
        "sparsity": {
            "n": 512,
            "dim": 128,
            "plantedColumns": [50, 300],
            "plantedSlashes": [40, 200],
            "lastQ": 32,
        },
        "refine": {"calibration": {"length": 128, "shortLength": 64, "dim": 32}},
        "forge": {"count": 20, "maxLen": 200},
        "pipeline": {"length": 1000},
        "engine": {"steps": 50},
    }
    code_a, a = _run(tmp_path, command, doc, out="a")
    code_b, b = _run(tmp_path, command, doc, out="b")
    assert code_a == code_b == 0
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b)) and names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
        if name.endswith(".json") and name.startswith(command):
            doc_a = json.loads((a / name).read_text())
            assert doc_a["version"] == __version__ and len(doc_a["configHash"]) == 16


def test_refine_with_grid(tmp_path):
    doc = {
        "refine": {
            "grid": [{"vertical": 1, "slash": 1}, {"vertical": 4, "slash": 4}],
            "calibration": {"length": 128, "shortLength": 64, "dim": 32},
        }
    }
    code, out = _run(tmp_path, "refine", doc)
    assert code == 0
    assert (out / "plan.json").exists() and (out / "refine_report.csv").exists()


def test_seed_override_and_env_out(tmp_path, monkeypatch):
    cfg = _write(tmp_path, {"forge": {"count": 5, "maxLen": 100}})
    monkeypatch.setenv("LONGATTN_OUT", str(tmp_path / "env"))
    assert main(["forge", "--config", cfg]) == 0
    assert main(["forge", "--config", cfg, "--out", str(tmp_path / "s1"), "--seed", "1"]) == 0
    env = (tmp_path / "env" / "corpus.jsonl").read_bytes()
    assert env != (tmp_path / "s1" / "corpus.jsonl").read_bytes()
    assert main(["forge", "--config", cfg, "--seed", "-3"]) == 2


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, {"forge": {"count": 2, "maxLen": 64}})
    proc = subprocess.run(
        [sys.executable, "-m", "longattn", "forge", "--config", cfg, "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
