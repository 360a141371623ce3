import csv
import io
import json

import pytest

from hybridlab import cost_model as cm
from hybridlab import pipeline as pl
from hybridlab import reports as rp
from hybridlab.conversion import ct_bytes
from hybridlab.errors import MissingRun

BASE = pl.PRESETS["bert-base"]


def _csv_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def _as_cell(v):
    if v is None:
        return ""
    if isinstance(v, (dict, list)):
        return json.dumps(v)
    return str(v)


def test_table12_needs_a_run():
    with pytest.raises(MissingRun):
        rp.table12(None)


def test_table12_from_record():
    rows = rp.table12(rp.run_tiny().to_record())
    measured = rows[0]
    assert measured["source"] == "measured"
    assert {k: measured[k] for k in ("softmax", "ln1", "gelu", "ln2", "total")} == {"softmax": 3, "ln1": 0, "gelu": 4, "ln2": 0, "total": 7}
    assert any(r["source"] == "reference" for r in rows)


@pytest.mark.parametrize("kind", ["table4", "table8", "table14", "ablation"])
def test_json_and_csv_agree(tmp_path, kind):
    pj = rp.emit_report(kind, "json", tmp_path, BASE)
    pc = rp.emit_report(kind, "csv", tmp_path, BASE)
    rows = json.loads(pj.read_text())["rows"]
    cells = _csv_rows(pc.read_text())
    assert len(rows) == len(cells)
    for r, c in zip(rows, cells):
        for k, v in r.items():
            assert c[k] == _as_cell(v), (kind, k)
        assert all(c[k] == "" for k in c if k not in r)


def test_reports_are_byte_identical(tmp_path):
    a = rp.emit_report("ablation", "json", tmp_path / "a", BASE).read_bytes()
    b = rp.emit_report("ablation", "json", tmp_path / "b", BASE).read_bytes()
    assert a == b


def test_unknown_kind():
    with pytest.raises(ValueError):
        rp.build_rows("table99", BASE, {})


def test_table4_boundary_totals():
    rows = rp.table4(BASE)
    assert rows[0]["total"] == 72 and rows[1]["total"] == 48


def test_table8_halving_and_trim():
    rows = rp.table8()
    real, cplx, trim = rows[:3]
    assert real["bytes"] == 2 * cplx["bytes"]
    N, limbs, t = rp.table8_config()
    assert (N, limbs) == (65536, 5)
    assert trim["bytes"] == ct_bytes(N, t) + ct_bytes(N, limbs)
    assert cplx["speedup_LAN"] == pytest.approx(2.0)
    assert any(r["source"] == "gap" for r in rows)


def test_wo_scp_repack_cost():
    d = rp.ablate(BASE, "wo_scp")
    assert d["edges"] == {"qkv_score": 12, "qkv_value": 6, "value_out": 6}
    assert d["rot_per_layer"] == 168
    assert d["rot_seconds_per_layer"] == pytest.approx(168 * 2.32e-3)


def test_wo_cc_doubles_bytes():
    d = rp.ablate(BASE, "wo_cc")
    assert d["byte_ratio"] == 2.0
    assert d["real_cts"] == 2 * d["complex_cts"] == 96
    assert all(v > 0 for v in d["latency_delta_s"].values())


def test_table14_rows_cover_both_scopes():
    rows = rp.table14()
    measured = [r for r in rows if r.get("source") == "measured"]
    assert {r["scope"] for r in measured} == {"layer", "model"}
    layer_phantom = [r for r in measured if r["scope"] == "layer" and r["fhe_profile"] == "phantom"]
    assert len(layer_phantom) == len(cm.TABLE14_REFERENCE)


def test_conversion_and_codec_roundtrips():
    rt = rp.conversion_roundtrip(trials=4)
    assert rt["max_err_c2m"] == 0.0
    assert rt["max_err_roundtrip"] <= 1e-6
    assert rp.codec_roundtrip() <= 1e-4
