"""Table-shaped reports, ablations and multi-layer runs.

Measured rows carry ``source = "measured"``; published figures are embedded as
``source = "reference"`` constants and never mixed into measurements.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import conversion as cv
from . import cost_model as cm
from . import he_kernels as hk
from . import packing as pk
from . import pipeline as pl
from .errors import MissingRun
from .mpc_engine import Engine, Ring
from .ring_codec import Codec
from .slot_engine import PHANTOM, OpLedger, PrimitiveProfile, encrypt, ledger_proxy

REPORT_KINDS = ("table2", "table4", "table8", "table12", "table14", "ablation")

# ---------------------------------------------------------------------------
# reference constants

TABLE2_REFERENCE = [
    {"method": "BOLT", "score_rot": 13824, "score_ctmul": 1536, "score_proxy_s": 36.1, "value_rot": 21420, "value_ctmul": 768, "value_proxy_s": 51.7},
    {"method": "Powerformer", "score_rot": 4392, "score_ctmul": 768, "score_proxy_s": 12.2, "value_rot": 4882, "value_ctmul": 1536, "value_proxy_s": 15.4},
    {"method": "BLB", "score_rot": 512, "score_ctmul": 768, "score_proxy_s": 3.2, "value_rot": 824, "value_ctmul": 1536, "value_proxy_s": 6.0},
    {"method": "Preeval", "score_rot": 630, "score_ctmul": 448, "score_proxy_s": 2.6, "value_rot": 1524, "value_ctmul": 384, "value_proxy_s": 4.6},
]

TABLE12_REFERENCE = [
    {"method": "THOR", "softmax": 0, "ln1": 0, "gelu": 0, "ln2": 0, "total": 0, "bootstraps": 8},
    {"method": "Powerformer", "softmax": 0, "ln1": 0, "gelu": 0, "ln2": 0, "total": 0, "bootstraps": 3},
    {"method": "BOLT", "softmax": 6, "ln1": 4, "gelu": 4, "ln2": 4, "total": 18, "bootstraps": 0},
    {"method": "BLB", "softmax": 18, "ln1": 4, "gelu": 4, "ln2": 4, "total": 30, "bootstraps": 0},
    {"method": "Preeval", "softmax": 3, "ln1": 0, "gelu": 4, "ln2": 0, "total": 7, "bootstraps": 0},
]

# end-to-end minutes per profile and total GB; not reproducible on a CPU emulator
ABLATION_REFERENCE = {
    "gpt2-base": {
        "BLB": (2.0, 2.5, 3.9, 8.1, 1.5),
        "w/o CC": (1.8, 2.3, 3.6, 7.4, 1.3),
        "w/o SCP": (1.8, 2.2, 3.4, 6.2, 1.0),
        "Preeval": (1.6, 2.0, 3.2, 6.0, 1.0),
    },
    "bert-base": {
        "BLB": (2.5, 3.8, 6.6, 13.2, 3.0),
        "w/o CC": (2.3, 3.5, 6.0, 11.4, 2.7),
        "w/o SCP": (2.3, 3.1, 4.9, 9.2, 2.2),
        "Preeval": (2.1, 2.9, 4.6, 8.9, 2.2),
    },
    "bert-large": {
        "BLB": (6.6, 9.8, 16.2, 24.9, 7.8),
        "w/o CC": (6.3, 9.2, 15.4, 23.6, 7.3),
        "w/o SCP": (6.1, 8.2, 13.6, 21.4, 5.8),
        "Preeval": (5.3, 7.4, 12.8, 20.6, 5.8),
    },
}

SCP_REPACK_ROT_REFERENCE = 168
SCP_REPACK_SECONDS_REFERENCE = 0.39

TABLE8_NOTE = (
    "complex+trim bytes use the rule-chosen boundary level; the published 6.41 MB "
    "does not correspond to a whole number of limbs, so the gap is reported, not forced"
)


# ---------------------------------------------------------------------------
# table 2: attention kernels at full shape


def table2(seed: int = 0, n: int = 16384, m: int = 128, H: int = 12, d_h: int = 64, C: int = 120, beta: int = 16) -> list[dict[str, object]]:
    rng = np.random.default_rng(seed)
    d = H * d_h
    led_s, led_v = OpLedger("score"), OpLedger("value")

    def enc(v: np.ndarray, led: OpLedger) -> object:
        return encrypt(v, led, level=5, scale=2.0**40)

    Q, K = rng.standard_normal((m, d)), rng.standard_normal((m, d))
    splan = hk.ScorePlan.build(n, m, H, d_h, C=C, beta=beta)
    fmt = pk.SegmentColumn(n, m, C)
    perm = hk.pi_s(H, d_h)
    qc = [enc(v, led_s) for v in pk.pack_segment_column(Q[:, perm], fmt, complex_pairs=False)]
    kc = [enc(v, led_s) for v in pk.pack_segment_column(K[:, perm], fmt, complex_pairs=False)]
    out = hk.score_kernel(qc, kc, splan)  # type: ignore[arg-type]
    S = pk.unpack_folded_diagonal([c.slots for c in out.stream], out.fmt)
    S_ref = np.stack([Q[:, h * d_h : (h + 1) * d_h] @ K[:, h * d_h : (h + 1) * d_h].T for h in range(H)])

    P, V = rng.random((H, m, m)), rng.standard_normal((H, m, d_h))
    vplan = hk.ValuePlan.build(n, m, H, d_h)
    vc = [enc(v, led_v) for v in pk.pack_head_major(V, vplan.fmt)]
    pc = [enc(v, led_v) for v in pk.pack_folded_head_major(P, vplan.fmt)]
    oc = hk.value_kernel(pc, vc, vplan)  # type: ignore[arg-type]
    O = pk.unpack_head_major([c.slots for c in oc], vplan.fmt, H)

    def rel(a: np.ndarray, b: np.ndarray) -> float:
        return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))

    row = {
        "method": "measured",
        "score_rot": led_s["rot"],
        "score_ctmul": led_s["ctmul"],
        "score_proxy_s": round(ledger_proxy(led_s, PHANTOM), 4),
        "value_rot": led_v["rot"],
        "value_ctmul": led_v["ctmul"],
        "value_proxy_s": round(ledger_proxy(led_v, PHANTOM), 4),
        "score_rel_err": rel(S, S_ref),
        "value_rel_err": rel(O, P @ V),
        "params": f"n={n} m={m} H={H} d_h={d_h} C={C} beta={beta} B={splan.blocks} g={splan.g} B_V={vplan.B_V}",
    }
    return [dict(row, source="measured")] + [dict(r, source="reference") for r in TABLE2_REFERENCE]


# ---------------------------------------------------------------------------
# table 4: boundary ciphertext counts


def table4(cfg: pl.ModelConfig) -> list[dict[str, object]]:
    rows = []
    for label, gelu in (("Preeval", "preeval"), ("Minimal", "mpc_poly")):
        c = pl.boundary_counts(cfg, gelu)
        row: dict[str, object] = {"method": label, "source": "measured", "model": cfg.name}
        for b in pl.MPC_BLOCKS:
            row[f"{b}_in"] = c[b]["in"]
            row[f"{b}_out"] = c[b]["out"]
        row["total"] = pl.total_boundary(c)
        rows.append(row)
    for label, ref in pl.TABLE4_REFERENCE.items():
        row = {"method": label, "source": "reference", "model": "bert-base"}
        for b in pl.MPC_BLOCKS:
            row[f"{b}_in"], row[f"{b}_out"] = ref[b]  # type: ignore[misc]
        row["total"] = ref["total"]
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# table 8: conversion payload and modeled latency


def table8_config(N_ring: int = 65536, depth: int = 4) -> tuple[int, int, int]:
    """``(N_ring, limbs, trimmed limbs)`` with the trimmed level chosen by the boundary rule."""
    conv = cv.default_config(depth)
    return N_ring, depth + 1, conv.L_conv + 1


def table8(N_ring: int = 65536, depth: int = 4, header_bytes: int = 0) -> list[dict[str, object]]:
    N, limbs, trim = table8_config(N_ring, depth)
    rows: list[dict[str, object]] = []
    for r in cm.table8(N, limbs, trim, header_bytes=header_bytes):
        r = dict(r, source="measured", limbs_c2m=trim if r["mode"] == "complex+trim" else limbs, limbs_m2c=limbs)
        rows.append({k: (round(v, 4) if isinstance(v, float) else v) for k, v in r.items()})
    for mode, ref in cm.TABLE8_REFERENCE.items():
        rows.append({"mode": mode, "source": "reference", **ref})
    trimmed = rows[2]["bytes"]
    rows.append({"mode": "complex+trim", "source": "gap", "MB": round(trimmed / 1e6 - 6.41, 4), "note": TABLE8_NOTE})  # type: ignore[operator]
    return rows


def conversion_roundtrip(n: int = 64, trials: int = 8, depth: int = 4, seed: int = 0, magnitude: float = 8.0) -> dict[str, object]:
    """Run m2c after c2m on random grid vectors; returns the worst slot error and bytes."""
    conv = cv.default_config(depth)
    rng = np.random.default_rng(seed)
    grid = 2.0**conv.F
    worst_c2m, worst_m2c = 0.0, 0.0
    log = cv.ConversionLog()
    for t in range(trials):
        eng = Engine(Ring(conv.ell, conv.F), seed=seed + t)
        led = OpLedger("conversion")
        x = np.rint(rng.uniform(-magnitude, magnitude, n) * grid) / grid
        y = np.rint(rng.uniform(-magnitude, magnitude, n) * grid) / grid
        ct = cv.trim(encrypt(x + 1j * y, led, level=depth, scale=float(conv.delta)), conv)
        xs, ys = cv.c2m_complex(ct, conv, eng, seed=seed + t, log=log)
        got = eng.reconstruct(xs) + 1j * eng.reconstruct(ys)
        worst_c2m = max(worst_c2m, float(np.max(np.abs(got - (x + 1j * y)))))
        back = cv.m2c_complex(xs, ys, conv, eng, led, level=depth, log=log)
        worst_m2c = max(worst_m2c, float(np.max(np.abs(back.slots - (x + 1j * y)))))
    return {
        "n": n,
        "trials": trials,
        "L_conv": conv.L_conv,
        "max_err_c2m": worst_c2m,
        "max_err_roundtrip": worst_m2c,
        "c2m_bytes": log.c2m_bytes,
        "m2c_bytes": log.m2c_bytes,
    }


def codec_roundtrip(n: int = 2**14, scale_bits: int = 40, seed: int = 0) -> float:
    """Max slot error of encode then decode at scale ``2^scale_bits``."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)
    chain = cv.default_config(1, scale_bits).chain
    codec = Codec(n, float(2**scale_bits))
    return float(np.max(np.abs(codec.decode(codec.encode(z, chain.partial_products[-1])) - z)))


# ---------------------------------------------------------------------------
# table 12: interactive rounds per layer


def table12(report: pl.LayerReport | Mapping[str, object] | None) -> list[dict[str, object]]:
    if report is None:
        raise MissingRun("table12 needs a completed run-layer report")
    rounds = report.rounds if isinstance(report, pl.LayerReport) else report["rounds"]  # type: ignore[index]
    row: dict[str, object] = {"method": "measured", "source": "measured"}
    for b in pl.MPC_BLOCKS:
        row[b] = rounds.get(b, 0)  # type: ignore[union-attr]
    row["total"] = sum(int(row[b]) for b in pl.MPC_BLOCKS)  # type: ignore[call-overload]
    row["bootstraps"] = 0
    return [row] + [dict(r, source="reference") for r in TABLE12_REFERENCE]


# ---------------------------------------------------------------------------
# table 14: GELU boundary decisions


def table14() -> list[dict[str, object]]:
    rows: list[dict[str, object]] = []
    for prof in ("phantom", "liberate"):
        for scope in ("layer", "model"):
            for r in cm.table14(prof, scope):
                rows.append({**{k: (round(v, 4) if isinstance(v, float) else v) for k, v in r.items()}, "source": "measured"})
    for (model, net), (conv, comp, dec) in cm.TABLE14_REFERENCE.items():
        rows.append(
            {"model": model, "profile": net, "fhe_profile": "phantom", "scope": "reported", "dT_conv": conv, "dT_comp": comp, "dT": round(conv + comp, 2), "decision": dec, "source": "reference"}
        )
    return rows


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class LegBytes:
    """Bytes of one boundary ciphertext per leg of each MPC block."""

    c2m: dict[str, int]
    m2c: dict[str, int]


# source and destination FHE block of each MPC block
_BLOCK_EDGES = {"softmax": (0, 1), "ln1": (1, 2), "gelu": (2, 3), "ln2": (3, 0)}


def leg_bytes(cfg: pl.ModelConfig) -> LegBytes:
    c2m, m2c = {}, {}
    for name, (src, dst) in _BLOCK_EDGES.items():
        s, d = cfg.blocks[src], cfg.blocks[dst]
        conv = cv.default_config(s.depth, s.scale_bits)
        c2m[name] = cv.ct_bytes(s.N_ring, conv.L_conv + 1)
        m2c[name] = cv.ct_bytes(d.N_ring, d.depth + 1)
    return LegBytes(c2m, m2c)


def boundary_bytes(cfg: pl.ModelConfig, gelu: str, complex_mode: bool) -> tuple[int, int]:
    """(bytes, ciphertexts) crossing the boundary in one layer."""
    counts = pl.boundary_counts(cfg, gelu, complex_mode)
    lb = leg_bytes(cfg)
    total = sum(counts[b]["in"] * lb.c2m[b] + counts[b]["out"] * lb.m2c[b] for b in pl.MPC_BLOCKS)
    return total, pl.total_boundary(counts)


def scp_edges(cfg: pl.ModelConfig) -> dict[str, int]:
    """Ciphertext blocks crossing each direct FHE-FHE edge."""
    per_tensor = math.ceil(cfg.d_model / cfg.n_seg)
    B_V = hk.ValuePlan.build(cfg.n, cfg.m, cfg.H, cfg.d_h).B_V
    return {"qkv_score": 2 * per_tensor, "qkv_value": per_tensor, "value_out": B_V}


def wo_scp_delta(cfg: pl.ModelConfig, profile: PrimitiveProfile = PHANTOM, seed: int = 0) -> dict[str, object]:
    """Extra work from repacking every FHE-FHE edge with rotation-mask-accumulate."""
    rng = np.random.default_rng(seed)
    led = OpLedger("wo_scp")
    ct = encrypt(np.zeros(cfg.n), led, level=1, scale=2.0**40)
    perm = rng.permutation(cfg.n)
    edges = scp_edges(cfg)
    for blocks in edges.values():
        for _ in range(blocks):
            hk.repack_rma(ct, perm, cfg.m)
    return {
        "edges": edges,
        "blocks": sum(edges.values()),
        "rot_per_layer": led["rot"],
        "rot_seconds_per_layer": led["rot"] * profile.latency["rot"],
        "proxy_seconds_per_layer": ledger_proxy(led, profile, keyswitch_only=False),
        "ledger": dict(sorted(led.counts.items())),
    }


def wo_cc_delta(cfg: pl.ModelConfig) -> dict[str, object]:
    """Real-mode conversion with MPC-side GELU candidates versus complex mode."""
    cc_bytes, cc_cts = boundary_bytes(cfg, "mpc_poly", True)
    real_bytes, real_cts = boundary_bytes(cfg, "mpc_poly", False)
    enc_bytes, enc_cts = boundary_bytes(cfg, cfg.gelu, True)
    extra_rounds = 3 if cfg.gelu == "preeval" else 0
    mpc_extra = extra_rounds * cm.c_round(cfg.m * cfg.d_ff, cfg.ell)
    per_profile = {}
    for net in cm.NETWORKS.values():
        t_real = cm.overlay_latency(0.0, extra_rounds, mpc_extra, real_bytes, net, real_cts)
        t_enc = cm.overlay_latency(0.0, 0, 0, enc_bytes, net, enc_cts)
        per_profile[net.name] = t_real - t_enc
    return {
        "complex_bytes": cc_bytes,
        "complex_cts": cc_cts,
        "real_bytes": real_bytes,
        "real_cts": real_cts,
        "byte_ratio": real_bytes / cc_bytes,
        "preeval_bytes": enc_bytes,
        "preeval_cts": enc_cts,
        "extra_rounds": extra_rounds,
        "latency_delta_s": per_profile,
    }


def ablate(cfg: pl.ModelConfig, variant: str, fhe_profile: PrimitiveProfile = PHANTOM, seed: int = 0) -> dict[str, object]:
    if variant == "wo_scp":
        d = wo_scp_delta(cfg, fhe_profile, seed)
        d["latency_delta_s"] = {net: d["rot_seconds_per_layer"] for net in ("LAN", "WAN1", "WAN2", "WAN3")}
        d["reference"] = {"rot_per_layer": SCP_REPACK_ROT_REFERENCE, "seconds_per_layer": SCP_REPACK_SECONDS_REFERENCE}
        return {"variant": variant, "model": cfg.name, **d}
    if variant == "wo_cc":
        return {"variant": variant, "model": cfg.name, **wo_cc_delta(cfg)}
    if variant == "baseline_blb_constants":
        ref = ABLATION_REFERENCE.get(cfg.name, {})
        return {
            "variant": variant,
            "model": cfg.name,
            "source": "reference",
            "columns": ["LAN_min", "WAN1_min", "WAN2_min", "WAN3_min", "comm_GB"],
            "rows": {k: list(v) for k, v in ref.items()},
        }
    raise ValueError(f"unknown ablation {variant!r}")


def ablation_rows(cfg: pl.ModelConfig, fhe_profile: PrimitiveProfile = PHANTOM) -> list[dict[str, object]]:
    scp = ablate(cfg, "wo_scp", fhe_profile)
    cc = ablate(cfg, "wo_cc", fhe_profile)
    rows: list[dict[str, object]] = [
        {"variant": "wo_scp", "source": "measured", "model": cfg.name, "metric": "rot_per_layer", "value": scp["rot_per_layer"]},
        {"variant": "wo_scp", "source": "measured", "model": cfg.name, "metric": "rot_seconds_per_layer", "value": round(float(scp["rot_seconds_per_layer"]), 4)},  # type: ignore[arg-type]
        {"variant": "wo_scp", "source": "reference", "model": "bert-base", "metric": "rot_per_layer", "value": SCP_REPACK_ROT_REFERENCE},
        {"variant": "wo_scp", "source": "reference", "model": "bert-base", "metric": "rot_seconds_per_layer", "value": SCP_REPACK_SECONDS_REFERENCE},
        {"variant": "wo_cc", "source": "measured", "model": cfg.name, "metric": "complex_bytes", "value": cc["complex_bytes"]},
        {"variant": "wo_cc", "source": "measured", "model": cfg.name, "metric": "real_bytes", "value": cc["real_bytes"]},
        {"variant": "wo_cc", "source": "measured", "model": cfg.name, "metric": "byte_ratio", "value": cc["byte_ratio"]},
    ]
    for net, v in cc["latency_delta_s"].items():  # type: ignore[union-attr]
        rows.append({"variant": "wo_cc", "source": "measured", "model": cfg.name, "metric": f"latency_delta_s_{net}", "value": round(v, 4)})
    for model, table in ABLATION_REFERENCE.items():
        for label, vals in table.items():
            for col, v in zip(("LAN_min", "WAN1_min", "WAN2_min", "WAN3_min", "comm_GB"), vals):
                rows.append({"variant": label, "source": "reference", "model": model, "metric": col, "value": v})
    return rows


# ---------------------------------------------------------------------------
# multi-layer runs


def run_model(
    cfg: pl.ModelConfig,
    seed: int = 0,
    gelu: str | None = None,
    fhe_profile: PrimitiveProfile = PHANTOM,
    layers: int | None = None,
) -> tuple[list[pl.LayerReport], float]:
    """Chain ``layers`` layers on shares; returns per-layer reports and the final max abs error."""
    rng = np.random.default_rng(seed)
    L = cfg.N_L if layers is None else layers
    X_ref = rng.uniform(-1.0, 1.0, (cfg.m, cfg.d_model))
    eng = Engine(Ring(cfg.ell, cfg.F), seed=seed)
    X = eng.share(X_ref)
    reports = []
    for i in range(L):
        W = pl.random_weights(cfg, rng)
        if i > 0:
            W = pl.calibrate_norms(cfg, W, X_ref)
        ref = pl.plaintext_reference(cfg, W, X_ref)
        eng = Engine(Ring(cfg.ell, cfg.F), seed=seed * 1000 + i + 1)
        rep, X = pl.run_layer(cfg, X, W, seed=seed * 1000 + i, gelu=gelu, fhe_profile=fhe_profile, eng=eng, reference=ref)
        reports.append(rep)
        X_ref = ref
    return reports, reports[-1].max_abs_error


def precision_variant(cfg: pl.ModelConfig, F: int) -> pl.ModelConfig:
    """``cfg`` at ``F`` fractional bits with ring width and boundary scale grown by the same amount."""
    extra = max(0, F - cfg.F)
    blocks = tuple(replace(b, scale_bits=b.scale_bits + extra) for b in cfg.blocks)
    return replace(cfg, F=F, ell=cfg.ell + extra, blocks=blocks)


def run_tiny(seed: int = 0, gelu: str | None = None, F: int | None = None) -> pl.LayerReport:
    base = pl.PRESETS["tiny"]
    cfg = base if F is None else precision_variant(base, F)
    reports, _ = run_model(cfg, seed=seed, gelu=gelu, layers=1)
    return reports[0]


# ---------------------------------------------------------------------------
# serialization


def to_plain(v: object) -> object:
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, dict):
        return {str(k): to_plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [to_plain(x) for x in v]
    return v


def to_json(doc: object) -> str:
    return json.dumps(to_plain(doc), indent=2, sort_keys=True) + "\n"


def rows_to_csv(rows: Sequence[Mapping[str, object]]) -> str:
    fields = sorted({k for r in rows for k in r})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: json.dumps(to_plain(r[k])) if isinstance(r.get(k), (dict, list)) else r.get(k, "") for k in fields})
    return buf.getvalue()


def build_rows(kind: str, cfg: pl.ModelConfig, runs: Mapping[str, object], seed: int = 0, fhe_profile: PrimitiveProfile = PHANTOM) -> list[dict[str, object]]:
    if kind == "table2":
        return table2(seed)
    if kind == "table4":
        return table4(cfg)
    if kind == "table8":
        return table8()
    if kind == "table12":
        return table12(runs.get("layer"))  # type: ignore[arg-type]
    if kind == "table14":
        return table14()
    if kind == "ablation":
        return ablation_rows(cfg, fhe_profile)
    raise ValueError(f"unknown report kind {kind!r}; expected one of {REPORT_KINDS}")


def emit_report(
    kind: str,
    fmt: str,
    out_dir: str | Path,
    cfg: pl.ModelConfig,
    runs: Mapping[str, object] | None = None,
    seed: int = 0,
    fhe_profile: PrimitiveProfile = PHANTOM,
) -> Path:
    """Write ``<kind>.<fmt>`` into ``out_dir``."""
    if fmt not in ("csv", "json"):
        raise ValueError("format must be csv or json")
    rows = build_rows(kind, cfg, runs or {}, seed, fhe_profile)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{kind}.{fmt}"
    text = to_json({"kind": kind, "rows": rows}) if fmt == "json" else rows_to_csv(rows)
    path.write_text(text)
    return path


__all__ = [
    "REPORT_KINDS",
    "ablate",
    "ablation_rows",
    "emit_report",
    "run_model",
    "run_tiny",
    "table12",
    "table14",
    "table2",
    "table4",
    "table8",
]
