"""Latency deltas for boundary choices, the Expand/Minimal rule and network overlays.

A candidate design ``D`` is compared with the minimal-conversion baseline ``B``.
All quantities are seconds or bytes. Results are screening estimates; only
their sign and rough size are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from .conversion import PayloadReport, ct_bytes, pair_payload
from .slot_engine import PHANTOM, PROFILES, PrimitiveProfile

EXPAND = "Expand"
MINIMAL = "Minimal"


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    bandwidth: float  # bytes per second
    rtt: float  # seconds

    def __post_init__(self) -> None:
        if self.bandwidth <= 0 or self.rtt <= 0:
            raise ValueError("bandwidth and rtt must be positive")

    def transfer(self, nbytes: float) -> float:
        return nbytes / self.bandwidth


def _mbps(v: float) -> float:
    return v * 1e6 / 8


LAN = NetworkProfile("LAN", _mbps(1000), 0.3e-3)
WAN1 = NetworkProfile("WAN1", _mbps(400), 4e-3)
WAN2 = NetworkProfile("WAN2", _mbps(100), 4e-3)
WAN3 = NetworkProfile("WAN3", _mbps(100), 80e-3)
NETWORKS: dict[str, NetworkProfile] = {p.name.lower(): p for p in (LAN, WAN1, WAN2, WAN3)}


def network(name: str) -> NetworkProfile:
    try:
        return NETWORKS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown network profile {name!r}") from None


def c_round(elements: int, ell: int = 43) -> int:
    """Bytes per Beaver multiplication round over ``elements`` ring elements."""
    return elements * 4 * math.ceil(ell / 8)


@dataclass(frozen=True)
class DesignDelta:
    """Difference between a candidate design and the minimal baseline."""

    K_extra: int
    R_extra: int
    R_saved: int
    C_round: int
    dT_ckks: float  # positive when the candidate saves CKKS time
    N_ring: int
    limbs: int

    def __post_init__(self) -> None:
        for name in ("K_extra", "R_extra", "R_saved", "C_round", "N_ring", "limbs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def delta_costs(d: DesignDelta, net: NetworkProfile) -> tuple[float, float]:
    """``(dT_conv, dT_comp)`` for moving from the baseline to ``d``."""
    dt_conv = d.K_extra * ct_bytes(d.N_ring, d.limbs) / net.bandwidth + d.R_extra * net.rtt
    dt_comp = -(d.dT_ckks + d.R_saved * (net.rtt + d.C_round / net.bandwidth))
    return dt_conv, dt_comp


def decide_from(dt_conv: float, dt_comp: float) -> str:
    return EXPAND if dt_conv + dt_comp < 0 else MINIMAL


def decide(d: DesignDelta, net: NetworkProfile) -> str:
    """``Expand`` iff the total delta is strictly negative."""
    return decide_from(*delta_costs(d, net))


def overlay_latency(
    compute_seconds: float,
    rounds: int,
    mpc_bytes: int,
    payload_bytes: int,
    net: NetworkProfile,
    payload_trips: int = 0,
) -> float:
    """Compute time plus analytic network time.

    ``rounds`` and ``mpc_bytes`` come from the MPC transcript. Each boundary
    ciphertext sent is one message, counted in ``payload_trips``.
    """
    return compute_seconds + (mpc_bytes + payload_bytes) / net.bandwidth + (rounds + payload_trips) * net.rtt


def conversion_latency(report: PayloadReport, net: NetworkProfile) -> float:
    """Network time of one conversion pair; each ciphertext is its own message."""
    return overlay_latency(0.0, 0, 0, report.total_bytes, net, 2 * report.cts_per_direction)


# ---------------------------------------------------------------------------
# GELU boundary: pre-evaluate candidates in CKKS versus evaluate them in MPC


GELU_ROUNDS_SAVED = 3  # x^2; x^3 and x^4; coefficient truncation
CTMUL_PER_CANDIDATE_BLOCK = 3


@dataclass(frozen=True)
class GeluBoundaryShape:
    """Per-layer shape of the FF1 -> GELU boundary."""

    name: str
    m: int
    d_ff: int
    n_slots: int
    N_ring: int
    limbs: int
    N_L: int
    ell: int = 43

    @property
    def B_ff(self) -> int:
        """Real ciphertext blocks of the GELU input."""
        return math.ceil(self.m * self.d_ff / self.n_slots)

    @property
    def complex_blocks(self) -> int:
        return math.ceil(self.B_ff / 2)

    @property
    def K_extra(self) -> int:
        """Two extra candidate tensors, complex packed."""
        return 2 * self.complex_blocks

    @property
    def extra_ctmul(self) -> int:
        return 2 * CTMUL_PER_CANDIDATE_BLOCK * self.complex_blocks

    def delta(self, profile: PrimitiveProfile, scope: str = "layer") -> DesignDelta:
        if scope not in ("layer", "model"):
            raise ValueError("scope must be 'layer' or 'model'")
        k = 1 if scope == "layer" else self.N_L
        return DesignDelta(
            K_extra=k * self.K_extra,
            R_extra=0,
            R_saved=k * GELU_ROUNDS_SAVED,
            C_round=c_round(self.m * self.d_ff, self.ell),
            dT_ckks=-k * self.extra_ctmul * profile.latency["ctmul"],
            N_ring=self.N_ring,
            limbs=self.limbs,
        )


# Boundary ciphertexts of 2^20 bytes: N=32768 with two limbs, or N=65536 with one.
GELU_SHAPES: dict[str, GeluBoundaryShape] = {
    "bert-base": GeluBoundaryShape("bert-base", 128, 3072, 16384, 32768, 2, 12),
    "bert-large": GeluBoundaryShape("bert-large", 128, 4096, 32768, 65536, 1, 24),
    "gpt2-base": GeluBoundaryShape("gpt2-base", 64, 3072, 16384, 32768, 2, 12),
}

TABLE14_REFERENCE: dict[tuple[str, str], tuple[float, float, str]] = {
    ("bert-base", "LAN"): (0.20, -0.04, MINIMAL),
    ("bert-base", "WAN1"): (0.50, -0.39, MINIMAL),
    ("bert-base", "WAN2"): (2.01, -2.09, EXPAND),
    ("bert-base", "WAN3"): (2.01, -2.31, EXPAND),
    ("bert-large", "LAN"): (0.13, -0.18, EXPAND),
    ("bert-large", "WAN1"): (0.34, -0.64, EXPAND),
    ("bert-large", "WAN2"): (1.34, -2.90, EXPAND),
    ("bert-large", "WAN3"): (1.34, -3.13, EXPAND),
    ("gpt2-base", "LAN"): (0.10, -0.02, MINIMAL),
    ("gpt2-base", "WAN1"): (0.25, -0.20, MINIMAL),
    ("gpt2-base", "WAN2"): (1.01, -1.05, EXPAND),
    ("gpt2-base", "WAN3"): (1.01, -1.28, EXPAND),
}


def table14(
    fhe_profile: PrimitiveProfile | str = PHANTOM,
    scope: str = "layer",
    shapes: Mapping[str, GeluBoundaryShape] = GELU_SHAPES,
    networks: Iterable[NetworkProfile] = (LAN, WAN1, WAN2, WAN3),
) -> list[dict[str, object]]:
    """Decision rows for every (model, network) pair."""
    prof = PROFILES[fhe_profile] if isinstance(fhe_profile, str) else fhe_profile
    rows = []
    for name, shape in shapes.items():
        d = shape.delta(prof, scope)
        for net in networks:
            conv, comp = delta_costs(d, net)
            rows.append(
                {
                    "model": name,
                    "profile": net.name,
                    "fhe_profile": prof.name,
                    "scope": scope,
                    "K_extra": d.K_extra,
                    "dT_conv": conv,
                    "dT_comp": comp,
                    "dT": conv + comp,
                    "decision": decide_from(conv, comp),
                    "N_ring": shape.N_ring,
                    "limbs": shape.limbs,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# conversion benchmark overlay

TABLE8_REFERENCE: dict[str, dict[str, float]] = {
    "real": {"MB": 20.97, "LAN": 168.97, "WAN1": 435.43, "WAN2": 1693.72, "WAN3": 1997.72},
    "complex": {"MB": 10.49, "LAN": 85.39, "WAN1": 218.62, "WAN2": 847.76, "WAN3": 999.76},
    "complex+trim": {"MB": 6.41, "LAN": 51.88, "WAN1": 131.69, "WAN2": 508.57, "WAN3": 599.62},
}


def table8(
    N_ring: int,
    limbs: int,
    trim_limbs: int,
    k: int = 2,
    networks: Iterable[NetworkProfile] = (LAN, WAN1, WAN2, WAN3),
    header_bytes: int = 0,
) -> list[dict[str, object]]:
    """Payload and modeled latency (ms) of a conversion pair in each mode."""
    reports = {
        "real": pair_payload("real", k, N_ring, limbs, header_bytes=header_bytes),
        "complex": pair_payload("complex", k, N_ring, limbs, header_bytes=header_bytes),
        "complex+trim": pair_payload("complex", k, N_ring, limbs, trim_limbs, header_bytes),
    }
    networks = list(networks)
    rows = []
    for mode, rep in reports.items():
        row: dict[str, object] = {"mode": mode, "bytes": rep.total_bytes, "MB": rep.total_bytes / 1e6}
        for net in networks:
            row[net.name] = 1e3 * conversion_latency(rep, net)
        rows.append(row)
    base = {net.name: rows[0][net.name] for net in networks}
    for row in rows:
        for net in networks:
            row[f"speedup_{net.name}"] = base[net.name] / row[net.name]
    return rows
