"""Verifier-side accuracy estimation and trust-score gating.

A server's trust score is acc * l / max(l) * w: its probe accuracy, scaled
by the share of layers it carries and a bounding weight. Scores at or above
the threshold keep the server active; anything below deactivates it and
hands its layer range to a neighbor. Accuracy is the fraction of validation
probes whose outputs match the verifier's full-precision reference within a
per-element tolerance, so it is a count in [0, 1] by construction.

Note the structural consequence of the score: a server carrying few layers
caps out below 1 even when perfectly accurate, so thresholds above
min(l)/max(l) * w deactivate honest small servers. `honest_gate_warning`
surfaces that before a run does it silently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .federation import Simulation
from .transformer import layer_forward
from .wire import (
    Kind,
    NodeId,
    ProbeResultPayload,
    StatusUpdatePayload,
    TrustReportPayload,
    ValidationProbePayload,
)

__all__ = [
    "TrustRecord",
    "VerifierConfig",
    "estimate_accuracy",
    "trust_score",
    "apply_threshold",
    "verification_round",
    "honest_gate_warning",
]


@dataclass(frozen=True)
class TrustRecord:
    server: NodeId
    acc: float
    layers: int
    weight: float
    score: float
    status: str  # "active" | "deactivated"


@dataclass(frozen=True)
class VerifierConfig:
    theta: float = 0.5
    probe_count: int = 4
    tau: float = 1e-6
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.probe_count < 1:
            raise ValueError("probe_count must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight must lie in (0, 1], got {self.weight}")


def _within_count(server_outputs, reference_outputs, tau: float) -> int:
    ok = 0
    for got, want in zip(server_outputs, reference_outputs):
        if got.shape != want.shape:
            raise ValueError(f"probe shape mismatch: {got.shape} vs {want.shape}")
        if np.abs(got - want).max() <= tau:
            ok += 1
    return ok


def estimate_accuracy(server_outputs, reference_outputs, tau: float) -> float:
    """Fraction of probes within per-element tolerance of the reference."""
    if len(server_outputs) == 0:
        raise ValueError("empty probe set")
    if len(server_outputs) != len(reference_outputs):
        raise ValueError(
            f"{len(server_outputs)} server outputs vs "
            f"{len(reference_outputs)} references"
        )
    return _within_count(server_outputs, reference_outputs, tau) / len(server_outputs)


def trust_score(acc: float, layers: int, max_layers: int, weight: float) -> float:
    """acc * layers / max_layers * weight, bounded in [0, 1]."""
    if not 0.0 <= acc <= 1.0:
        raise ValueError(f"acc must lie in [0, 1], got {acc}")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {weight}")
    if not 1 <= layers <= max_layers:
        raise ValueError(f"need 1 <= layers <= max_layers, got {layers}/{max_layers}")
    return acc * layers / max_layers * weight


def apply_threshold(record: TrustRecord, theta: float) -> str:
    """Active iff score >= theta; the boundary itself stays active."""
    return "active" if record.score >= theta else "deactivated"


def _reference_outputs(sim: Simulation, server: int, probes) -> list:
    out = []
    for probe in probes:
        x = probe
        for layer in sim.reference_layers(server):
            x = layer_forward(x, layer)
        out.append(x)
    return out


def verification_round(sim: Simulation, config: VerifierConfig,
                       probes=None, probe_rows: int = 8) -> list:
    """Probe every active server, score it, and gate it against theta.

    Probes are partitioned across the verifier nodes; each verifier counts
    its within-tolerance probes and the counts are summed, which by
    construction equals what a single verifier would report. A deactivated
    server gets a status update and its range is reassigned immediately.
    """
    if probes is None:
        probes = [
            sim.probe_rng.standard_normal((probe_rows, sim.config.d_model))
            for _ in range(config.probe_count)
        ]
    entries = sim.active_entries()
    max_layers = max(e.stop - e.start for e in entries)
    records = []

    for e in entries:
        server_node = sim.server_id(e.server)
        chunks = np.array_split(np.arange(len(probes)), sim.n_verifiers)
        ok_total = 0
        for v, chunk in enumerate(chunks):
            if chunk.size == 0:
                continue
            verifier = sim.verifier_id(v)
            chunk_probes = [probes[i] for i in chunk]
            got = []
            for i, probe in zip(chunk, chunk_probes):
                delivered = sim.send(
                    Kind.VALIDATION_PROBE, verifier, server_node,
                    ValidationProbePayload(probe_id=int(i), matrix=probe),
                )
                result = sim.server_compute(e.server, delivered.payload.matrix)
                back = sim.send(
                    Kind.PROBE_RESULT, server_node, verifier,
                    ProbeResultPayload(probe_id=int(i), matrix=result),
                )
                got.append(back.payload.matrix)
            want = _reference_outputs(sim, e.server, chunk_probes)
            ok_total += _within_count(got, want, config.tau)
        acc = ok_total / len(probes)
        layers = e.stop - e.start
        score = trust_score(acc, layers, max_layers, config.weight)
        record = TrustRecord(server=server_node, acc=acc, layers=layers,
                             weight=config.weight, score=score, status="active")
        record = replace(record, status=apply_threshold(record, config.theta))
        sim.send(
            Kind.TRUST_REPORT, sim.verifier_id(0), sim.client,
            TrustReportPayload(server=server_node, acc=acc, layers=float(layers),
                               score=score, active=record.status == "active"),
        )
        records.append(record)

    # Gate in pipeline order; each reassignment lands before the next gate
    # fires, so the plan stays contiguous throughout.
    for record in records:
        if record.status == "deactivated":
            sim.send(Kind.STATUS_UPDATE, sim.client, record.server,
                     StatusUpdatePayload(active=False))
            sim.deactivate(record.server.index)
            sim.reassign(record.server.index)
    return records


def honest_gate_warning(layer_counts, theta: float, weight: float) -> str | None:
    """Warn when the configured gate would deactivate perfectly honest servers."""
    max_l = max(layer_counts)
    floor = min(layer_counts) / max_l * weight
    if theta > floor:
        return (
            f"trust.theta={theta:g} exceeds min(l)/max(l)*w={floor:g}: an honest "
            f"server with the smallest layer share would be deactivated"
        )
    return None
