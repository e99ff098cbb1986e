"""Experiment runners shared by the HTTP service and the CLI.

Each runner is a pure function from parameters to an ExperimentReport:
named tables plus notes, an ok flag, and the reproducibility digest. CSV
rendering is centralized here so service responses and CLI output are the
same bytes; every CSV starts with a `# config_digest=` comment and ends
with any notes as `# note:` comments. Floats are rendered with repr
(shortest round-trip, `.` decimal); percentage columns carry two decimals.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import costmodel, svdkit
from .config import ExperimentConfig, config_digest
from .costmodel import ACCOUNTING_POLICIES
from .federation import NoReplacementError, Simulation
from .softmax_verify import BaseBConfig, build_tables, verified_softmax_row
from .tensor import softmax_rows
from .transformer import init_params, model_forward
from .trust import honest_gate_warning, verification_round

__all__ = [
    "Table",
    "ExperimentReport",
    "render_csv",
    "report_files",
    "run_cost_table",
    "run_svd_analyze",
    "run_bandwidth",
    "run_pipeline_experiment",
    "run_verify_demo",
    "BERT_BANDWIDTH_DEFAULTS",
    "DEFAULT_RATIO_GRID",
]

BERT_BANDWIDTH_DEFAULTS = dict(m=3072, n=768, t=30, batch=10)
DEFAULT_RATIO_GRID = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


@dataclass
class Table:
    name: str
    columns: list
    rows: list


@dataclass
class ExperimentReport:
    name: str
    digest: str
    tables: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    ok: bool = True


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}%"


def render_csv(table: Table, digest: str, notes=()) -> str:
    lines = [f"# config_digest={digest}", ",".join(table.columns)]
    for row in table.rows:
        lines.append(",".join(_fmt(v) for v in row))
    for note in notes:
        lines.append(f"# note: {note}")
    return "\n".join(lines) + "\n"


def report_files(report: ExperimentReport) -> dict:
    """Rendered CSV per table, keyed by file name."""
    return {
        f"{table.name}.csv": render_csv(table, report.digest, report.notes)
        for table in report.tables
    }


def _args_digest(config: ExperimentConfig | None) -> str:
    if config is not None:
        return config_digest(config)
    return config_digest(ExperimentConfig())


# ---------------------------------------------------------------------------
# cost-table
# ---------------------------------------------------------------------------


def run_cost_table(dims=(5, 10, 100, 10000),
                   config: ExperimentConfig | None = None) -> ExperimentReport:
    """Square-matmul read counts under both policies, one row per dimension."""
    dims = [int(d) for d in dims]
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be >= 1, got {dims}")
    rows = []
    for rep in costmodel.table2(dims):
        rows.append([rep.shape.m, rep.centralized_reads, rep.federated_reads,
                     _pct(rep.reduction)])
    table = Table(name="cost_table",
                  columns=["dim", "centralized_reads", "federated_reads", "reduction"],
                  rows=rows)
    return ExperimentReport(name="cost-table", digest=_args_digest(config),
                            tables=[table])


# ---------------------------------------------------------------------------
# svd-analyze
# ---------------------------------------------------------------------------


def _spectrum(rows: int, cols: int, kind: str) -> np.ndarray:
    r = min(rows, cols)
    if kind == "geometric":
        return svdkit.geometric_spectrum(r)
    if kind == "power":
        return svdkit.power_law_spectrum(r)
    raise ValueError(f"unknown spectrum family {kind!r}")


def run_svd_analyze(rows: int, cols: int, spectrum: str = "geometric",
                    keep_frac: float | None = None, matrix=None,
                    config: ExperimentConfig | None = None) -> ExperimentReport:
    """(k, compression_ratio, energy_ratio) sweep over retained rank.

    The compression column depends only on the shape; the energy column uses
    the requested synthetic spectrum family, or the singular values of an
    explicitly supplied matrix.
    """
    if matrix is not None:
        w = np.asarray(matrix, dtype=np.float64)
        if w.ndim != 2 or w.size == 0:
            raise ValueError("input matrix must be non-empty and 2-D")
        rows, cols = w.shape
        sigma = svdkit.svd(w).full_sigma
    else:
        if rows < 1 or cols < 1:
            raise ValueError(f"shape must be positive, got {rows}x{cols}")
        sigma = _spectrum(rows, cols, spectrum)
    r = sigma.shape[0]
    sq = sigma**2
    total = float(sq.sum())
    cum = np.cumsum(sq)

    def energy(k):
        return 1.0 if total == 0.0 or k == r else float(cum[k - 1]) / total

    step = max(1, r // 512)
    ks = sorted(set(range(1, r + 1, step)) | {r})
    notes = []
    if keep_frac is not None:
        if not 0.0 < keep_frac <= 1.0:
            raise ValueError(f"keep_frac must lie in (0, 1], got {keep_frac}")
        k_keep = max(1, int(np.floor(keep_frac * r)))
        ks = sorted(set(ks) | {k_keep})
        notes.append(
            f"keep_frac={keep_frac:g} keeps k={k_keep}: "
            f"compression_ratio={svdkit.compression_ratio(rows, cols, k_keep):.4f}, "
            f"energy_ratio={energy(k_keep):.4f}"
        )
    table = Table(
        name="svd_analyze",
        columns=["k", "compression_ratio", "energy_ratio"],
        rows=[[k, svdkit.compression_ratio(rows, cols, k), energy(k)] for k in ks],
    )
    return ExperimentReport(name="svd-analyze", digest=_args_digest(config),
                            tables=[table], notes=notes)


# ---------------------------------------------------------------------------
# bandwidth
# ---------------------------------------------------------------------------


def run_bandwidth(m: int = 3072, n: int = 768, t: int = 30, batch: int = 10,
                  ratios=DEFAULT_RATIO_GRID,
                  config: ExperimentConfig | None = None) -> ExperimentReport:
    """Bandwidth reduce rate per ratio under both accounting policies,
    plus the four per-ratio multiplication read counts."""
    ratios = [float(r) for r in ratios]
    band_rows = []
    for policy in ACCOUNTING_POLICIES:
        for ratio in ratios:
            rep = costmodel.bandwidth_reduce_rate(m, n, t, batch, ratio, policy)
            band_rows.append([rep.compression_ratio, rep.k_hat, rep.accounting_policy,
                              rep.original_access, rep.optimized_access,
                              rep.reduce_rate])
    reads_rows = []
    for ratio in ratios:
        k_hat = svdkit.rank_for_compression(m, n, ratio)
        reads_rows.append([
            ratio, k_hat,
            costmodel.compressed_access(m, n, t, k_hat, hierarchy=False, compressed=False),
            costmodel.compressed_access(m, n, t, k_hat, hierarchy=False, compressed=True),
            costmodel.compressed_access(m, n, t, k_hat, hierarchy=True, compressed=False),
            costmodel.compressed_access(m, n, t, k_hat, hierarchy=True, compressed=True),
            costmodel.weight_storage(m, n, k_hat, compressed=False),
            costmodel.weight_storage(m, n, k_hat, compressed=True),
        ])
    notes = [_sixty_percent_note(m, n, t, batch)]
    tables = [
        Table(name="bandwidth",
              columns=["ratio", "k_hat", "policy", "original_access",
                       "optimized_access", "reduce_rate"],
              rows=band_rows),
        Table(name="table3_reads",
              columns=["ratio", "k_hat", "orig_no_hier", "comp_no_hier",
                       "orig_hier", "comp_hier", "weight_elems_orig",
                       "weight_elems_comp"],
              rows=reads_rows),
    ]
    return ExperimentReport(name="bandwidth", digest=_args_digest(config),
                            tables=tables, notes=notes)


def _sixty_percent_note(m, n, t, batch) -> str:
    rates = {
        policy: costmodel.bandwidth_reduce_rate(m, n, t, batch, 0.7, policy).reduce_rate
        for policy in ACCOUNTING_POLICIES
    }
    parts = ", ".join(f"{policy}={rate:.4f}" for policy, rate in rates.items())
    return (
        "a commonly quoted 60% saving at ratio 0.7 is not derivable from the "
        f"total-access formulas under either accounting policy; computed rates "
        f"at 0.7 for ({m}x{n})@({n}x{t}), batch {batch}: {parts}"
    )


# ---------------------------------------------------------------------------
# pipeline-run
# ---------------------------------------------------------------------------


def run_pipeline_experiment(cfg: ExperimentConfig, rounds: int = 2,
                            tolerance: float = 1e-9) -> ExperimentReport:
    """Verification rounds plus a final inference, checked against the
    honest single-machine forward pass."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    digest = config_digest(cfg)
    notes = []
    warning = honest_gate_warning(cfg.plan().layer_counts(), cfg.trust.theta,
                                  cfg.trust.weight)
    if warning:
        notes.append(warning)
    if cfg.compression is not None and cfg.trust.tau < 1e-3:
        notes.append(
            "compression is enabled while trust.tau is tight: honest servers "
            "running reconstructed weights may fail verification"
        )

    params = init_params(cfg.model, seed=cfg.seed)
    sim = Simulation(params, cfg.plan(), behaviors=cfg.behaviors(), seed=cfg.seed)
    sim.distribute_model(cfg.compression)

    trust_rows = []
    stalled = None
    for round_index in range(1, rounds + 1):
        try:
            records = verification_round(sim, cfg.trust)
        except NoReplacementError as exc:
            stalled = str(exc)
            notes.append(f"round {round_index}: {stalled}")
            break
        for rec in records:
            trust_rows.append([round_index, str(rec.server), rec.acc, rec.layers,
                               rec.score, rec.status])

    token_rng = np.random.default_rng([cfg.seed, 99])
    tokens = token_rng.integers(0, cfg.model.vocab_size, size=cfg.model.max_seq_len)
    if stalled is None:
        output = sim.run_pipeline(tokens)
        baseline = model_forward(tokens, params)
        max_abs_diff = float(np.abs(output - baseline).max())
        match = max_abs_diff <= tolerance
        out_digest = hashlib.sha256(np.ascontiguousarray(output).tobytes()).hexdigest()
    else:
        max_abs_diff = float("inf")
        match = False
        out_digest = ""

    summary = Table(
        name="summary",
        columns=["seed", "rounds", "servers_initial", "servers_active",
                 "max_abs_diff", "tolerance", "match", "messages", "bytes",
                 "output_sha256"],
        rows=[[cfg.seed, rounds, cfg.topology.n_servers, len(sim.active_entries()),
               max_abs_diff, tolerance, match, sim.ledger.message_count(),
               sim.ledger.total_bytes(), out_digest]],
    )
    ledger_table = Table(name="transfer_ledger",
                         columns=["from", "to", "kind", "messages", "bytes"],
                         rows=sim.ledger.rows())
    trust_table = Table(name="trust_log",
                        columns=["round", "server", "acc", "layers", "score", "status"],
                        rows=trust_rows)
    return ExperimentReport(name="pipeline-run", digest=digest,
                            tables=[summary, trust_table, ledger_table],
                            notes=notes, ok=match)


# ---------------------------------------------------------------------------
# verify-demo
# ---------------------------------------------------------------------------


def run_verify_demo(base: int = 16, n_digits: int = 4, f_values=(6, 8, 10),
                    rows: int = 64, cols: int = 32, n_workers: int = 1,
                    tamper: float = 0.0, seed: int = 0,
                    config: ExperimentConfig | None = None) -> ExperimentReport:
    """Verified softmax over random score rows, one verdict row per f.

    With tamper > 0 the claimed probabilities are perturbed by that amount
    at each row's argmax, which must push the verdict past its bound.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    rng = np.random.default_rng(seed)
    scores = 3.0 * rng.standard_normal((rows, cols))
    out_rows = []
    ok = True
    for f in f_values:
        cfg = BaseBConfig(base=base, n_digits=n_digits, frac_bits=int(f))
        tables = build_tables(cfg)
        worst = 0.0
        failed = 0
        for i in range(rows):
            claimed = None
            if tamper > 0.0:
                claimed = softmax_rows(scores[i][None, :])[0].copy()
                claimed[np.argmax(claimed)] += tamper
            _, verdict = verified_softmax_row(scores[i], cfg, n_workers=n_workers,
                                              tables=tables, claimed=claimed)
            worst = max(worst, verdict.max_abs_error)
            failed += 0 if verdict.passed else 1
        passed = failed == 0
        ok = ok and passed
        out_rows.append([int(f), base, n_digits, rows, worst, cfg.error_bound,
                         passed, failed])
    table = Table(name="verify_demo",
                  columns=["f", "b", "k", "rows", "max_abs_error", "bound",
                           "pass", "failed_rows"],
                  rows=out_rows)
    notes = []
    if tamper > 0.0:
        notes.append(f"claimed probabilities tampered by {tamper:g} at the argmax")
    return ExperimentReport(name="verify-demo", digest=_args_digest(config),
                            tables=[table], notes=notes, ok=ok)
