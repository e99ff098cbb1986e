"""Client/server/verifier pipeline simulation with exact byte accounting.

One client holds the full model plus the embedding/projection ends of the
pipeline; servers execute contiguous layer ranges; verifiers probe servers
(see the trust module). Every inter-node exchange is a wire-codec frame:
messages are encoded to bytes, tallied in the transfer ledger, then decoded
on the receiving side, so byte counts and bit-exactness claims are measured
on the real serialization path rather than assumed.

The transport is an in-process synchronous bus with a recorded trace;
`loopback_exchange` ships the same frames over a real TCP socket for
format-equivalence checks. Determinism: given equal seeds, configs, and
behaviors, traces are bit-identical.
"""

from __future__ import annotations

import socket
import threading
from dataclasses import dataclass, field

import numpy as np

from . import svdkit, wire
from .tensor import Matrix, matmul, softmax_rows
from .transformer import (
    LayerParams,
    ModelParams,
    PartitionPlan,
    embed,
    layer_forward,
)
from .wire import (
    ActivationPayload,
    Kind,
    Message,
    NodeId,
    ReassignmentPayload,
    Role,
    SvdTriple,
    WeightShardPayload,
    WeightSlot,
)

__all__ = [
    "ServerBehavior",
    "CompressionSpec",
    "EdgeStats",
    "TransferLedger",
    "Simulation",
    "PipelineResult",
    "PipelineStalledError",
    "NoReplacementError",
    "run_pipeline",
    "loopback_exchange",
]

BEHAVIOR_MODES = ("honest", "noisy", "zeroing", "sign_flip", "stale")

# Weight matrices eligible for SVD compression; layer-norm vectors always
# travel dense.
_COMPRESSIBLE = {WeightSlot.W_Q, WeightSlot.W_K, WeightSlot.W_V,
                 WeightSlot.W_O, WeightSlot.W_1, WeightSlot.W_2}


class PipelineStalledError(RuntimeError):
    """A deactivated server sits in the pipeline with no replacement."""


class NoReplacementError(PipelineStalledError):
    """Reassignment failed: no active server remains."""


@dataclass(frozen=True)
class ServerBehavior:
    """How a server transforms its (honestly computed) layer outputs.

    honest passes outputs through bit-exactly; noisy adds seeded Gaussian
    noise of scale sigma; zeroing and sign_flip are what their names say;
    stale caches the first output per input shape and replays it forever.
    """

    mode: str = "honest"
    sigma: float = 0.0

    def __post_init__(self):
        if self.mode not in BEHAVIOR_MODES:
            raise ValueError(f"unknown behavior mode {self.mode!r}")
        if self.mode == "noisy" and self.sigma <= 0:
            raise ValueError("noisy behavior requires sigma > 0")

    def __str__(self):
        return f"noisy:{self.sigma:g}" if self.mode == "noisy" else self.mode


@dataclass(frozen=True)
class CompressionSpec:
    """Weight-transfer compression target: energy fraction or size ratio."""

    mode: str  # "energy" | "ratio"
    value: float

    def __post_init__(self):
        if self.mode not in ("energy", "ratio"):
            raise ValueError(f"unknown compression mode {self.mode!r}")
        if not 0.0 < self.value <= 1.0:
            raise ValueError(f"compression value must lie in (0, 1], got {self.value}")


@dataclass
class EdgeStats:
    messages: int = 0
    bytes: int = 0
    by_kind: dict = field(default_factory=dict)

    def record(self, kind: Kind, n_bytes: int) -> None:
        self.messages += 1
        self.bytes += n_bytes
        count, total = self.by_kind.get(kind, (0, 0))
        self.by_kind[kind] = (count + 1, total + n_bytes)


class TransferLedger:
    """Cumulative per-edge frame bytes and message counts."""

    def __init__(self):
        self.edges: dict = {}

    def record(self, sender: NodeId, receiver: NodeId, kind: Kind, n_bytes: int) -> None:
        self.edges.setdefault((sender, receiver), EdgeStats()).record(kind, n_bytes)

    def total_bytes(self, kind: Kind | None = None) -> int:
        if kind is None:
            return sum(e.bytes for e in self.edges.values())
        return sum(e.by_kind.get(kind, (0, 0))[1] for e in self.edges.values())

    def message_count(self, kind: Kind | None = None) -> int:
        if kind is None:
            return sum(e.messages for e in self.edges.values())
        return sum(e.by_kind.get(kind, (0, 0))[0] for e in self.edges.values())

    def rows(self) -> list:
        """(from, to, kind, messages, bytes) rows in deterministic order."""
        out = []
        for (sender, receiver), stats in sorted(
            self.edges.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))
        ):
            for kind in sorted(stats.by_kind, key=int):
                count, total = stats.by_kind[kind]
                out.append([str(sender), str(receiver), kind.name.lower(), count, total])
        return out


@dataclass
class PipelineResult:
    output: Matrix
    ledger: TransferLedger
    trace: list


class _ShardAssembler:
    """Collects weight-shard payloads and rebuilds LayerParams."""

    def __init__(self):
        self.parts: dict = {}

    def add(self, payload: WeightShardPayload) -> None:
        body = payload.body
        if isinstance(body, SvdTriple):
            body = (body.u * body.sigma) @ body.v_t
        self.parts[(payload.layer, payload.slot, payload.head)] = body

    def build_layer(self, layer: int, n_heads: int) -> LayerParams:
        def dense(slot, head=0):
            return self.parts[(layer, slot, head)]

        return LayerParams(
            w_q=[dense(WeightSlot.W_Q, h) for h in range(n_heads)],
            w_k=[dense(WeightSlot.W_K, h) for h in range(n_heads)],
            w_v=[dense(WeightSlot.W_V, h) for h in range(n_heads)],
            w_o=dense(WeightSlot.W_O),
            w_1=dense(WeightSlot.W_1),
            w_2=dense(WeightSlot.W_2),
            ln1_gain=dense(WeightSlot.LN1_GAIN).ravel(),
            ln1_bias=dense(WeightSlot.LN1_BIAS).ravel(),
            ln2_gain=dense(WeightSlot.LN2_GAIN).ravel(),
            ln2_bias=dense(WeightSlot.LN2_BIAS).ravel(),
        )


class Simulation:
    """Deterministic single-process federation of one client, S servers,
    and V verifiers executing a partitioned transformer."""

    def __init__(self, params: ModelParams, plan: PartitionPlan, behaviors=None,
                 n_verifiers: int = 1, seed: int = 0):
        params.validate()
        if len(plan.entries) < 1:
            raise ValueError("topology needs at least one server")
        if n_verifiers < 1:
            raise ValueError("topology needs at least one verifier")
        n_servers = len(plan.entries)
        if behaviors is None:
            behaviors = [ServerBehavior() for _ in range(n_servers)]
        if len(behaviors) != n_servers:
            raise ValueError(
                f"{len(behaviors)} behaviors for {n_servers} servers"
            )

        self.params = params
        self.config = params.config
        self.plan_entries = list(plan.entries)
        self.behaviors = {e.server: b for e, b in zip(plan.entries, behaviors)}
        self.n_verifiers = n_verifiers
        self.seed = seed
        self.compression: CompressionSpec | None = None

        self.client = NodeId(Role.CLIENT, 0)
        self.ledger = TransferLedger()
        self.trace: list = []
        self._seq: dict = {}
        self._server_layers: dict = {}
        self._status = {e.server: "active" for e in plan.entries}
        self._stale_cache: dict = {e.server: {} for e in plan.entries}
        self._noise_rng = {
            e.server: np.random.default_rng([seed, 1000 + e.server])
            for e in plan.entries
        }
        self.probe_rng = np.random.default_rng([seed, 7])

    # -- topology ----------------------------------------------------------

    def server_id(self, index: int) -> NodeId:
        return NodeId(Role.SERVER, index)

    def verifier_id(self, index: int) -> NodeId:
        return NodeId(Role.VERIFIER, index)

    @property
    def verifiers(self) -> list:
        return [self.verifier_id(v) for v in range(self.n_verifiers)]

    def status(self, server: int) -> str:
        return self._status[server]

    def active_entries(self) -> list:
        return [e for e in self.plan_entries if self._status[e.server] == "active"]

    def entry_for(self, server: int):
        for e in self.plan_entries:
            if e.server == server:
                return e
        raise KeyError(f"server {server} not in plan")

    def max_active_layers(self) -> int:
        return max(e.stop - e.start for e in self.active_entries())

    def reference_layers(self, server: int) -> list:
        """Full-precision copies of the layers a server should be running."""
        e = self.entry_for(server)
        return self.params.layers[e.start:e.stop]

    # -- transport ---------------------------------------------------------

    def send(self, kind: Kind, sender: NodeId, receiver: NodeId, payload) -> Message:
        """Frame, account, trace, and deliver one message.

        The returned message is the decoded form of the transmitted bytes,
        so every value a receiver acts on has really crossed the codec.
        """
        channel = (sender, receiver)
        seq = self._seq.get(channel, 0)
        self._seq[channel] = seq + 1
        frame = wire.encode(Message(kind=kind, sender=sender, receiver=receiver,
                                    seq=seq, payload=payload))
        self.ledger.record(sender, receiver, kind, len(frame))
        delivered = wire.decode(frame)
        self.trace.append(delivered)
        return delivered

    # -- weight distribution -----------------------------------------------

    def _weight_body(self, w: Matrix):
        spec = self.compression
        if spec is None:
            return np.asarray(w)
        s = svdkit.svd(np.asarray(w))
        if spec.mode == "ratio":
            k = svdkit.rank_for_compression(s.m, s.n, spec.value)
        else:
            k = svdkit.rank_for_energy(s, spec.value)
        t = svdkit.truncate(s, min(k, s.k))
        return SvdTriple(u=t.u_k, sigma=t.sigma_k, v_t=t.v_t_k)

    def _layer_shard_payloads(self, layer_index: int):
        layer = self.params.layers[layer_index]
        for head in range(self.config.n_heads):
            yield WeightShardPayload(layer_index, WeightSlot.W_Q, head,
                                     self._weight_body(layer.w_q[head]))
            yield WeightShardPayload(layer_index, WeightSlot.W_K, head,
                                     self._weight_body(layer.w_k[head]))
            yield WeightShardPayload(layer_index, WeightSlot.W_V, head,
                                     self._weight_body(layer.w_v[head]))
        yield WeightShardPayload(layer_index, WeightSlot.W_O, 0, self._weight_body(layer.w_o))
        yield WeightShardPayload(layer_index, WeightSlot.W_1, 0, self._weight_body(layer.w_1))
        yield WeightShardPayload(layer_index, WeightSlot.W_2, 0, self._weight_body(layer.w_2))
        yield WeightShardPayload(layer_index, WeightSlot.LN1_GAIN, 0,
                                 layer.ln1_gain.reshape(1, -1))
        yield WeightShardPayload(layer_index, WeightSlot.LN1_BIAS, 0,
                                 layer.ln1_bias.reshape(1, -1))
        yield WeightShardPayload(layer_index, WeightSlot.LN2_GAIN, 0,
                                 layer.ln2_gain.reshape(1, -1))
        yield WeightShardPayload(layer_index, WeightSlot.LN2_BIAS, 0,
                                 layer.ln2_bias.reshape(1, -1))

    def _send_range(self, server: int, start: int, stop: int) -> None:
        """Ship layers [start, stop) to a server and install the decoded copies."""
        assembler = _ShardAssembler()
        receiver = self.server_id(server)
        for layer_index in range(start, stop):
            for payload in self._layer_shard_payloads(layer_index):
                delivered = self.send(Kind.WEIGHT_SHARD, self.client, receiver, payload)
                assembler.add(delivered.payload)
        held = self._server_layers.setdefault(server, {})
        for layer_index in range(start, stop):
            held[layer_index] = assembler.build_layer(layer_index, self.config.n_heads)

    def distribute_model(self, compression: CompressionSpec | None = None) -> TransferLedger:
        """Send every server its layer range, optionally SVD-compressed."""
        self.compression = compression
        for e in self.plan_entries:
            self._server_layers[e.server] = {}
            self._send_range(e.server, e.start, e.stop)
        return self.ledger

    # -- execution ---------------------------------------------------------

    def server_compute(self, server: int, x: Matrix) -> Matrix:
        """Run x through a server's held layers, then its behavior."""
        if self._status[server] != "active":
            raise PipelineStalledError(f"server {server} is deactivated")
        held = self._server_layers.get(server)
        e = self.entry_for(server)
        if held is None or any(i not in held for i in range(e.start, e.stop)):
            raise RuntimeError(f"server {server} has no weights; distribute_model first")
        out = x
        for layer_index in range(e.start, e.stop):
            out = layer_forward(out, held[layer_index])
        return self._apply_behavior(server, out)

    def _apply_behavior(self, server: int, out: Matrix) -> Matrix:
        b = self.behaviors[server]
        if b.mode == "honest":
            return out
        if b.mode == "noisy":
            return out + self._noise_rng[server].normal(0.0, b.sigma, out.shape)
        if b.mode == "zeroing":
            return np.zeros_like(out)
        if b.mode == "sign_flip":
            return -out
        # stale: replay the first output seen for this shape
        cache = self._stale_cache[server]
        key = out.shape
        if key not in cache:
            cache[key] = out
        return cache[key]

    def run_pipeline(self, tokens) -> Matrix:
        """Client embeds, activations hop server to server, client projects."""
        entries = self.active_entries()
        if not entries:
            raise PipelineStalledError("no active server remains")
        if len(entries) != len(self.plan_entries):
            raise PipelineStalledError("pipeline contains a deactivated server")
        x = embed(tokens, self.params)
        sender = self.client
        for e in entries:
            receiver = self.server_id(e.server)
            delivered = self.send(Kind.ACTIVATION, sender, receiver,
                                  ActivationPayload(matrix=x))
            x = self.server_compute(e.server, delivered.payload.matrix)
            sender = receiver
        delivered = self.send(Kind.ACTIVATION, sender, self.client,
                              ActivationPayload(matrix=x))
        return softmax_rows(matmul(delivered.payload.matrix, self.params.w_out))

    # -- failure handling ----------------------------------------------------

    def deactivate(self, server: int) -> None:
        self._status[server] = "deactivated"

    def reassign(self, failed: int) -> None:
        """Merge a deactivated server's range into an adjacent active one.

        The predecessor in pipeline order absorbs the range when active,
        otherwise the successor; the replacement receives the layers through
        regular weight-shard messages (ledger and trace updated).
        """
        if self._status.get(failed) != "deactivated":
            raise ValueError(f"server {failed} is not deactivated")
        pos = next(
            (i for i, e in enumerate(self.plan_entries) if e.server == failed), None
        )
        if pos is None:
            raise KeyError(f"server {failed} not in plan")
        failed_entry = self.plan_entries[pos]

        target_pos = None
        if pos > 0 and self._status[self.plan_entries[pos - 1].server] == "active":
            target_pos = pos - 1
        elif (pos + 1 < len(self.plan_entries)
              and self._status[self.plan_entries[pos + 1].server] == "active"):
            target_pos = pos + 1
        if target_pos is None:
            raise NoReplacementError("no active server remains to absorb the range")

        target = self.plan_entries[target_pos]
        merged = type(target)(server=target.server,
                              start=min(target.start, failed_entry.start),
                              stop=max(target.stop, failed_entry.stop))
        self.send(Kind.REASSIGNMENT, self.client, self.server_id(target.server),
                  ReassignmentPayload(new_owner=self.server_id(target.server),
                                      start=failed_entry.start, stop=failed_entry.stop))
        self._send_range(target.server, failed_entry.start, failed_entry.stop)
        self.plan_entries[target_pos] = merged
        del self.plan_entries[pos]
        self._server_layers.pop(failed, None)

    def current_plan(self) -> PartitionPlan:
        return PartitionPlan(entries=tuple(self.plan_entries),
                             n_layers=self.config.n_layers)


def run_pipeline(tokens, params: ModelParams, plan: PartitionPlan, behaviors=None,
                 compression: CompressionSpec | None = None, n_verifiers: int = 1,
                 seed: int = 0) -> PipelineResult:
    """One-shot distribution plus pipeline execution."""
    sim = Simulation(params, plan, behaviors=behaviors, n_verifiers=n_verifiers,
                     seed=seed)
    sim.distribute_model(compression)
    output = sim.run_pipeline(tokens)
    return PipelineResult(output=output, ledger=sim.ledger, trace=sim.trace)


def loopback_exchange(messages) -> list:
    """Ship frames over a real localhost TCP socket and decode the far end.

    Exists to prove the socket transport speaks the exact in-process frame
    format; the simulation itself stays on the synchronous bus.
    """
    frames = b"".join(wire.encode(m) for m in messages)
    received = bytearray()
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.bind(("127.0.0.1", 0))
    server.listen(1)

    def serve():
        conn, _ = server.accept()
        with conn:
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                received.extend(chunk)

    thread = threading.Thread(target=serve)
    thread.start()
    try:
        with socket.create_connection(server.getsockname()) as client:
            client.sendall(frames)
    finally:
        thread.join()
        server.close()
    return wire.decode_stream(bytes(received))
