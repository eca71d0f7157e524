"""Synchronous federated averaging over a versioned binary wire protocol.

One server coordinates R reader-clients. Every round each client installs
the current global weights, trains locally for one epoch, and sends its
weights back; the server averages them and redistributes the result. A
single-reader bootstrap (up to 10 local epochs before round 1) stabilizes
the early rounds.

The same server/client state machines run over TCP sockets or in-process
queue channels carrying identical frames, so the two deployments produce
bitwise-identical checkpoints for equal seeds.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .neuralnet import AdamParams, ArchConfig, ModelState, decode_weights, encode_weights, train_epoch

WIRE_MAGIC = b"FPFL"
WIRE_VERSION = 1
ALL_READERS = 0xFFFFFFFF

_FRAME = struct.Struct("<4sHBIIQQ")
# magic, version, payload_kind, round_index, reader_id, example_count, payload_len


class PayloadKind(enum.IntEnum):
    JOIN = 0  # client -> server registration (no payload)
    WEIGHTS = 1
    BOOTSTRAP_WEIGHTS = 2
    START_ROUND = 3  # server -> client; example_count carries local epochs
    SHUTDOWN = 4


class AggregationPolicy(enum.Enum):
    UNIFORM = "uniform"
    DATA_WEIGHTED = "weighted"


class ProtocolError(Exception):
    """Malformed frame, version mismatch, or broken synchronous round."""


@dataclass
class Frame:
    kind: PayloadKind
    round_index: int
    reader_id: int
    example_count: int
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    header = _FRAME.pack(WIRE_MAGIC, WIRE_VERSION, int(frame.kind), frame.round_index,
                         frame.reader_id, frame.example_count, len(frame.payload))
    return header + frame.payload


def decode_header(raw: bytes) -> tuple[Frame, int]:
    """Decode a frame header; returns the frame (payload empty) and payload length."""
    if len(raw) != _FRAME.size:
        raise ProtocolError(f"short header: {len(raw)} bytes")
    magic, version, kind, round_index, reader_id, examples, payload_len = _FRAME.unpack(raw)
    if magic != WIRE_MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        kind = PayloadKind(kind)
    except ValueError as exc:
        raise ProtocolError(f"unknown payload kind {kind}") from exc
    return Frame(kind, round_index, reader_id, examples), payload_len


HEADER_SIZE = _FRAME.size


# ---------------------------------------------------------------------------
# Channels: frame transport over sockets or in-process queues


class SocketChannel:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.bytes_sent = 0
        self.bytes_received = 0

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                raise ProtocolError("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def send(self, frame: Frame) -> None:
        raw = encode_frame(frame)
        self._sock.sendall(raw)
        self.bytes_sent += len(raw)

    def recv(self) -> Frame:
        frame, payload_len = decode_header(self._recv_exact(HEADER_SIZE))
        frame.payload = self._recv_exact(payload_len) if payload_len else b""
        self.bytes_received += HEADER_SIZE + payload_len
        return frame

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class QueueChannel:
    """One endpoint of an in-process frame pipe (byte-level, like the socket)."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self.bytes_sent = 0
        self.bytes_received = 0

    @staticmethod
    def pair() -> tuple["QueueChannel", "QueueChannel"]:
        a, b = queue.Queue(), queue.Queue()
        return QueueChannel(a, b), QueueChannel(b, a)

    def send(self, frame: Frame) -> None:
        raw = encode_frame(frame)
        self._outbox.put(raw)
        self.bytes_sent += len(raw)

    def recv(self) -> Frame:
        raw = self._inbox.get()
        frame, payload_len = decode_header(raw[:HEADER_SIZE])
        if len(raw) != HEADER_SIZE + payload_len:
            raise ProtocolError("frame length does not match declared payload")
        frame.payload = raw[HEADER_SIZE:]
        self.bytes_received += len(raw)
        return frame

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# Aggregation


def federated_average(
    weight_sets: list[list[np.ndarray]],
    counts: list[int] | None = None,
    policy: AggregationPolicy = AggregationPolicy.UNIFORM,
) -> list[np.ndarray]:
    """Elementwise convex combination of shape-identical weight sets.

    Uniform uses 1/R coefficients; data-weighted uses count/total. The
    combination is computed in float64 with a fixed pairwise summation
    order and cast back to the input dtype, so it is reproducible and an
    exact fixed point on identical float32 inputs.
    """
    if not weight_sets:
        raise ProtocolError("no weight sets to average")
    shapes = [tuple(w.shape) for w in weight_sets[0]]
    for ws in weight_sets:
        if [tuple(w.shape) for w in ws] != shapes:
            raise ProtocolError("weight set shape mismatch")

    R = len(weight_sets)
    if policy is AggregationPolicy.UNIFORM:
        coefs = np.full(R, 1.0 / R)
    else:
        if counts is None or len(counts) != R or any(c <= 0 for c in counts):
            raise ProtocolError("data-weighted averaging needs positive counts")
        coefs = np.array(counts, dtype=np.float64) / float(sum(counts))

    def pairwise(items: list[list[np.ndarray]]) -> list[np.ndarray]:
        if len(items) == 1:
            return items[0]
        mid = len(items) // 2
        left = pairwise(items[:mid])
        right = pairwise(items[mid:])
        return [a + b for a, b in zip(left, right)]

    scaled = [[coefs[i] * w.astype(np.float64) for w in ws]
              for i, ws in enumerate(weight_sets)]
    summed = pairwise(scaled)
    dtype = weight_sets[0][0].dtype
    return [s.astype(dtype) for s in summed]


# ---------------------------------------------------------------------------
# Client


class ReaderClient:
    """Local trainer for one reader; speaks the wire protocol."""

    def __init__(self, reader_id: int, config: ArchConfig, X_train, y_train,
                 train_seed: int = 0, batch_size: int = 64,
                 opt: AdamParams | None = None):
        self.reader_id = reader_id
        self.config = config
        self.X_train = X_train
        self.y_train = y_train
        self.train_seed = train_seed
        self.batch_size = batch_size
        self.opt = opt or AdamParams()
        self.model = ModelState(config, seed=train_seed)
        self.final_weights: bytes | None = None

    def _train(self, round_index: int, epochs: int) -> None:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.train_seed, self.reader_id, round_index])
        )
        for _ in range(epochs):
            train_epoch(self.model, self.X_train, self.y_train, self.batch_size, rng, self.opt)

    def run(self, channel) -> None:
        """Join, then follow server rounds until shutdown."""
        channel.send(Frame(PayloadKind.JOIN, 0, self.reader_id, len(self.X_train)))
        while True:
            frame = channel.recv()
            if frame.kind is PayloadKind.SHUTDOWN:
                self.final_weights = frame.payload
                if frame.payload:
                    _, weights = decode_weights(frame.payload)
                    self.model.set_weights(weights)
                return
            if frame.kind is not PayloadKind.START_ROUND:
                raise ProtocolError(f"unexpected frame kind {frame.kind} at client")
            _, weights = decode_weights(frame.payload)
            self.model.set_weights(weights)
            epochs = frame.example_count
            self._train(frame.round_index, epochs)
            reply_kind = (PayloadKind.BOOTSTRAP_WEIGHTS if frame.round_index == 0
                          else PayloadKind.WEIGHTS)
            channel.send(Frame(reply_kind, frame.round_index, self.reader_id,
                               len(self.X_train),
                               encode_weights(self.config, self.model.get_weights())))


# ---------------------------------------------------------------------------
# Server


@dataclass
class FederatedConfig:
    arch: ArchConfig
    n_readers: int
    rounds: int
    policy: AggregationPolicy = AggregationPolicy.UNIFORM
    init_seed: int = 0
    bootstrap_epochs: int = 10
    local_epochs: int = 1


@dataclass
class RoundStats:
    round_index: int
    bytes_to_clients: int
    bytes_from_clients: int


class FederatedServer:
    """Round coordinator: aggregates client weights and redistributes them."""

    def __init__(self, config: FederatedConfig,
                 on_round_end=None, initial_weights: list[np.ndarray] | None = None):
        self.config = config
        self.on_round_end = on_round_end  # callback(round_index, weights); metrics only
        if initial_weights is None:
            initial_weights = ModelState(config.arch, seed=config.init_seed).get_weights()
        self.global_weights = initial_weights
        self.round_stats: list[RoundStats] = []

    def _payload(self) -> bytes:
        return encode_weights(self.config.arch, self.global_weights)

    def run(self, channels: dict[int, object]) -> bytes:
        """Drive bootstrap plus all rounds; returns the final checkpoint bytes."""
        cfg = self.config
        if len(channels) != cfg.n_readers:
            raise ProtocolError(
                f"expected {cfg.n_readers} readers, have {len(channels)}"
            )
        order = sorted(channels)

        if cfg.bootstrap_epochs > 0:
            boot_id = order[0]
            channels[boot_id].send(Frame(PayloadKind.START_ROUND, 0, boot_id,
                                         cfg.bootstrap_epochs, self._payload()))
            reply = channels[boot_id].recv()
            if reply.kind is not PayloadKind.BOOTSTRAP_WEIGHTS or reply.round_index != 0:
                raise ProtocolError(f"bad bootstrap reply from reader {boot_id}")
            _, self.global_weights = decode_weights(reply.payload)
        if self.on_round_end is not None:
            self.on_round_end(0, self.global_weights)

        for r in range(1, cfg.rounds + 1):
            sent = received = 0
            payload = self._payload()
            for rid in order:
                channels[rid].send(Frame(PayloadKind.START_ROUND, r, rid,
                                         cfg.local_epochs, payload))
                sent += HEADER_SIZE + len(payload)

            weight_sets, counts = [], []
            for rid in order:
                try:
                    reply = channels[rid].recv()
                except ProtocolError as exc:
                    raise ProtocolError(f"round {r} aborted: reader {rid}: {exc}") from exc
                if reply.kind is not PayloadKind.WEIGHTS or reply.round_index != r:
                    raise ProtocolError(
                        f"round {r} aborted: unexpected reply from reader {rid}"
                    )
                _, weights = decode_weights(reply.payload)
                weight_sets.append(weights)
                counts.append(reply.example_count)
                received += HEADER_SIZE + len(reply.payload)

            self.global_weights = federated_average(weight_sets, counts, cfg.policy)
            self.round_stats.append(RoundStats(r, sent, received))
            if self.on_round_end is not None:
                self.on_round_end(r, self.global_weights)

        final = self._payload()
        for rid in order:
            channels[rid].send(Frame(PayloadKind.SHUTDOWN, cfg.rounds + 1, rid, 0, final))
        return final


def bootstrap(clients: list[ReaderClient], config: FederatedConfig) -> list[np.ndarray]:
    """Single-reader bootstrap: train the lowest-id reader from the shared
    random init, then install the resulting weights in every client."""
    init = ModelState(config.arch, seed=config.init_seed).get_weights()
    ordered = sorted(clients, key=lambda c: c.reader_id)
    lead = ordered[0]
    lead.model.set_weights(init)
    if config.bootstrap_epochs > 0:
        lead._train(0, config.bootstrap_epochs)
    weights = lead.model.get_weights()
    for client in ordered:
        client.model.set_weights(weights)
    return weights


# ---------------------------------------------------------------------------
# In-process simulation


def run_federated_in_process(clients: list[ReaderClient], config: FederatedConfig,
                             on_round_end=None,
                             initial_weights: list[np.ndarray] | None = None):
    """Run the full protocol over in-process queue channels.

    Returns (final_checkpoint_bytes, server). Client threads train
    concurrently; determinism comes from per-(reader, round) RNG streams
    and the fixed aggregation order.
    """
    server = FederatedServer(config, on_round_end, initial_weights)
    channels = {}
    threads = []
    errors = []

    def client_main(client: ReaderClient, channel) -> None:
        try:
            client.run(channel)
        except Exception as exc:  # surfaced after join
            errors.append((client.reader_id, exc))

    for client in clients:
        server_end, client_end = QueueChannel.pair()
        join = client_end  # client sends JOIN itself inside run()
        channels[client.reader_id] = server_end
        t = threading.Thread(target=client_main, args=(client, join), daemon=True)
        threads.append(t)
        t.start()

    # Consume the JOIN frames before starting rounds.
    for rid, ch in sorted(channels.items()):
        frame = ch.recv()
        if frame.kind is not PayloadKind.JOIN or frame.reader_id != rid:
            raise ProtocolError(f"bad join from reader {rid}")

    final = server.run(channels)
    for t in threads:
        t.join()
    if errors:
        rid, exc = errors[0]
        raise ProtocolError(f"reader {rid} failed: {exc}") from exc
    return final, server


# ---------------------------------------------------------------------------
# Networked deployment


def serve(host: str, port: int, config: FederatedConfig, on_round_end=None,
          initial_weights: list[np.ndarray] | None = None) -> bytes:
    """Accept exactly n_readers clients on a TCP socket and run all rounds.

    Connections that fail the version/magic handshake are rejected before
    any weight exchange and do not count toward the expected reader set.
    """
    server = FederatedServer(config, on_round_end, initial_weights)
    channels: dict[int, SocketChannel] = {}
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as lsock:
        lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lsock.bind((host, port))
        lsock.listen(config.n_readers)
        while len(channels) < config.n_readers:
            conn, _ = lsock.accept()
            channel = SocketChannel(conn)
            try:
                frame = channel.recv()
                if frame.kind is not PayloadKind.JOIN:
                    raise ProtocolError("first frame must be JOIN")
                if frame.reader_id in channels:
                    raise ProtocolError(f"duplicate reader_id {frame.reader_id}")
            except ProtocolError:
                channel.close()
                continue
            channels[frame.reader_id] = channel
        try:
            return server.run(channels)
        finally:
            for ch in channels.values():
                ch.close()


def connect(host: str, port: int, client: ReaderClient) -> None:
    """Connect a reader-client to a serving aggregator and run to shutdown."""
    sock = socket.create_connection((host, port))
    channel = SocketChannel(sock)
    try:
        client.run(channel)
    finally:
        channel.close()
