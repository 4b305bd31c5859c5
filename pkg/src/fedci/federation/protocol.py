"""Transport-agnostic server and client state machines.

Both sides speak in framed bytes, so the TCP runtime in :mod:`.net` and the
in-process :func:`run_loopback` exercise the exact same message grammar and
byte accounting.
"""

from __future__ import annotations

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..model import NODE_EMB, PERSONAL_BIAS, LocalTrainer, ModelConfig, init_node_rows, init_shared
from . import wire
from .aggregate import ServerState, fed_embed_avg, new_server_state
from .ledger import CostLedger
from .wire import Frame, FrameParser, MessageType, ProtocolError

log = logging.getLogger(__name__)


class FedServer:
    """Synchronous-round coordinator: HELLO barrier, then GLOBAL/LOCAL rounds."""

    def __init__(self, cfg: ModelConfig, expected_clients: int, rounds: int, seed: int = 0,
                 weighting: str = "uniform"):
        if expected_clients < 1:
            raise ValueError("need at least one client")
        if rounds < 0:
            raise ValueError("rounds must be >= 0")
        self.cfg = cfg
        self.expected = expected_clients
        self.rounds = rounds
        self.seed = seed
        self.weighting = weighting
        self.ledger = CostLedger()
        self.state: Optional[ServerState] = None
        self._hellos: Dict[int, List[int]] = {}
        self._uploads: Dict[int, Dict[str, np.ndarray]] = {}
        self.metrics: List[dict] = []

    # -- registration -----------------------------------------------------

    @property
    def ready(self) -> bool:
        return len(self._hellos) == self.expected

    def handle_hello(self, payload: bytes) -> int:
        cid, nodes = wire.decode_hello(payload)
        if cid in self._hellos:
            raise ProtocolError(f"client {cid} sent HELLO twice")
        if len(self._hellos) >= self.expected:
            raise ProtocolError(f"unexpected extra client {cid}")
        self._hellos[cid] = nodes
        self.ledger.record(0, "up", cid, len(payload), wire.HEADER_BYTES, "control")
        return cid

    def begin(self) -> ServerState:
        """Initialize global parameters once every client has registered."""
        if not self.ready:
            raise ProtocolError(f"{len(self._hellos)} of {self.expected} clients registered")
        all_nodes = sorted(n for ns in self._hellos.values() for n in ns)
        if len(set(all_nodes)) != len(all_nodes):
            raise ProtocolError("registered node sets overlap")
        table = init_node_rows(self.cfg, all_nodes, self.seed) if self.cfg.use_node_emb else None
        self.state = new_server_state(init_shared(self.cfg, self.seed), all_nodes, table, self.weighting)
        self.state.ledger = self.ledger
        for cid in sorted(self._hellos):
            self.state.register(cid, self._hellos[cid])
        return self.state

    @property
    def client_ids(self) -> List[int]:
        return sorted(self._hellos)

    # -- rounds -----------------------------------------------------------

    def global_frame(self, client_id: int) -> bytes:
        params = self.state.download(client_id)
        payload = wire.encode_global(self.state.round + 1, params)
        self._account(self.state.round + 1, "down", client_id, params, payload)
        return wire.frame_message(MessageType.GLOBAL, payload)

    def _account(self, round_no, direction, cid, params, payload):
        data_bytes = 4 * wire.element_count(params)
        self.ledger.record(round_no, direction, cid, data_bytes,
                           wire.HEADER_BYTES + len(payload) - data_bytes, "model")

    def handle_local(self, payload: bytes) -> int:
        round_no, cid, params = wire.decode_local(payload)
        expected = self.state.round + 1
        if round_no != expected:
            raise ProtocolError(f"client {cid} uploaded for round {round_no}, expected {expected}")
        if cid not in self.state.clients:
            raise ProtocolError(f"upload from unregistered client {cid}")
        if cid in self._uploads:
            raise ProtocolError(f"client {cid} uploaded twice in round {round_no}")
        self._account(round_no, "up", cid, params, payload)
        self._uploads[cid] = params
        return cid

    def handle_metrics(self, payload: bytes, client_id: int) -> None:
        rec = wire.decode_metrics(payload)
        self.metrics.append(rec)
        self.ledger.record(int(rec.get("round", 0)), "up", client_id, len(payload), wire.HEADER_BYTES, "control")

    @property
    def round_complete(self) -> bool:
        return self.state is not None and len(self._uploads) == len(self.state.clients)

    def finish_round(self) -> None:
        uploads = [(cid, self.state.clients[cid], p) for cid, p in sorted(self._uploads.items())]
        fed_embed_avg(uploads, self.state)
        self._uploads = {}
        log.info("round %d aggregated", self.state.round)

    def shutdown_frame(self, client_id: int) -> bytes:
        self.ledger.record(self.state.round if self.state else 0, "down", client_id, 0,
                           wire.HEADER_BYTES, "control")
        return wire.frame_message(MessageType.SHUTDOWN)

    def handle_frame(self, frame: Frame, client_id: Optional[int] = None) -> Optional[int]:
        """Dispatch an inbound frame; returns the sender's client id when known."""
        if frame.type == MessageType.HELLO:
            return self.handle_hello(frame.payload)
        if frame.type == MessageType.LOCAL:
            return self.handle_local(frame.payload)
        if frame.type == MessageType.METRICS:
            self.handle_metrics(frame.payload, -1 if client_id is None else client_id)
            return client_id
        raise ProtocolError(f"server cannot accept {frame.type.name}")


class FedClient:
    """Client side: apply GLOBAL, train locally, answer with METRICS + LOCAL."""

    def __init__(self, client_id: int, node_ids: Sequence[int], trainer: LocalTrainer, local_epochs: int = 2):
        self.client_id = int(client_id)
        self.node_ids = [int(n) for n in node_ids]
        self.trainer = trainer
        self.local_epochs = local_epochs
        self.round = 0
        self.done = False

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.trainer.params

    def hello_frame(self) -> bytes:
        return wire.frame_message(MessageType.HELLO, wire.encode_hello(self.client_id, self.node_ids))

    def upload_params(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.trainer.params.items() if k != PERSONAL_BIAS}

    def apply_global(self, params: Dict[str, np.ndarray]) -> None:
        own = self.trainer.params
        expected = set(own) - {PERSONAL_BIAS}
        if set(params) != expected:
            raise ProtocolError(f"GLOBAL parameter names differ from the local model: "
                                f"{sorted(set(params) ^ expected)[:5]}")
        if NODE_EMB in params and params[NODE_EMB].shape[0] != len(self.node_ids):
            raise ProtocolError(f"GLOBAL carries {params[NODE_EMB].shape[0]} node rows, "
                                f"client {self.client_id} owns {len(self.node_ids)}")
        for name, arr in params.items():
            if arr.shape != own[name].shape:
                raise ProtocolError(f"GLOBAL {name} has shape {arr.shape}, local {own[name].shape}")
        for name, arr in params.items():
            own[name][...] = arr

    def handle(self, frame: Frame) -> List[bytes]:
        if frame.type == MessageType.SHUTDOWN:
            self.done = True
            return []
        if frame.type != MessageType.GLOBAL:
            raise ProtocolError(f"client cannot accept {frame.type.name}")
        round_no, params = wire.decode_global(frame.payload)
        if round_no != self.round + 1:
            raise ProtocolError(f"client {self.client_id} got round {round_no}, expected {self.round + 1}")
        self.apply_global(params)
        loss = self.trainer.run(self.local_epochs)
        self.round = round_no
        metrics = {"round": round_no, "client_id": self.client_id, "train_loss": loss}
        return [wire.frame_message(MessageType.METRICS, wire.encode_metrics(metrics)),
                wire.frame_message(MessageType.LOCAL, wire.encode_local(round_no, self.client_id, self.upload_params()))]


def run_loopback(server: FedServer, clients: Sequence[FedClient]) -> FedServer:
    """Drive a full run in-process; client turns go in ascending id order."""
    clients = sorted(clients, key=lambda c: c.client_id)
    up = {c.client_id: FrameParser() for c in clients}
    down = {c.client_id: FrameParser() for c in clients}
    by_id = {c.client_id: c for c in clients}

    for c in clients:
        for f in up[c.client_id].feed(c.hello_frame()):
            server.handle_frame(f, c.client_id)
    server.begin()
    for _ in range(server.rounds):
        for cid in server.client_ids:
            for f in down[cid].feed(server.global_frame(cid)):
                for reply in by_id[cid].handle(f):
                    for g in up[cid].feed(reply):
                        server.handle_frame(g, cid)
        if not server.round_complete:
            raise ProtocolError("round ended without every upload")
        server.finish_round()
    for cid in server.client_ids:
        for f in down[cid].feed(server.shutdown_frame(cid)):
            by_id[cid].handle(f)
    for p in list(up.values()) + list(down.values()):
        p.close()
    return server
