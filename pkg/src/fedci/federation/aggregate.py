"""Server state and FedEmbedAvg: route node-embedding rows, average the rest."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..model import NODE_EMB, PERSONAL_BIAS
from .ledger import CostLedger
from .wire import ProtocolError

Upload = Tuple[int, Sequence[int], Mapping[str, np.ndarray]]


@dataclass
class ServerState:
    shared: Dict[str, np.ndarray]
    node_table: Optional[np.ndarray] = None       # (N_total, d_n), or None without node codes
    node_index: Dict[int, int] = field(default_factory=dict)
    clients: Dict[int, List[int]] = field(default_factory=dict)
    round: int = 0
    weighting: str = "uniform"
    ledger: CostLedger = field(default_factory=CostLedger)

    def __post_init__(self):
        if self.weighting not in ("uniform", "nodes"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.node_table is not None and len(self.node_index) != self.node_table.shape[0]:
            raise ValueError("node table rows do not match the node index")

    def register(self, client_id: int, node_ids: Sequence[int]) -> None:
        if client_id in self.clients:
            raise ProtocolError(f"client {client_id} registered twice")
        nodes = [int(n) for n in node_ids]
        if not nodes:
            raise ProtocolError(f"client {client_id} owns no nodes")
        taken = {n for ns in self.clients.values() for n in ns}
        clash = taken.intersection(nodes)
        if clash:
            raise ProtocolError(f"client {client_id} claims nodes already owned: {sorted(clash)[:5]}")
        if self.node_table is not None:
            unknown = [n for n in nodes if n not in self.node_index]
            if unknown:
                raise ProtocolError(f"client {client_id} claims unknown nodes {unknown[:5]}")
        self.clients[int(client_id)] = nodes

    def rows_for(self, client_id: int) -> np.ndarray:
        return np.asarray([self.node_index[n] for n in self.clients[client_id]], dtype=np.int64)

    def download(self, client_id: int) -> Dict[str, np.ndarray]:
        """Global shared parameters plus this client's own node rows."""
        out = dict(self.shared)
        if self.node_table is not None:
            out[NODE_EMB] = self.node_table[self.rows_for(client_id)]
        return out

    def global_params(self) -> Dict[str, np.ndarray]:
        out = dict(self.shared)
        if self.node_table is not None:
            out[NODE_EMB] = self.node_table.copy()
        return out


def new_server_state(shared: Mapping[str, np.ndarray], node_ids: Sequence[int] = (),
                     node_table: Optional[np.ndarray] = None, weighting: str = "uniform") -> ServerState:
    index = {int(n): i for i, n in enumerate(node_ids)} if node_table is not None else {}
    return ServerState(shared={k: np.array(v) for k, v in shared.items()},
                       node_table=None if node_table is None else np.array(node_table),
                       node_index=index, weighting=weighting)


def client_weights(state: ServerState, client_ids: Sequence[int]) -> Dict[int, float]:
    if state.weighting == "uniform":
        return {c: 1.0 for c in client_ids}
    total = sum(len(state.clients[c]) for c in client_ids)
    return {c: len(state.clients[c]) / total for c in client_ids}


def fed_embed_avg(uploads: Sequence[Upload], state: ServerState) -> ServerState:
    """Apply one aggregation round to ``state`` in place and return it.

    Node-embedding rows are copied into the global table at the uploading
    client's rows. Every other tensor is averaged over clients, summed in
    ascending client id order so the result does not depend on arrival order.
    """
    by_client: Dict[int, Upload] = {}
    for up in uploads:
        cid = int(up[0])
        if cid in by_client:
            raise ProtocolError(f"duplicate upload from client {cid}")
        if cid not in state.clients:
            raise ProtocolError(f"upload from unregistered client {cid}")
        by_client[cid] = up
    missing = sorted(set(state.clients) - set(by_client))
    if missing:
        raise ProtocolError(f"missing uploads from clients {missing}")

    order = sorted(by_client)
    for cid in order:
        _, nodes, params = by_client[cid]
        if [int(n) for n in nodes] != state.clients[cid]:
            raise ProtocolError(f"client {cid} uploaded for a node set that differs from its registration")
        if PERSONAL_BIAS in params:
            raise ProtocolError(f"client {cid} uploaded its personalized bias")
        names = set(params) - {NODE_EMB}
        if names != set(state.shared):
            raise ProtocolError(f"client {cid} parameter names differ from the global set: "
                                f"{sorted(names ^ set(state.shared))[:5]}")
        for name, ref in state.shared.items():
            if np.shape(params[name]) != ref.shape:
                raise ProtocolError(f"client {cid}: {name} has shape {np.shape(params[name])}, expected {ref.shape}")
        if state.node_table is not None:
            rows = params.get(NODE_EMB)
            if rows is None or np.shape(rows) != (len(nodes), state.node_table.shape[1]):
                raise ProtocolError(f"client {cid}: node rows {None if rows is None else np.shape(rows)} "
                                    f"do not match its {len(nodes)} nodes")

    # node rows are routed, never averaged
    if state.node_table is not None:
        for cid in order:
            _, _, params = by_client[cid]
            state.node_table[state.rows_for(cid)] = params[NODE_EMB]

    weights = client_weights(state, order)
    uniform = state.weighting == "uniform"
    for name, ref in state.shared.items():
        acc = np.zeros(ref.shape, dtype=np.float64)
        for cid in order:
            acc += weights[cid] * np.asarray(by_client[cid][2][name], dtype=np.float64)
        if uniform:
            acc /= len(order)
        state.shared[name] = acc.astype(ref.dtype)
    state.round += 1
    return state
