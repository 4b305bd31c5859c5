from .aggregate import ServerState, fed_embed_avg, new_server_state
from .ledger import CostLedger, LedgerRecord, cost_formula, cost_formula_per_client
from .net import FederationError, client_run, server_run
from .protocol import FedClient, FedServer, run_loopback
from .wire import (DecodeError, FrameParser, FramingError, MessageType, ProtocolError,
                   deserialize_params, frame_message, serialize_params)

__all__ = [
    "CostLedger", "DecodeError", "FedClient", "FedServer", "FederationError", "FrameParser",
    "FramingError", "LedgerRecord", "MessageType", "ProtocolError", "ServerState", "client_run",
    "cost_formula", "cost_formula_per_client", "deserialize_params", "fed_embed_avg",
    "frame_message", "new_server_state", "run_loopback", "serialize_params", "server_run",
]
