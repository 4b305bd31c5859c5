"""Communication accounting split into model, data and control channels."""

from __future__ import annotations

import csv
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Sequence

CHANNELS = ("model", "data", "control")
FIELDS = ("round", "direction", "client_id", "payload_bytes", "framing_bytes", "channel")


@dataclass(frozen=True)
class LedgerRecord:
    round: int
    direction: str      # "up" (client -> server) or "down"
    client_id: int
    payload_bytes: int  # parameter data (model) or message body (control)
    framing_bytes: int  # frame header plus any non-parameter bytes
    channel: str

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + self.framing_bytes


class CostLedger:
    """Append-only, thread-safe record of every message that crossed the wire."""

    def __init__(self, records: Sequence[LedgerRecord] = ()):
        self._lock = threading.Lock()
        self.records: List[LedgerRecord] = list(records)

    def record(self, round_no: int, direction: str, client_id: int, payload_bytes: int,
               framing_bytes: int, channel: str = "model") -> LedgerRecord:
        if direction not in ("up", "down"):
            raise ValueError(f"bad direction {direction!r}")
        if channel not in CHANNELS:
            raise ValueError(f"bad channel {channel!r}")
        rec = LedgerRecord(int(round_no), direction, int(client_id), int(payload_bytes), int(framing_bytes), channel)
        with self._lock:
            self.records.append(rec)
        return rec

    def __len__(self):
        return len(self.records)

    def select(self, channel=None, round_no=None, client_id=None, direction=None) -> List[LedgerRecord]:
        return [r for r in self.records
                if (channel is None or r.channel == channel)
                and (round_no is None or r.round == round_no)
                and (client_id is None or r.client_id == client_id)
                and (direction is None or r.direction == direction)]

    def payload_total(self, channel: str = "model", **kw) -> int:
        return sum(r.payload_bytes for r in self.select(channel=channel, **kw))

    def framing_total(self, channel: str = "model", **kw) -> int:
        return sum(r.framing_bytes for r in self.select(channel=channel, **kw))

    def channel_totals(self) -> Dict[str, int]:
        return {c: sum(r.total_bytes for r in self.records if r.channel == c) for c in CHANNELS}

    def per_round(self) -> List[dict]:
        rounds = sorted({r.round for r in self.records if r.channel == "model"})
        rows = []
        for rn in rounds:
            recs = self.select(channel="model", round_no=rn)
            rows.append({
                "round": rn,
                "messages": len(recs),
                "up_payload_bytes": sum(r.payload_bytes for r in recs if r.direction == "up"),
                "down_payload_bytes": sum(r.payload_bytes for r in recs if r.direction == "down"),
                "framing_bytes": sum(r.framing_bytes for r in recs),
                "data_bytes": sum(r.total_bytes for r in self.select(channel="data", round_no=rn)),
            })
        return rows

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow(asdict(r))
        return path

    @classmethod
    def from_csv(cls, path) -> "CostLedger":
        types = {f.name: f.type for f in fields(LedgerRecord)}
        recs = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                recs.append(LedgerRecord(**{k: (int(v) if types[k] in (int, "int") else v) for k, v in row.items()}))
        return cls(recs)


def cost_formula(rounds: int, clients: int, param_count: int) -> int:
    """Bytes of parameter payload: each round every client downloads and uploads once."""
    if min(rounds, clients, param_count) < 0:
        raise ValueError("cost_formula arguments must be non-negative")
    return rounds * 2 * clients * param_count * 4


def cost_formula_per_client(rounds: int, param_counts: Sequence[int]) -> int:
    """Same model when clients carry different parameter counts (unequal node sets)."""
    return sum(cost_formula(rounds, 1, n) for n in param_counts)
