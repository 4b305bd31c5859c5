"""End-to-end runs: data -> partition -> federated training -> reports and ledger."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from . import data as fdata
from .evaluation import (MetricReport, aggregate_reports, evaluate_client, hi_predictor,
                         load_reports, model_predictor, save_reports)
from .federation import CostLedger, FedClient, FedServer, run_loopback
from .model import LocalTrainer, ModelConfig, TrainConfig, init_params, make_rng

log = logging.getLogger(__name__)

ABLATIONS = ("time_emb", "node_emb", "bias")


@dataclass
class ExperimentConfig:
    # model
    t_in: int = 12
    t_out: int = 12
    hidden: int = 64
    d_td: int = 32
    d_tw: int = 32
    d_n: int = 32
    k_layers: int = 3
    dropout: float = 0.1
    ablate: List[str] = field(default_factory=list)
    # training
    global_epochs: int = 100
    local_epochs: int = 2
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    # federation
    clients: int = 8
    host: str = "127.0.0.1"
    port: int = 0
    weighting: str = "uniform"
    partition_strategy: str = "contiguous"
    # data
    data: Optional[str] = None
    partition: Optional[str] = None
    synthetic: bool = False
    nodes: int = 32
    days: int = 14
    interval_s: int = 300
    noise: float = 0.1
    data_seed: int = 0
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    task: str = "flow"

    def __post_init__(self):
        if isinstance(self.ablate, str):
            self.ablate = [a for a in self.ablate.split(",") if a]
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation(s) {sorted(bad)}; choose from {ABLATIONS}")
        if self.global_epochs < 0 or self.local_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.clients < 1:
            raise ValueError("need at least one client")
        if self.weighting not in ("uniform", "nodes"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.data is None and not self.synthetic:
            raise ValueError("either a data path or synthetic=true is required")

    def model_config(self, interval_s: int) -> ModelConfig:
        return ModelConfig.for_interval(
            interval_s, t_in=self.t_in, t_out=self.t_out, hidden=self.hidden, d_td=self.d_td,
            d_tw=self.d_tw, d_n=self.d_n, k_layers=self.k_layers, dropout=self.dropout,
            use_time_emb="time_emb" not in self.ablate, use_node_emb="node_emb" not in self.ablate,
            use_bias="bias" not in self.ablate)

    def train_config(self) -> TrainConfig:
        return TrainConfig(local_epochs=self.local_epochs, batch_size=self.batch_size, lr=self.lr)

    def split_spec(self) -> fdata.SplitSpec:
        return fdata.SplitSpec(self.train_frac, self.val_frac, self.test_frac)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_sources(cls, file_values: Optional[dict] = None, overrides: Optional[dict] = None,
                     env=os.environ) -> "ExperimentConfig":
        """Merge config file < ``FEDCI_SEED`` < explicit overrides."""
        values = dict(file_values or {})
        unknown = set(values) - set(cls.field_names())
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if env.get("FEDCI_SEED"):
            values["seed"] = int(env["FEDCI_SEED"])
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(**values)


def load_config_file(path) -> dict:
    """Flat ``key: value`` YAML."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict) or any(isinstance(v, dict) for v in raw.values()):
        raise ValueError(f"{path}: expected a flat key/value mapping")
    return raw


# ---------------------------------------------------------------------------
# building blocks shared by local and process modes


def load_frame(cfg: ExperimentConfig) -> fdata.SeriesFrame:
    if cfg.data:
        return fdata.load_csv(cfg.data)
    return fdata.gen_synthetic(cfg.nodes, cfg.days, cfg.interval_s, cfg.data_seed, cfg.noise)


def load_or_make_partition(cfg: ExperimentConfig, frame: fdata.SeriesFrame) -> Dict[int, List[int]]:
    if cfg.partition:
        part = fdata.load_partition(cfg.partition)
        if len(part) != cfg.clients:
            raise ValueError(f"partition has {len(part)} clients, config says {cfg.clients}")
    else:
        part = fdata.partition_nodes(frame.node_ids, cfg.clients, cfg.partition_strategy, cfg.seed)
    fdata.check_partition(part, frame.node_ids)
    return part


def build_client(cfg: ExperimentConfig, frame: fdata.SeriesFrame, client_id: int,
                 node_ids: List[int]) -> Tuple[FedClient, fdata.ClientData]:
    mcfg = cfg.model_config(frame.interval_s)
    cd = fdata.client_data(frame, node_ids, cfg.t_in, cfg.t_out, cfg.split_spec(), mcfg.np_dtype)
    trainer = LocalTrainer(mcfg, init_params(mcfg, node_ids, cfg.seed), cd.train,
                           make_rng(cfg.seed, client_id), cfg.train_config())
    return FedClient(client_id, node_ids, trainer, cfg.local_epochs), cd


def evaluate_clients(cfg: ExperimentConfig, clients: List[Tuple[FedClient, fdata.ClientData]]) -> List[MetricReport]:
    """Per-client and pooled reports for the trained model and the HI baseline."""
    out = []
    for method in ("fedci", "hi"):
        per = []
        for client, cd in clients:
            pred = (model_predictor(client.params, client.trainer.cfg) if method == "fedci"
                    else hi_predictor(cfg.t_out))
            per.append(evaluate_client(pred, cd.test, scope=client.client_id, task=f"{cfg.task}/{method}"))
        out += per + [aggregate_reports(per, scope="global")]
    return out


@dataclass
class ExperimentResult:
    reports: List[MetricReport]
    ledger: CostLedger
    params: Dict[int, Dict[str, np.ndarray]]
    out_dir: Optional[Path] = None
    seconds: float = 0.0

    def global_report(self, method: str = "fedci") -> MetricReport:
        return next(r for r in self.reports if r.scope == "global" and r.task.endswith("/" + method))


def _write_outputs(cfg: ExperimentConfig, out_dir: Path, reports, ledger: CostLedger, mode: str,
                   partition, seconds: float):
    out_dir.mkdir(parents=True, exist_ok=True)
    save_reports(reports, out_dir / "reports.json")
    ledger.to_csv(out_dir / "ledger.csv")
    manifest = {"config": cfg.to_dict(), "mode": mode, "seed": cfg.seed,
                "client_seeds": {str(c): [cfg.seed, 2, c] for c in sorted(partition)},
                "partition": {str(k): v for k, v in sorted(partition.items())},
                "rounds_completed": cfg.global_epochs, "seconds": round(seconds, 3)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def save_params(params: Dict[str, np.ndarray], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **params)


def load_params(path) -> Dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def run_local(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Whole run in one process over the loopback transport."""
    t0 = time.perf_counter()
    frame = load_frame(cfg)
    partition = load_or_make_partition(cfg, frame)
    clients = [build_client(cfg, frame, cid, nodes) for cid, nodes in sorted(partition.items())]
    server = FedServer(cfg.model_config(frame.interval_s), cfg.clients, cfg.global_epochs, cfg.seed, cfg.weighting)
    run_loopback(server, [c for c, _ in clients])
    reports = evaluate_clients(cfg, clients)
    seconds = time.perf_counter() - t0
    result = ExperimentResult(reports, server.ledger, {c.client_id: c.params for c, _ in clients},
                              None if out_dir is None else Path(out_dir), seconds)
    if out_dir is not None:
        _write_outputs(cfg, Path(out_dir), reports, server.ledger, "local", partition, seconds)
    return result


def run_process(cfg: ExperimentConfig, out_dir, timeout: float = 3600.0) -> ExperimentResult:
    """Server and every client in separate OS processes talking over TCP."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = load_frame(cfg)
    partition = load_or_make_partition(cfg, frame)
    run_cfg = dataclasses.replace(cfg)
    if not cfg.data:
        run_cfg.data = str(fdata.save_csv(frame, out_dir / "series.csv"))
    run_cfg.partition = str(fdata.save_partition(partition, out_dir / "partition.json"))
    cfg_path = out_dir / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(run_cfg.to_dict(), sort_keys=True))
    port_file = out_dir / "server.port"
    if port_file.exists():
        port_file.unlink()

    env = dict(os.environ)
    env.pop("FEDCI_SEED", None)  # the written config already carries the resolved seed
    py = [sys.executable, "-m", "fedci"]
    server = subprocess.Popen(py + ["server", "--config", str(cfg_path), "--port-file", str(port_file),
                                    "--out", str(out_dir)], env=env)
    procs = []
    try:
        deadline = time.monotonic() + 60
        while not port_file.exists():
            if server.poll() is not None:
                raise RuntimeError(f"server exited early with code {server.returncode}")
            if time.monotonic() > deadline:
                raise RuntimeError("server did not publish its port")
            time.sleep(0.05)
        port = port_file.read_text().strip()
        for cid in sorted(partition):
            procs.append(subprocess.Popen(py + ["client", "--config", str(cfg_path), "--client-id", str(cid),
                                                "--server", f"{cfg.host}:{port}", "--out", str(out_dir)], env=env))
        codes = [p.wait(timeout=timeout) for p in procs]
        scode = server.wait(timeout=timeout)
    finally:
        for p in procs + [server]:
            if p.poll() is None:
                p.kill()
    if scode != 0 or any(codes):
        raise RuntimeError(f"federated run failed: server={scode} clients={codes}")

    params = {cid: load_params(out_dir / f"client_{cid}" / "params.npz") for cid in sorted(partition)}
    reports = []
    for cid in sorted(partition):
        reports += load_reports(out_dir / f"client_{cid}" / "reports.json")
    reports = _with_globals(reports)
    ledger = CostLedger.from_csv(out_dir / "ledger.csv")
    seconds = time.perf_counter() - t0
    _write_outputs(cfg, out_dir, reports, ledger, "process", partition, seconds)
    return ExperimentResult(reports, ledger, params, out_dir, seconds)


def _with_globals(per_client: List[MetricReport]) -> List[MetricReport]:
    out = []
    for method in ("fedci", "hi"):
        rs = [r for r in per_client if r.task.endswith("/" + method)]
        out += rs + [aggregate_reports(rs, scope="global")]
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, mode: str = "local") -> ExperimentResult:
    if mode == "local":
        return run_local(cfg, out_dir)
    if mode == "process":
        if out_dir is None:
            raise ValueError("process mode needs an output directory")
        return run_process(cfg, out_dir)
    raise ValueError(f"unknown mode {mode!r}")
