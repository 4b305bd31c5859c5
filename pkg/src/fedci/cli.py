"""Command-line entry point: ``fedci <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Dict, List, Optional

from . import data as fdata
from .evaluation import load_reports, save_reports
from .experiment import (ExperimentConfig, build_client, evaluate_clients, load_config_file, load_frame,
                         load_or_make_partition, run_experiment, save_params)
from .federation import CostLedger, FederationError, FedServer, client_run, cost_formula_per_client, server_run
from .federation.net import parse_address
from .model import init_params, param_count

log = logging.getLogger("fedci")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_args(parser: argparse.ArgumentParser) -> None:
    """One flag per ExperimentConfig field; unset flags leave the config file value alone."""
    parser.add_argument("--config", help="flat YAML file with ExperimentConfig keys")
    hints = typing.get_type_hints(ExperimentConfig)
    for f in dataclasses.fields(ExperimentConfig):
        hint = hints[f.name]
        if hint is bool:
            parser.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif hint in (int, float):
            parser.add_argument(_flag(f.name), dest=f.name, type=hint, default=None)
        else:  # strings, optional paths, and the comma-separated ablation list
            parser.add_argument(_flag(f.name), dest=f.name, default=None)


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {f: getattr(args, f) for f in ExperimentConfig.field_names()}
    return ExperimentConfig.from_sources(file_values, overrides)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    frame = fdata.gen_synthetic(args.nodes, args.days, args.interval_s, args.seed, args.noise)
    path = fdata.save_csv(frame, args.out)
    print(f"wrote {len(frame)} steps x {frame.n_nodes} nodes to {path}")
    return 0


def cmd_partition(args) -> int:
    if args.data:
        node_ids = fdata.load_csv(args.data).node_ids
    else:
        node_ids = list(range(args.nodes))
    part = fdata.partition_nodes(node_ids, args.clients, args.strategy, args.seed)
    path = fdata.save_partition(part, args.out)
    print(f"wrote {len(part)} clients to {path}")
    return 0


def cmd_server(args) -> int:
    cfg = resolve_config(args)
    frame = load_frame(cfg)
    server = FedServer(cfg.model_config(frame.interval_s), cfg.clients, cfg.global_epochs, cfg.seed, cfg.weighting)
    out = Path(args.out)
    try:
        server_run((cfg.host, cfg.port), server, accept_timeout=args.accept_timeout,
                   round_timeout=args.round_timeout, port_file=args.port_file)
    except FederationError as exc:
        log.error("run aborted: %s", exc)
        server.ledger.to_csv(out / "ledger.csv")
        return 2
    server.ledger.to_csv(out / "ledger.csv")
    (out / "server_metrics.json").write_text(json.dumps(server.metrics, indent=1) + "\n")
    done = server.state.round if server.state else 0
    if done != cfg.global_epochs:
        log.error("completed %d of %d rounds", done, cfg.global_epochs)
        return 2
    return 0


def cmd_client(args) -> int:
    cfg = resolve_config(args)
    frame = load_frame(cfg)
    partition = load_or_make_partition(cfg, frame)
    if args.client_id not in partition:
        log.error("client id %d not in partition %s", args.client_id, sorted(partition))
        return 2
    client, cd = build_client(cfg, frame, args.client_id, partition[args.client_id])
    try:
        client_run(parse_address(args.server), client, connect_timeout=args.connect_timeout)
    except Exception as exc:  # noqa: BLE001  (any failure means a non-zero exit)
        log.error("client %d failed: %s", args.client_id, exc)
        return 2
    out = Path(args.out) / f"client_{args.client_id}"
    save_params(client.params, out / "params.npz")
    reports = [r for r in evaluate_clients(cfg, [(client, cd)]) if r.scope != "global"]
    save_reports(reports, out / "reports.json")
    return 0 if client.round == cfg.global_epochs else 2


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    mode = getattr(args, "mode", "local")
    result = run_experiment(cfg, args.out, mode)
    print(format_reports(result.reports))
    print(f"{cfg.global_epochs} rounds in {result.seconds:.1f}s; outputs in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# report


def expected_param_counts(manifest: dict) -> Dict[int, int]:
    """|W_i| per client, recomputed from the run manifest (config + partition)."""
    cfg = ExperimentConfig(**manifest["config"])
    interval = cfg.interval_s
    if cfg.data:
        interval = fdata.load_csv(cfg.data).interval_s
    mcfg = cfg.model_config(interval)
    return {int(cid): param_count(init_params(mcfg, nodes, cfg.seed))
            for cid, nodes in manifest["partition"].items()}


def observed_param_counts(ledger: CostLedger) -> Dict[int, int]:
    first = min((r.round for r in ledger.select(channel="model")), default=None)
    if first is None:
        return {}
    return {r.client_id: r.payload_bytes // 4 for r in ledger.select(channel="model", round_no=first, direction="down")}


def format_ledger(ledger: CostLedger) -> str:
    rows = ledger.per_round()
    head = f"{'round':>5} {'msgs':>5} {'up_payload':>12} {'down_payload':>12} {'framing':>9} {'data':>6}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['round']:>5} {r['messages']:>5} {r['up_payload_bytes']:>12} "
                     f"{r['down_payload_bytes']:>12} {r['framing_bytes']:>9} {r['data_bytes']:>6}")
    totals = ledger.channel_totals()
    lines.append("-" * len(head))
    lines.append(f"model payload {ledger.payload_total('model')} B, model framing {ledger.framing_total('model')} B, "
                 f"control {totals['control']} B, data {totals['data']} B")
    return "\n".join(lines)


def format_reports(reports) -> str:
    lines = [f"{'task':<14} {'scope':>7} {'MAE':>9} {'RMSE':>9} {'MAPE%':>8} {'count':>9}"]
    for r in reports:
        lines.append(f"{r.task:<14} {str(r.scope):>7} {r.mae:>9.4f} {r.rmse:>9.4f} {r.mape_percent:>8.3f} {r.count:>9}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    ledger_path = Path(args.ledger)
    ledger = CostLedger.from_csv(ledger_path)
    run_dir = ledger_path.parent
    print(format_ledger(ledger))

    reports_path = Path(args.reports) if args.reports else run_dir / "reports.json"
    if reports_path.exists():
        print()
        print(format_reports(load_reports(reports_path)))

    if args.csv:
        rows = ledger.per_round()
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["round"])
            w.writeheader()
            w.writerows(rows)

    manifest_path = Path(args.manifest) if args.manifest else run_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        counts, source = expected_param_counts(manifest), "manifest"
        rounds = int(manifest["rounds_completed"])
    else:
        counts, source = observed_param_counts(ledger), "ledger round 1"
        rounds = len(ledger.per_round())
    expected = cost_formula_per_client(rounds, list(counts.values()))
    actual = ledger.payload_total("model")
    ok = expected == actual and ledger.channel_totals()["data"] == 0
    print(f"\ncost formula ({source}): R_g={rounds}, sum|W_i|={sum(counts.values())} -> "
          f"{expected} B; ledger {actual} B: {'OK' if ok else 'MISMATCH'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedci", description="Channel-independent federated traffic forecasting")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic series CSV")
    g.add_argument("--nodes", type=int, default=8)
    g.add_argument("--days", type=int, default=14)
    g.add_argument("--interval-s", type=int, default=300)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="synthetic.csv")
    g.set_defaults(func=cmd_gen_data)

    pt = sub.add_parser("partition", help="assign nodes to clients")
    pt.add_argument("--data", help="series CSV; otherwise nodes 0..N-1")
    pt.add_argument("--nodes", type=int, default=8)
    pt.add_argument("--clients", type=int, required=True)
    pt.add_argument("--strategy", choices=("contiguous", "shuffled"), default="contiguous")
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out", default="partition.json")
    pt.set_defaults(func=cmd_partition)

    s = sub.add_parser("server", help="run the aggregation server over TCP")
    add_config_args(s)
    s.add_argument("--out", default="run")
    s.add_argument("--port-file", help="write the bound port here once listening")
    s.add_argument("--accept-timeout", type=float, default=120.0)
    s.add_argument("--round-timeout", type=float, default=None)
    s.set_defaults(func=cmd_server)

    c = sub.add_parser("client", help="run one client over TCP")
    add_config_args(c)
    c.add_argument("--client-id", type=int, required=True)
    c.add_argument("--server", required=True, help="host:port")
    c.add_argument("--out", default="run")
    c.add_argument("--connect-timeout", type=float, default=60.0)
    c.set_defaults(func=cmd_client)

    rl = sub.add_parser("run-local", help="whole run in one process (loopback transport)")
    add_config_args(rl)
    rl.add_argument("--out", default="run")
    rl.set_defaults(func=cmd_run, mode="local")

    r = sub.add_parser("run", help="whole run, server and clients as separate processes or in-process")
    add_config_args(r)
    r.add_argument("--mode", choices=("local", "process"), default="process")
    r.add_argument("--out", default="run")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="render ledger and metrics, check the cost formula")
    rep.add_argument("--ledger", required=True)
    rep.add_argument("--reports")
    rep.add_argument("--manifest")
    rep.add_argument("--csv", help="write the per-round table here")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
