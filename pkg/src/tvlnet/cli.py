"""Command-line entry point: one subcommand per stage plus ``run``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from decimal import Decimal
from pathlib import Path

import torch

from . import cluster, ingest, linkpred, metrics, netbuild, sectors, tokmap
from .pipeline import (STAGES, PipelineConfig, csv_bytes, json_bytes, parse_duration,
                       run_pipeline)

log = logging.getLogger("tvlnet")


def _write(path: str, data: bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(data)


def _date(value: str) -> str:
    try:
        ingest.date_to_ts(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {value!r}") from None
    return value


def _duration(value: str) -> int:
    try:
        return parse_duration(value)
    except ingest.ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def cmd_ingest(args) -> int:
    fmt = args.format or ("json" if args.input.endswith(".json") else "csv")
    with open(args.input, "rb") as fh:
        parsed = ingest.parse_records(fh.read(), fmt)
    for r in parsed.rejections:
        log.warning("line %d rejected: %s", r.line, r.reason)
    start = ingest.date_to_ts(args.start) if args.start else None
    end = ingest.date_to_ts(args.end) if args.end else None
    table = ingest.align(parsed.records, args.interval, args.tolerance, start=start, end=end)
    _write(args.out, table.to_json())
    if args.rejections:
        _write(args.rejections, csv_bytes(["line", "reason", "raw"],
                                          [(r.line, r.reason, r.raw) for r in parsed.rejections]))
    print(f"{len(parsed.records)} records aligned onto {table.n_steps} steps, "
          f"{len(parsed.rejections)} rejected")
    return 0


def cmd_synth(args) -> int:
    cfg = ingest.load_synth_config(args.config) if args.config else ingest.SynthConfig()
    records = ingest.synth_dataset(cfg, args.seed)
    _write(args.out, ingest.write_records(records, args.format))
    if args.universe:
        uni = ingest.synth_universe(cfg, args.seed)
        _write(args.universe, json_bytes({
            "categories": uni.categories, "issuers": uni.issuers,
            "metadata_map": uni.metadata_map,
            "texts": {"tokens": uni.token_texts, "protocols": uni.protocol_texts},
        }))
    print(f"{len(records)} synthetic records written")
    return 0


def cmd_map_tokens(args) -> int:
    table = ingest.AlignedStateTable.from_json(Path(args.aligned).read_bytes())
    metadata = tokmap.load_metadata_map(args.metadata) if args.metadata else {}
    corpus = tokmap.load_texts(args.texts) if args.texts else None
    tmap = tokmap.resolve_all(table.tokens(), metadata, tokmap.load_manual_map(args.manual),
                              corpus, args.theta_sim)
    _write(args.out, tmap.to_csv())
    print(", ".join(f"{k}={v}" for k, v in sorted(tmap.stage_counts().items())))
    return 0


def cmd_build(args) -> int:
    table = ingest.AlignedStateTable.from_json(Path(args.input).read_bytes())
    tmap = tokmap.TokenProtocolMap.from_csv(Path(args.map).read_bytes())
    stride, rem = divmod(args.interval, table.interval)
    if rem or stride < 1:
        raise ingest.ConfigError("--interval must be a multiple of the aligned grid interval")
    start = ingest.date_to_ts(args.date_from) if args.date_from else None
    end = ingest.date_to_ts(args.date_to) if args.date_to else None
    snaps = netbuild.build_series(table, tmap, Decimal(args.theta_node), args.new_token_policy,
                                  start, end, stride)
    for s in snaps:
        s.validate()
    netbuild.save_snapshots(snaps, args.out)
    print(f"{len(snaps)} snapshots written to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    snaps = netbuild.load_snapshots(args.snapshots)
    reports = [metrics.compute_metrics(s, args.alpha, not args.no_ricci) for s in snaps]
    cols = metrics.MetricsReport.columns()
    _write(args.out, csv_bytes(cols, ([r.as_row()[k] for k in cols] for r in reports)))
    return 0


def cmd_cluster(args) -> int:
    g = netbuild.read_snapshot(Path(args.snapshot).read_bytes())
    feats, res = cluster.cluster_snapshot(g, args.perplexity, args.seed, args.n_iter)
    doc = {
        "date": g.date,
        "nodes": [{"id": i, "x": float(res.embedding[k, 0]), "y": float(res.embedding[k, 1]),
                   "label": int(res.labels[k])} for k, i in enumerate(feats.ids)],
        "eps": res.eps, "min_samples": res.min_samples, "silhouette": res.silhouette,
        "n_clusters": res.n_clusters, "target_missed": res.target_missed,
        "sweep": [{"eps": e, "min_samples": m, "n_clusters": k, "silhouette": s}
                  for e, m, k, s in res.grid],
    }
    _write(args.out, json_bytes(doc))
    print(f"{res.n_clusters} clusters at eps={res.eps}, min_samples={res.min_samples}")
    return 0


def cmd_sectors(args) -> int:
    snaps = netbuild.load_snapshots(args.snapshots)
    smap = sectors.SectorMap.load(args.sector_map, args.categories)
    if args.flows:
        rows = sectors.sector_flows(snaps, smap, args.orientation)
        _write(args.flows, csv_bytes(["date", "sector", "expansion", "contraction", "rho"],
                                     [(r.date, r.sector, r.expansion, r.contraction, r.rho) for r in rows]))
    if args.event:
        rows, notes = sectors.incident_table(snaps, smap, args.event, args.window,
                                             interval_days=args.interval // 86400)
        for n in notes:
            log.warning("%s", n)
        _write(args.out, csv_bytes(
            ["week", "date", "sector", "protocol", "net_change", "cut_source", "cut_target", "cut_size"],
            [(r.week, r.date, r.sector, r.protocol, r.net_change, r.cut_source, r.cut_target, r.cut_size)
             for r in rows]))
    return 0


def cmd_var(args) -> int:
    with open(args.series, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "sector" in rows[0]:
        flows = [sectors.SectorFlow(r["date"], r["sector"], Decimal(r["expansion"]),
                                    Decimal(r["contraction"]), None) for r in rows]
        chosen = args.sectors or sorted({f.sector for f in flows})
        _, names, series = sectors.flow_series_matrix(flows, chosen)
    else:
        names = [c for c in (rows[0].keys() if rows else []) if c != "date"]
        series = [[float(r[c]) for c in names] for r in rows]
    lags = args.lags if args.lags else sectors.select_lag_order(series, args.max_lags)
    model = sectors.fit_var(series, lags, names)
    resp = sectors.irf(model, args.horizon)
    _write(args.out, csv_bytes(["horizon", "response", "shock", "value"],
                               [(h, names[i], names[j], float(resp[h, i, j]))
                                for h in range(resp.shape[0])
                                for i in range(len(names)) for j in range(len(names))]))
    print(f"VAR({lags}) on {len(names)} series, spectral radius {model.spectral_radius():.4f}")
    return 0


def cmd_predict(args) -> int:
    snaps = netbuild.load_snapshots(args.snapshots)
    raw = {}
    if args.config:
        with open(args.config, "rb") as fh:
            doc = ingest.load_toml_bytes(fh.read())
        raw = dict(doc.get("predict", doc))
    raw["seed"] = args.seed
    cfg = linkpred.TrainConfig.from_dict(raw)
    model = linkpred.TgnnModel(args.seed)
    result = linkpred.train_live(model, snaps, cfg)
    cols = list(linkpred.EvalRecord.__dataclass_fields__)
    _write(args.out, csv_bytes(cols, ([r[k] for k in cols] for r in linkpred.eval_rows(result.reports))))
    if args.checkpoint:
        _write(args.checkpoint, model.state_json().encode("utf-8"))
    return 0


def cmd_run(args) -> int:
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.input is not None:
        cfg.paths.input = args.input
        cfg.validate()
    result = run_pipeline(cfg, args.out, args.only)
    if result.error:
        print(result.error, file=sys.stderr)
    for entry in result.manifest.entries:
        print(f"{entry['stage']}: {len(entry['artifacts'])} artifact(s)")
    return result.status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tvlnet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--workers", type=int, default=1, help="intra-op threads for tensor code")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse TVL records and align them to a time grid")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--interval", type=_duration, default=ingest.DEFAULT_INTERVAL)
    p.add_argument("--tolerance", type=_duration, default=ingest.DEFAULT_TOLERANCE)
    p.add_argument("--start", type=_date)
    p.add_argument("--end", type=_date)
    p.add_argument("--rejections")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic TVL record set")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--universe", help="also write the generator's ground truth as JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("map-tokens", help="resolve each token to its issuing protocol")
    p.add_argument("--aligned", required=True)
    p.add_argument("--metadata")
    p.add_argument("--manual")
    p.add_argument("--texts")
    p.add_argument("--theta-sim", type=float, default=tokmap.DEFAULT_THETA_SIM)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map_tokens)

    p = sub.add_parser("build", help="build exposure snapshots")
    p.add_argument("--input", required=True, help="aligned state table JSON")
    p.add_argument("--map", required=True, help="token map CSV")
    p.add_argument("--interval", type=_duration, default=ingest.DEFAULT_INTERVAL)
    p.add_argument("--from", dest="date_from", type=_date)
    p.add_argument("--to", dest="date_to", type=_date)
    p.add_argument("--theta-node", default="0")
    p.add_argument("--new-token-policy", choices=netbuild.NEW_TOKEN_POLICIES, default="include")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("metrics", help="global metrics per snapshot")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--no-ricci", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("cluster", help="t-SNE embedding and DBSCAN sweep for one snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-iter", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("sectors", help="sector flows and incident table")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--event", type=_date)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--interval", type=_duration, default=ingest.DEFAULT_INTERVAL)
    p.add_argument("--orientation", choices=sectors.ORIENTATIONS, default="inbound")
    p.add_argument("--sector-map")
    p.add_argument("--categories", help="protocol_id,category CSV")
    p.add_argument("--flows", help="also write the per-sector flow series")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sectors)

    p = sub.add_parser("var", help="fit a VAR and write impulse responses")
    p.add_argument("--series", required=True)
    p.add_argument("--lags", type=int, default=2, help="0 selects the order by AIC")
    p.add_argument("--max-lags", type=int, default=4)
    p.add_argument("--horizon", type=int, default=12)
    p.add_argument("--sectors", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_var)

    p = sub.add_parser("predict", help="live-update link prediction")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--input")
    p.add_argument("--seed", type=int)
    p.add_argument("--only", nargs="+", choices=STAGES)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be positive")
    torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return os.EX_IOERR
    except (ValueError, ingest.IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return os.EX_DATAERR


if __name__ == "__main__":
    sys.exit(main())
