"""Staged batch pipeline driven by one TOML config.

Stages run in dependency order and communicate through files in the output
directory, so any stage can be re-run on its own. Every stage appends a
manifest entry (artifact paths, SHA-256 hashes, stage parameters); the
manifest is rewritten after each stage so a failure leaves the completed
entries behind.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import cluster, ingest, linkpred, metrics, netbuild, sectors, tokmap

log = logging.getLogger(__name__)

STAGES = ("ingest", "map-tokens", "build", "metrics", "sectors", "predict")
MANIFEST = "manifest.json"

_DURATION = re.compile(r"^\s*(\d+)\s*([smhdw]?)\s*$")
_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400, "w": 604800}


def parse_duration(value: int | str) -> int:
    """Seconds from an int or a string such as ``7d``, ``12h`` or ``3600``."""
    if isinstance(value, bool):
        raise ingest.ConfigError(f"bad duration {value!r}")
    if isinstance(value, int):
        return value
    m = _DURATION.match(str(value))
    if not m:
        raise ingest.ConfigError(f"bad duration {value!r}")
    return int(m.group(1)) * _UNITS[m.group(2)]


def stage_seed(root: int, stage: str) -> int:
    """Per-stage seed from the root seed by stable hashing."""
    digest = hashlib.sha256(f"{root}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PathsSection:
    input: str | None = None
    output: str = "out"
    metadata_map: str | None = None
    manual_map: str | None = None
    texts: str | None = None
    categories: str | None = None
    sector_map: str | None = None


@dataclass
class IngestSection:
    format: str | None = None
    interval: int | str = "7d"
    tolerance: int | str = "3d"
    start: str | None = None
    end: str | None = None


@dataclass
class TokmapSection:
    theta_sim: float = tokmap.DEFAULT_THETA_SIM


@dataclass
class BuildSection:
    theta_node: str | int | float = 0
    new_token_policy: str = "include"


@dataclass
class MetricsSection:
    alpha: float = 0.0
    ricci: bool = True
    composition_k: int = 30


@dataclass
class ClusterSection:
    enabled: bool = True
    snapshot: str = "last"
    perplexity: float = 30.0
    n_iter: int = 1000
    eps_grid: list[float] = field(default_factory=lambda: list(cluster.EPS_GRID))
    min_samples_grid: list[int] = field(default_factory=lambda: list(cluster.MIN_SAMPLES_GRID))


@dataclass
class SectorsSection:
    orientation: str = "inbound"
    include_intra: bool = False
    event: str | None = None
    window: int = 4
    incident_sectors: list[str] = field(default_factory=lambda: [sectors.ASSET_MANAGEMENT, sectors.TRADING])
    var_sectors: list[str] = field(default_factory=lambda: [sectors.LENDING, sectors.TRADING,
                                                             sectors.ASSET_MANAGEMENT])
    var_lags: int = 2
    var_horizon: int = 12


SECTIONS = {
    "paths": PathsSection,
    "ingest": IngestSection,
    "tokmap": TokmapSection,
    "build": BuildSection,
    "metrics": MetricsSection,
    "cluster": ClusterSection,
    "sectors": SectorsSection,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    synth: ingest.SynthConfig | None = None
    ingest: IngestSection = field(default_factory=IngestSection)
    tokmap: TokmapSection = field(default_factory=TokmapSection)
    build: BuildSection = field(default_factory=BuildSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    sectors: SectorsSection = field(default_factory=SectorsSection)
    predict: linkpred.TrainConfig = field(default_factory=linkpred.TrainConfig)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> "PipelineConfig":
        allowed = {"seed", "synth", "predict", *SECTIONS}
        unknown = set(raw) - allowed
        if unknown:
            raise ingest.ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(seed=int(raw.get("seed", 0)))
        for name, section in SECTIONS.items():
            body = raw.get(name, {})
            if not isinstance(body, Mapping):
                raise ingest.ConfigError(f"[{name}] must be a table")
            bad = set(body) - set(section.__dataclass_fields__)
            if bad:
                raise ingest.ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            setattr(cfg, name, section(**body))
        if "synth" in raw:
            cfg.synth = ingest.SynthConfig.from_dict(raw["synth"])
        if "predict" in raw:
            try:
                cfg.predict = linkpred.TrainConfig.from_dict(raw["predict"])
            except ValueError as exc:
                raise ingest.ConfigError(str(exc)) from None
        if base_dir is not None:
            for key in PathsSection.__dataclass_fields__:
                value = getattr(cfg.paths, key)
                if value is not None and not os.path.isabs(value):
                    setattr(cfg.paths, key, os.path.normpath(os.path.join(base_dir, value)))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        with open(path, "rb") as fh:
            raw = ingest.load_toml_bytes(fh.read())
        return cls.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))

    def validate(self) -> None:
        interval = parse_duration(self.ingest.interval)
        tolerance = parse_duration(self.ingest.tolerance)
        if interval <= 0 or tolerance < 0 or 2 * tolerance >= interval:
            raise ingest.ConfigError("need interval > 0 and 0 <= 2 * tolerance < interval")
        if self.ingest.format not in (None, "csv", "json"):
            raise ingest.ConfigError("ingest.format must be csv or json")
        if not 0.0 < self.tokmap.theta_sim < 1.0:
            raise ingest.ConfigError("tokmap.theta_sim must lie in (0, 1)")
        if Decimal(str(self.build.theta_node)) < 0:
            raise ingest.ConfigError("build.theta_node must be non-negative")
        if self.build.new_token_policy not in netbuild.NEW_TOKEN_POLICIES:
            raise ingest.ConfigError(f"build.new_token_policy must be one of {netbuild.NEW_TOKEN_POLICIES}")
        if not 0.0 <= self.metrics.alpha < 1.0:
            raise ingest.ConfigError("metrics.alpha must lie in [0, 1)")
        if self.metrics.composition_k < 1:
            raise ingest.ConfigError("metrics.composition_k must be at least 1")
        if self.cluster.perplexity <= 0 or self.cluster.n_iter < 1:
            raise ingest.ConfigError("cluster.perplexity and cluster.n_iter must be positive")
        if not self.cluster.eps_grid or any(e <= 0 for e in self.cluster.eps_grid):
            raise ingest.ConfigError("cluster.eps_grid must hold positive values")
        if not self.cluster.min_samples_grid or any(m < 1 for m in self.cluster.min_samples_grid):
            raise ingest.ConfigError("cluster.min_samples_grid must hold positive integers")
        if self.sectors.orientation not in sectors.ORIENTATIONS:
            raise ingest.ConfigError(f"sectors.orientation must be one of {sectors.ORIENTATIONS}")
        if self.sectors.window < 0 or self.sectors.var_lags < 1 or self.sectors.var_horizon < 1:
            raise ingest.ConfigError("sectors.window >= 0, var_lags >= 1 and var_horizon >= 1 required")
        for s in (*self.sectors.incident_sectors, *self.sectors.var_sectors):
            if s not in sectors.SECTORS:
                raise ingest.ConfigError(f"unknown sector {s!r}")
        if self.paths.input is None and self.synth is None:
            raise ingest.ConfigError("set paths.input or provide a [synth] section")

    def stage_params(self, stage: str) -> dict:
        section = {
            "ingest": self.ingest, "map-tokens": self.tokmap, "build": self.build,
            "metrics": self.metrics, "sectors": self.sectors, "predict": self.predict,
        }[stage]
        params = asdict(section)
        if stage == "metrics":
            params["cluster"] = asdict(self.cluster)
        if stage == "ingest" and self.synth is not None:
            params["synth"] = self.synth.to_dict()
        params["seed"] = stage_seed(self.seed, stage)
        return params


# ---------------------------------------------------------------------------
# artifact writers


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_bytes(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


def json_bytes(doc: Any) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1, default=_json_default) + "\n").encode("utf-8")


def _json_default(obj: Any):
    if isinstance(obj, Decimal):
        return str(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


class StageError(RuntimeError):
    """A stage could not complete."""


@dataclass
class Manifest:
    path: Path
    entries: list[dict] = field(default_factory=list)

    def add(self, stage: str, params: dict, root: Path, files: Sequence[Path]) -> None:
        arts = [{"path": p.relative_to(root).as_posix(), "sha256": sha256_file(p)}
                for p in sorted(files)]
        self.entries.append({"stage": stage, "params": params, "artifacts": arts})
        self.save()

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_bytes(json_bytes({"stages": self.entries}))


# ---------------------------------------------------------------------------
# stages


class Pipeline:
    def __init__(self, config: PipelineConfig, output: str | os.PathLike | None = None):
        self.cfg = config
        self.out = Path(output or config.paths.output)

    def _write(self, rel: str, data: bytes) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        return path

    def _need(self, rel: str) -> Path:
        path = self.out / rel
        if not path.exists():
            raise StageError(f"missing upstream artifact {path}")
        return path

    def _snapshots(self) -> list[netbuild.NetworkSnapshot]:
        snaps = netbuild.load_snapshots(self._need("snapshots"))
        if not snaps:
            raise StageError("no snapshots to analyse")
        return snaps

    def run_ingest(self, seed: int) -> list[Path]:
        c = self.cfg
        files = []
        if c.paths.input is not None:
            fmt = c.ingest.format or ("json" if c.paths.input.endswith(".json") else "csv")
            with open(c.paths.input, "rb") as fh:
                parsed = ingest.parse_records(fh.read(), fmt)
            records = parsed.records
            rejections = parsed.rejections
            start = ingest.date_to_ts(c.ingest.start) if c.ingest.start else None
        else:
            assert c.synth is not None
            records = ingest.synth_dataset(c.synth, seed)
            rejections = []
            uni = ingest.synth_universe(c.synth, seed)
            start = ingest.date_to_ts(c.ingest.start) if c.ingest.start else c.synth.start_ts
            files.append(self._write("records.csv", ingest.write_records(records, "csv")))
            files.append(self._write("universe/metadata_map.json", json_bytes(uni.metadata_map)))
            files.append(self._write("universe/texts.json", json_bytes(
                {"tokens": uni.token_texts, "protocols": uni.protocol_texts})))
            files.append(self._write("universe/categories.csv", csv_bytes(
                ["protocol_id", "category"], sorted(uni.categories.items()))))
            files.append(self._write("universe/issuers.csv", csv_bytes(
                ["token_id", "protocol_id"], sorted(uni.issuers.items()))))
        if not records:
            raise StageError("no valid records to align")
        end = ingest.date_to_ts(c.ingest.end) if c.ingest.end else None
        table = ingest.align(records, parse_duration(c.ingest.interval),
                             parse_duration(c.ingest.tolerance), start=start, end=end)
        files.append(self._write("aligned.json", table.to_json()))
        files.append(self._write("rejections.csv", csv_bytes(
            ["line", "reason", "raw"], [(r.line, r.reason, r.raw) for r in rejections])))
        return files

    def _metadata_map(self) -> dict[str, str]:
        p = self.cfg.paths.metadata_map
        if p is not None:
            return tokmap.load_metadata_map(p)
        synth = self.out / "universe" / "metadata_map.json"
        return tokmap.load_metadata_map(str(synth)) if synth.exists() else {}

    def _corpus(self) -> tokmap.TextCorpus | None:
        p = self.cfg.paths.texts
        if p is None:
            synth = self.out / "universe" / "texts.json"
            p = str(synth) if synth.exists() else None
        return tokmap.load_texts(p) if p is not None else None

    def run_map_tokens(self, seed: int) -> list[Path]:
        table = ingest.AlignedStateTable.from_json(self._need("aligned.json").read_bytes())
        tmap = tokmap.resolve_all(table.tokens(), self._metadata_map(),
                                  tokmap.load_manual_map(self.cfg.paths.manual_map),
                                  self._corpus(), self.cfg.tokmap.theta_sim)
        counts = tmap.stage_counts()
        return [
            self._write("tokmap.csv", tmap.to_csv()),
            self._write("tokmap_stages.csv", csv_bytes(
                ["stage", "count"], [(s, counts.get(s, 0)) for s in tokmap.STAGES])),
        ]

    def run_build(self, seed: int) -> list[Path]:
        table = ingest.AlignedStateTable.from_json(self._need("aligned.json").read_bytes())
        tmap = tokmap.TokenProtocolMap.from_csv(self._need("tokmap.csv").read_bytes())
        snaps = netbuild.build_series(table, tmap, Decimal(str(self.cfg.build.theta_node)),
                                      self.cfg.build.new_token_policy)
        for s in snaps:
            s.validate()
        target = self.out / "snapshots"
        if target.exists():
            for old in target.glob("*.json"):
                old.unlink()
        return netbuild.save_snapshots(snaps, target)

    def run_metrics(self, seed: int) -> list[Path]:
        c = self.cfg
        snaps = self._snapshots()
        reports = [metrics.compute_metrics(s, c.metrics.alpha, c.metrics.ricci) for s in snaps]
        cols = metrics.MetricsReport.columns()
        files = [self._write("metrics.csv", csv_bytes(cols, ([r.as_row()[k] for k in cols] for r in reports)))]
        comp_rows = [(s.date, rank + 1, src, tgt, n)
                     for s in snaps
                     for rank, (src, tgt, n) in enumerate(metrics.composition_length(s, c.metrics.composition_k))]
        files.append(self._write("composition.csv", csv_bytes(
            ["date", "rank", "source", "target", "n_tokens"], comp_rows)))
        if c.cluster.enabled:
            files.append(self._write("clusters.json", json_bytes(self._cluster(snaps, seed))))
        return files

    def _cluster(self, snaps: Sequence[netbuild.NetworkSnapshot], seed: int) -> dict:
        c = self.cfg.cluster
        if c.snapshot == "last":
            g = snaps[-1]
        else:
            match = [s for s in snaps if s.date == c.snapshot]
            if not match:
                raise StageError(f"cluster.snapshot {c.snapshot} is not a snapshot date")
            g = match[0]
        feats = cluster.node_features(g)
        n = len(feats.ids)
        doc: dict[str, Any] = {"date": g.date, "n_nodes": n, "perplexity": c.perplexity}
        if n <= 3 * c.perplexity:
            doc["skipped"] = f"{n} nodes is too few for perplexity {c.perplexity}"
            return doc
        emb = cluster.tsne(feats.standardized, perplexity=c.perplexity, seed=seed, n_iter=c.n_iter)
        res = cluster.sweep(emb.embedding, tuple(c.eps_grid), tuple(c.min_samples_grid))
        doc.update({
            "features": list(cluster.FEATURES),
            "nodes": [
                {"id": i, "x": float(emb.embedding[k, 0]), "y": float(emb.embedding[k, 1]),
                 "label": int(res.labels[k])}
                for k, i in enumerate(feats.ids)
            ],
            "kl_initial": emb.kl_initial,
            "kl_final": emb.kl_final,
            "eps": res.eps,
            "min_samples": res.min_samples,
            "silhouette": res.silhouette,
            "n_clusters": res.n_clusters,
            "target_missed": res.target_missed,
            "sweep": [{"eps": e, "min_samples": m, "n_clusters": k, "silhouette": s}
                      for e, m, k, s in res.grid],
        })
        return doc

    def _sector_map(self) -> sectors.SectorMap:
        cat = self.cfg.paths.categories
        if cat is None:
            synth = self.out / "universe" / "categories.csv"
            cat = str(synth) if synth.exists() else None
        return sectors.SectorMap.load(self.cfg.paths.sector_map, cat)

    def run_sectors(self, seed: int) -> list[Path]:
        c = self.cfg.sectors
        snaps = self._snapshots()
        smap = self._sector_map()
        flows = sectors.sector_flows(snaps, smap, c.orientation, c.include_intra)
        files = [self._write("sector_flows.csv", csv_bytes(
            ["date", "sector", "expansion", "contraction", "rho"],
            [(r.date, r.sector, r.expansion, r.contraction, r.rho) for r in flows]))]
        matrix_rows = [(s.date, a, b, v) for s in snaps
                       for (a, b), v in sectors.sector_flow_matrix(s, smap).items()]
        files.append(self._write("sector_matrix.csv", csv_bytes(
            ["date", "source_sector", "target_sector", "size"], matrix_rows)))

        notes: list[str] = []
        dates, names, series = sectors.flow_series_matrix(flows, c.var_sectors)
        irf_rows = []
        try:
            model = sectors.fit_var(series, c.var_lags, names)
            resp = sectors.irf(model, c.var_horizon)
            irf_rows = [(h, names[i], names[j], float(resp[h, i, j]))
                        for h in range(resp.shape[0]) for i in range(len(names)) for j in range(len(names))]
        except sectors.VarError as exc:
            notes.append(f"var: {exc}")
        files.append(self._write("irf.csv", csv_bytes(["horizon", "response", "shock", "value"], irf_rows)))

        if c.event is not None:
            try:
                rows, inc_notes = sectors.incident_table(
                    snaps, smap, c.event, c.window, c.incident_sectors,
                    parse_duration(self.cfg.ingest.interval) // 86400)
            except ValueError as exc:
                raise StageError(str(exc)) from None
            notes.extend(f"incident: {n}" for n in inc_notes)
            files.append(self._write("incident.csv", csv_bytes(
                ["week", "date", "sector", "protocol", "net_change", "cut_source", "cut_target", "cut_size"],
                [(r.week, r.date, r.sector, r.protocol, r.net_change, r.cut_source, r.cut_target, r.cut_size)
                 for r in rows])))
        files.append(self._write("sector_notes.csv", csv_bytes(["note"], [(n,) for n in notes])))
        return files

    def run_predict(self, seed: int) -> list[Path]:
        snaps = self._snapshots()
        if len(snaps) < 2:
            raise StageError("link prediction needs at least two snapshots")
        cfg = linkpred.TrainConfig(**{**asdict(self.cfg.predict), "seed": seed})
        model = linkpred.TgnnModel(seed)
        result = linkpred.train_live(model, snaps, cfg)
        rows = linkpred.eval_rows(result.reports)
        cols = list(linkpred.EvalRecord.__dataclass_fields__)
        return [
            self._write("eval.csv", csv_bytes(cols, ([r[k] for k in cols] for r in rows))),
            self._write("model.json", model.state_json().encode("utf-8")),
        ]

    def runner(self, stage: str) -> Callable[[int], list[Path]]:
        return getattr(self, "run_" + stage.replace("-", "_"))


@dataclass
class RunResult:
    status: int
    manifest: Manifest
    error: str | None = None


def run_pipeline(config: PipelineConfig, output: str | os.PathLike | None = None,
                 only: Sequence[str] | None = None) -> RunResult:
    """Run the selected stages in order; see module docstring for the contract."""
    pipe = Pipeline(config, output)
    manifest = Manifest(pipe.out / MANIFEST)
    stages = [s for s in STAGES if only is None or s in only]
    unknown = set(only or ()) - set(STAGES)
    if unknown:
        raise ingest.ConfigError(f"unknown stages: {sorted(unknown)}")
    if "ingest" in stages and config.paths.input is not None and not os.path.exists(config.paths.input):
        manifest.save()
        return RunResult(os.EX_IOERR, manifest, f"input not found: {config.paths.input}")
    for stage in stages:
        params = config.stage_params(stage)
        log.info("stage %s", stage)
        try:
            files = pipe.runner(stage)(params["seed"])
        except (StageError, ingest.IngestError, ValueError, OSError) as exc:
            manifest.save()
            return RunResult(1, manifest, f"stage {stage} failed: {exc}")
        manifest.add(stage, params, pipe.out, files)
    manifest.save()
    return RunResult(0, manifest)
