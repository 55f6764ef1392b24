"""Raw TVL observations: parsing, grid alignment and synthetic generation.

A record is one ``(protocol, chain, token, timestamp)`` observation carrying a
token amount and its USD value. USD values are kept as :class:`~decimal.Decimal`
so that every downstream aggregation is exact and order independent.
"""
from __future__ import annotations

import bisect
import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone
from decimal import Decimal, InvalidOperation
from typing import IO, Iterable, Iterator, Mapping

import numpy as np

CSV_COLUMNS = ("protocol_id", "chain_id", "token_id", "timestamp", "amount", "usd_value")
DEFAULT_INTERVAL = 7 * 24 * 3600
DEFAULT_TOLERANCE = 3 * 24 * 3600

Key = tuple[str, str, str]


class IngestError(Exception):
    """The input stream cannot be read at all."""


class ConfigError(ValueError):
    """Invalid alignment or generator configuration."""


@dataclass(frozen=True, order=True)
class TvlRecord:
    protocol_id: str
    chain_id: str
    token_id: str
    timestamp: int
    amount: Decimal
    usd_value: Decimal

    @property
    def key(self) -> Key:
        return (self.protocol_id, self.chain_id, self.token_id)


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str
    raw: str = ""


@dataclass
class ParseResult:
    records: list[TvlRecord] = field(default_factory=list)
    rejections: list[Rejection] = field(default_factory=list)

    def __iter__(self) -> Iterator[TvlRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# parsing / serialization


def _read_text(source: bytes | str | IO) -> str:
    try:
        if isinstance(source, bytes):
            return source.decode("utf-8-sig")
        if isinstance(source, str):
            return source
        data = source.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"unreadable stream: {exc}") from exc
    if isinstance(data, bytes):
        try:
            return data.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise IngestError(f"input is not UTF-8: {exc}") from exc
    return data


def _decimal(value: object) -> Decimal:
    if isinstance(value, float):
        # go through repr so 0.1 stays 0.1
        value = repr(value)
    d = Decimal(str(value).strip())
    if not d.is_finite():
        raise InvalidOperation(str(value))
    return d


def _make_record(fields: Mapping[str, object]) -> TvlRecord | str:
    """Build a record or return a rejection reason code."""
    ids = []
    for name in ("protocol_id", "chain_id", "token_id"):
        value = fields.get(name)
        if not isinstance(value, str) or not value.strip():
            return f"empty_{name}"
        ids.append(value.strip())
    try:
        ts_raw = fields.get("timestamp")
        if isinstance(ts_raw, bool):
            return "bad_timestamp"
        ts = int(str(ts_raw).strip())
    except (TypeError, ValueError):
        return "bad_timestamp"
    if ts < 0:
        return "bad_timestamp"
    try:
        amount = _decimal(fields.get("amount"))
    except (InvalidOperation, ValueError, TypeError):
        return "bad_amount"
    try:
        usd = _decimal(fields.get("usd_value"))
    except (InvalidOperation, ValueError, TypeError):
        return "bad_usd_value"
    if amount < 0:
        return "negative_amount"
    if usd < 0:
        return "negative_usd_value"
    return TvlRecord(ids[0], ids[1], ids[2], ts, amount, usd)


def _iter_csv_rows(text: str) -> Iterator[tuple[int, object]]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        return
    header = [h.strip() for h in header]
    if tuple(header) != CSV_COLUMNS:
        raise IngestError(f"bad CSV header {header!r}, expected {','.join(CSV_COLUMNS)}")
    for row in reader:
        if not row or all(not cell.strip() for cell in row):
            continue
        line = reader.line_num
        if len(row) != len(CSV_COLUMNS):
            yield line, ("bad_field_count", ",".join(row))
            continue
        yield line, (dict(zip(CSV_COLUMNS, row)), ",".join(row))


def _iter_json_rows(text: str) -> Iterator[tuple[int, object]]:
    if not text.strip():
        return
    try:
        data = json.loads(text, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed JSON: {exc}") from exc
    if not isinstance(data, list):
        raise IngestError("JSON input must be an array of records")
    for i, obj in enumerate(data, start=1):
        if not isinstance(obj, dict):
            yield i, ("not_an_object", repr(obj))
            continue
        yield i, (obj, json.dumps(obj, default=str, sort_keys=True))


def parse_records(source: bytes | str | IO, format: str = "csv") -> ParseResult:
    """Parse a CSV or JSON stream into records plus a rejection report.

    Row numbers in the report are physical CSV lines (header is line 1) or
    1-based array positions for JSON. Duplicate keys keep the first row.
    """
    text = _read_text(source)
    if format == "csv":
        rows = _iter_csv_rows(text)
    elif format == "json":
        rows = _iter_json_rows(text)
    else:
        raise ValueError(f"unknown format {format!r}")

    result = ParseResult()
    seen: set[tuple[str, str, str, int]] = set()
    for line, payload in rows:
        first, raw = payload  # type: ignore[misc]
        if isinstance(first, str):
            result.rejections.append(Rejection(line, first, raw))
            continue
        rec = _make_record(first)
        if isinstance(rec, str):
            result.rejections.append(Rejection(line, rec, raw))
            continue
        ident = (*rec.key, rec.timestamp)
        if ident in seen:
            result.rejections.append(Rejection(line, "duplicate_key", raw))
            continue
        seen.add(ident)
        result.records.append(rec)
    return result


def write_records(records: Iterable[TvlRecord], format: str = "csv") -> bytes:
    """Serialize records in the same schema :func:`parse_records` reads."""
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.protocol_id, r.chain_id, r.token_id, r.timestamp,
                             str(r.amount), str(r.usd_value)])
        return buf.getvalue().encode("utf-8")
    if format == "json":
        rows = [
            {
                "protocol_id": r.protocol_id,
                "chain_id": r.chain_id,
                "token_id": r.token_id,
                "timestamp": r.timestamp,
                "amount": str(r.amount),
                "usd_value": str(r.usd_value),
            }
            for r in records
        ]
        return (json.dumps(rows, indent=1) + "\n").encode("utf-8")
    raise ValueError(f"unknown format {format!r}")


# ---------------------------------------------------------------------------
# alignment


@dataclass(frozen=True)
class Sample:
    amount: Decimal
    usd_value: Decimal
    source_timestamp: int


@dataclass
class AlignedStateTable:
    """Per-key series sampled on the uniform grid ``start + k * interval``."""

    start: int
    interval: int
    n_steps: int
    tolerance: int = 0
    samples: dict[Key, dict[int, Sample]] = field(default_factory=dict)

    @property
    def times(self) -> list[int]:
        return [self.start + k * self.interval for k in range(self.n_steps)]

    def step_of(self, t: int) -> int:
        k, rem = divmod(t - self.start, self.interval)
        if rem or not 0 <= k < self.n_steps:
            raise ConfigError(f"time {t} is not on the grid")
        return k

    def protocols(self) -> list[str]:
        return sorted({k[0] for k in self.samples})

    def tokens(self) -> list[str]:
        return sorted({k[2] for k in self.samples})

    def holdings(self, protocol: str, t: int) -> dict[str, Decimal]:
        """USD value per token held by ``protocol`` at ``t``, summed over chains.

        Tokens with a gap on every chain are absent from the result.
        """
        k = self.step_of(t)
        out: dict[str, Decimal] = {}
        for (p, _c, x), series in self.samples.items():
            s = series.get(k) if p == protocol else None
            if s is not None:
                out[x] = out.get(x, Decimal(0)) + s.usd_value
        return out

    def all_holdings(self, t: int) -> dict[str, dict[str, Decimal]]:
        k = self.step_of(t)
        out: dict[str, dict[str, Decimal]] = defaultdict(dict)
        for (p, _c, x), series in self.samples.items():
            s = series.get(k)
            if s is not None:
                out[p][x] = out[p].get(x, Decimal(0)) + s.usd_value
        return dict(out)

    def token_state(self, token: str, t: int, *, protocol: str | None = None,
                    chain: str | None = None) -> tuple[Decimal, Decimal]:
        """Aggregate (amount, usd) of ``token`` at ``t``.

        Without filters this is the global state over all protocol/chain
        pairs; ``protocol`` or ``chain`` restrict to the protocol-wise or
        chain-wise state.
        """
        k = self.step_of(t)
        amount = Decimal(0)
        usd = Decimal(0)
        for (p, c, x), series in self.samples.items():
            if x != token or (protocol is not None and p != protocol):
                continue
            if chain is not None and c != chain:
                continue
            s = series.get(k)
            if s is not None:
                amount += s.amount
                usd += s.usd_value
        return amount, usd

    def chain_state(self, chain: str, t: int) -> dict[str, tuple[Decimal, Decimal]]:
        """Chain-wise token states: token -> (amount, usd) summed over protocols."""
        k = self.step_of(t)
        out: dict[str, tuple[Decimal, Decimal]] = {}
        for (p, c, x), series in self.samples.items():
            s = series.get(k)
            if c != chain or s is None:
                continue
            a, v = out.get(x, (Decimal(0), Decimal(0)))
            out[x] = (a + s.amount, v + s.usd_value)
        return out

    def to_records(self) -> list[TvlRecord]:
        recs = [
            TvlRecord(p, c, x, self.start + k * self.interval, s.amount, s.usd_value)
            for (p, c, x), series in self.samples.items()
            for k, s in series.items()
        ]
        return sorted(recs, key=lambda r: (r.timestamp, r.key))

    # JSON persistence keeps decimals as strings so nothing is lost.
    def to_json(self) -> bytes:
        rows = [
            [p, c, x, k, str(s.amount), str(s.usd_value), s.source_timestamp]
            for (p, c, x) in sorted(self.samples)
            for k, s in sorted(self.samples[(p, c, x)].items())
        ]
        doc = {
            "start": self.start,
            "interval": self.interval,
            "n_steps": self.n_steps,
            "tolerance": self.tolerance,
            "samples": rows,
        }
        return json.dumps(doc, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, data: bytes | str) -> "AlignedStateTable":
        doc = json.loads(data)
        table = cls(doc["start"], doc["interval"], doc["n_steps"], doc.get("tolerance", 0))
        for p, c, x, k, amount, usd, src in doc["samples"]:
            table.samples.setdefault((p, c, x), {})[int(k)] = Sample(Decimal(amount), Decimal(usd), int(src))
        return table


def align(records: Iterable[TvlRecord], interval: int = DEFAULT_INTERVAL,
          tolerance: int = DEFAULT_TOLERANCE, start: int | None = None,
          end: int | None = None) -> AlignedStateTable:
    """Sample every key on a uniform time grid.

    For each grid point the record nearest in time within ``tolerance`` is
    kept; equidistant records resolve to the earlier one. Grid points with no
    record in range are gaps.
    """
    if interval <= 0:
        raise ConfigError("interval must be positive")
    if tolerance < 0 or 2 * tolerance >= interval:
        raise ConfigError("tolerance must satisfy 0 <= tolerance < interval / 2")
    by_key: dict[Key, list[TvlRecord]] = defaultdict(list)
    for r in records:
        by_key[r.key].append(r)
    if not by_key:
        return AlignedStateTable(start or 0, interval, 0, tolerance)

    all_ts = [r.timestamp for rs in by_key.values() for r in rs]
    t0 = min(all_ts) if start is None else start
    t_last = max(all_ts) if end is None else end
    n_steps = max(0, (t_last + tolerance - t0) // interval + 1)
    table = AlignedStateTable(t0, interval, n_steps, tolerance)

    for key in sorted(by_key):
        rs = sorted(by_key[key], key=lambda r: r.timestamp)
        ts = [r.timestamp for r in rs]
        series: dict[int, Sample] = {}
        for k in range(n_steps):
            g = t0 + k * interval
            i = bisect.bisect_left(ts, g - tolerance)
            best = None
            while i < len(ts) and ts[i] <= g + tolerance:
                # ascending scan, so strict < keeps the earlier record on ties
                if best is None or abs(ts[i] - g) < abs(ts[best] - g):
                    best = i
                i += 1
            if best is not None:
                r = rs[best]
                series[k] = Sample(r.amount, r.usd_value, r.timestamp)
        if series:
            table.samples[key] = series
    return table


# ---------------------------------------------------------------------------
# synthetic data

# Category pool used by the generator; covers every broad sector.
SYNTH_CATEGORIES = (
    "Lending", "CDP", "Dexes", "DEX Aggregator", "Bridge", "Yield",
    "Liquid Staking", "Yield Aggregator", "Derivatives", "Chain",
    "Oracle", "Insurance", "Privacy", "SoFi", "RWA",
)

_WORDS = (
    "vault collateral lending stable swap pool staking yield bridge oracle "
    "governance liquidity perpetual option insurance synthetic wrapped index "
    "farm leverage reserve privacy social rebase treasury bond").split()


@dataclass(frozen=True)
class Shock:
    date: str
    sector: str
    magnitude: float
    recovery: int = 2


@dataclass
class SynthConfig:
    n_protocols: int = 30
    n_tokens: int = 15
    n_timestamps: int = 11
    interval: int = DEFAULT_INTERVAL
    start: str = "2022-03-07"
    chains: tuple[str, ...] = ("ethereum", "arbitrum")
    holdings_per_protocol: int = 4
    active_fraction: float = 0.5
    listing_fraction: float = 0.1
    metadata_fraction: float = 0.5
    primary_market_fraction: float = 0.2
    volatility: float = 0.05
    jitter: int = 3600
    shocks: tuple[Shock, ...] = ()

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        kw = dict(raw)
        if "chains" in kw:
            kw["chains"] = tuple(kw["chains"])  # type: ignore[arg-type]
        if "shocks" in kw:
            kw["shocks"] = tuple(Shock(**s) if isinstance(s, Mapping) else s
                                 for s in kw["shocks"])  # type: ignore[union-attr]
        cfg = cls(**kw)  # type: ignore[arg-type]
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chains"] = list(self.chains)
        d["shocks"] = [asdict(s) for s in self.shocks]
        return d

    def validate(self) -> None:
        for name in ("n_protocols", "n_tokens", "n_timestamps", "holdings_per_protocol", "jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.interval <= 0:
            raise ConfigError("interval must be positive")
        if 2 * self.jitter >= self.interval:
            raise ConfigError("jitter must be below half the interval")
        for name in ("active_fraction", "listing_fraction", "metadata_fraction",
                     "primary_market_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.chains:
            raise ConfigError("at least one chain is required")
        for s in self.shocks:
            if not 0 <= s.magnitude:
                raise ConfigError("shock magnitude must be non-negative")
            if s.recovery < 1:
                raise ConfigError("shock recovery must be at least one step")
            self.step_of_date(s.date)

    @property
    def start_ts(self) -> int:
        return date_to_ts(self.start)

    def step_of_date(self, d: str) -> int:
        k, rem = divmod(date_to_ts(d) - self.start_ts, self.interval)
        if rem:
            raise ConfigError(f"shock date {d} is not on the generator grid")
        return k


def date_to_ts(d: str) -> int:
    return int(datetime.combine(date.fromisoformat(d), datetime.min.time(),
                                tzinfo=timezone.utc).timestamp())


def ts_to_date(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).date().isoformat()


@dataclass
class SynthUniverse:
    """Ground truth behind a synthetic dataset."""

    protocols: list[str]
    categories: dict[str, str]
    tokens: list[str]
    issuers: dict[str, str]
    metadata_map: dict[str, str]
    protocol_texts: dict[str, str]
    token_texts: dict[str, str]


def synth_universe(config: SynthConfig, seed: int) -> SynthUniverse:
    rng = np.random.default_rng([seed, 0])
    protocols = [f"proto-{i:03d}" for i in range(config.n_protocols)]
    tokens = [f"TK{i:03d}" for i in range(config.n_tokens)]
    categories = {p: SYNTH_CATEGORIES[int(rng.integers(len(SYNTH_CATEGORIES)))] for p in protocols}

    protocol_texts = {}
    for p in protocols:
        words = rng.choice(len(_WORDS), size=4, replace=False)
        protocol_texts[p] = f"{p} {categories[p].lower()} " + " ".join(_WORDS[w] for w in words)

    issuers: dict[str, str] = {}
    metadata_map: dict[str, str] = {}
    token_texts: dict[str, str] = {}
    for x in tokens:
        if not protocols or rng.random() < config.primary_market_fraction:
            issuers[x] = x
            token_texts[x] = f"{x.lower()} native asset"
            continue
        q = protocols[int(rng.integers(len(protocols)))]
        issuers[x] = q
        if rng.random() < config.metadata_fraction:
            metadata_map[x] = q
        # description shares the issuer's text so similarity matching can recover it
        token_texts[x] = f"{x.lower()} issued by {protocol_texts[q]}"
    return SynthUniverse(protocols, categories, tokens, issuers, metadata_map,
                         protocol_texts, token_texts)


def _shock_multiplier(config: SynthConfig, protocol_sector: str, step: int) -> float:
    m = 1.0
    for s in config.shocks:
        if s.sector != protocol_sector:
            continue
        d = config.step_of_date(s.date)
        if d <= step < d + s.recovery:
            m *= s.magnitude + (1.0 - s.magnitude) * (step - d) / s.recovery
    return m


def synth_dataset(config: SynthConfig, seed: int) -> list[TvlRecord]:
    """Deterministic synthetic TVL records.

    Each protocol holds a few tokens on one or more chains. A fraction of
    positions follow a multiplicative random walk, the rest stay dormant.
    A shock multiplies the USD value of every position held by protocols of
    the shocked sector by ``magnitude`` on the shock date, then recovers
    linearly back to trend over ``recovery`` steps.
    """
    from .sectors import SectorMap  # local: sectors depends on netbuild, not ingest

    config.validate()
    if config.n_protocols == 0 or config.n_tokens == 0 or config.n_timestamps == 0:
        return []
    uni = synth_universe(config, seed)
    sector_of = SectorMap.default()
    rng = np.random.default_rng([seed, 1])
    t0 = config.start_ts
    cent = Decimal("0.01")
    micro = Decimal("0.000001")

    records: list[TvlRecord] = []
    prices = {x: float(np.exp(rng.normal(0.0, 1.5))) for x in uni.tokens}
    for p in uni.protocols:
        sector = sector_of.sector_of_category(uni.categories[p])
        # a protocol never holds its own tokens in the generator
        candidates = [x for x in uni.tokens if uni.issuers[x] != p]
        k = min(config.holdings_per_protocol, len(candidates))
        held = sorted(rng.choice(len(candidates), size=k, replace=False)) if k else []
        for idx in held:
            x = candidates[idx]
            chain = config.chains[int(rng.integers(len(config.chains)))]
            active = rng.random() < config.active_fraction
            listed_at = 0
            if config.n_timestamps > 2 and rng.random() < config.listing_fraction:
                listed_at = int(rng.integers(1, config.n_timestamps - 1))
            level = float(np.exp(rng.normal(13.0, 1.0)))
            steps = rng.normal(0.0, config.volatility, size=config.n_timestamps)
            jitter = rng.integers(-config.jitter, config.jitter + 1, size=config.n_timestamps)
            for step in range(config.n_timestamps):
                if active and step > 0:
                    level *= math.exp(float(steps[step]))
                if step < listed_at:
                    continue
                value = level * _shock_multiplier(config, sector, step)
                usd = Decimal(repr(value)).quantize(cent)
                amount = (usd / Decimal(repr(prices[x]))).quantize(micro)
                ts = t0 + step * config.interval + int(jitter[step])
                records.append(TvlRecord(p, chain, x, ts, amount, usd))
    records.sort(key=lambda r: (r.timestamp, r.key))
    return records


def load_synth_config(path: str) -> SynthConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".json"):
        doc = json.loads(raw)
    else:
        doc = load_toml_bytes(raw)
    return SynthConfig.from_dict(doc.get("synth", doc))


def load_toml_bytes(raw: bytes) -> dict:
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib  # type: ignore[no-redef]
    return tomllib.loads(raw.decode("utf-8"))
