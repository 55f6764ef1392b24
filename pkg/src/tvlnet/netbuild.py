"""Stock/flow network snapshots.

A snapshot covers one interval ``[t1, t2]``. Node weight is the end-of-interval
value of tokens a protocol held at both endpoints. Every (holder, token) pair
whose value changed produces a flow between the holder and the token's issuing
protocol: a falling position flows holder -> issuer, a rising one issuer ->
holder. Flows for the same ordered pair are summed into one link with a
per-token composition.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Mapping

from .ingest import AlignedStateTable, ConfigError, ts_to_date

log = logging.getLogger(__name__)

ZERO = Decimal(0)
NEW_TOKEN_POLICIES = ("include", "exclude")


class SnapshotError(ValueError):
    """A snapshot violates one of its structural invariants."""


@dataclass(frozen=True)
class Node:
    id: str
    size: Decimal
    composition: dict[str, Decimal] = field(default_factory=dict)


@dataclass(frozen=True)
class Link:
    source: str
    target: str
    size: Decimal
    composition: dict[str, Decimal] = field(default_factory=dict)


@dataclass
class NetworkSnapshot:
    date: str
    nodes: list[Node] = field(default_factory=list)
    links: list[Link] = field(default_factory=list)

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise SnapshotError("duplicate node id")
        for n in self.nodes:
            if n.size < 0:
                raise SnapshotError(f"negative size on node {n.id!r}")
        known = set(ids)
        pairs = set()
        for link in self.links:
            pair = (link.source, link.target)
            if pair in pairs:
                raise SnapshotError(f"duplicate link {pair}")
            pairs.add(pair)
            if link.source == link.target:
                raise SnapshotError(f"self loop on {link.source!r}")
            if link.source not in known or link.target not in known:
                raise SnapshotError(f"link {pair} references an unknown node")
            if not link.size > 0:
                raise SnapshotError(f"non-positive link size on {pair}")
            if sum(link.composition.values(), ZERO) != link.size:
                raise SnapshotError(f"composition of {pair} does not sum to its size")

    def sorted(self) -> "NetworkSnapshot":
        return NetworkSnapshot(
            self.date,
            sorted(self.nodes, key=lambda n: n.id),
            sorted(self.links, key=lambda e: (e.source, e.target)),
        )


@dataclass(frozen=True)
class StockDelta:
    protocol_id: str
    token_id: str
    v_start: Decimal
    v_end: Decimal
    delta: Decimal


def protocol_stock(table: AlignedStateTable, protocol: str, t: int) -> Decimal:
    """Total USD value of ``protocol`` at grid time ``t`` across chains and tokens."""
    holdings = table.holdings(protocol, t)
    if not holdings and protocol not in table.protocols():
        log.warning("protocol %r has no samples; stock is the empty sum", protocol)
    return sum(holdings.values(), ZERO)


def stock_deltas(table: AlignedStateTable, t1: int, t2: int,
                 new_token_policy: str = "include") -> list[StockDelta]:
    """Per (protocol, token) value changes over ``[t1, t2]``.

    Tokens missing at ``t2`` are gaps and skipped. Tokens first seen at ``t2``
    count from zero under the ``include`` policy.
    """
    if new_token_policy not in NEW_TOKEN_POLICIES:
        raise ConfigError(f"new_token_policy must be one of {NEW_TOKEN_POLICIES}")
    h1 = table.all_holdings(t1)
    h2 = table.all_holdings(t2)
    out = []
    for p in sorted(h2):
        before = h1.get(p, {})
        for x in sorted(h2[p]):
            v_end = h2[p][x]
            if x in before:
                v_start = before[x]
            elif new_token_policy == "include":
                v_start = ZERO
            else:
                continue
            out.append(StockDelta(p, x, v_start, v_end, v_end - v_start))
    return out


def build_snapshot(table: AlignedStateTable, tokmap: Mapping[str, str] | object,
                   t1: int, t2: int, theta_node: Decimal | int | str = 0,
                   new_token_policy: str = "include") -> NetworkSnapshot:
    """One snapshot for the interval ``[t1, t2]``."""
    if t2 <= t1:
        raise ConfigError("t2 must be after t1")
    table.step_of(t1)
    table.step_of(t2)
    theta = Decimal(theta_node)
    issuer = _issuer_lookup(tokmap)

    h1 = table.all_holdings(t1)
    h2 = table.all_holdings(t2)
    nodes: dict[str, Node] = {}
    for p in sorted(set(h1) | set(h2)):
        end = h2.get(p, {})
        common = sorted(set(h1.get(p, {})) & set(end))
        comp = {x: end[x] for x in common}
        w = sum(comp.values(), ZERO)
        nodes[p] = Node(p, w if w >= theta else ZERO, comp)

    flows: dict[tuple[str, str], dict[str, Decimal]] = defaultdict(dict)
    for d in stock_deltas(table, t1, t2, new_token_policy):
        q = issuer(d.token_id)
        if q == d.protocol_id or d.delta == 0:
            continue
        if d.delta < 0:
            pair, amount = (d.protocol_id, q), -d.delta
        else:
            pair, amount = (q, d.protocol_id), d.delta
        comp = flows[pair]
        comp[d.token_id] = comp.get(d.token_id, ZERO) + amount

    links = []
    for (s, t), comp in sorted(flows.items()):
        comp = dict(sorted(comp.items()))
        links.append(Link(s, t, sum(comp.values(), ZERO), comp))
        for end_id in (s, t):
            if end_id not in nodes:
                nodes[end_id] = Node(end_id, ZERO, {})
    snap = NetworkSnapshot(ts_to_date(t2), sorted(nodes.values(), key=lambda n: n.id), links)
    return snap


def build_series(table: AlignedStateTable, tokmap, theta_node=0,
                 new_token_policy: str = "include", start: int | None = None,
                 end: int | None = None, stride: int = 1) -> list[NetworkSnapshot]:
    """Snapshots for consecutive intervals of ``stride`` grid steps between ``start`` and ``end``."""
    if stride < 1:
        raise ConfigError("stride must be at least one grid step")
    times = table.times
    lo = 0 if start is None else table.step_of(start)
    hi = len(times) - 1 if end is None else table.step_of(end)
    return [build_snapshot(table, tokmap, times[k], times[k + stride], theta_node, new_token_policy)
            for k in range(lo, hi - stride + 1, stride)]


def _issuer_lookup(tokmap):
    if hasattr(tokmap, "entries"):
        entries = tokmap.entries
        return lambda x: entries[x].protocol_id if x in entries else x
    return lambda x: tokmap.get(x, x)


# ---------------------------------------------------------------------------
# serialization

_NUM = "\x00num:"
_NUM_RE = re.compile(r'"\\u0000num:([^"]*)"')


def _num(d: Decimal) -> str:
    return _NUM + format(d, "f")


def _snapshot_doc(s: NetworkSnapshot) -> dict:
    s = s.sorted()
    return {
        "nodes": [
            {"id": n.id, "size": _num(n.size),
             "composition": {k: _num(v) for k, v in sorted(n.composition.items())}}
            for n in s.nodes
        ],
        "links": [
            {"source": e.source, "target": e.target, "size": _num(e.size),
             "composition": {k: _num(v) for k, v in sorted(e.composition.items())}}
            for e in s.links
        ],
    }


def _dumps(doc: dict) -> bytes:
    text = json.dumps(doc, indent=1)
    return (_NUM_RE.sub(r"\1", text) + "\n").encode("utf-8")


def write_snapshot(s: NetworkSnapshot, format: str = "json"):
    """Serialize one snapshot.

    ``json`` returns the date-keyed document as bytes. ``csv`` returns a
    ``(nodes_csv, links_csv)`` pair with compositions flattened to
    ``token:value|token:value``.
    """
    s.validate()
    if format == "json":
        return _dumps({s.date: _snapshot_doc(s)})
    if format == "csv":
        return _write_csv(s.sorted())
    raise ValueError(f"unknown format {format!r}")


def write_snapshots(snaps: Iterable[NetworkSnapshot]) -> bytes:
    """Several snapshots in one date-keyed JSON document."""
    doc = {}
    for s in snaps:
        s.validate()
        doc[s.date] = _snapshot_doc(s)
    return _dumps(dict(sorted(doc.items())))


def _decimal_tree(obj):
    return json.loads(obj, parse_float=Decimal, parse_int=Decimal)


def _snapshot_from_doc(date: str, body: dict) -> NetworkSnapshot:
    nodes = [Node(str(n["id"]), Decimal(n["size"]),
                  {k: Decimal(v) for k, v in n.get("composition", {}).items()})
             for n in body.get("nodes", [])]
    links = [Link(str(e["source"]), str(e["target"]), Decimal(e["size"]),
                  {k: Decimal(v) for k, v in e.get("composition", {}).items()})
             for e in body.get("links", [])]
    return NetworkSnapshot(date, nodes, links)


def read_snapshots(data: bytes | str) -> list[NetworkSnapshot]:
    doc = _decimal_tree(data)
    if not isinstance(doc, dict):
        raise SnapshotError("snapshot document must be a JSON object keyed by date")
    return [_snapshot_from_doc(d, body) for d, body in sorted(doc.items())]


def read_snapshot(data: bytes | str) -> NetworkSnapshot:
    snaps = read_snapshots(data)
    if len(snaps) != 1:
        raise SnapshotError(f"expected one snapshot, found {len(snaps)}")
    return snaps[0]


def _flatten(comp: Mapping[str, Decimal]) -> str:
    for k in comp:
        if "|" in k or ":" in k:
            raise SnapshotError(f"token id {k!r} cannot be flattened to CSV")
    return "|".join(f"{k}:{format(v, 'f')}" for k, v in sorted(comp.items()))


def _unflatten(text: str) -> dict[str, Decimal]:
    if not text:
        return {}
    out = {}
    for part in text.split("|"):
        k, v = part.rsplit(":", 1)
        out[k] = Decimal(v)
    return out


def _write_csv(s: NetworkSnapshot) -> tuple[bytes, bytes]:
    nb = io.StringIO()
    w = csv.writer(nb, lineterminator="\n")
    w.writerow(["date", "id", "size", "composition"])
    for n in s.nodes:
        w.writerow([s.date, n.id, format(n.size, "f"), _flatten(n.composition)])
    lb = io.StringIO()
    w = csv.writer(lb, lineterminator="\n")
    w.writerow(["date", "source", "target", "size", "composition"])
    for e in s.links:
        w.writerow([s.date, e.source, e.target, format(e.size, "f"), _flatten(e.composition)])
    return nb.getvalue().encode("utf-8"), lb.getvalue().encode("utf-8")


def read_snapshot_csv(nodes_csv: bytes | str, links_csv: bytes | str,
                      date: str | None = None) -> NetworkSnapshot:
    def rows(data):
        text = data.decode("utf-8") if isinstance(data, bytes) else data
        return list(csv.DictReader(io.StringIO(text)))

    nrows, lrows = rows(nodes_csv), rows(links_csv)
    dates = {r["date"] for r in nrows + lrows}
    if date is None:
        if len(dates) > 1:
            raise SnapshotError("CSV files mix several dates")
        date = dates.pop() if dates else ""
    nodes = [Node(r["id"], Decimal(r["size"]), _unflatten(r["composition"]))
             for r in nrows if r["date"] == date]
    links = [Link(r["source"], r["target"], Decimal(r["size"]), _unflatten(r["composition"]))
             for r in lrows if r["date"] == date]
    return NetworkSnapshot(date, nodes, links)


def save_snapshots(snaps: Iterable[NetworkSnapshot], out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in snaps:
        path = out / f"{s.date}.json"
        path.write_bytes(write_snapshot(s))
        paths.append(path)
    return paths


def load_snapshots(src: str | os.PathLike) -> list[NetworkSnapshot]:
    """Load a snapshot directory (one JSON per date) or a single JSON file."""
    src = Path(src)
    if src.is_file():
        return read_snapshots(src.read_bytes())
    snaps = []
    for path in sorted(src.glob("*.json")):
        snaps.extend(read_snapshots(path.read_bytes()))
    return sorted(snaps, key=lambda s: s.date)
