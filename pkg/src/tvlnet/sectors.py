"""Sector-level exposure dynamics and incident diagnostics.

Protocols are grouped into six broad sectors. Per interval each sector gets an
exposure expansion (inbound cross-sector flow) and contraction (outbound
cross-sector flow), summarised by the shift ratio
``rho = (F_in - F_out) / (F_in + F_out)``. The expansion/contraction series feed
a VAR whose orthogonalised impulse responses trace shock propagation.
"""
from __future__ import annotations

import csv
import io
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, timedelta
from decimal import Decimal
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from .netbuild import NetworkSnapshot

ASSET_MANAGEMENT = "Asset Management"
TRADING = "Trading & Exchanges"
LENDING = "Lending, Borrowing & Real World Assets"
INFRASTRUCTURE = "Infrastructure, Services & Financial Products"
PRIVACY = "Privacy & Security"
OTHERS = "Others"
SECTORS = (ASSET_MANAGEMENT, TRADING, LENDING, INFRASTRUCTURE, PRIVACY, OTHERS)

ORIENTATIONS = ("inbound", "outbound")


class VarError(ValueError):
    pass


@dataclass
class SectorMap:
    category_sector: dict[str, str]
    protocol_category: dict[str, str] = field(default_factory=dict)

    @classmethod
    def default(cls, protocol_category: Mapping[str, str] | None = None) -> "SectorMap":
        text = resources.files("tvlnet").joinpath("config/sector_map.csv").read_text("utf-8")
        return cls(_read_category_csv(text), dict(protocol_category or {}))

    @classmethod
    def load(cls, sector_csv: str | None = None,
             protocol_csv: str | None = None) -> "SectorMap":
        """``sector_csv``: category,sector rows; ``protocol_csv``: protocol_id,category rows."""
        if sector_csv is None:
            smap = cls.default()
        else:
            with open(sector_csv, encoding="utf-8") as fh:
                smap = cls(_read_category_csv(fh.read()))
        if protocol_csv is not None:
            with open(protocol_csv, encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    smap.protocol_category[row["protocol_id"]] = row["category"]
        return smap

    def sector_of_category(self, category: str | None) -> str:
        if category is None:
            return OTHERS
        return self.category_sector.get(category, OTHERS)

    def sector_of(self, protocol: str) -> str:
        return self.sector_of_category(self.protocol_category.get(protocol))


def _read_category_csv(text: str) -> dict[str, str]:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if row["sector"] not in SECTORS:
            raise ValueError(f"unknown sector {row['sector']!r}")
        out[row["category"]] = row["sector"]
    return out


def exposure_shift_ratio(inflow, outflow) -> float | None:
    """``(F_in - F_out) / (F_in + F_out)``, or None when both are zero."""
    fi, fo = Decimal(inflow), Decimal(outflow)
    if fi < 0 or fo < 0:
        raise ValueError("flows must be non-negative")
    total = fi + fo
    if total == 0:
        return None
    return float((fi - fo) / total)


@dataclass(frozen=True)
class SectorFlow:
    date: str
    sector: str
    expansion: Decimal
    contraction: Decimal
    rho: float | None


def sector_flows(snapshots: Iterable[NetworkSnapshot], smap: SectorMap,
                 orientation: str = "inbound", include_intra: bool = False,
                 sectors: Sequence[str] = SECTORS) -> list[SectorFlow]:
    """Per-interval expansion, contraction and rho for every sector.

    With the default ``inbound`` orientation a link whose target is in sector
    ``s`` counts as expansion of ``s`` and one whose source is in ``s`` as
    contraction; ``outbound`` swaps the two.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    rows = []
    for snap in snapshots:
        inflow = {s: Decimal(0) for s in sectors}
        outflow = {s: Decimal(0) for s in sectors}
        for e in snap.links:
            s_src, s_tgt = smap.sector_of(e.source), smap.sector_of(e.target)
            if s_src == s_tgt and not include_intra:
                continue
            if s_tgt in inflow:
                inflow[s_tgt] += e.size
            if s_src in outflow:
                outflow[s_src] += e.size
        for s in sectors:
            fi, fo = inflow[s], outflow[s]
            if orientation == "outbound":
                fi, fo = fo, fi
            rows.append(SectorFlow(snap.date, s, fi, fo, exposure_shift_ratio(fi, fo)))
    return rows


def sector_flow_matrix(snapshot: NetworkSnapshot, smap: SectorMap) -> dict[tuple[str, str], Decimal]:
    """Total link size between each ordered pair of sectors (chord-diagram data)."""
    out: dict[tuple[str, str], Decimal] = defaultdict(Decimal)
    for e in snapshot.links:
        out[(smap.sector_of(e.source), smap.sector_of(e.target))] += e.size
    return dict(sorted(out.items()))


def flow_series_matrix(rows: Sequence[SectorFlow], sectors: Sequence[str]) -> tuple[list[str], list[str], np.ndarray]:
    """Wide (T, 2 * len(sectors)) float matrix of expansion/contraction columns."""
    dates = sorted({r.date for r in rows})
    names = [f"{s}:{kind}" for s in sectors for kind in ("expansion", "contraction")]
    idx = {d: i for i, d in enumerate(dates)}
    out = np.zeros((len(dates), len(names)))
    for r in rows:
        if r.sector not in sectors:
            continue
        j = 2 * list(sectors).index(r.sector)
        out[idx[r.date], j] = float(r.expansion)
        out[idx[r.date], j + 1] = float(r.contraction)
    return dates, names, out


# ---------------------------------------------------------------------------
# VAR


@dataclass
class VarModel:
    names: list[str]
    lags: int
    coefs: np.ndarray       # (lags, m, m); coefs[k] multiplies y_{t-k-1}
    intercept: np.ndarray   # (m,)
    sigma: np.ndarray       # (m, m) residual covariance
    resid: np.ndarray       # (T - lags, m)
    stderr: np.ndarray      # (1 + m * lags, m), same layout as the regressor matrix

    @property
    def m(self) -> int:
        return len(self.names)

    def companion(self) -> np.ndarray:
        m, p = self.m, self.lags
        c = np.zeros((m * p, m * p))
        c[:m, :] = np.hstack(list(self.coefs))
        if p > 1:
            c[m:, :-m] = np.eye(m * (p - 1))
        return c

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.companion()))))

    def is_stable(self) -> bool:
        return self.spectral_radius() < 1.0


def _lagged_design(y: np.ndarray, lags: int) -> tuple[np.ndarray, np.ndarray]:
    t, m = y.shape
    rows = t - lags
    x = np.ones((rows, 1 + m * lags))
    for k in range(1, lags + 1):
        x[:, 1 + (k - 1) * m: 1 + k * m] = y[lags - k: t - k]
    return x, y[lags:]


def _collinear_columns(x: np.ndarray, names: list[str]) -> list[str]:
    kept: list[int] = []
    bad = []
    for j in range(x.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(x[:, trial]) < len(trial):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def fit_var(series: np.ndarray, lags: int = 2, names: Sequence[str] | None = None) -> VarModel:
    """Equation-by-equation OLS with an intercept.

    Residual covariance is divided by ``T_eff - m * lags - 1`` where
    ``T_eff = T - lags`` is the number of usable observations.
    """
    y = np.asarray(series, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    t, m = y.shape
    if lags < 1:
        raise VarError("lags must be at least 1")
    if not np.all(np.isfinite(y)):
        raise VarError("series contains gaps or non-finite values")
    if t <= m * lags + 1 + lags:
        raise VarError(f"series of length {t} too short for {m} variables and {lags} lags")
    names = list(names) if names is not None else [f"y{i + 1}" for i in range(m)]
    x, target = _lagged_design(y, lags)
    col_names = ["const"] + [f"{n}.L{k}" for k in range(1, lags + 1) for n in names]
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise VarError(f"singular regressor matrix; collinear columns: {_collinear_columns(x, col_names)}")

    beta, *_ = np.linalg.lstsq(x, target, rcond=None)
    resid = target - x @ beta
    dof = x.shape[0] - m * lags - 1
    sigma = resid.T @ resid / dof
    xtx_inv = np.linalg.inv(x.T @ x)
    stderr = np.sqrt(np.outer(np.diag(xtx_inv), np.diag(sigma)))
    coefs = np.stack([beta[1 + k * m: 1 + (k + 1) * m].T for k in range(lags)])
    return VarModel(names, lags, coefs, beta[0].copy(), sigma, resid, stderr)


def select_lag_order(series: np.ndarray, max_lags: int = 4) -> int:
    """Lag order in ``1..max_lags`` minimising AIC on a common sample."""
    y = np.asarray(series, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    m = y.shape[1]
    best, best_aic = 1, np.inf
    for p in range(1, max_lags + 1):
        if y.shape[0] - max_lags <= m * p + 1:
            break
        x, target = _lagged_design(y[max_lags - p:], p)
        beta, *_ = np.linalg.lstsq(x, target, rcond=None)
        resid = target - x @ beta
        n = x.shape[0]
        sign, logdet = np.linalg.slogdet(resid.T @ resid / n)
        if sign <= 0:
            continue
        aic = logdet + 2.0 * (m * m * p + m) / n
        if aic < best_aic:
            best, best_aic = p, aic
    return best


def irf(model: VarModel, horizon: int = 12, orthogonalized: bool = True) -> np.ndarray:
    """Impulse responses, shape ``(horizon, m, m)`` indexed ``[h, response, shock]``.

    ``Phi_h = J C^h J'`` from the companion matrix ``C``; orthogonalised
    responses post-multiply by the lower Cholesky factor of the residual
    covariance, so the ordering of ``model.names`` matters.
    """
    if horizon < 1:
        raise VarError("horizon must be positive")
    if not model.is_stable():
        warnings.warn(f"VAR is not stable (spectral radius {model.spectral_radius():.4f})",
                      RuntimeWarning, stacklevel=2)
    m = model.m
    if orthogonalized:
        try:
            chol = np.linalg.cholesky(model.sigma)
        except np.linalg.LinAlgError as exc:
            raise VarError("residual covariance is not positive definite") from exc
    else:
        chol = np.eye(m)
    comp = model.companion()
    power = np.eye(comp.shape[0])
    out = np.empty((horizon, m, m))
    for h in range(horizon):
        out[h] = power[:m, :m] @ chol
        power = comp @ power
    return out


# ---------------------------------------------------------------------------
# incident diagnostics


def net_exposure_change(snapshot: NetworkSnapshot) -> dict[str, Decimal]:
    """Inbound minus outbound link size per node."""
    out = {n.id: Decimal(0) for n in snapshot.nodes}
    for e in snapshot.links:
        out[e.target] = out.get(e.target, Decimal(0)) + e.size
        out[e.source] = out.get(e.source, Decimal(0)) - e.size
    return out


def bridges(edges: Iterable[tuple[str, str]]) -> set[frozenset[str]]:
    """Cut edges of the undirected simple graph spanned by ``edges``.

    Iterative lowpoint DFS, linear in nodes + edges. Direction and
    multiplicity of the input pairs are ignored.
    """
    adj: dict[str, set[str]] = defaultdict(set)
    for u, v in edges:
        if u == v:
            continue
        adj[u].add(v)
        adj[v].add(u)
    order: dict[str, int] = {}
    low: dict[str, int] = {}
    found: set[frozenset[str]] = set()
    counter = 0
    for root in sorted(adj):
        if root in order:
            continue
        order[root] = low[root] = counter
        counter += 1
        stack = [(root, None, iter(sorted(adj[root])))]
        while stack:
            node, parent, it = stack[-1]
            advanced = False
            for nxt in it:
                if nxt == parent:
                    continue
                if nxt in order:
                    low[node] = min(low[node], order[nxt])
                else:
                    order[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append((nxt, node, iter(sorted(adj[nxt]))))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                if parent is not None:
                    low[parent] = min(low[parent], low[node])
                    if low[node] > order[parent]:
                        found.add(frozenset((parent, node)))
    return found


@dataclass(frozen=True)
class IncidentRow:
    week: int
    date: str
    sector: str
    protocol: str
    net_change: Decimal
    cut_source: str | None
    cut_target: str | None
    cut_size: Decimal | None


def incident_table(snapshots: Sequence[NetworkSnapshot], smap: SectorMap, event_date: str,
                   window: int = 4, sectors: Sequence[str] = (ASSET_MANAGEMENT, TRADING),
                   interval_days: int = 7) -> tuple[list[IncidentRow], list[str]]:
    """Weekly top movers and largest cut edges around an event.

    Returns the rows plus notes for weeks/sectors that produced no row. A cut
    edge belongs to a sector when either endpoint does; its size is the
    largest directed link between the two endpoints.
    """
    by_date = {s.date: s for s in snapshots}
    if event_date not in by_date:
        raise ValueError(f"event date {event_date} is not a snapshot date")
    anchor = date.fromisoformat(event_date)
    rows: list[IncidentRow] = []
    notes: list[str] = []
    for week in range(-window, window + 1):
        d = (anchor + timedelta(days=interval_days * week)).isoformat()
        snap = by_date.get(d)
        if snap is None:
            notes.append(f"week {week}: no snapshot dated {d}")
            continue
        net = net_exposure_change(snap)
        link_size: dict[frozenset[str], tuple[Decimal, str, str]] = {}
        for e in snap.links:
            key = frozenset((e.source, e.target))
            cur = link_size.get(key)
            if cur is None or (-e.size, e.source, e.target) < (-cur[0], cur[1], cur[2]):
                link_size[key] = (e.size, e.source, e.target)
        cut = bridges((e.source, e.target) for e in snap.links)
        for sector in sectors:
            members = sorted(p for p in net if smap.sector_of(p) == sector)
            if not members:
                notes.append(f"week {week}: sector {sector!r} has no protocols")
                continue
            top = min(members, key=lambda p: (-abs(net[p]), p))
            cands = [link_size[b] for b in cut
                     if any(smap.sector_of(p) == sector for p in b)]
            if cands:
                size, src, tgt = min(cands, key=lambda c: (-c[0], c[1], c[2]))
            else:
                size, src, tgt = None, None, None
            rows.append(IncidentRow(week, d, sector, top, net[top], src, tgt, size))
    return rows, notes
