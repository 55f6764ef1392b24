"""Temporal GNN link prediction with live-update training.

Each snapshot's nodes carry one feature, their size. An MLP lifts it to 128
dims, two GCN layers propagate over the undirected projection, and after each
GCN layer a GRU cell merges the result with that node's state from the
previous snapshot. Edge scores are ``sigmoid(h_p . h_q)``.

Training walks the snapshot sequence: at step ``tau`` the model (fed G_tau and
the carried states) is first evaluated on the edges of G_{tau+1}, then trained
on them, and finally the node states are committed for the next step.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .netbuild import NetworkSnapshot

DTYPE = torch.float64

MLP_WIDTHS = ((1, 256), (256, 128))
GCN_WIDTHS = ((128, 64), (64, 32))
GRU_WIDTHS = (64, 32)
CHECKPOINT_VERSION = 1
MONITOR_NEGATIVES = 20_000


def expected_parameter_count(mlp=MLP_WIDTHS, gcn=GCN_WIDTHS, gru=GRU_WIDTHS) -> int:
    linear = sum(i * o + o for i, o in (*mlp, *gcn))
    # a GRU cell with equal input/state width h has 3 gates, each with two h x h matrices and two biases
    recurrent = sum(3 * (2 * h * h + 2 * h) for h in gru)
    return linear + recurrent


class TgnnModel(nn.Module):
    def __init__(self, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.mlp1 = nn.Linear(*MLP_WIDTHS[0], dtype=DTYPE)
            self.mlp2 = nn.Linear(*MLP_WIDTHS[1], dtype=DTYPE)
            self.gcn1 = nn.Linear(*GCN_WIDTHS[0], dtype=DTYPE)
            self.gcn2 = nn.Linear(*GCN_WIDTHS[1], dtype=DTYPE)
            self.gru1 = nn.GRUCell(GRU_WIDTHS[0], GRU_WIDTHS[0], dtype=DTYPE)
            self.gru2 = nn.GRUCell(GRU_WIDTHS[1], GRU_WIDTHS[1], dtype=DTYPE)
        assert self.parameter_count() == expected_parameter_count()

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor, adj: torch.Tensor, h1: torch.Tensor,
                h2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        assert x.shape[1] == MLP_WIDTHS[0][0], "node feature width mismatch"
        assert h1.shape == (x.shape[0], GRU_WIDTHS[0]) and h2.shape == (x.shape[0], GRU_WIDTHS[1])
        z = self.mlp2(torch.relu(self.mlp1(x)))
        g1 = torch.relu(adj @ self.gcn1(z))
        h1_new = self.gru1(g1, h1)
        g2 = adj @ self.gcn2(h1_new)
        h2_new = self.gru2(g2, h2)
        return h1_new, h2_new

    # checkpoints: plain JSON, every tensor with its shape
    def state_json(self) -> str:
        params = {
            name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
            for name, t in self.state_dict().items()
        }
        return json.dumps({"version": CHECKPOINT_VERSION, "params": params})

    @classmethod
    def from_json(cls, text: str) -> "TgnnModel":
        doc = json.loads(text)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        model = cls()
        state = model.state_dict()
        for name, entry in doc["params"].items():
            if name not in state or list(state[name].shape) != entry["shape"]:
                raise ValueError(f"checkpoint tensor {name!r} does not match the architecture")
            state[name] = torch.tensor(entry["data"], dtype=DTYPE).reshape(entry["shape"])
        model.load_state_dict(state)
        return model


class NodeStateBank:
    """Per-node GRU states carried between snapshots; unseen nodes start at zero."""

    def __init__(self) -> None:
        self.h1: dict[str, torch.Tensor] = {}
        self.h2: dict[str, torch.Tensor] = {}

    def __contains__(self, node: str) -> bool:
        return node in self.h1

    def gather(self, ids: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        z1 = torch.zeros(GRU_WIDTHS[0], dtype=DTYPE)
        z2 = torch.zeros(GRU_WIDTHS[1], dtype=DTYPE)
        if not ids:
            return torch.zeros((0, GRU_WIDTHS[0]), dtype=DTYPE), torch.zeros((0, GRU_WIDTHS[1]), dtype=DTYPE)
        return (torch.stack([self.h1.get(i, z1) for i in ids]),
                torch.stack([self.h2.get(i, z2) for i in ids]))

    def update(self, ids: Sequence[str], h1: torch.Tensor, h2: torch.Tensor) -> None:
        for k, i in enumerate(ids):
            self.h1[i] = h1[k].detach().clone()
            self.h2[i] = h2[k].detach().clone()


@dataclass
class GraphInputs:
    ids: list[str]
    x: torch.Tensor
    adj: torch.Tensor

    @property
    def index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.ids)}


def node_feature_vector(sizes: np.ndarray) -> np.ndarray:
    """log1p then z-score over the snapshot; constant columns map to zero."""
    v = np.log1p(np.maximum(np.asarray(sizes, dtype=float), 0.0))
    sd = v.std()
    return (v - v.mean()) / sd if sd > 0 else np.zeros_like(v)


def normalized_adjacency(n: int, pairs) -> torch.Tensor:
    """``D^-1/2 (A + I) D^-1/2`` for the undirected projection."""
    a = np.eye(n)
    for i, j in pairs:
        if i != j:
            a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return torch.tensor(a * d[:, None] * d[None, :], dtype=DTYPE)


def graph_inputs(g: NetworkSnapshot) -> GraphInputs:
    nodes = sorted(g.nodes, key=lambda nd: nd.id)
    ids = [nd.id for nd in nodes]
    idx = {v: i for i, v in enumerate(ids)}
    x = node_feature_vector(np.array([float(nd.size) for nd in nodes]))
    adj = normalized_adjacency(len(ids), [(idx[e.source], idx[e.target]) for e in g.links])
    return GraphInputs(ids, torch.tensor(x[:, None], dtype=DTYPE), adj)


@dataclass
class Embeddings:
    ids: list[str]
    h: torch.Tensor

    def vector(self, node: str) -> torch.Tensor:
        try:
            return self.h[self.ids.index(node)]
        except ValueError:
            raise KeyError(f"node {node!r} was not embedded") from None


def forward(model: TgnnModel, bank: NodeStateBank, g: NetworkSnapshot,
            update_bank: bool = True) -> Embeddings:
    """Embed every node of ``g`` (dim 32), optionally committing new states."""
    inp = graph_inputs(g)
    h1p, h2p = bank.gather(inp.ids)
    with torch.no_grad():
        h1, h2 = model(inp.x, inp.adj, h1p, h2p)
    if update_bank:
        bank.update(inp.ids, h1, h2)
    return Embeddings(inp.ids, h2)


def score(emb: Embeddings, p: str, q: str) -> float:
    return float(torch.sigmoid(emb.vector(p) @ emb.vector(q)))


def pair_logits(h: torch.Tensor, pairs: np.ndarray) -> torch.Tensor:
    if len(pairs) == 0:
        return torch.zeros(0, dtype=h.dtype)
    pairs_t = torch.as_tensor(pairs, dtype=torch.long)
    return (h[pairs_t[:, 0]] * h[pairs_t[:, 1]]).sum(dim=1)


def balanced_bce(h: torch.Tensor, pos: np.ndarray, neg: np.ndarray) -> torch.Tensor:
    """Cross-entropy with the positive and negative classes weighted one half each.

    At a 1:1 sample this is the plain mean over all pairs.
    """
    bce = nn.functional.binary_cross_entropy_with_logits
    lp = pair_logits(h, pos)
    ln = pair_logits(h, neg)
    loss_pos = bce(lp, torch.ones_like(lp)) if len(pos) else h.sum() * 0
    loss_neg = bce(ln, torch.zeros_like(ln)) if len(neg) else h.sum() * 0
    return 0.5 * (loss_pos + loss_neg)


def link_loss(model: TgnnModel, inp: GraphInputs, h1p: torch.Tensor, h2p: torch.Tensor,
              pos: np.ndarray, neg: np.ndarray) -> torch.Tensor:
    _, h2 = model(inp.x, inp.adj, h1p, h2p)
    return balanced_bce(h2, pos, neg)


# ---------------------------------------------------------------------------
# evaluation


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise area under the precision-recall curve.

    One step per distinct score threshold: ``sum_k precision_k * (recall_k -
    recall_{k-1})``. Tied scores enter together, which ranks tied positives
    no better than their tied negatives.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive label")
    order = np.lexsort((y, -s))
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(precision * np.diff(np.r_[0.0, recall])))


def positive_pairs(g: NetworkSnapshot, index: dict[str, int]) -> np.ndarray:
    """Unordered node pairs joined by a link, both endpoints known to ``index``."""
    pairs = set()
    for e in g.links:
        if e.source in index and e.target in index and e.source != e.target:
            i, j = index[e.source], index[e.target]
            pairs.add((min(i, j), max(i, j)))
    return np.array(sorted(pairs), dtype=int).reshape(-1, 2)


def sample_negatives(n: int, positives: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct unordered non-edges drawn uniformly (fewer if not available)."""
    taken = {(int(i), int(j)) for i, j in positives}
    total = n * (n - 1) // 2
    available = total - len(taken)
    k = min(k, available)
    if k <= 0:
        return np.zeros((0, 2), dtype=int)
    if available <= 4 * k:
        pool = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in taken]
        pick = rng.choice(len(pool), size=k, replace=False)
        return np.array(sorted(pool[p] for p in pick), dtype=int)
    chosen: set[tuple[int, int]] = set()
    while len(chosen) < k:
        i, j = (int(v) for v in rng.integers(0, n, size=2))
        if i == j:
            continue
        pair = (min(i, j), max(i, j))
        if pair not in taken:
            chosen.add(pair)
    return np.array(sorted(chosen), dtype=int)


@dataclass
class TrainConfig:
    epochs: int = 50
    tolerance: float = 1e-4
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    negative_ratio: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        cfg = cls(**raw)
        if cfg.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if cfg.epochs < 0 or cfg.learning_rate < 0 or cfg.tolerance < 0:
            raise ValueError("epochs, learning_rate and tolerance must be non-negative")
        return cfg


@dataclass
class EvalRecord:
    date: str
    auprc: float | None
    n_pos: int
    n_neg: int
    n_nodes: int
    n_edges: int
    epochs_run: int = 0
    final_loss: float | None = None
    note: str = ""


@dataclass
class TrainResult:
    model: TgnnModel
    bank: NodeStateBank
    reports: list[EvalRecord] = field(default_factory=list)
    losses: list[list[float]] = field(default_factory=list)


def _eval_negatives(n: int, pos: np.ndarray, ratio: float, seed: int, tau: int) -> np.ndarray:
    k = max(1, int(round(ratio * len(pos))))
    return sample_negatives(n, pos, k, np.random.default_rng([seed, tau, 1]))


def evaluate(model: TgnnModel, bank: NodeStateBank, cur: NetworkSnapshot, nxt: NetworkSnapshot,
             seed: int = 0, tau: int = 0, negative_ratio: float = 1.0) -> EvalRecord:
    """Score the edges of ``nxt`` from ``cur`` and the bank, without training or committing."""
    n_next = len(set(nxt.node_ids()) | {v for e in nxt.links for v in (e.source, e.target)})
    if not cur.nodes:
        return EvalRecord(nxt.date, None, 0, 0, n_next, len(nxt.links), note="empty input snapshot")
    inp = graph_inputs(cur)
    pos = positive_pairs(nxt, inp.index)
    if len(pos) == 0:
        return EvalRecord(nxt.date, None, 0, 0, n_next, len(nxt.links), note="no predictable edges")
    neg = _eval_negatives(len(inp.ids), pos, negative_ratio, seed, tau)
    h1p, h2p = bank.gather(inp.ids)
    with torch.no_grad():
        _, h2 = model(inp.x, inp.adj, h1p, h2p)
        # rank on logits: the sigmoid saturates to 1.0 and would create ties
        logits = torch.cat([pair_logits(h2, pos), pair_logits(h2, neg)]).numpy()
    labels = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
    return EvalRecord(nxt.date, auprc(logits, labels), len(pos), len(neg), n_next, len(nxt.links))


def train_live(model: TgnnModel, snapshots: Sequence[NetworkSnapshot],
               config: TrainConfig | None = None,
               bank: NodeStateBank | None = None) -> TrainResult:
    """Live-update training over a snapshot sequence; see module docstring."""
    cfg = config or TrainConfig()
    if len(snapshots) < 2:
        raise ValueError("need at least two snapshots")
    bank = bank if bank is not None else NodeStateBank()
    opt_cls = torch.optim.Adam if cfg.optimizer == "adam" else torch.optim.SGD
    opt = opt_cls(model.parameters(), lr=cfg.learning_rate)
    result = TrainResult(model, bank)

    for tau in range(len(snapshots) - 1):
        cur, nxt = snapshots[tau], snapshots[tau + 1]
        record = evaluate(model, bank, cur, nxt, cfg.seed, tau, cfg.negative_ratio)
        result.reports.append(record)
        if record.auprc is None:
            result.losses.append([])
            if cur.nodes:
                forward(model, bank, cur)
            continue

        inp = graph_inputs(cur)
        h1p, h2p = bank.gather(inp.ids)
        pos = positive_pairs(nxt, inp.index)
        k = record.n_neg
        train_rng = np.random.default_rng([cfg.seed, tau, 2])
        # early stopping watches the loss against a fixed negative set (every
        # non-edge when there are few enough), i.e. the expectation of the
        # resampled objective rather than its noisy per-epoch estimate
        monitor = sample_negatives(len(inp.ids), pos, MONITOR_NEGATIVES,
                                   np.random.default_rng([cfg.seed, tau, 3]))
        with torch.no_grad():
            losses = [float(link_loss(model, inp, h1p, h2p, pos, monitor))]
        for _epoch in range(cfg.epochs):
            tneg = sample_negatives(len(inp.ids), pos, k, train_rng)
            opt.zero_grad()
            link_loss(model, inp, h1p, h2p, pos, tneg).backward()
            opt.step()
            with torch.no_grad():
                losses.append(float(link_loss(model, inp, h1p, h2p, pos, monitor)))
            if losses[-2] - losses[-1] < cfg.tolerance:
                break
        result.losses.append(losses)
        forward(model, bank, cur)
        record.epochs_run = len(losses) - 1
        record.final_loss = losses[-1]
    return result


def eval_rows(reports: Sequence[EvalRecord]) -> list[dict]:
    return [asdict(r) for r in reports]
