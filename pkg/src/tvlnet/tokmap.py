"""Token -> issuing protocol resolution.

Four stages are tried in order: the source metadata list, a curated manual
table, TF-IDF cosine matching of token and protocol descriptions, and finally
a catch-all that treats the token as its own (primary market) protocol.
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Hashable, Iterable, Mapping, Sequence

STAGES = ("metadata", "manual", "tfidf", "primary_market")
DEFAULT_THETA_SIM = 0.3

_TERM = re.compile(r"[a-z0-9]+")

SparseVector = dict[str, float]


@dataclass(frozen=True)
class MapEntry:
    protocol_id: str
    stage: str
    score: float | None = None


@dataclass
class TokenProtocolMap:
    entries: dict[str, MapEntry] = field(default_factory=dict)

    def __getitem__(self, token: str) -> str:
        return self.entries[token].protocol_id

    def __contains__(self, token: object) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, token: str, default: str | None = None) -> str | None:
        e = self.entries.get(token)
        return default if e is None else e.protocol_id

    def as_dict(self) -> dict[str, str]:
        return {x: e.protocol_id for x, e in self.entries.items()}

    def stage_counts(self) -> dict[str, int]:
        c = Counter(e.stage for e in self.entries.values())
        return {s: c.get(s, 0) for s in STAGES}

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["token_id", "protocol_id", "stage", "score"])
        for x in sorted(self.entries):
            e = self.entries[x]
            w.writerow([x, e.protocol_id, e.stage, "" if e.score is None else repr(e.score)])
        return buf.getvalue().encode("utf-8")

    @classmethod
    def from_csv(cls, data: bytes | str) -> "TokenProtocolMap":
        text = data.decode("utf-8") if isinstance(data, bytes) else data
        out = cls()
        for row in csv.DictReader(io.StringIO(text)):
            score = row.get("score") or ""
            stage = row.get("stage") or "manual"
            if stage not in STAGES:
                raise ValueError(f"unknown stage {stage!r} for token {row['token_id']!r}")
            out.entries[row["token_id"]] = MapEntry(
                row["protocol_id"], stage, float(score) if score else None)
        return out


def tokenize(text: str) -> list[str]:
    return _TERM.findall(text.lower())


@dataclass
class TextCorpus:
    """Documents for tokens and protocols sharing one IDF table.

    Keys are ``("token", id)`` and ``("protocol", id)`` so a token and a
    protocol may carry the same name.
    """

    docs: dict[Hashable, str]
    vocab: list[str] = field(default_factory=list)
    idf: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.vocab:
            self._fit()

    def _fit(self) -> None:
        df: Counter[str] = Counter()
        for text in self.docs.values():
            df.update(set(tokenize(text)))
        n = len(self.docs)
        self.vocab = sorted(df)
        self.idf = {t: math.log(n / df[t]) for t in self.vocab}

    @classmethod
    def from_texts(cls, token_texts: Mapping[str, str],
                   protocol_texts: Mapping[str, str]) -> "TextCorpus":
        docs: dict[Hashable, str] = {("token", k): v for k, v in token_texts.items()}
        docs.update({("protocol", k): v for k, v in protocol_texts.items()})
        return cls(docs)

    def protocol_ids(self) -> list[str]:
        return sorted(k[1] for k in self.docs if isinstance(k, tuple) and k[0] == "protocol")

    def has_token(self, token: str) -> bool:
        return ("token", token) in self.docs


def tfidf_vectors(corpus: TextCorpus) -> dict[Hashable, SparseVector]:
    """Raw term count times ``ln(N / df)``; zero components are omitted."""
    if not corpus.docs:
        raise ValueError("corpus is empty")
    out: dict[Hashable, SparseVector] = {}
    for key, text in corpus.docs.items():
        counts = Counter(tokenize(text))
        vec = {t: c * corpus.idf[t] for t, c in counts.items() if corpus.idf[t] != 0.0}
        out[key] = vec
    return out


def cosine_similarity(a: Mapping[str, float] | Sequence[float],
                      b: Mapping[str, float] | Sequence[float]) -> float:
    """Cosine of the angle between two vectors; 0 if either is zero."""
    if not isinstance(a, Mapping):
        a = {str(i): float(v) for i, v in enumerate(a)}
    if not isinstance(b, Mapping):
        b = {str(i): float(v) for i, v in enumerate(b)}
    if len(b) < len(a):
        a, b = b, a
    dot = sum(v * b[t] for t, v in a.items() if t in b)
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def resolve(token: str, metadata_map: Mapping[str, str], manual_map: Mapping[str, str],
            corpus: TextCorpus | None, theta_sim: float = DEFAULT_THETA_SIM,
            vectors: Mapping[Hashable, SparseVector] | None = None) -> MapEntry:
    if not 0.0 < theta_sim < 1.0:
        raise ValueError("theta_sim must lie in (0, 1)")
    if token in metadata_map:
        return MapEntry(metadata_map[token], "metadata")
    if token in manual_map:
        return MapEntry(manual_map[token], "manual")
    if corpus is not None and corpus.has_token(token):
        if vectors is None:
            vectors = tfidf_vectors(corpus)
        vx = vectors[("token", token)]
        best: tuple[float, str] | None = None
        for p in corpus.protocol_ids():
            s = cosine_similarity(vx, vectors[("protocol", p)])
            # protocol ids come sorted, so strict > keeps the smallest on ties
            if s > theta_sim and (best is None or s > best[0]):
                best = (s, p)
        if best is not None:
            return MapEntry(best[1], "tfidf", best[0])
    return MapEntry(token, "primary_market")


def resolve_all(tokens: Iterable[str], metadata_map: Mapping[str, str],
                manual_map: Mapping[str, str], corpus: TextCorpus | None = None,
                theta_sim: float = DEFAULT_THETA_SIM) -> TokenProtocolMap:
    vectors = tfidf_vectors(corpus) if corpus is not None and corpus.docs else None
    if vectors is None:
        corpus = None
    out = TokenProtocolMap()
    for x in sorted(set(tokens)):
        out.entries[x] = resolve(x, metadata_map, manual_map, corpus, theta_sim, vectors)
    return out


def load_manual_map(path: str | None = None) -> dict[str, str]:
    """Read ``token_id,protocol_id`` rows; the packaged table by default."""
    if path is None:
        text = resources.files("tvlnet").joinpath("config/manual_map.csv").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return {row["token_id"]: row["protocol_id"] for row in csv.DictReader(io.StringIO(text))}


def load_metadata_map(path: str) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or not all(isinstance(v, str) for v in doc.values()):
        raise ValueError("metadata map must be a JSON object of token_id -> protocol_id")
    return doc


def load_texts(path: str) -> TextCorpus:
    """Read ``{"tokens": {id: text}, "protocols": {id: text}}``.

    Values may also be lists of strings (several metadata fields); they are
    joined with spaces.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)

    def flat(d: Mapping[str, object]) -> dict[str, str]:
        return {k: " ".join(v) if isinstance(v, list) else str(v) for k, v in d.items()}

    return TextCorpus.from_texts(flat(doc.get("tokens", {})), flat(doc.get("protocols", {})))
