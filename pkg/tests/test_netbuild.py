import json
from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from oracles import mapped_abs_delta
from tvlnet.ingest import ConfigError, SynthConfig, TvlRecord, align, synth_dataset, synth_universe
from tvlnet.netbuild import (
    Link, NetworkSnapshot, Node, SnapshotError, build_series, build_snapshot, load_snapshots,
    protocol_stock, read_snapshot, read_snapshot_csv, save_snapshots, write_snapshot,
    write_snapshots,
)

DAY = 86400


def table_of(rows, steps=2):
    """rows: (protocol, token, [usd at step 0, step 1, ...]); None means a gap."""
    recs = []
    for p, x, values in rows:
        for k, v in enumerate(values):
            if v is not None:
                recs.append(TvlRecord(p, "eth", x, k * DAY, Decimal(v), Decimal(v)))
    return align(recs, interval=DAY, tolerance=0, start=0, end=(steps - 1) * DAY)


def test_protocol_stock_sums_tokens():
    t = table_of([("p", "USDC", ["60"]), ("p", "WETH", ["40"])], steps=1)
    assert protocol_stock(t, "p", 0) == Decimal(100)
    assert protocol_stock(t, "ghost", 0) == Decimal(0)


def test_makerdao_weth_stock():
    t = table_of([("MakerDAO", "WETH", ["100"])], steps=1)
    assert protocol_stock(t, "MakerDAO", 0) == Decimal(100)


def test_falling_position_flows_holder_to_issuer():
    t = table_of([("p", "x", ["100", "90"])])
    s = build_snapshot(t, {"x": "q"}, 0, DAY)
    assert s.links == [Link("p", "q", Decimal(10), {"x": Decimal(10)})]


def test_opposing_tokens_are_not_netted():
    t = table_of([("p", "x", ["100", "90"]), ("p", "y", ["50", "54"])])
    s = build_snapshot(t, {"x": "q", "y": "q"}, 0, DAY)
    assert s.links == [
        Link("p", "q", Decimal(10), {"x": Decimal(10)}),
        Link("q", "p", Decimal(4), {"y": Decimal(4)}),
    ]


def test_unchanged_tokens_give_no_links():
    t = table_of([("p", "x", ["100", "100"]), ("r", "y", ["7", "7"])])
    s = build_snapshot(t, {"x": "q", "y": "q"}, 0, DAY)
    assert s.links == []
    assert {n.id: n.size for n in s.nodes} == {"p": Decimal(100), "r": Decimal(7)}


def test_same_direction_flows_are_summed():
    t = table_of([("p", "x", ["100", "90"]), ("p", "y", ["50", "45"])])
    s = build_snapshot(t, {"x": "q", "y": "q"}, 0, DAY)
    assert s.links == [Link("p", "q", Decimal(15), {"x": Decimal(10), "y": Decimal(5)})]


def test_self_issued_tokens_dropped():
    t = table_of([("p", "x", ["100", "50"])])
    assert build_snapshot(t, {"x": "p"}, 0, DAY).links == []


def test_node_weight_uses_tokens_held_at_both_ends():
    t = table_of([("p", "x", ["10", "12"]), ("p", "new", [None, "5"]), ("p", "gone", ["3", None])])
    s = build_snapshot(t, {}, 0, DAY)
    assert s.node("p").size == Decimal(12)
    assert s.node("p").composition == {"x": Decimal(12)}
    # the new listing flows from its primary market; the vanished token is a gap
    assert Link("new", "p", Decimal(5), {"new": Decimal(5)}) in s.links
    assert not any("gone" in e.composition for e in s.links)


def test_new_token_policy_exclude():
    t = table_of([("p", "new", [None, "5"])])
    assert build_snapshot(t, {}, 0, DAY, new_token_policy="exclude").links == []
    with pytest.raises(ConfigError):
        build_snapshot(t, {}, 0, DAY, new_token_policy="maybe")


def test_prune_threshold():
    t = table_of([("p", "x", ["10", "12"]), ("r", "x", ["500", "500"])])
    s = build_snapshot(t, {"x": "q"}, 0, DAY, theta_node=100)
    assert s.node("p").size == 0 and s.node("r").size == Decimal(500)


def test_bad_interval():
    t = table_of([("p", "x", ["1", "2"])])
    with pytest.raises(ConfigError):
        build_snapshot(t, {}, DAY, DAY)
    with pytest.raises(ConfigError):
        build_snapshot(t, {}, 0, 5)


def test_snapshot_dated_at_interval_end():
    t = table_of([("p", "x", ["1", "2"])])
    assert build_snapshot(t, {}, 0, DAY).date == "1970-01-02"


def test_series_and_stride():
    t = table_of([("p", "x", ["1", "2", "3", "4", "5"])], steps=5)
    assert [s.date for s in build_series(t, {})] == ["1970-01-02", "1970-01-03", "1970-01-04", "1970-01-05"]
    two = build_series(t, {}, stride=2)
    assert [s.date for s in two] == ["1970-01-03", "1970-01-05"]
    assert two[0].links[0].size == Decimal(2)


def synth_series(seed, n_protocols=25, n_tokens=12, steps=6):
    cfg = SynthConfig(n_protocols=n_protocols, n_tokens=n_tokens, n_timestamps=steps)
    table = align(synth_dataset(cfg, seed), cfg.interval, 3 * DAY, start=cfg.start_ts)
    issuers = synth_universe(cfg, seed).issuers
    return table, issuers, build_series(table, issuers)


@given(st.integers(0, 10_000))
def test_conservation_against_raw_table(seed):
    table, issuers, snaps = synth_series(seed, steps=4)
    for k, s in enumerate(snaps):
        t1, t2 = table.times[k], table.times[k + 1]
        assert sum((e.size for e in s.links), Decimal(0)) == mapped_abs_delta(table, issuers, t1, t2)


@given(st.integers(0, 10_000))
def test_snapshot_invariants(seed):
    _, issuers, snaps = synth_series(seed, steps=4)
    for s in snaps:
        s.validate()
        assert all(e.size > 0 for e in s.links)
        assert all(n.size >= 0 for n in s.nodes)


def test_single_token_issuer_edges_carry_only_that_token():
    table, issuers, snaps = synth_series(11, n_protocols=30, n_tokens=15)
    by_issuer = {}
    for x, q in issuers.items():
        by_issuer.setdefault(q, []).append(x)
    singles = {q: xs[0] for q, xs in by_issuer.items() if len(xs) == 1}
    held = {}
    for p, _c, x in table.samples:
        held.setdefault(p, set()).add(x)
    checked = 0
    for s in snaps:
        for e in s.links:
            for q in singles.keys() & {e.source, e.target}:
                other = e.target if q == e.source else e.source
                # flows where q is the holder would mix in the other side's tokens
                if held.get(q, set()) & set(by_issuer.get(other, [])):
                    continue
                assert e.composition.get(singles[q], Decimal(0)) == e.size
                checked += 1
    assert checked > 0


def test_json_layout():
    s = NetworkSnapshot("2020-03-23", [Node("a", Decimal("1.5"), {"x": Decimal("1.5")}),
                                       Node("b", Decimal(0))],
                        [Link("a", "b", Decimal("2.25"), {"x": Decimal("2"), "y": Decimal("0.25")})])
    doc = json.loads(write_snapshot(s))
    assert list(doc) == ["2020-03-23"]
    body = doc["2020-03-23"]
    assert body["links"][0] == {"source": "a", "target": "b", "size": 2.25,
                                "composition": {"x": 2, "y": 0.25}}
    assert set(body["nodes"][0]) == {"id", "size", "composition"}


def test_empty_snapshot_document():
    assert json.loads(write_snapshot(NetworkSnapshot("2021-01-04"))) == {
        "2021-01-04": {"nodes": [], "links": []}}


@pytest.mark.parametrize("bad", [
    NetworkSnapshot("d", [Node("a", Decimal(1)), Node("b", Decimal(1))],
                    [Link("a", "b", Decimal(0), {})]),
    NetworkSnapshot("d", [Node("a", Decimal(1)), Node("b", Decimal(1))],
                    [Link("a", "b", Decimal(2), {"x": Decimal(1)})]),
    NetworkSnapshot("d", [Node("a", Decimal(1))], [Link("a", "a", Decimal(1), {"x": Decimal(1)})]),
    NetworkSnapshot("d", [Node("a", Decimal(-1))]),
    NetworkSnapshot("d", [Node("a", Decimal(1)), Node("b", Decimal(1))],
                    [Link("a", "b", Decimal(1), {"x": Decimal(1)})] * 2),
])
def test_refuses_invalid_snapshot(bad):
    with pytest.raises(SnapshotError):
        write_snapshot(bad)


@given(st.integers(0, 10_000))
def test_json_and_csv_round_trip(seed):
    _, _, snaps = synth_series(seed, steps=3)
    for s in snaps:
        raw = write_snapshot(s)
        back = read_snapshot(raw)
        assert back == s.sorted()
        assert write_snapshot(back) == raw
        assert read_snapshot_csv(*write_snapshot(s, "csv")) == s.sorted()


def test_multi_snapshot_document_and_directory(tmp_path):
    _, _, snaps = synth_series(5, steps=4)
    save_snapshots(snaps, tmp_path)
    assert load_snapshots(tmp_path) == [s.sorted() for s in snaps]
    (tmp_path / "all.json").write_bytes(write_snapshots(snaps))
    assert load_snapshots(tmp_path / "all.json") == [s.sorted() for s in snaps]


def test_serialization_deterministic():
    a = [write_snapshot(s) for s in synth_series(3)[2]]
    b = [write_snapshot(s) for s in synth_series(3)[2]]
    assert a == b
