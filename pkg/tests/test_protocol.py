import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clrpool.cohort import Cohort, cohort_from_tensor
from clrpool.datasets import load_toy_assignment, load_toy_nodes
from clrpool.engine import fit
from clrpool.errors import (
    DisclosureWarning,
    MatchingRatioMismatch,
    NodeUnreachable,
    RangeExceeded,
    RingBroken,
    SeparationDetected,
    UnknownStratum,
)
from clrpool.pooling import PoolAssignment, Pool, aggregate, plan_pools
from clrpool.protocol import (
    AC_ID,
    AnalyticalCenter,
    Federation,
    FixedPointCodec,
    Kind,
    Network,
    ProtocolConfig,
    ProtocolMessage,
    centralized_order,
    localize,
    run_protocol,
    scan_transcript,
    secure_sum,
)
from clrpool.protocol.actors import VectorNode
from clrpool.protocol.network import Actor

codec = FixedPointCodec()


# --- codec -----------------------------------------------------------------------------

@given(st.floats(-2.0**41, 2.0**41))
def test_codec_round_trip(x):
    assert abs(codec.decode(codec.encode([x]))[0] - x) <= 2.0**-21


def test_codec_range():
    with pytest.raises(RangeExceeded):
        codec.encode([2.0**42])
    with pytest.raises(RangeExceeded):
        codec.encode([float("nan")])


def test_encoded_sums_are_exact():
    vals = [0.5, -1.25, 2.0, 3.0]
    acc = [0]
    for v in vals:
        acc = codec.add(acc, codec.encode([v]))
    assert codec.decode(acc)[0] == 4.25


# --- secure summation --------------------------------------------------------------------

@pytest.mark.parametrize("vectors, expected", [
    ({"a": [3], "b": [5], "c": [7]}, [15.0]),
    ({"a": [0.5], "b": [-1.25], "c": [2.0]}, [1.25]),
    ({"solo": [42]}, [42.0]),
])
def test_secure_sum_examples(vectors, expected):
    total, _ = secure_sum(vectors, mask_seed=1)
    assert total.tolist() == expected


def test_secure_sum_matches_plain_sum():
    rng = np.random.default_rng(3)
    for n_nodes in (1, 2, 5):
        vecs = {f"n{i}": rng.normal(scale=1e4, size=1000) for i in range(n_nodes)}
        total, _ = secure_sum(vecs)
        plain = np.sum(list(vecs.values()), axis=0)
        assert np.abs(total - plain).max() <= 2.0**-21 * n_nodes


def test_partials_are_masked_running_sums():
    vecs = {"a": [1.0, 2.0], "b": [-3.5, 0.25], "c": [10.0, 10.0]}
    _, net = secure_sum(vecs, mask_seed=7)
    mask = net.actors[AC_ID].rounds[1]
    running = [0, 0]
    partials = [m for m in net.messages() if m.kind is Kind.PARTIAL_SUM and m.sender != AC_ID]
    assert [m.sender for m in partials] == ["a", "b", "c"]
    for msg in partials:
        running = codec.add(running, codec.encode(vecs[msg.sender]))
        assert codec.sub(msg.payload["residues"], running) == mask
        assert msg.payload["residues"] != running


def test_each_node_sees_one_partial_per_round():
    vecs = {f"n{i}": [float(i)] for i in range(4)}
    _, net = secure_sum(vecs, mask_seed=2)
    received = [m.recipient for m in net.messages() if m.kind is Kind.PARTIAL_SUM]
    for n in vecs:
        assert received.count(n) == 1
    assert received.count(AC_ID) == 1


def test_ring_broken():
    class Silent(Actor):
        actor_id = "b"

        def handle(self, msg, net):
            pass

    net = Network()
    ac = AnalyticalCenter(codec, 1)
    for actor in (ac, VectorNode("a", [1.0]), Silent()):
        net.register(actor)
    with pytest.raises(RingBroken):
        ac.secure_sum_round(net, ["a", "b"], 0, 0, [], 1)


def test_range_exceeded_at_node():
    with pytest.raises(RangeExceeded):
        secure_sum({"a": [2.0**50]})


def test_wire_format_bit_exact():
    msg = ProtocolMessage(Kind.PARTIAL_SUM, "a", "b",
                          {"round": 1, "pool_id": 2, "arm": 0, "residues": [2**64 - 1, 5]}, 9)
    line = msg.to_wire()
    raw = json.loads(line)
    assert set(raw) == {"kind", "seq", "from", "to", "payload"}
    assert raw["payload"]["residues"] == [str(2**64 - 1), "5"]
    assert ProtocolMessage.from_wire(line) == msg


# --- enumeration and plan broadcast ---------------------------------------------------------

def test_toy_enumeration_and_acks():
    fed = Federation(load_toy_nodes(), mask_seed=0)
    info = fed.enumerate_sets()
    assert info["N"] == 9 and info["m"] == 2
    a = localize_toy_assignment(fed)
    acks = fed.broadcast_plan(a)
    # pool 1 takes one set from each node; pools 2 and 3 one from blue plus two from red / green
    assert acks == {"blue": {"1": 1, "2": 1, "3": 1}, "red": {"1": 1, "2": 2},
                    "green": {"1": 1, "3": 2}}


def localize_toy_assignment(fed):
    from clrpool.protocol import globalize
    return globalize(load_toy_assignment(), load_toy_nodes())


def test_unknown_stratum_in_plan():
    fed = Federation(load_toy_nodes())
    fed.enumerate_sets()
    plan = plan_pools(1, 1)
    bad = PoolAssignment((Pool(1, ("blue#99",)),), 0, plan)
    with pytest.raises(UnknownStratum):
        fed.broadcast_plan(bad)


def shard(node, n, m, seed=0, q=2):
    rng = np.random.default_rng(seed)
    return cohort_from_tensor(rng.normal(size=(n, m + 1, q)) + 2, [f"v{j}" for j in range(q)],
                              node, prefix=f"{node}-")


def test_matching_ratio_mismatch_names_node():
    shards = {"a": shard("a", 3, 2), "b": shard("b", 3, 2), "c": shard("c", 3, 3)}
    with pytest.raises(MatchingRatioMismatch, match="c"):
        Federation(shards).enumerate_sets()


def test_empty_node_warns_and_is_excluded():
    shards = {"a": shard("a", 4, 2), "b": Cohort((), ("v0", "v1"))}
    with pytest.warns(UserWarning, match="no matched sets"):
        info = Federation(shards).enumerate_sets()
    assert info["N"] == 4


def test_offline_node_unreachable():
    cfg = ProtocolConfig(shards=load_toy_nodes(), terms=["marker"], assignment=load_toy_assignment(),
                         offline=["red"])
    with pytest.raises(NodeUnreachable) as exc:
        run_protocol(cfg)
    assert exc.value.stage == "enumerate"
    assert exc.value.transcript


# --- end to end ------------------------------------------------------------------------

def centralized_fit(run, shards, terms):
    local = localize(run.assignment, shards)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DisclosureWarning)
        design = aggregate(centralized_order(shards), local, terms)
    return design, fit(design)


def test_toy_network_matches_centralized(tmp_path):
    shards = load_toy_nodes()
    path = tmp_path / "t.jsonl"
    run = run_protocol(ProtocolConfig(shards=shards, terms=["marker"],
                                      assignment=load_toy_assignment(), transcript_path=path))
    design, ref = centralized_fit(run, shards, ["marker"])
    assert run.design.X.shape == (9, 1)
    assert np.abs(run.design.X - design.X).max() <= 2.0**-20
    assert np.abs(run.fit.beta_hat - ref.beta_hat).max() <= 1e-5
    lines = path.read_text().splitlines()
    assert lines == run.transcript
    assert scan_transcript(lines, shards) == []
    kinds = {ProtocolMessage.from_wire(x).kind for x in lines}
    assert kinds >= {Kind.ENUMERATE_REQ, Kind.ENUMERATE_RESP, Kind.PLAN, Kind.PLAN_ACK,
                     Kind.AGG_REQUEST, Kind.PARTIAL_SUM, Kind.POOLED_ROW}


def test_zero_covariates_pool_to_zero():
    shards = {n: cohort_from_tensor(np.zeros((3, 3, 1)), ["z"], n, f"{n}-") for n in "ab"}
    fed = Federation(shards, mask_seed=3)
    fed.enumerate_sets()
    a = fed.plan(3, seed=0)
    fed.broadcast_plan(a)
    assert not fed.collect_pooled(a, ["z"]).X.any()


def test_single_node_equals_centralized():
    shards = {"only": shard("only", 20, 2, seed=4)}
    terms = ["v0", "v1"]
    run = run_protocol(ProtocolConfig(shards=shards, terms=terms, pool_size=4, seed=5))
    design, ref = centralized_fit(run, shards, terms)
    assert np.abs(run.design.X - design.X).max() <= 2.0**-21 * 4
    assert np.allclose(run.fit.beta_hat, ref.beta_hat, rtol=0, atol=1e-6)


def random_shards(n_nodes, seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 4))
    shards = {}
    for i in range(n_nodes):
        node = f"node{i}"
        vals = rng.normal(size=(int(rng.integers(8, 26)), m + 1, 2))
        vals[:, 0, 0] += 0.5
        shards[node] = cohort_from_tensor(vals, ["v0", "v1"], node, f"{node}-")
    return shards


def run_or_error(fn):
    try:
        return fn(), None
    except SeparationDetected as exc:
        return None, type(exc)


@given(st.integers(2, 6), st.integers(0, 10**6))
@settings(max_examples=15, deadline=None)
def test_distributed_equals_centralized(n_nodes, seed):
    shards = random_shards(n_nodes, seed)
    terms = ["v0", "v1"]
    cfg = ProtocolConfig(shards=shards, terms=terms, pool_size=3, policy="drop_remainder",
                         seed=seed, mask_seed=seed)
    fed = Federation(shards, mask_seed=seed)
    fed.enumerate_sets()
    assignment = fed.plan(3, policy="drop_remainder", seed=seed)
    local = localize(assignment, shards)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DisclosureWarning)
        design = aggregate(centralized_order(shards), local, terms)
    ref, ref_err = run_or_error(lambda: fit(design))
    run, run_err = run_or_error(lambda: run_protocol(cfg))
    # both paths must agree on the outcome, including separation
    assert run_err == ref_err
    if run is None:
        return
    # one rounded partial per contributing node and cell
    assert np.abs(run.design.X - design.X).max() <= 2.0**-21 * n_nodes
    assert np.abs(run.fit.beta_hat - ref.beta_hat).max() <= 1e-5
    assert scan_transcript(run.transcript, shards) == []


def test_scan_flags_leaks():
    shards = load_toy_nodes()
    sid = next(shards["blue"].subjects()).subject_id
    leaky = [
        ProtocolMessage(Kind.ENUMERATE_RESP, "blue", AC_ID, {"n_sets": 3, "m": 2,
                                                             "age": 56}, 1).to_wire(),
        ProtocolMessage(Kind.ERROR, "blue", AC_ID, {"code": "x", "msg": sid}, 2).to_wire(),
        ProtocolMessage(Kind.POOLED_ROW, "blue", AC_ID,
                        {"round": 1, "pool_id": 1, "arm": 0, "values": [1.0]}, 3).to_wire(),
    ]
    problems = scan_transcript(leaky, shards)
    assert len(problems) == 4
