"""End-to-end distributed pooled analysis.

1. the AC asks every node for its number of matched sets;
2. picks the pool plan for the total ``N``;
3. randomly partitions the ``(node, set index)`` pairs into pools;
4. sends each node the rows of the id table that concern it, then runs one
   masked ring summation per pool and arm;
5. fits conditional logistic regression on the pooled table.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..cohort import Cohort
from ..engine import FitResult, fit
from ..errors import ClrPoolError, InputError, PlanMismatch
from ..pooling import (
    COVER_ALL,
    Pool,
    PoolAssignment,
    PooledDesign,
    PoolPlan,
    check_disclosure,
    partition,
    plan_pools,
    resolve_seed,
)
from ..terms import parse_terms
from .actors import AC_ID, AnalyticalCenter, NodeActor, VectorNode, global_id, split_global_id
from .codec import DEFAULT_CODEC, FixedPointCodec
from .messages import PAYLOAD_KEYS, Kind, ProtocolMessage
from .network import Network


class Federation:
    """A network of node actors around one analytical center."""

    def __init__(self, shards: Mapping[str, Cohort], codec: FixedPointCodec = DEFAULT_CODEC,
                 mask_seed=None, transcript_path=None, offline: Sequence[str] = (),
                 expected: Sequence[str] | None = None):
        self.codec = codec
        self.net = Network(transcript_path)
        self.ac = AnalyticalCenter(codec, mask_seed)
        self.net.register(self.ac)
        self.node_ids = sorted(expected if expected is not None else shards)
        self.nodes: dict[str, NodeActor] = {}
        for n in sorted(shards):
            node = NodeActor(n, shards[n], codec)
            node.online = n not in offline
            self.nodes[n] = node
            self.net.register(node)
        self.counts: dict[str, int] = {}
        self.m: int | None = None

    @property
    def ring(self) -> list[str]:
        # lexicographic node order, AC-orchestrated
        return list(self.node_ids)

    def enumerate_sets(self) -> dict:
        replies = self.ac.enumerate_sets(self.net, self.node_ids)
        self.counts = {n: r["n_sets"] for n, r in replies.items()}
        ratios = {r["m"] for r in replies.values() if r["n_sets"]}
        self.m = ratios.pop() if ratios else None
        return {"counts": dict(self.counts), "N": sum(self.counts.values()), "m": self.m}

    def global_ids(self) -> list[str]:
        return [global_id(n, i) for n in self.node_ids for i in range(1, self.counts.get(n, 0) + 1)]

    def plan(self, pool_size: int, policy: str = COVER_ALL, secondary_min: int = 3,
             seed=None) -> PoolAssignment:
        ids = self.global_ids()
        plan = plan_pools(len(ids), pool_size, policy, secondary_min, self.m)
        seed = resolve_seed(seed)
        groups, dropped = partition(ids, plan, np.random.default_rng(seed))
        return PoolAssignment(tuple(Pool(i + 1, g) for i, g in enumerate(groups)), seed, plan,
                              dropped)

    def broadcast_plan(self, assignment: PoolAssignment) -> dict:
        return self.ac.broadcast_plan(self.net, assignment, self.node_ids)

    def collect_pooled(self, assignment: PoolAssignment, terms) -> PooledDesign:
        terms = [t.render() for t in parse_terms(terms)]
        if self.m is None:
            raise InputError("no matching ratio known; run enumerate_sets first")
        width = self.m + 1
        X = np.empty((len(assignment.pools) * width, len(terms)))
        for i, pool in enumerate(assignment.pools):
            for arm in range(width):
                try:
                    X[i * width + arm] = self.ac.secure_sum_round(
                        self.net, self.ring, pool.pool_id, arm, terms, len(terms))
                except ClrPoolError as exc:
                    exc.args = (f"pool {pool.pool_id}: {exc}",)
                    exc.pool_id = pool.pool_id
                    raise
        n = len(assignment.pools)
        return PooledDesign(X, np.arange(n + 1) * width, terms,
                            [p.pool_id for p in assignment.pools], [p.g for p in assignment.pools])

    def close(self):
        self.net.close()


def enumerate_sets(fed: Federation) -> dict:
    return fed.enumerate_sets()


def broadcast_plan(fed: Federation, assignment: PoolAssignment) -> dict:
    return fed.broadcast_plan(assignment)


def collect_pooled(fed: Federation, assignment: PoolAssignment, terms) -> PooledDesign:
    return fed.collect_pooled(assignment, terms)


def secure_sum(vectors: Mapping[str, Sequence[float]], codec: FixedPointCodec = DEFAULT_CODEC,
               mask_seed=None, network: Network | None = None):
    """Masked ring summation of one vector per node, ring in lexicographic node order.

    Returns ``(total, network)``; the network's transcript holds every hop.
    """
    if not vectors:
        raise InputError("secure summation needs at least one node")
    ring = sorted(vectors)
    width = {len(v) for v in vectors.values()}
    if len(width) != 1:
        raise InputError("all node vectors must have the same length")
    for v in vectors.values():
        codec.check(v)
    net = network or Network()
    ac = AnalyticalCenter(codec, mask_seed)
    net.register(ac)
    for n in ring:
        net.register(VectorNode(n, vectors[n], codec))
    total = ac.secure_sum_round(net, ring, 0, 0, [], width.pop())
    return total, net


# --- id translation ----------------------------------------------------------

def localize(assignment: PoolAssignment, shards: Mapping[str, Cohort]) -> PoolAssignment:
    """Replace ``node#index`` ids by stratum ids (needs the shards, so never done by the AC)."""
    def local(gid):
        node, idx = split_global_id(gid)
        return shards[node].sets[idx - 1].stratum_id
    pools = tuple(Pool(p.pool_id, tuple(local(g) for g in p.members), p.label)
                  for p in assignment.pools)
    return PoolAssignment(pools, assignment.seed, assignment.plan,
                          tuple(local(g) for g in assignment.dropped))


def globalize(assignment: PoolAssignment, shards: Mapping[str, Cohort]) -> PoolAssignment:
    where = {}
    for node, shard in shards.items():
        for i, ms in enumerate(shard.sets, start=1):
            where[ms.stratum_id] = global_id(node, i)
    try:
        pools = tuple(Pool(p.pool_id, tuple(where[s] for s in p.members), p.label)
                      for p in assignment.pools)
        dropped = tuple(where[s] for s in assignment.dropped)
    except KeyError as exc:
        raise PlanMismatch(f"assignment references unknown stratum {exc.args[0]}") from None
    return PoolAssignment(pools, assignment.seed, assignment.plan, dropped)


def shards_from_cohort(cohort: Cohort) -> dict[str, Cohort]:
    return {n: cohort.shard(n) for n in cohort.node_ids}


def centralized_order(shards: Mapping[str, Cohort]) -> Cohort:
    """The union of the shards, sets ordered as the AC enumerates them."""
    sets, names = [], None
    for n in sorted(shards):
        sets.extend(shards[n].sets)
        names = names or shards[n].covariate_names
    return Cohort(tuple(sets), tuple(names or ()))


# --- full run ------------------------------------------------------------------

@dataclass
class ProtocolConfig:
    shards: Mapping[str, Cohort]
    terms: Sequence[str]
    pool_size: int = 5
    policy: str = COVER_ALL
    secondary_min: int = 3
    seed: int | None = None
    assignment: PoolAssignment | None = None      # stratum ids; overrides random planning
    ci_level: float = 0.95
    tol: float = 1e-8
    max_iter: int = 50
    mask_seed: int | None = None
    transcript_path: str | None = None
    codec: FixedPointCodec = field(default_factory=lambda: DEFAULT_CODEC)
    expected_nodes: Sequence[str] | None = None
    offline: Sequence[str] = ()


@dataclass
class ProtocolRun:
    fit: FitResult
    design: PooledDesign
    assignment: PoolAssignment          # node#index ids, as known to the AC
    enumeration: dict
    acks: dict
    transcript: list[str]


def run_protocol(config: ProtocolConfig) -> ProtocolRun:
    """Enumerate, plan, broadcast, collect and fit; errors carry ``stage``."""
    fed = Federation(config.shards, config.codec, config.mask_seed, config.transcript_path,
                     config.offline, config.expected_nodes)
    stage = "enumerate"
    try:
        enumeration = fed.enumerate_sets()
        stage = "plan"
        if config.assignment is not None:
            assignment = globalize(config.assignment, config.shards)
        else:
            assignment = fed.plan(config.pool_size, config.policy, config.secondary_min,
                                  config.seed)
        check_disclosure(min(p.g for p in assignment.pools), parse_terms(config.terms))
        stage = "broadcast"
        acks = fed.broadcast_plan(assignment)
        stage = "collect"
        design = fed.collect_pooled(assignment, config.terms)
        stage = "fit"
        result = fit(design, tol=config.tol, max_iter=config.max_iter, ci_level=config.ci_level)
    except ClrPoolError as exc:
        exc.stage = stage
        exc.transcript = list(fed.net.transcript)
        raise
    finally:
        fed.close()
    return ProtocolRun(result, design, assignment, enumeration, acks, list(fed.net.transcript))


# --- audit -------------------------------------------------------------------

def scan_transcript(lines: Sequence[str], cohort: Cohort | Mapping[str, Cohort]) -> list[str]:
    """Privacy schema scan; returns a list of violations (empty when clean).

    Checks that payloads carry only whitelisted keys, that no subject id or
    covariate field name appears as a JSON key or string value, that
    masked partial sums are residues, and that only the AC emits pooled rows.
    """
    if isinstance(cohort, Cohort):
        cohorts = [cohort]
    else:
        cohorts = list(cohort.values())
    subject_ids = {s.subject_id for c in cohorts for s in c.subjects()}
    covariate_names = {n for c in cohorts for n in c.covariate_names}
    problems = []

    def strings(obj):
        if isinstance(obj, str):
            yield obj
        elif isinstance(obj, dict):
            for k, v in obj.items():
                yield from strings(v)
        elif isinstance(obj, list):
            for v in obj:
                yield from strings(v)

    for line in lines:
        msg = ProtocolMessage.from_wire(line)
        keys = set(msg.payload)
        bad = keys - PAYLOAD_KEYS[msg.kind]
        if bad:
            problems.append(f"seq {msg.seq}: unexpected payload fields {sorted(bad)}")
        if keys & covariate_names:
            problems.append(f"seq {msg.seq}: raw covariate field(s) {sorted(keys & covariate_names)}")
        if msg.kind is Kind.PARTIAL_SUM:
            if not all(isinstance(r, int) and 0 <= r < (1 << 64) for r in msg.payload["residues"]):
                problems.append(f"seq {msg.seq}: partial sum is not a vector of 64-bit residues")
        if msg.kind is Kind.POOLED_ROW and msg.sender != AC_ID:
            problems.append(f"seq {msg.seq}: pooled row emitted by {msg.sender}")
        payload_strings = {v for k, v in msg.payload.items() if k != "terms" for v in strings(v)}
        leaked = payload_strings & subject_ids
        if leaked:
            problems.append(f"seq {msg.seq}: subject id(s) {sorted(leaked)[:3]} in payload")
    return problems
