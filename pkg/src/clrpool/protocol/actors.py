"""Node and analytical-center actors.

A node only ever reads its own shard. What leaves a node is an
acknowledgement, a set count, or a masked running sum; the analytical
center (AC) sees pooled sums only after removing its own mask.
"""
from __future__ import annotations

import random
import warnings

import numpy as np

from ..cohort import Cohort
from ..errors import (
    DomainError,
    MatchingRatioMismatch,
    NodeUnreachable,
    ProtocolError,
    RangeExceeded,
    RingBroken,
    UnknownStratum,
)
from ..pooling import subject_tensor
from ..terms import parse_terms
from .codec import DEFAULT_CODEC, FixedPointCodec
from .messages import Kind, ProtocolMessage
from .network import Actor, Network

AC_ID = "AC"

ERRORS = {cls.__name__: cls for cls in (MatchingRatioMismatch, UnknownStratum, RangeExceeded,
                                        RingBroken, DomainError)}


def global_id(node_id: str, index: int) -> str:
    """Identifier of a node's ``index``-th matched set (1-based), as used in the plan."""
    return f"{node_id}#{index}"


def split_global_id(gid: str) -> tuple[str, int]:
    node, _, idx = gid.rpartition("#")
    return node, int(idx)


class NodeActor(Actor):
    def __init__(self, node_id: str, shard: Cohort, codec: FixedPointCodec = DEFAULT_CODEC):
        self.actor_id = node_id
        self.shard = shard
        self.codec = codec
        self.contributions: dict[int, list[int]] = {}
        self.rounds: dict[int, dict] = {}
        self.partials_seen: dict[int, int] = {}
        self._tensors: dict[tuple, np.ndarray] = {}

    def _error(self, net, code, msg, round_id=None):
        payload = {"code": code, "msg": msg}
        if round_id is not None:
            payload["round"] = round_id
        net.send(Kind.ERROR, self.actor_id, AC_ID, payload)

    def handle(self, msg: ProtocolMessage, net: Network) -> None:
        getattr(self, f"on_{msg.kind.value.lower()}")(msg, net)

    def on_enumerate_req(self, msg, net):
        ratios = self.shard.matching_ratios
        if len(ratios) > 1:
            self._error(net, "MatchingRatioMismatch",
                        f"node {self.actor_id} holds mixed matching ratios {sorted(ratios)}")
            return
        net.send(Kind.ENUMERATE_RESP, self.actor_id, msg.sender,
                 {"n_sets": self.shard.n_sets, "m": next(iter(ratios)) if ratios else None})

    def on_plan(self, msg, net):
        contributions: dict[int, list[int]] = {}
        for row in msg.payload["rows"]:
            if row["node"] != self.actor_id or not 1 <= row["set"] <= self.shard.n_sets:
                self._error(net, "UnknownStratum",
                            f"node {self.actor_id} holds no matched set {row['set']}")
                return
            contributions.setdefault(int(row["pool_id"]), []).append(int(row["set"]))
        self.contributions = contributions
        net.send(Kind.PLAN_ACK, self.actor_id, msg.sender,
                 {"contributions": {str(k): len(v) for k, v in sorted(contributions.items())}})

    def on_agg_request(self, msg, net):
        self.rounds[msg.payload["round"]] = msg.payload

    def contribution(self, pool_id: int, arm: int, terms) -> np.ndarray:
        key = tuple(terms)
        if key not in self._tensors:
            self._tensors[key] = subject_tensor(self.shard, parse_terms(terms))
        T = self._tensors[key]
        total = np.zeros(len(terms))
        for idx in self.contributions.get(pool_id, []):
            total = total + T[idx - 1, arm]
        return total

    def on_partial_sum(self, msg, net):
        rid = msg.payload["round"]
        self.partials_seen[rid] = self.partials_seen.get(rid, 0) + 1
        req = self.rounds.pop(rid, None)
        if req is None:
            self._error(net, "RingBroken", f"node {self.actor_id}: no request for round {rid}", rid)
            return
        try:
            mine = self.codec.encode(self.contribution(req["pool_id"], req["arm"], req["terms"]))
        except RangeExceeded as exc:
            self._error(net, "RangeExceeded", f"node {self.actor_id}: {exc}", rid)
            return
        except DomainError as exc:
            self._error(net, "DomainError", str(exc), rid)
            return
        net.send(Kind.PARTIAL_SUM, self.actor_id, req["next"],
                 {"round": rid, "pool_id": req["pool_id"], "arm": req["arm"],
                  "residues": self.codec.add(msg.payload["residues"], mine)})

    def on_enumerate_resp(self, msg, net):
        pass

    on_plan_ack = on_pooled_row = on_error = on_enumerate_resp


class VectorNode(NodeActor):
    """A ring member contributing a fixed vector; used by standalone secure summation."""

    def __init__(self, node_id: str, vector, codec: FixedPointCodec = DEFAULT_CODEC):
        super().__init__(node_id, Cohort((), ()), codec)
        self.vector = np.asarray(vector, dtype=float)

    def contribution(self, pool_id, arm, terms):
        return self.vector


class AnalyticalCenter(Actor):
    def __init__(self, codec: FixedPointCodec = DEFAULT_CODEC, mask_seed=None,
                 actor_id: str = AC_ID):
        self.actor_id = actor_id
        self.codec = codec
        self.inbox: list[ProtocolMessage] = []
        self._masks = random.SystemRandom() if mask_seed is None else random.Random(mask_seed)
        self._round = 0
        self.rounds: dict[int, list[int]] = {}

    def handle(self, msg, net):
        self.inbox.append(msg)

    def _drain(self, kind=None):
        taken = [m for m in self.inbox if kind is None or m.kind is kind]
        self.inbox = [m for m in self.inbox if m not in taken]
        return taken

    def _raise_errors(self, errors):
        if errors:
            e = errors[0]
            cls = ERRORS.get(e.payload["code"], ProtocolError)
            raise cls(f"{e.sender}: {e.payload['msg']}")

    # step 1
    def enumerate_sets(self, net: Network, node_ids) -> dict[str, dict]:
        for n in node_ids:
            net.send(Kind.ENUMERATE_REQ, self.actor_id, n)
        net.run()
        self._raise_errors(self._drain(Kind.ERROR))
        replies = {m.sender: m.payload for m in self._drain(Kind.ENUMERATE_RESP)}
        missing = [n for n in node_ids if n not in replies]
        if missing:
            raise NodeUnreachable(f"no answer from node(s) {', '.join(missing)}")
        reporting = {n: r["m"] for n, r in replies.items() if r["n_sets"] > 0}
        for n, r in replies.items():
            if r["n_sets"] == 0:
                warnings.warn(f"node {n} reports no matched sets", stacklevel=3)
        ratios = sorted(set(reporting.values()))
        if len(ratios) > 1:
            counts = {m: sum(1 for v in reporting.values() if v == m) for m in ratios}
            common = max(ratios, key=lambda m: (counts[m], -m))
            deviant = sorted(n for n, v in reporting.items() if v != common)
            raise MatchingRatioMismatch(
                f"node(s) {', '.join(deviant)} use a matching ratio other than 1:{common}")
        return {n: replies[n] for n in node_ids}

    # steps 3-4
    def broadcast_plan(self, net: Network, assignment, node_ids) -> dict[str, dict]:
        rows: dict[str, list] = {n: [] for n in node_ids}
        for pool in assignment.pools:
            for gid in pool.members:
                node, idx = split_global_id(gid)
                if node not in rows:
                    raise UnknownStratum(f"plan references set {gid} at unknown node {node}")
                rows[node].append({"pool_id": pool.pool_id, "node": node, "set": idx})
        for n in node_ids:
            net.send(Kind.PLAN, self.actor_id, n, {"rows": rows[n]})
        net.run()
        self._raise_errors(self._drain(Kind.ERROR))
        acks = {m.sender: m.payload["contributions"] for m in self._drain(Kind.PLAN_ACK)}
        missing = [n for n in node_ids if n not in acks]
        if missing:
            raise NodeUnreachable(f"node(s) {', '.join(missing)} did not acknowledge the plan")
        return acks

    # step 4, one masked ring
    def secure_sum_round(self, net: Network, ring, pool_id, arm, terms, width) -> np.ndarray:
        self._round += 1
        rid = self._round
        mask = [self._masks.getrandbits(64) for _ in range(width)]
        self.rounds[rid] = mask
        hops = list(ring) + [self.actor_id]
        for node, nxt in zip(ring, hops[1:]):
            net.send(Kind.AGG_REQUEST, self.actor_id, node,
                     {"round": rid, "pool_id": pool_id, "arm": arm, "terms": list(terms),
                      "next": nxt})
        net.send(Kind.PARTIAL_SUM, self.actor_id, ring[0],
                 {"round": rid, "pool_id": pool_id, "arm": arm, "residues": mask})
        net.run()
        errors = [m for m in self._drain(Kind.ERROR) if m.payload.get("round") in (rid, None)]
        self._raise_errors(errors)
        finals = [m for m in self._drain(Kind.PARTIAL_SUM) if m.payload["round"] == rid]
        if len(finals) != 1:
            raise RingBroken(f"round {rid} (pool {pool_id}, arm {arm}) did not return to the AC")
        values = self.codec.decode(self.codec.sub(finals[0].payload["residues"], mask))
        net.send(Kind.POOLED_ROW, self.actor_id, self.actor_id,
                 {"round": rid, "pool_id": pool_id, "arm": arm, "values": values.tolist()})
        net.run()
        self._drain(Kind.POOLED_ROW)
        return values

