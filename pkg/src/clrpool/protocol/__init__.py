"""Simulated horizontally partitioned network with masked ring summation."""
from .actors import AC_ID, AnalyticalCenter, NodeActor, global_id, split_global_id
from .codec import DEFAULT_CODEC, FixedPointCodec
from .messages import Kind, ProtocolMessage
from .network import Network
from .run import (
    Federation,
    ProtocolConfig,
    ProtocolRun,
    broadcast_plan,
    centralized_order,
    collect_pooled,
    enumerate_sets,
    globalize,
    localize,
    run_protocol,
    scan_transcript,
    secure_sum,
    shards_from_cohort,
)
