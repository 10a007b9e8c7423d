from .context import (BufferRequest, CollectiveError, CollectiveKind, ReduceOp, StageRecord,
                      WorkerContext, allgather_counts, allgather_table, allreduce, barrier,
                      binomial_rounds, binomial_schedule, broadcast_table, bytes_sent,
                      channel_exchange, gather_table, recv_table, reduce, scatter_table,
                      send_table, shuffle_parts, shuffle_table)
from .launch import WorkerFailure, context_from_env, run_local, run_tcp, run_world
from .transport import LocalWorld, TcpTransport, TransportError

__all__ = [
    "BufferRequest", "CollectiveError", "CollectiveKind", "ReduceOp", "StageRecord",
    "WorkerContext", "allgather_counts", "allgather_table", "allreduce", "barrier",
    "binomial_rounds", "binomial_schedule", "broadcast_table", "bytes_sent", "channel_exchange",
    "gather_table", "recv_table", "reduce", "scatter_table", "send_table", "shuffle_parts",
    "shuffle_table", "WorkerFailure", "context_from_env", "run_local", "run_tcp", "run_world",
    "LocalWorld", "TcpTransport", "TransportError",
]
