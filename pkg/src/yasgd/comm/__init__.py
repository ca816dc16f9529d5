from .collectives import (
    ALGORITHMS,
    allgather_flags,
    allreduce,
    allreduce_fp16,
    chunk_bounds,
    halving_doubling_allreduce,
    ring_allreduce,
)
from .transport import (
    CommAborted,
    CommError,
    CommTimeout,
    HandshakeError,
    LoopbackTransport,
    RingTopology,
    TcpTransport,
    Transport,
    bootstrap,
)
from .wire import DType, WireFormatError, WireMessage

__all__ = [
    "ALGORITHMS",
    "CommAborted",
    "CommError",
    "CommTimeout",
    "DType",
    "HandshakeError",
    "LoopbackTransport",
    "RingTopology",
    "TcpTransport",
    "Transport",
    "WireFormatError",
    "WireMessage",
    "allgather_flags",
    "allreduce",
    "allreduce_fp16",
    "bootstrap",
    "chunk_bounds",
    "halving_doubling_allreduce",
    "ring_allreduce",
]
