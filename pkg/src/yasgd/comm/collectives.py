"""Allreduce and flag allgather built on point-to-point transports.

``ring_allreduce`` is the bandwidth-optimal ring: ``P-1`` reduce-scatter
steps then ``P-1`` allgather steps over ``P`` contiguous chunks, chunk
``c`` spanning ``[c*ceil(N/P), min((c+1)*ceil(N/P), N))``.  Chunk ``c`` is
accumulated along the fixed chain ``c, c+1, ..., c-1`` (mod P) and then
copied verbatim to every rank, so all ranks end bitwise identical and
repeated runs are reproducible.

Because the chain start depends on the chunk an element falls into, the
floating-point association of a given element changes with the buffer
layout and with ``P``.  ``halving_doubling_allreduce`` (recursive halving
reduce-scatter, recursive doubling allgather) instead sums every element
over the same balanced binary tree of ranks ``((r0+r1)+(r2+r3))+...``
wherever it sits in the buffer.  The training engine uses it by default
so that bucketing never changes results and power-of-two worlds
reproduce a single process bit for bit.

In float16 mode every payload is rounded to half before it is sent and
accumulated in float32 after decoding; the owner of a reduced block
rounds it too before the allgather so every rank ends with the same bits.
"""

from __future__ import annotations

import math

import numpy as np

from ..fp16 import dequantize_fp16, quantize_fp16, round_trip
from .transport import CommError, RingTopology, Transport
from .wire import DType, WireMessage

ALGORITHMS = ("ring", "halving_doubling")

_GATHER_TAG = 1 << 16
_FOLD_TAG = 1 << 17
_UNFOLD_TAG = _FOLD_TAG + 1
_FLAGS_GROUP = 0xFFFFFFFE


def chunk_bounds(n: int, parts: int) -> list[tuple[int, int]]:
    size = -(-n // parts) if n else 0
    return [(min(c * size, n), min((c + 1) * size, n)) for c in range(parts)]


def _encode(values: np.ndarray, dtype: DType, iteration: int, group: int, chunk: int) -> WireMessage:
    payload = quantize_fp16(values) if dtype is DType.F16 else values
    return WireMessage.from_array(payload, iteration, group, chunk)


def _decode(msg: WireMessage, expect_count: int, dtype: DType, iteration: int, group: int, chunk: int,
            rank: int) -> np.ndarray:
    if msg.iteration != iteration or msg.group != group or msg.chunk != chunk:
        raise CommError(f"rank {rank}: expected (iteration {iteration}, group {group}, chunk {chunk}), got "
                        f"({msg.iteration}, {msg.group}, {msg.chunk})")
    if msg.dtype is not dtype:
        raise CommError(f"rank {rank}: dtype mismatch, expected {dtype.name} got {msg.dtype.name}")
    if msg.count != expect_count:
        raise CommError(f"rank {rank}: element count mismatch in group {group} chunk {chunk}: "
                        f"expected {expect_count}, got {msg.count}")
    values = msg.array()
    return dequantize_fp16(values) if dtype is DType.F16 else values


def _check_buffer(buffer):
    if not isinstance(buffer, np.ndarray) or buffer.dtype != np.float32 or buffer.ndim != 1:
        raise TypeError("allreduce needs a one-dimensional float32 numpy buffer")


def ring_allreduce(buffer: np.ndarray, topology: RingTopology, transport: Transport, dtype: DType = DType.F32,
                   *, iteration: int = 0, group: int = 0) -> np.ndarray:
    """In-place elementwise sum over all ranks; returns ``buffer``."""
    _check_buffer(buffer)
    p, r = topology.world_size, topology.rank
    if p == 1:
        return buffer
    dtype = DType(dtype)
    bounds = chunk_bounds(buffer.size, p)
    succ, pred = topology.successor, topology.predecessor

    for step in range(p - 1):
        send_c, recv_c = (r - step) % p, (r - step - 1) % p
        lo, hi = bounds[send_c]
        transport.send(succ, _encode(buffer[lo:hi], dtype, iteration, group, send_c))
        lo, hi = bounds[recv_c]
        incoming = _decode(transport.recv(pred), hi - lo, dtype, iteration, group, recv_c, r)
        buffer[lo:hi] += incoming

    owned = (r + 1) % p
    if dtype is DType.F16:
        lo, hi = bounds[owned]
        buffer[lo:hi] = round_trip(buffer[lo:hi])

    for step in range(p - 1):
        send_c, recv_c = (r + 1 - step) % p, (r - step) % p
        lo, hi = bounds[send_c]
        transport.send(succ, _encode(buffer[lo:hi], dtype, iteration, group, _GATHER_TAG + send_c))
        lo, hi = bounds[recv_c]
        buffer[lo:hi] = _decode(transport.recv(pred), hi - lo, dtype, iteration, group, _GATHER_TAG + recv_c, r)
    return buffer


def halving_doubling_allreduce(buffer: np.ndarray, topology: RingTopology, transport: Transport,
                               dtype: DType = DType.F32, *, iteration: int = 0, group: int = 0) -> np.ndarray:
    """In-place elementwise sum using recursive halving / doubling.

    For non-power-of-two worlds the ranks above the largest power of two
    ``q`` first fold their buffer into rank ``r - q`` and receive the
    result at the end.
    """
    _check_buffer(buffer)
    p, r = topology.world_size, topology.rank
    if p == 1:
        return buffer
    dtype = DType(dtype)
    n = buffer.size
    q = 1 << (p.bit_length() - 1)

    if r >= q:
        transport.send(r - q, _encode(buffer, dtype, iteration, group, _FOLD_TAG))
        buffer[:] = _decode(transport.recv(r - q), n, dtype, iteration, group, _UNFOLD_TAG, r)
        return buffer
    if r + q < p:
        buffer += _decode(transport.recv(r + q), n, dtype, iteration, group, _FOLD_TAG, r)

    lo, hi = 0, n
    history = []
    d, step = 1, 0
    while d < q:
        partner = r ^ d
        mid = (lo + hi) // 2
        if r & d:
            keep, give = (mid, hi), (lo, mid)
        else:
            keep, give = (lo, mid), (mid, hi)
        transport.send(partner, _encode(buffer[give[0]:give[1]], dtype, iteration, group, step))
        incoming = _decode(transport.recv(partner), keep[1] - keep[0], dtype, iteration, group, step, r)
        buffer[keep[0]:keep[1]] += incoming
        history.append((lo, hi, d, give))
        lo, hi = keep
        d, step = d << 1, step + 1

    if dtype is DType.F16:
        buffer[lo:hi] = round_trip(buffer[lo:hi])

    for step in reversed(range(len(history))):
        plo, phi, d, give = history[step]
        partner = r ^ d
        transport.send(partner, _encode(buffer[lo:hi], dtype, iteration, group, _GATHER_TAG + step))
        buffer[give[0]:give[1]] = _decode(transport.recv(partner), give[1] - give[0], dtype, iteration, group,
                                          _GATHER_TAG + step, r)
        lo, hi = plo, phi

    if r + q < p:
        transport.send(r + q, _encode(buffer, dtype, iteration, group, _UNFOLD_TAG))
    return buffer


def allreduce(buffer: np.ndarray, topology: RingTopology, transport: Transport, dtype: DType = DType.F32,
              algorithm: str = "ring", *, iteration: int = 0, group: int = 0) -> np.ndarray:
    if algorithm == "ring":
        return ring_allreduce(buffer, topology, transport, dtype, iteration=iteration, group=group)
    if algorithm == "halving_doubling":
        return halving_doubling_allreduce(buffer, topology, transport, dtype, iteration=iteration, group=group)
    raise ValueError(f"unknown allreduce algorithm {algorithm!r}; choose from {ALGORITHMS}")


def allreduce_fp16(buffer: np.ndarray, topology: RingTopology, transport: Transport, algorithm: str = "ring",
                   *, iteration: int = 0, group: int = 0) -> np.ndarray:
    """Sum with half-precision payloads; approximate, identity when P = 1."""
    return allreduce(buffer, topology, transport, DType.F16, algorithm, iteration=iteration, group=group)


def allgather_flags(flags, topology: RingTopology, transport: Transport, *, iteration: int = 0) -> np.ndarray:
    """Bitwise OR of equal-length boolean masks from every rank (ring allgather)."""
    local = np.asarray(flags, dtype=bool)
    p, r = topology.world_size, topology.rank
    result = local.copy()
    if p == 1:
        return result
    current = local.astype(np.float32)
    for step in range(p - 1):
        transport.send(topology.successor, WireMessage.from_array(current, iteration, _FLAGS_GROUP, step))
        msg = transport.recv(topology.predecessor)
        current = _decode(msg, local.size, DType.F32, iteration, _FLAGS_GROUP, step, r)
        result |= current != 0
    return result


def ring_cost(nbytes: float, world: int, bandwidth: float, latency: float) -> float:
    """Seconds for a ring allreduce of ``nbytes``: ``2(P-1)/P * S/B + 2(P-1) * alpha``."""
    if world <= 1:
        return 0.0
    transfer = 0.0 if math.isinf(bandwidth) else 2 * (world - 1) / world * nbytes / bandwidth
    return transfer + 2 * (world - 1) * latency


def halving_doubling_cost(nbytes: float, world: int, bandwidth: float, latency: float) -> float:
    """Seconds for recursive halving/doubling: ``2(P-1)/P * S/B + 2 log2(P) * alpha``
    (power-of-two ``P``; a fold round each way is added otherwise)."""
    if world <= 1:
        return 0.0
    q = 1 << (world.bit_length() - 1)
    transfer = 0.0 if math.isinf(bandwidth) else 2 * (q - 1) / q * nbytes / bandwidth
    rounds = 2 * int(math.log2(q))
    if q != world:
        rounds += 2
        transfer += 0.0 if math.isinf(bandwidth) else 2 * nbytes / bandwidth
    return transfer + rounds * latency
