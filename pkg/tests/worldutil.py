"""Run a function on every rank of a small world, one thread per rank."""

import threading
import uuid

from yasgd.comm import bootstrap
from yasgd.engine import free_port


def address(mode: str) -> str:
    return f"127.0.0.1:{free_port()}" if mode == "tcp" else f"test-{uuid.uuid4().hex}"


def run_world(world, fn, mode="loopback", timeout=20.0):
    addr = address(mode)
    results, errors = [None] * world, [None] * world

    def work(rank):
        try:
            transport, topo = bootstrap(world, rank, mode, addr, timeout)
        except BaseException as exc:
            errors[rank] = exc
            return
        try:
            results[rank] = fn(rank, transport, topo)
            transport.barrier()
        except BaseException as exc:
            errors[rank] = exc
            transport.abort(repr(exc))
        finally:
            transport.close()

    threads = [threading.Thread(target=work, args=(r,), daemon=True) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout * 3)
    for e in errors:
        if e is not None:
            raise e
    return results


def tiny_config(world=1, global_batch=64, microbatches=8, **kw):
    """A run small enough for unit tests; a fixed microbatch count keeps the
    gradient summation tree identical for every world size dividing it."""
    from yasgd.config import RunConfig

    base = dict(layer_dims=(8, 16, 4), n_train=512, n_eval=128, epochs=2, eval_period=2, eval_offset=1,
                base_lr=0.5, lars=True, world_size=world, batch_per_rank=global_batch // world,
                microbatches=microbatches, timeout=30.0)
    base.update(kw)
    return RunConfig(**base)
