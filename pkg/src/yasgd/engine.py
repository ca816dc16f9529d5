"""Synchronous data-parallel training driver.

Each worker builds its own copy of the model from the shared seed, trains
on its shard of every global batch, and sums gradients with grouped
allreduces that the scheduler launches while backward is still running.
Loopback workers are threads of the calling process; TCP workers are
separate processes.

The global batch is cut into ``microbatches`` equal pieces (by default one
per rank).  A rank combines the gradients of its pieces with a pairwise
tree, and the halving-doubling allreduce continues that same tree across
ranks, so for power-of-two sizes the summation order of every gradient
element does not depend on the world size or on the bucket threshold.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import queue
import socket
import threading
import time
import traceback
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .comm import (
    CommError,
    DType,
    RingTopology,
    Transport,
    allgather_flags,
    allreduce,
    bootstrap,
)
from .comm.transport import TransportStats
from .config import RunConfig
from .data import gen_dataset, iterations_per_epoch, shard
from .mlperf import MlperfLogger
from .model import (
    FlatParams,
    BatchNormState,
    backward,
    forward,
    init_bn_states,
    init_params,
    accuracy,
    layout,
)
from .optim import (
    LarsConfig,
    LrSchedule,
    MomentumState,
    NonFiniteGradientError,
    lr_at,
    sgd_step,
    warmup_iters_from_epochs,
)
from .scheduler import (
    BucketPlan,
    DynamicGrouper,
    EventKind,
    GroupScheduler,
    TraceEvent,
    backward_order,
    make_buckets,
)

logger = logging.getLogger(__name__)

GRAD_WIDTH = 4  # gradient bytes per element (float32 master precision)
_LOSS_GROUP = 0xFFFFFF00
_EVAL_GROUP = 0xFFFFFF01


class RunAborted(RuntimeError):
    """A worker failed; the message carries every rank's diagnostic."""


class _Diverged(Exception):
    pass


@dataclass
class IterationRecord:
    epoch: int
    iteration: int
    lr: float
    loss: float
    imgs_per_sec: float


@dataclass
class EvalRecord:
    epoch: int
    iteration: int
    accuracy: float


@dataclass
class WorkerResult:
    rank: int
    status: str
    params: np.ndarray
    bn: list[BatchNormState]
    trace: list[TraceEvent]
    plan: BucketPlan
    stats: TransportStats
    startup_payload_bytes: int
    iterations: list[IterationRecord]
    evals: list[EvalRecord]
    log_lines: list[str]
    train_seconds: float
    images: int
    diagnostic: str = ""


@dataclass
class RunResult:
    status: str
    params: FlatParams
    worker_params: list[np.ndarray]
    bn_states: list[list[BatchNormState]]
    evals: list[EvalRecord]
    iterations: list[IterationRecord]
    elapsed: float
    images_per_sec: float
    log_lines: list[str]
    traces: list[list[TraceEvent]]
    plans: list[BucketPlan]
    segment_bytes: dict[int, int]
    startup_payload_bytes: list[int]
    stats: list[TransportStats]
    diagnostic: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def final_accuracy(self) -> float | None:
        return self.evals[-1].accuracy if self.evals else None

    @property
    def best_accuracy(self) -> float | None:
        return max(e.accuracy for e in self.evals) if self.evals else None


def tree_sum(arrays: list[np.ndarray]) -> np.ndarray:
    """Pairwise sum ``((a0+a1)+(a2+a3))+...``, balanced for power-of-two counts."""
    level = list(arrays)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0].copy()


def build_schedule(cfg: RunConfig) -> LrSchedule:
    ipe = iterations_per_epoch(cfg.n_train, cfg.world_size, cfg.batch_per_rank)
    total = ipe * cfg.epochs
    warmup = warmup_iters_from_epochs(cfg.warmup_epochs, ipe)
    milestones = tuple(int(round(m * ipe)) for m in cfg.decay_milestones)
    return LrSchedule(cfg.base_lr, max(total, 1), min(warmup, max(total, 1)), cfg.decay, cfg.decay_power,
                      milestones, cfg.decay_gamma)


def build_lars(cfg: RunConfig) -> LarsConfig:
    return LarsConfig(eta=cfg.lars_eta, epsilon_guard=cfg.lars_epsilon, weight_decay=cfg.weight_decay,
                      enabled=cfg.lars)


class _Worker:
    def __init__(self, cfg: RunConfig, transport: Transport, topo: RingTopology, log_after_ns: int):
        self.cfg = cfg
        self.transport = transport
        self.topo = topo
        self.rank = topo.rank
        self.world = topo.world_size
        self.mlperf = MlperfLogger(model=cfg.model_name, after_ns=log_after_ns) if self.rank == 0 else None

        spec = cfg.model_spec
        self._log("model_hp_initial_shape", [spec.input_dim])
        self.params = init_params(spec, cfg.seed)
        self.bn = init_bn_states(spec, cfg.bn_momentum, cfg.bn_epsilon)
        if spec.use_batchnorm and any(spec.use_batchnorm):
            self._log("model_hp_batch_norm", {"momentum": cfg.bn_momentum, "epsilon": cfg.bn_epsilon,
                                              "center": True, "scale": True, "training": True})
        self.startup_payload_bytes = transport.stats.payload_bytes_sent

        common = dict(clusters_per_class=cfg.clusters_per_class, noise=cfg.data_noise, spread=cfg.data_spread)
        self.train = gen_dataset(cfg.data_seed, cfg.n_train, spec.input_dim, spec.num_classes, split="train",
                                 **common)
        self.eval = gen_dataset(cfg.data_seed, cfg.n_eval, spec.input_dim, spec.num_classes, split="eval",
                                **common)
        eval_parts = np.array_split(np.arange(cfg.n_eval), self.world)
        self.eval_idx = eval_parts[self.rank]

        self.schedule = build_schedule(cfg)
        self.lars = build_lars(cfg)
        self.mom = MomentumState.zeros_like(self.params, cfg.momentum)
        self.ipe = iterations_per_epoch(cfg.n_train, self.world, cfg.batch_per_rank)
        self.micro_per_rank = (cfg.microbatches or self.world) // self.world
        self.dtype = DType.F16 if cfg.fp16_comm else DType.F32

        segs = self.params.segments
        order = backward_order(segs, GRAD_WIDTH)
        self.segment_bytes = dict(order)
        self.plan = make_buckets(order, cfg.bucket_bytes)
        self.bounds = {g.gid: (min(segs[s].offset for s in g.members), max(segs[s].end for s in g.members))
                       for g in self.plan.groups}
        self.sched = GroupScheduler(self.plan, self.rank)
        self.dynamic = DynamicGrouper(order, cfg.bucket_bytes) if cfg.scheduling == "dynamic-allgather" else None
        self.grad = np.zeros_like(self.params.values)
        self.iterations: list[IterationRecord] = []
        self.evals: list[EvalRecord] = []

    def _log(self, tag, value=None):
        if self.mlperf is not None:
            self.mlperf.log(tag, value)

    # ---------------------------------------------------------------- comm
    def _allreduce_group(self, it: int, gid: int, lo: int, hi: int, nbytes: int):
        self.sched.record(EventKind.ALLREDUCE_START, group=gid, nbytes=nbytes)
        allreduce(self.grad[lo:hi], self.topo, self.transport, self.dtype, self.cfg.allreduce,
                  iteration=it, group=gid)
        self.sched.record(EventKind.ALLREDUCE_END, group=gid)

    def _sum_scalars(self, values, it: int, group: int) -> np.ndarray:
        buf = np.asarray(values, dtype=np.float32).copy()
        return allreduce(buf, self.topo, self.transport, DType.F32, self.cfg.allreduce, iteration=it, group=group)

    # ------------------------------------------------------------ training
    def _local_gradient(self, it, x, y, on_ready):
        """Microbatch forward/backward; ``on_ready(seg)`` fires once the
        rank-local gradient of ``seg`` sits in ``self.grad``."""
        pieces = np.array_split(np.arange(len(y)), self.micro_per_rank)
        sizes = np.array([len(p) for p in pieces])
        equal = bool((sizes == sizes[0]).all())
        finished: list[FlatParams] = []
        loss_sum = 0.0
        segs = self.params.segments
        for j, piece in enumerate(pieces):
            loss, cache = forward(self.params, self.bn, (x[piece], y[piece]), "train", self.cfg.label_smoothing)
            loss_sum += loss * len(piece)
            out = self.params.zeros_like()
            if j < len(pieces) - 1:
                finished.append(backward(cache, out=out))
                continue

            def combine(seg_id, out=out):
                seg = segs[seg_id]
                parts = [g.values[seg.offset:seg.end] for g in finished] + [out.values[seg.offset:seg.end]]
                if equal:
                    total = tree_sum(parts) * np.float32(1.0 / len(parts))
                else:
                    total = tree_sum([p * np.float32(n / sizes.sum()) for p, n in zip(parts, sizes)])
                self.grad[seg.offset:seg.end] = total
                on_ready(seg_id)

            backward(cache, combine, out=out)
        return loss_sum, int(sizes.sum())

    def _train_iteration(self, it: int, epoch: int, idx: np.ndarray) -> IterationRecord:
        t0 = time.perf_counter()
        x, y = self.train.batch(idx)
        self.sched.start_iteration(it)
        mode = self.cfg.scheduling
        futures = []

        with ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"comm-{self.rank}") as comm:
            if mode == "static":
                def on_ready(seg):
                    for gid in self.sched.on_backward_done(seg):
                        g = self.plan.groups[gid]
                        futures.append(comm.submit(self._allreduce_group, it, gid, *self.bounds[gid], g.nbytes))
            elif mode == "none":
                def on_ready(seg):
                    self.sched.on_backward_done(seg)
            else:
                self.dynamic.start_iteration()

                def on_ready(seg):
                    self.sched.record(EventKind.BACKWARD_DONE, segment=seg)
                    self.dynamic.mark_done(seg)
                    pending = allgather_flags(self.dynamic.pending, self.topo, self.transport, iteration=it)
                    for g in self.dynamic.common_done(pending):
                        self.sched.record(EventKind.GROUP_READY, group=g.gid)
                        lo = min(self.params.segments[s].offset for s in g.members)
                        hi = max(self.params.segments[s].end for s in g.members)
                        self._allreduce_group(it, g.gid, lo, hi, g.nbytes)

            loss_sum, n_local = self._local_gradient(it, x, y, on_ready)
            if mode == "none":
                for g in self.plan.groups:
                    futures.append(comm.submit(self._allreduce_group, it, g.gid, *self.bounds[g.gid], g.nbytes))
            for f in futures:
                f.result()

        if self.world > 1:
            self.grad /= np.float32(self.world)
        loss_tot = self._sum_scalars([loss_sum, n_local], it, _LOSS_GROUP)
        loss = float(loss_tot[0]) / float(loss_tot[1])
        if not np.isfinite(loss):
            raise _Diverged(f"iteration {it}: loss is {loss}")

        grads = FlatParams(self.grad, self.params.segments, self.params.spec)
        try:
            sgd_step(self.params, grads, self.mom, self.schedule, self.lars, it)
        except NonFiniteGradientError as exc:
            raise _Diverged(str(exc)) from None
        self.sched.record(EventKind.STEP_APPLIED)
        if not self.params.is_finite():
            raise _Diverged(f"iteration {it}: weights became non-finite")
        dt = time.perf_counter() - t0
        return IterationRecord(epoch, it, lr_at(self.schedule, it), loss, self.world * len(idx) / dt)

    def _evaluate(self, epoch: int, it: int) -> float:
        self._log("eval_start")
        x, y = self.eval.batch(self.eval_idx)
        correct, total = accuracy(self.params, self.bn, x, y)
        counts = self._sum_scalars([correct, total], epoch, _EVAL_GROUP)
        acc = float(counts[0]) / float(counts[1])
        self.evals.append(EvalRecord(epoch, it, acc))
        self._log("eval_accuracy", {"epoch": epoch, "value": round(acc, 5)})
        self._log("eval_stop")
        return acc

    def run(self) -> WorkerResult:
        cfg = self.cfg
        status, diagnostic = "ok", ""
        images = 0
        self._log("train_loop")
        t0 = time.perf_counter()
        it = 0
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                for epoch in range(cfg.epochs):
                    self._log("train_epoch", epoch)
                    for idx in shard(self.train, epoch, self.rank, self.world, cfg.batch_per_rank):
                        self.iterations.append(self._train_iteration(it, epoch, idx))
                        images += self.world * len(idx)
                        it += 1
                    last = epoch == cfg.epochs - 1
                    if epoch % cfg.eval_period == cfg.eval_offset or last:
                        acc = self._evaluate(epoch, it - 1)
                        if cfg.target_accuracy is not None and acc >= cfg.target_accuracy:
                            break
            except _Diverged as exc:
                status, diagnostic = "diverged", f"rank {self.rank}: {exc}"
        train_seconds = time.perf_counter() - t0
        return WorkerResult(self.rank, status, self.params.values, self.bn, self.sched.events, self._realized_plan(),
                            self.transport.stats, self.startup_payload_bytes, self.iterations, self.evals,
                            self.mlperf.lines if self.mlperf else [], train_seconds, images, diagnostic)

    def _realized_plan(self) -> BucketPlan:
        if self.dynamic is not None and self.dynamic.groups:
            return self.dynamic.realized_plan()
        return self.plan


def run_worker(cfg: RunConfig, rank: int, rendezvous: str, log_after_ns: int = -1) -> WorkerResult:
    transport, topo = bootstrap(cfg.world_size, rank, cfg.transport, rendezvous, cfg.timeout)
    try:
        result = _Worker(cfg, transport, topo, log_after_ns).run()
        transport.barrier()
        return result
    except BaseException as exc:
        transport.abort(f"rank {rank} failed: {exc!r}")
        raise
    finally:
        transport.close()


# ------------------------------------------------------------- launchers
def _run_threads(cfg: RunConfig, rendezvous: str, log_after_ns: int):
    results: dict[int, WorkerResult] = {}
    errors: dict[int, str] = {}

    def target(rank):
        try:
            results[rank] = run_worker(cfg, rank, rendezvous, log_after_ns)
        except BaseException as exc:
            errors[rank] = f"{type(exc).__name__}: {exc}"
            if not isinstance(exc, CommError):
                logger.debug("rank %d failed:\n%s", rank, traceback.format_exc())

    threads = [threading.Thread(target=target, args=(r,), name=f"worker-{r}") for r in range(cfg.world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results, errors


def _process_entry(cfg, rank, rendezvous, log_after_ns, out):
    try:
        out.put((rank, run_worker(cfg, rank, rendezvous, log_after_ns), None))
    except BaseException as exc:
        out.put((rank, None, f"{type(exc).__name__}: {exc}"))


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _run_processes(cfg: RunConfig, rendezvous: str, log_after_ns: int):
    ctx = mp.get_context("spawn")
    out = ctx.Queue()
    procs = [ctx.Process(target=_process_entry, args=(cfg, r, rendezvous, log_after_ns, out), daemon=True)
             for r in range(cfg.world_size)]
    for p in procs:
        p.start()
    results, errors = {}, {}
    deadline = time.monotonic() + cfg.timeout
    while len(results) + len(errors) < cfg.world_size:
        try:
            rank, res, err = out.get(timeout=0.5)
            deadline = time.monotonic() + cfg.timeout
        except queue.Empty:
            dead = [p for p in procs if p.exitcode not in (None, 0)]
            if time.monotonic() > deadline or (dead and out.empty()):
                for r, p in enumerate(procs):
                    if r not in results and r not in errors:
                        errors[r] = f"worker process exited with code {p.exitcode} or stopped responding"
                break
            continue
        if err is None:
            results[rank] = res
        else:
            errors[rank] = err
    for p in procs:
        p.join(timeout=5)
        if p.is_alive():
            p.terminate()
    return results, errors


def run_training(cfg: RunConfig, log_stream=None) -> RunResult:
    """Train with ``cfg.world_size`` workers and return rank 0's view plus per-rank state.

    Elapsed time runs from the ``run_start`` line, written before any model
    or data is built, to ``run_final``.  Raises :class:`RunAborted` if a
    worker fails; divergence is reported through ``status``.
    """
    log = MlperfLogger(log_stream, cfg.model_name)
    log.log("eval_offset", cfg.eval_offset)
    log.log("run_start")
    start_ns = log.last_ns
    log.log("run_set_random_seed", cfg.seed)

    if cfg.transport == "loopback":
        rendezvous = cfg.rendezvous or f"run-{uuid.uuid4().hex}"
        results, errors = _run_threads(cfg, rendezvous, log.last_ns)
    else:
        rendezvous = cfg.rendezvous or f"127.0.0.1:{free_port()}"
        results, errors = _run_processes(cfg, rendezvous, log.last_ns)

    if errors:
        # the first failure is usually the cause; peers report the abort it triggered
        primary = [f"rank {r}: {m}" for r, m in sorted(errors.items()) if "aborted" not in m]
        rest = [f"rank {r}: {m}" for r, m in sorted(errors.items()) if "aborted" in m]
        log.log("run_stop", {"success": False})
        log.log("run_final")
        raise RunAborted("run aborted; " + "; ".join(primary + rest))

    ordered = [results[r] for r in range(cfg.world_size)]
    lead = ordered[0]
    log.extend(lead.log_lines)
    statuses = {w.status for w in ordered}
    status = "diverged" if "diverged" in statuses else "ok"
    log.log("run_stop")
    log.log("run_final")
    final_ns = log.last_ns

    spec = cfg.model_spec
    params = FlatParams(lead.params, layout(spec), spec)
    return RunResult(
        status=status,
        params=params,
        worker_params=[w.params for w in ordered],
        bn_states=[w.bn for w in ordered],
        evals=lead.evals,
        iterations=lead.iterations,
        elapsed=(final_ns - start_ns) / 1e9,
        images_per_sec=lead.images / lead.train_seconds if lead.train_seconds > 0 else 0.0,
        log_lines=list(log.lines),
        traces=[w.trace for w in ordered],
        plans=[w.plan for w in ordered],
        segment_bytes={s: seg.length * GRAD_WIDTH for s, seg in enumerate(params.segments)},
        startup_payload_bytes=[w.startup_payload_bytes for w in ordered],
        stats=[w.stats for w in ordered],
        diagnostic="; ".join(w.diagnostic for w in ordered if w.diagnostic),
    )
