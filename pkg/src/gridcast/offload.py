"""Host-offloaded activation storage for long checkpointed rollouts.

Forward: each segment's input latent is copied out to a host store by a
background transfer thread, and its device-side buffer is dropped once the
segment has consumed it.  Backward: fetches are issued ahead of need by a
fixed lookahead so the transfer latency overlaps recompute, and the store is
consumed strictly in reverse segment order.

An ActivationArena meters device residency in bytes.  With one live segment
at a time, the arena high-water mark depends only on the segment working
set, not on how many segments the rollout has.  Gradients are bitwise
identical to plain in-memory checkpointing because transfers copy exact
bytes and recomputation replays identical operations.
"""

from __future__ import annotations

import os
import queue
import threading
import time

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

__all__ = [
    "ActivationArena",
    "BudgetError",
    "HostStore",
    "StoreError",
    "TransferWorker",
    "PrefetchPipeline",
    "prefetch_schedule",
    "OffloadEngine",
]


class BudgetError(RuntimeError):
    """An admit would exceed the arena budget with nothing left to evict."""


class StoreError(RuntimeError):
    """Host store misuse: double write, double consume, order violation."""


class ActivationArena:
    """Byte accountant for device-resident activations.

    admit() returns a token; release() retires it.  residency and
    high_water are exact byte counts.  The arena does not own memory, it
    meters it; callers decide what the bytes are.
    """

    def __init__(self, budget_bytes: int):
        if budget_bytes <= 0:
            raise ConfigError(f"arena budget must be positive, got {budget_bytes}")
        self.budget = int(budget_bytes)
        self.residency = 0
        self.high_water = 0
        self._live: set[int] = set()
        self._sizes: dict[int, int] = {}
        self._next = 0

    def admit(self, nbytes: int) -> int:
        nbytes = int(nbytes)
        if nbytes < 0:
            raise ValueError("admit: negative size")
        if self.residency + nbytes > self.budget:
            raise BudgetError(
                f"admit of {nbytes} bytes exceeds budget {self.budget} "
                f"(residency {self.residency})")
        self.residency += nbytes
        self.high_water = max(self.high_water, self.residency)
        token = self._next
        self._next += 1
        self._live.add(token)
        self._sizes[token] = nbytes
        return token

    def release(self, token: int) -> None:
        if token not in self._live:
            raise ValueError(f"release: unknown or already released token {token}")
        self._live.remove(token)
        self.residency -= self._sizes.pop(token)


class HostStore:
    """Write-once, consume-once slot store for offloaded activations.

    Slots are indexed 0..n-1, written in increasing order during forward and
    consumed in strictly decreasing order during backward, mirroring how a
    reversed tape walks its segments.  Backend 'ram' keeps byte copies in
    memory; 'mmap' stages them through a file and reads them back via
    memory mapping.
    """

    def __init__(self, backend: str = "ram", workdir: str | None = None):
        self._file = None
        self._path = None
        if backend not in ("ram", "mmap"):
            raise ConfigError(f"unknown host store backend {backend!r}")
        self.backend = backend
        self._slots: dict[int, tuple] = {}
        self._written: set[int] = set()
        self._consumed_floor: int | None = None
        if backend == "mmap":
            workdir = workdir or "."
            self._path = os.path.join(workdir, f".offload-{os.getpid()}-{id(self):x}.bin")
            self._file = open(self._path, "w+b")
        self.bytes_written = 0
        self.bytes_read = 0

    def put(self, slot: int, arr: np.ndarray) -> None:
        if slot in self._written:
            raise StoreError(f"slot {slot} already written")
        self._written.add(slot)
        data = arr.tobytes()
        self.bytes_written += len(data)
        if self.backend == "ram":
            self._slots[slot] = (data, arr.dtype.str, arr.shape)
        else:
            off = self._file.seek(0, os.SEEK_END)
            self._file.write(data)
            self._file.flush()
            self._slots[slot] = (off, len(data), arr.dtype.str, arr.shape)

    def get(self, slot: int) -> np.ndarray:
        if slot not in self._written:
            raise StoreError(f"slot {slot} was never written")
        if slot not in self._slots:
            raise StoreError(f"slot {slot} already consumed")
        if self._consumed_floor is not None and slot >= self._consumed_floor:
            raise StoreError(
                f"slot {slot} consumed out of order; slots must be taken in "
                f"decreasing order (last was {self._consumed_floor})")
        rec = self._slots.pop(slot)
        self._consumed_floor = slot
        if self.backend == "ram":
            data, dt, shape = rec
            out = np.frombuffer(data, dtype=dt).reshape(shape).copy()
        else:
            off, n, dt, shape = rec
            mm = np.memmap(self._path, dtype=np.uint8, mode="r", offset=off, shape=(n,))
            out = np.frombuffer(mm.tobytes(), dtype=dt).reshape(shape).copy()
            del mm
        self.bytes_read += out.nbytes
        return out

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None
            try:
                os.unlink(self._path)
            except OSError:
                pass

    def __del__(self):
        self.close()


class TransferWorker:
    """Single background thread draining a FIFO of store writes and reads.

    latency_us of sleep is charged per transfer before it executes, standing
    in for interconnect time.  Completion is signaled through a per-request
    Event; results of fetches are parked on the request.
    """

    def __init__(self, store: HostStore, latency_us: float = 0.0):
        self.store = store
        self.latency_us = float(latency_us)
        self._q: queue.Queue = queue.Queue()
        self.transfers = 0
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            req = self._q.get()
            if req is None:
                return
            kind, slot, payload, done = req
            if self.latency_us > 0:
                time.sleep(self.latency_us * 1e-6)
            try:
                if kind == "put":
                    self.store.put(slot, payload)
                    done.result = None
                else:
                    done.result = self.store.get(slot)
            except BaseException as e:  # surfaced on wait()
                done.error = e
            self.transfers += 1
            done.set()

    def submit_put(self, slot: int, arr: np.ndarray) -> "threading.Event":
        done = threading.Event()
        done.result = None
        done.error = None
        # snapshot now: the caller is free to drop its buffer immediately
        self._q.put(("put", slot, arr.copy(), done))
        return done

    def submit_get(self, slot: int) -> "threading.Event":
        done = threading.Event()
        done.result = None
        done.error = None
        self._q.put(("get", slot, None, done))
        return done

    @staticmethod
    def wait(done: "threading.Event"):
        done.wait()
        if done.error is not None:
            raise done.error
        return done.result

    def shutdown(self):
        self._q.put(None)
        self._thread.join(timeout=10)


def prefetch_schedule(n_segments: int, lookahead: int) -> list[list[int]]:
    """Which slots are issued at each backward-begin, newest segment first.

    Element j (for backward of segment n-1-j) lists slots issued at that
    point.  Union over all elements is every slot exactly once; slot s is
    issued no later than backward-begin of segment s, and lookahead segments
    earlier when possible.
    """
    if lookahead < 1:
        raise ConfigError(f"prefetch lookahead must be >= 1, got {lookahead}")
    if n_segments < 0:
        raise ConfigError("negative segment count")
    out = []
    next_to_issue = n_segments - 1
    for k in range(n_segments - 1, -1, -1):
        batch = []
        while next_to_issue >= max(0, k - lookahead):
            batch.append(next_to_issue)
            next_to_issue -= 1
        out.append(batch)
    return out


class PrefetchPipeline:
    """Issues store fetches ahead of backward progress.

    on_backward_begin(k) keeps every slot down to k - lookahead in flight.
    take(k) waits for slot k.  A take for a slot that was never issued is a
    demand fetch: it is counted as a stall, issued on the spot, and waited
    for.  With lookahead >= 1 and begin() called per segment, stalls are
    structurally zero.
    """

    def __init__(self, worker: TransferWorker, n_segments: int, lookahead: int = 2):
        if lookahead < 1:
            raise ConfigError(f"prefetch lookahead must be >= 1, got {lookahead}")
        self.worker = worker
        self.n = int(n_segments)
        self.lookahead = int(lookahead)
        self._pending: dict[int, threading.Event] = {}
        self._next_to_issue = self.n - 1
        self.demand_stalls = 0
        self.blocked_waits = 0

    def on_backward_begin(self, k: int) -> None:
        floor = max(0, k - self.lookahead)
        while self._next_to_issue >= floor:
            s = self._next_to_issue
            self._pending[s] = self.worker.submit_get(s)
            self._next_to_issue -= 1

    def take(self, k: int) -> np.ndarray:
        ev = self._pending.pop(k, None)
        if ev is None:
            self.demand_stalls += 1
            ev = self.worker.submit_get(k)
        if not ev.is_set():
            self.blocked_waits += 1
        return TransferWorker.wait(ev)


class OffloadEngine:
    """Coordinates arena, store, worker, and prefetch for one rollout.

    run_segments(fns, z0) applies the segment functions in order under
    no-grad with every input offloaded to the host store, and records one
    tape node per segment whose backward fetches, recomputes, and frees.
    """

    def __init__(self, budget_bytes: int = 1 << 30, lookahead: int = 2,
                 latency_us: float = 0.0, backend: str = "ram",
                 workdir: str | None = None):
        if lookahead < 1:
            raise ConfigError(f"prefetch lookahead must be >= 1, got {lookahead}")
        self.arena = ActivationArena(budget_bytes)
        self.store = HostStore(backend, workdir)
        self.worker = TransferWorker(self.store, latency_us)
        self.lookahead = lookahead
        self.pipeline: PrefetchPipeline | None = None
        self.segments_run = 0
        self.backward_ran = False

    # -- forward ------------------------------------------------------------

    def run_segments(self, fns, z0: ad.Tensor) -> ad.Tensor:
        fns = list(fns)
        n = len(fns)
        self.pipeline = PrefetchPipeline(self.worker, n, self.lookahead)
        if n == 0:
            return z0
        z = z0
        token_in = self.arena.admit(z.values.nbytes)
        writes = []
        for s, fn in enumerate(fns):
            writes.append(self.worker.submit_put(s, z.values))
            z_next, transient_tokens, token_out = self._metered_forward(fn, z)
            # input leaves the device once its host copy is durable
            TransferWorker.wait(writes[-1])
            for tok in transient_tokens:
                self.arena.release(tok)
            self.arena.release(token_in)
            if s > 0:
                z.values = None  # interior latent owned by the engine
            z = self._attach_node(fn, z, z_next, s)
            token_in = token_out
            self.segments_run += 1
        self.arena.release(token_in)  # final output handed to the caller
        return z

    def _metered_forward(self, fn, z: ad.Tensor):
        """no-grad forward of one segment with arena metering of every tensor."""
        admitted: list[tuple[ad.Tensor, int]] = []
        # wrapper shares the input buffer already covered by the input token,
        # so it is created outside the metered scope
        detached = ad.Tensor(z.values, copy=False)

        def observer(t: ad.Tensor):
            admitted.append((t, self.arena.admit(t.values.nbytes)))

        ad.set_alloc_observer(observer)
        try:
            with ad.no_grad():
                out = fn(detached)
        finally:
            ad.set_alloc_observer(None)
        transient_tokens = []
        token_out = None
        for t, tok in admitted:
            if t is out:
                token_out = tok
            else:
                transient_tokens.append(tok)
        if token_out is None:
            # fn returned a pre-existing tensor (identity segment)
            token_out = self.arena.admit(out.values.nbytes)
        return out, transient_tokens, token_out

    def _attach_node(self, fn, x: ad.Tensor, out: ad.Tensor, slot: int) -> ad.Tensor:
        engine = self

        def rule(g, saved, acc):
            engine.backward_ran = True
            engine.pipeline.on_backward_begin(slot)
            xv = engine.pipeline.take(slot)
            fetch_token = engine.arena.admit(xv.nbytes)
            start_gen = ad.current_gen() + 1
            admitted: list[tuple[ad.Tensor, int]] = []
            x_re = ad.Tensor(xv, requires_grad=True, copy=False)  # covered by fetch_token

            def observer(t: ad.Tensor):
                admitted.append((t, engine.arena.admit(t.values.nbytes)))

            ad.set_alloc_observer(observer)
            try:
                with ad.enable_grad():
                    y_re = fn(x_re)
                    sub = ad.nested_backward(y_re, g, min_gen=start_gen)
            finally:
                ad.set_alloc_observer(None)
            for _, tok in admitted:
                engine.arena.release(tok)
            engine.arena.release(fetch_token)
            gx = sub.pop(x_re, None)
            if gx is not None:
                acc(x, gx)
            for p, gp in sub.items():
                acc(p, gp)

        return ad.record_segment("offload_segment", out.values, x, (), rule)

    # -- reporting ----------------------------------------------------------

    @property
    def demand_stalls(self) -> int:
        return 0 if self.pipeline is None else self.pipeline.demand_stalls

    @property
    def blocked_waits(self) -> int:
        return 0 if self.pipeline is None else self.pipeline.blocked_waits

    @property
    def high_water(self) -> int:
        return self.arena.high_water

    def close(self):
        self.worker.shutdown()
        self.store.close()
