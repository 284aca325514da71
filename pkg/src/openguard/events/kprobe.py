"""eBPF kprobe source (BCC) with leaf-first path fragment transport.

The probe walks the opened file's dentry chain towards the filesystem root and
emits one record per component, leaf first, followed by a root marker that
carries the component count. :class:`FragmentAssembler` stitches the records of
one open back together in user space.

Paths are relative to the root of the mount holding the file; scopes on the
root filesystem are reported exactly.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

from ..errors import ProbeAttachFailed
from .model import BACKUP_SUFFIX, FileOpenEvent, PathFragmentBatch, ProtectedScope, SourceKind, \
    is_backup_artifact, reconstruct_path
from .stream import QueuedStream

log = logging.getLogger(__name__)

# filesystem-agnostic default; the xfs-specific hook is "xfs_file_open"
DEFAULT_SYMBOL = "vfs_open"
ASSEMBLY_TIMEOUT_NS = 100_000_000
MAX_DEPTH = 32
NAME_LEN = 64

BPF_PROGRAM = r"""
#include <uapi/linux/ptrace.h>
#include <linux/fs.h>
#include <linux/dcache.h>
#include <linux/sched.h>

#define MAX_DEPTH %(max_depth)d
#define NAME_LEN %(name_len)d

struct frag_t {
    u32 pid;
    u32 ppid;
    u64 seq;
    u64 ts;
    u32 index;
    u32 is_root;
    char comm[TASK_COMM_LEN];
    char name[NAME_LEN];
};

BPF_PERF_OUTPUT(frags);
BPF_PERCPU_ARRAY(scratch, struct frag_t, 1);
BPF_PERCPU_ARRAY(seqs, u64, 1);

static __always_inline int emit_path(struct pt_regs *ctx, struct dentry *de)
{
    int zero = 0;
    struct frag_t *f = scratch.lookup(&zero);
    u64 *seq = seqs.lookup(&zero);
    if (!f || !seq)
        return 0;
    struct task_struct *task = (struct task_struct *)bpf_get_current_task();
    f->pid = bpf_get_current_pid_tgid() >> 32;
    f->ppid = task->real_parent->tgid;
    f->ts = bpf_ktime_get_ns();
    f->seq = (*seq)++ * 1024 + bpf_get_smp_processor_id();
    bpf_get_current_comm(&f->comm, sizeof(f->comm));
    f->is_root = 0;
    u32 i;
    #pragma unroll
    for (i = 0; i < MAX_DEPTH; i++) {
        struct dentry *parent = de->d_parent;
        if (de == parent)
            break;
        f->index = i;
        bpf_probe_read_kernel_str(&f->name, sizeof(f->name), de->d_name.name);
        frags.perf_submit(ctx, f, sizeof(*f));
        de = parent;
    }
    f->index = i;
    f->is_root = 1;
    f->name[0] = 0;
    frags.perf_submit(ctx, f, sizeof(*f));
    return 0;
}

int trace_open(struct pt_regs *ctx, const struct path *path, struct file *file)
{
    return emit_path(ctx, path->dentry);
}
"""


@dataclass(frozen=True, slots=True)
class FragmentRecord:
    pid: int
    seq: int
    index: int
    fragment: str
    is_root: bool = False
    ts_ns: int = 0
    ppid: int = 0
    comm: str = ""


@dataclass
class _Pending:
    first_ts: int
    parts: dict[int, str] = field(default_factory=dict)
    count: int | None = None


class FragmentAssembler:
    """Reassemble leaf-first fragment records keyed by (pid, seq).

    A batch completes when its root marker has arrived and every index below
    the marker's count is present. Batches older than ``timeout_ns`` are
    dropped and counted in ``expired``.
    """

    def __init__(self, timeout_ns: int = ASSEMBLY_TIMEOUT_NS):
        self.timeout_ns = timeout_ns
        self.pending: dict[tuple[int, int], _Pending] = {}
        self.expired = 0

    def feed(self, rec: FragmentRecord, now_ns: int | None = None) -> PathFragmentBatch | None:
        now = rec.ts_ns if now_ns is None else now_ns
        self.expire(now)
        key = (rec.pid, rec.seq)
        p = self.pending.get(key)
        if p is None:
            p = self.pending[key] = _Pending(first_ts=now)
        if rec.is_root:
            p.count = rec.index
        else:
            p.parts[rec.index] = rec.fragment
        if p.count is not None and len(p.parts) >= p.count:
            del self.pending[key]
            if p.count == 0:
                return None
            frags = tuple(p.parts[i] for i in range(p.count))
            return PathFragmentBatch(pid=rec.pid, seq=rec.seq, fragments=frags)
        return None

    def expire(self, now_ns: int) -> int:
        stale = [k for k, p in self.pending.items() if now_ns - p.first_ts > self.timeout_ns]
        for k in stale:
            del self.pending[k]
        self.expired += len(stale)
        return len(stale)


def symbol_available(symbol: str) -> bool:
    try:
        with open("/proc/kallsyms") as fh:
            return any(line.split()[2] == symbol for line in fh if len(line.split()) >= 3)
    except OSError:
        return False


class KprobeSource(QueuedStream):
    def __init__(self, scope: ProtectedScope, suffix: str = BACKUP_SUFFIX, capacity: int = 65536,
                 symbol: str | None = None):
        super().__init__(capacity)
        self.scope = scope
        self.suffix = suffix
        self.symbol = symbol or DEFAULT_SYMBOL
        self.self_pid = os.getpid()
        self.assembler = FragmentAssembler()
        try:
            from bcc import BPF  # type: ignore[import-not-found]
        except ImportError as exc:
            raise ProbeAttachFailed(f"bcc is not installed ({exc})") from None
        if not symbol_available(self.symbol):
            raise ProbeAttachFailed(f"kernel symbol {self.symbol!r} not found")
        try:
            self.bpf = BPF(text=BPF_PROGRAM % {"max_depth": MAX_DEPTH, "name_len": NAME_LEN})
            self.bpf.attach_kprobe(event=self.symbol, fn_name="trace_open")
        except Exception as exc:
            raise ProbeAttachFailed(f"attach to {self.symbol}: {exc}") from None
        self._meta: dict[tuple[int, int], tuple[int, int, str]] = {}
        # BPF timestamps are CLOCK_MONOTONIC already
        self.bpf["frags"].open_perf_buffer(self._on_record, page_cnt=256, lost_cb=self._on_lost)

    def _on_lost(self, n):
        self.dropped += n

    def _on_record(self, cpu, data, size):
        raw = self.bpf["frags"].event(data)
        rec = FragmentRecord(pid=raw.pid, seq=raw.seq, index=raw.index,
                             fragment=raw.name.decode("utf-8", "surrogateescape"),
                             is_root=bool(raw.is_root), ts_ns=raw.ts, ppid=raw.ppid,
                             comm=raw.comm.decode("utf-8", "replace"))
        if rec.pid == self.self_pid:
            return
        self._meta.setdefault((rec.pid, rec.seq), (rec.ts_ns, rec.ppid, rec.comm))
        batch = self.assembler.feed(rec, now_ns=time.monotonic_ns())
        if batch is None:
            return
        ts, ppid, comm = self._meta.pop((rec.pid, rec.seq))
        path = reconstruct_path(batch)
        if self.scope.contains(path) and not is_backup_artifact(path, self.suffix):
            self.publish(FileOpenEvent(pid=rec.pid, ppid=ppid, comm=comm, timestamp=ts, path=path,
                                       source=SourceKind.KERNEL_PROBE))

    def _produce(self):
        while not self._stop.is_set():
            self.bpf.perf_buffer_poll(timeout=200)
            if self.assembler.expire(time.monotonic_ns()):
                for key in [k for k in self._meta if k not in self.assembler.pending]:
                    del self._meta[key]
        self.dropped += self.assembler.expired

    def close(self):
        super().close()
        try:
            self.bpf.cleanup()
        except Exception:
            pass
