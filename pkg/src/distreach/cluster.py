"""Replica-style cluster config and worker spawning.

Three modes share one registration handshake (Hello -> AssignConfig):

* ``in-process``: workers are threads talking over queue channels. Frames
  still pass through the byte codec.
* ``local-processes``: ``python -m distreach.worker`` subprocesses connecting
  back over TCP.
* ``remote``: only listen; workers started elsewhere connect in.
"""

from __future__ import annotations

import logging
import math
import socket
import subprocess
import sys
import threading
import time
import warnings
from dataclasses import dataclass, field
from typing import Any

import yaml

from .kinematics import ReacherEnvSpec
from .ppo import PpoConfig
from .transport import (Channel, ConnectionClosed, Hello, MsgType, ProtocolError, SocketChannel,
                        channel_pair)
from .worker import assignment_payload, serve_channel

log = logging.getLogger(__name__)

MODES = ("in-process", "local-processes", "remote")
MAX_WORKERS_PER_REPLICA = 4


class ClusterConfigError(ValueError):
    pass


class ClusterError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    replicas: int
    workers_per_replica: int = 1
    cpu_limit: str = ""
    memory_limit: str = ""
    listen_address: str = "127.0.0.1:0"
    mode: str = "in-process"
    register_timeout: float = 60.0

    def __post_init__(self):
        if isinstance(self.replicas, bool) or not isinstance(self.replicas, int) or self.replicas < 1:
            raise ClusterConfigError(f"replicas must be an integer >= 1, got {self.replicas!r}")
        wpr = self.workers_per_replica
        if isinstance(wpr, bool) or not isinstance(wpr, int) or wpr < 1:
            raise ClusterConfigError(f"workers_per_replica must be an integer >= 1, got {wpr!r}")
        if wpr > MAX_WORKERS_PER_REPLICA:
            raise ClusterConfigError(
                f"workers_per_replica={wpr}: a replica (machine) hosts at most "
                f"{MAX_WORKERS_PER_REPLICA} workers")
        if self.mode not in MODES:
            raise ClusterConfigError(f"mode must be one of {', '.join(MODES)}")

    @property
    def total_workers(self) -> int:
        return self.replicas * self.workers_per_replica

    @classmethod
    def for_workers(cls, n: int, mode: str = "in-process", **kw) -> "ClusterConfig":
        """Fewest replicas that split ``n`` workers evenly, at most 4 per replica."""
        if n < 1:
            raise ClusterConfigError("need at least one worker")
        replicas = math.ceil(n / MAX_WORKERS_PER_REPLICA)
        while n % replicas:
            replicas += 1
        return cls(replicas, n // replicas, mode=mode, **kw)


_FLAT_KEYS = {"replicas", "workers_per_replica", "cpu", "memory", "cpu_limit", "memory_limit",
              "listen_address", "mode", "image", "register_timeout", "spec", "apiVersion", "kind",
              "metadata"}
_SPEC_KEYS = {"replicas", "workers_per_replica", "template", "selector", "spec", "containers",
              "strategy", "metadata"}


def _find_containers(node: Any) -> list:
    if isinstance(node, dict):
        if isinstance(node.get("containers"), list):
            return node["containers"]
        for value in node.values():
            found = _find_containers(value)
            if found:
                return found
    return []


_ELIDED = "_elided"


def _fill_elisions(text: str) -> str:
    """Turn ``...`` lines into placeholder keys when deeper lines follow, else drop them."""
    lines = text.splitlines()
    out = []
    for i, line in enumerate(lines):
        if line.strip() != "...":
            out.append(line)
            continue
        indent = len(line) - len(line.lstrip())
        nxt = next((ln for ln in lines[i + 1:] if ln.strip() and ln.strip() != "..."), "")
        if len(nxt) - len(nxt.lstrip()) > indent:
            out.append(" " * indent + f"{_ELIDED}{i}:")
    return "\n".join(out)


def parse_cluster_config(text: str) -> ClusterConfig:
    """Parse a flat or Kubernetes-deployment-shaped cluster file.

    ``...`` lines (elisions in the deployment listing style) are tolerated.
    ``image`` is accepted and ignored; cpu/memory limits are recorded but not
    enforced.
    """
    cleaned = _fill_elisions(text)
    try:
        doc = yaml.safe_load(cleaned)
    except yaml.YAMLError as exc:
        raise ClusterConfigError(f"cluster config is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ClusterConfigError("cluster config must be a key-value document")

    for key in sorted(k for k in set(doc) - _FLAT_KEYS if not str(k).startswith(_ELIDED)):
        warnings.warn(f"cluster config: ignoring unknown key {key!r}", stacklevel=2)
    spec = doc.get("spec") if isinstance(doc.get("spec"), dict) else {}
    for key in sorted(k for k in set(spec) - _SPEC_KEYS if not str(k).startswith(_ELIDED)):
        warnings.warn(f"cluster config: ignoring unknown key spec.{key}", stacklevel=2)

    replicas = doc.get("replicas", spec.get("replicas"))
    if replicas is None:
        raise ClusterConfigError("cluster config is missing 'replicas'")
    limits: dict = {}
    containers = _find_containers(spec)
    if containers and isinstance(containers[0], dict):
        limits = (containers[0].get("resources") or {}).get("limits") or {}
    kw: dict[str, Any] = {
        "replicas": replicas,
        "workers_per_replica": doc.get("workers_per_replica", spec.get("workers_per_replica", 1)),
        "cpu_limit": str(doc.get("cpu_limit", doc.get("cpu", limits.get("cpu", "")))),
        "memory_limit": str(doc.get("memory_limit", doc.get("memory", limits.get("memory", "")))),
    }
    for key in ("listen_address", "mode"):
        if key in doc:
            kw[key] = str(doc[key])
    if "register_timeout" in doc:
        kw["register_timeout"] = float(doc["register_timeout"])
    return ClusterConfig(**kw)


def load_cluster_config(path: str) -> ClusterConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_cluster_config(fh.read())


# ---------------------------------------------------------------------------
# handles
# ---------------------------------------------------------------------------

@dataclass
class WorkerHandle:
    worker_id: int
    channel: Channel
    kind: str
    thread: "_WorkerThread | None" = None
    process: subprocess.Popen | None = None
    exit_code: int | None = None
    pid: int = 0


@dataclass
class Cluster:
    config: ClusterConfig
    env: ReacherEnvSpec
    cfg: PpoConfig
    seed: int
    workers: dict[int, WorkerHandle] = field(default_factory=dict)
    address: tuple[str, int] | None = None
    _listener: socket.socket | None = None
    _spawned: list = field(default_factory=list)      # channels and processes, registered or not
    _report: dict[int, str] | None = None

    @property
    def channels(self) -> dict[int, Channel]:
        return {wid: self.workers[wid].channel for wid in sorted(self.workers)}

    def __enter__(self) -> "Cluster":
        return self

    def __exit__(self, *exc) -> None:
        shutdown_cluster(self)


def _register(pending: list[tuple[Channel, Hello, Any]], cluster: Cluster) -> None:
    """Assign ids 0..N-1 (requested ids honored when free) and send AssignConfig."""
    n = cluster.config.total_workers
    taken: set[int] = set()
    chosen: list[int] = []
    for _, hello, _ in pending:
        wid = hello.requested_id if 0 <= hello.requested_id < n and hello.requested_id not in taken else -1
        chosen.append(wid)
        if wid >= 0:
            taken.add(wid)
    free = iter(i for i in range(n) if i not in taken)
    for (chan, hello, extra), wid in zip(pending, chosen):
        wid = wid if wid >= 0 else next(free)
        chan.send(MsgType.ASSIGN_CONFIG, assignment_payload(wid, cluster.env, cluster.cfg, cluster.seed))
        handle = WorkerHandle(wid, chan, extra["kind"], thread=extra.get("thread"),
                              process=extra.get("process"), pid=hello.pid)
        cluster.workers[wid] = handle


def _expect_hello(chan: Channel, timeout: float) -> Hello:
    frame = chan.recv(timeout)
    if frame.msg_type != MsgType.HELLO:
        raise ProtocolError(f"expected Hello, got {frame.msg_type.name}")
    return Hello.decode(frame.payload)


def spawn_cluster(config: ClusterConfig, env: ReacherEnvSpec, cfg: PpoConfig, seed: int,
                  worker_cmd: list[str] | None = None) -> Cluster:
    """Start ``config.total_workers`` workers and register them.

    Any failure tears everything down before raising :class:`ClusterError`.
    """
    cluster = Cluster(config, env, cfg, int(seed))
    try:
        if config.mode == "in-process":
            _spawn_threads(cluster)
        else:
            _spawn_sockets(cluster, worker_cmd)
    except BaseException:
        _teardown(cluster)
        raise
    return cluster


class _WorkerThread(threading.Thread):
    def __init__(self, channel: Channel, requested_id: int):
        super().__init__(name=f"worker-{requested_id}", daemon=True)
        self.channel = channel
        self.requested_id = requested_id
        self.exit_code: int | None = None

    def run(self) -> None:
        self.exit_code = serve_channel(self.channel, self.requested_id)


def _spawn_threads(cluster: Cluster) -> None:
    pending = []
    for i in range(cluster.config.total_workers):
        ours, theirs = channel_pair()
        cluster._spawned.append(ours)
        thread = _WorkerThread(theirs, i)
        thread.start()
        try:
            hello = _expect_hello(ours, cluster.config.register_timeout)
        except (TimeoutError, ConnectionClosed, ProtocolError) as exc:
            raise ClusterError(f"worker thread {i} did not register: {exc}") from exc
        pending.append((ours, hello, {"kind": "thread", "thread": thread}))
    _register(pending, cluster)


def _spawn_sockets(cluster: Cluster, worker_cmd: list[str] | None) -> None:
    cfg = cluster.config
    host, _, port = cfg.listen_address.rpartition(":")
    listener = socket.create_server((host or "127.0.0.1", int(port or 0)))
    cluster._listener = listener
    cluster.address = listener.getsockname()[:2]
    n = cfg.total_workers
    procs: list[subprocess.Popen] = []
    cluster._spawned.append(procs)
    if cfg.mode == "local-processes":
        base = worker_cmd or [sys.executable, "-m", "distreach.worker"]
        for i in range(n):
            cmd = base + ["--connect", f"{cluster.address[0]}:{cluster.address[1]}", "--worker-id", str(i)]
            try:
                procs.append(subprocess.Popen(cmd))
            except OSError as exc:
                raise ClusterError(f"could not spawn worker {i} ({cmd[0]}): {exc}") from exc
    else:
        log.warning("waiting for %d remote workers on %s:%d", n, *cluster.address)

    deadline = time.monotonic() + cfg.register_timeout
    pending = []
    listener.settimeout(0.2)
    while len(pending) < n:
        for i, p in enumerate(procs):
            if p.poll() is not None and not any(x[2].get("process") is p for x in pending):
                raise ClusterError(f"worker process {i} (pid {p.pid}) exited with status "
                                   f"{p.returncode} before registering")
        if time.monotonic() > deadline:
            raise ClusterError(f"only {len(pending)} of {n} workers registered within "
                               f"{cfg.register_timeout:.0f}s")
        try:
            conn, _ = listener.accept()
        except socket.timeout:
            continue
        conn.setblocking(True)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        chan = SocketChannel(conn)
        cluster._spawned.append(chan)
        try:
            hello = _expect_hello(chan, max(1.0, deadline - time.monotonic()))
        except (TimeoutError, ConnectionClosed, ProtocolError) as exc:
            log.warning("dropping connection without a valid Hello: %s", exc)
            chan.close()
            continue
        proc = next((p for p in procs if p.pid == hello.pid), None)
        pending.append((chan, hello, {"kind": "process" if proc else "remote", "process": proc}))
    _register(pending, cluster)


# ---------------------------------------------------------------------------
# shutdown
# ---------------------------------------------------------------------------

def _teardown(cluster: Cluster) -> None:
    for item in cluster._spawned:
        for obj in item if isinstance(item, list) else [item]:
            if isinstance(obj, subprocess.Popen):
                if obj.poll() is None:
                    obj.kill()
                    obj.wait()
            else:
                obj.close()
    if cluster._listener is not None:
        cluster._listener.close()


def shutdown_cluster(cluster: Cluster, timeout: float = 10.0) -> dict[int, str]:
    """Send Shutdown to every worker and wait for it to exit.

    Returns ``{worker_id: status}`` with status ``clean``, ``exit <code>``
    (also for workers that had already died), ``absent`` (gone, status
    unknown) or ``forced`` (killed after the timeout).
    A second call returns the cached report.
    """
    if cluster._report is not None:
        return cluster._report
    report: dict[int, str] = {}
    for wid in sorted(cluster.workers):
        handle = cluster.workers[wid]
        alive = True
        if handle.process is not None and handle.process.poll() is not None:
            alive = False
        if handle.thread is not None and not handle.thread.is_alive():
            alive = False
        if alive:
            try:
                handle.channel.send(MsgType.SHUTDOWN)
            except ConnectionClosed:
                alive = False
        if alive:
            report[wid] = ""
        else:
            code = None
            if handle.process is not None:
                code = handle.process.returncode
            elif handle.thread is not None:
                code = handle.thread.exit_code
            handle.exit_code = code
            report[wid] = "absent" if code is None else ("clean" if code == 0 else f"exit {code}")
    deadline = time.monotonic() + timeout
    for wid in sorted(cluster.workers):
        if report[wid] != "":
            continue
        handle = cluster.workers[wid]
        if handle.thread is not None:
            handle.thread.join(max(0.0, deadline - time.monotonic()))
            if handle.thread.is_alive():
                # threads cannot be killed; closing the channel makes the loop exit
                handle.channel.close()
                report[wid] = "forced"
                continue
            code = handle.thread.exit_code
        elif handle.process is not None:
            try:
                code = handle.process.wait(max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                handle.process.kill()
                handle.process.wait()
                report[wid] = "forced"
                continue
        else:
            code = 0  # remote worker: Shutdown was delivered, its exit is not observable
        handle.exit_code = code
        report[wid] = "clean" if code == 0 else f"exit {code}"
    _teardown(cluster)
    cluster._report = report
    return report
