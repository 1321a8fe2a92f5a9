"""Episode-synchronized training: worker loop, coordinator, wire protocol.

Topology is a star: one coordinator, N workers, speaking length-prefixed
binary frames over TCP.  Workers run the same episode loop as the sequential
trainer; in lockstep mode every training step all-reduces gradients through
the coordinator (arithmetic mean in worker-id order), and at the end of every
episode the coordinator broadcasts canonical parameters which each worker
verifies by checksum.  With one worker the distributed trajectory is
bit-identical to the sequential one.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import agent
from .actions import ActionConfig, enumerate_actions
from .agent import (
    AdamState,
    EpsilonSchedule,
    ModelParams,
    ReplayBuffer,
    Transition,
    select_action,
    serialize_params,
    deserialize_params,
    train_step,
)
from .fingerprint import compute_features, fingerprint_from_table, incremental_features
from .molgraph import parse_smiles
from .predictors import PredictorCache, predict
from .reward import RewardConfig, reward


class StragglerTimeout(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Wire protocol: 4-byte big-endian length prefix, kind byte, payload
# ---------------------------------------------------------------------------

MSG_REGISTER = 1
MSG_ASSIGN = 2
MSG_GRADIENT = 3
MSG_PARAMS = 4
MSG_BARRIER = 5
MSG_SHUTDOWN = 6


def send_message(sock, kind, payload=b""):
    frame = struct.pack("!IB", len(payload) + 1, kind) + payload
    sock.sendall(frame)


def _recvall(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        buf += chunk
    return buf


def recv_message(sock):
    try:
        header = _recvall(sock, 5)
    except socket.timeout as exc:
        raise StragglerTimeout("timed out waiting for a peer") from exc
    length, kind = struct.unpack("!IB", header)
    try:
        payload = _recvall(sock, length - 1)
    except socket.timeout as exc:
        raise StragglerTimeout("timed out waiting for a peer") from exc
    return kind, payload


# ---------------------------------------------------------------------------
# Molecule sharding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkerAssignment:
    worker_id: int
    molecules: tuple  # SMILES strings
    seed: int


def shard_molecules(dataset, n_workers, batch_per_worker=None, rng=None, base_seed=0):
    """Deterministic near-equal partition of the dataset across workers."""
    if n_workers < 1:
        raise ValueError("need at least one worker")
    mols = list(dataset)
    if rng is not None:
        rng.shuffle(mols)
    if batch_per_worker is not None and batch_per_worker * n_workers != len(mols):
        if abs(len(mols) - batch_per_worker * n_workers) > n_workers:
            raise ValueError(
                f"{len(mols)} molecules cannot be split as {n_workers} x "
                f"{batch_per_worker}"
            )
    shards = [[] for _ in range(n_workers)]
    for i, m in enumerate(mols):
        shards[i % n_workers].append(m)
    return [
        WorkerAssignment(w, tuple(shards[w]), base_seed + w)
        for w in range(n_workers)
    ]


# ---------------------------------------------------------------------------
# Worker episode loop (shared by sequential and distributed runs)
# ---------------------------------------------------------------------------


@dataclass
class LoopConfig:
    max_steps: int = 10
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    reward: RewardConfig = field(default_factory=RewardConfig)
    actions: ActionConfig = field(default_factory=ActionConfig)
    train_batch: int = 128
    replay_capacity: int = 4000
    learning_rate: float = 1e-4
    discount: float = 1.0
    successor_cap: int = 256
    cache_capacity: int = 100_000
    target_update_episodes: int = 1


class LocalSync:
    """Single-process sync: identity all-reduce, no broadcast."""

    def average_gradients(self, grads_w, grads_b):
        return grads_w, grads_b

    def end_episode(self, params, episode):
        return None  # keep local parameters

    def shutdown(self):
        pass


class _MolState:
    def __init__(self, molecule_id, mol):
        self.molecule_id = molecule_id
        self.initial = mol
        self.reset()

    def reset(self):
        self.mol = self.initial
        self.table = None
        self.pending = None
        self.steps = 0
        self.last = None  # (action_kind, reward, props)
        self.episode_best = None


class WorkerLoop:
    """Batched per-episode optimization of a worker's molecule shard."""

    def __init__(self, worker_id, smiles_list, params, cfg, backend, rng,
                 cache=None):
        self.worker_id = worker_id
        self.cfg = cfg
        self.backend = backend
        self.rng = rng
        self.params = params.copy()
        self.target = params.copy()
        self.adam = AdamState.for_params(self.params)
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.cache = cache if cache is not None else PredictorCache(cfg.cache_capacity)
        self.states = [
            _MolState(i, parse_smiles(s)) for i, s in enumerate(smiles_list)
        ]
        self.smiles_list = list(smiles_list)
        self.metrics = []
        # molecule_id -> dict with best-visited and endpoint results
        self.best = {
            st.molecule_id: {"best_reward": None, "best_smiles": None,
                             "best_bde": None, "best_ip": None,
                             "end_smiles": None, "end_reward": None}
            for st in self.states
        }
        self._fp_cache = OrderedDict()  # canonical SMILES -> fingerprint bits

    # -- fingerprint helper with a bounded memo ---------------------------

    def _successor_bits(self, state, action):
        bits = self._fp_cache.get(action.smiles)
        if bits is None:
            table = incremental_features(state.mol, state.table, action)
            bits = fingerprint_from_table(table).bits
            self._fp_cache[action.smiles] = bits
            if len(self._fp_cache) > 200_000:
                self._fp_cache.popitem(last=False)
        else:
            self._fp_cache.move_to_end(action.smiles)
        return bits

    def _subsample(self, feats):
        if len(feats) <= self.cfg.successor_cap:
            return tuple(feats)
        idx = sorted(self.rng.sample(range(len(feats)), self.cfg.successor_cap))
        return tuple(feats[i] for i in idx)

    def run_episode(self, episode, sync):
        cfg = self.cfg
        eps = cfg.epsilon(episode)
        for st in self.states:
            st.reset()
            st.table = compute_features(st.mol)
        for t in range(1, cfg.max_steps + 1):
            self.run_step(t, eps)
        # flush terminal transitions
        for st in self.states:
            if st.pending is not None:
                self.buffer.push(Transition(*st.pending, (), True))
                st.pending = None
        batch = self.buffer.sample(cfg.train_batch, self.rng)
        loss = train_step(
            self.params,
            self.target,
            batch,
            self.adam,
            lr=cfg.learning_rate,
            discount=cfg.discount,
            average_gradients=sync.average_gradients,
        )
        new_params = sync.end_episode(self.params, episode)
        if new_params is not None:
            self.params = new_params
        if (episode + 1) % cfg.target_update_episodes == 0:
            self.target = self.params.copy()
        self._record(episode, eps, loss)
        return loss

    def run_step(self, t, eps):
        """Advance every molecule exactly one step (batched modification)."""
        cfg = self.cfg
        k = cfg.max_steps - t  # steps remaining after this modification
        for st in self.states:
            aset = enumerate_actions(st.mol, cfg.actions)
            feats = [
                make_features_from_bits(self._successor_bits(st, a), k)
                for a in aset
            ]
            # finish the previous step's transition with this action set
            if st.pending is not None:
                self.buffer.push(
                    Transition(*st.pending, self._subsample(feats), False)
                )
                st.pending = None
            idx = select_action(self.params, aset, feats, eps, self.rng)
            action = aset[idx]
            props = predict(action.smiles, self.backend, self.cache)
            r = reward(props, st.initial, action.result, k, cfg.reward)
            st.pending = (feats[idx], r)
            st.table = incremental_features(st.mol, st.table, action)
            st.mol = action.result
            st.steps = t
            st.last = (action.kind, r, props, action.smiles)
            if st.episode_best is None or r > st.episode_best[0]:
                st.episode_best = (r, action.smiles, props)
            rec = self.best[st.molecule_id]
            if rec["best_reward"] is None or r > rec["best_reward"]:
                rec.update(
                    best_reward=r,
                    best_smiles=action.smiles,
                    best_bde=props.bde,
                    best_ip=props.ip,
                )

    def _record(self, episode, eps, loss):
        for st in self.states:
            kind, r, props, smiles = st.last
            self.metrics.append(
                {
                    "episode": episode,
                    "worker": self.worker_id,
                    "molecule_id": st.molecule_id,
                    "step": st.steps,
                    "action_kind": kind,
                    "reward": r,
                    "episode_best": st.episode_best[0],
                    "bde": "" if props.bde is None else props.bde,
                    "ip": props.ip,
                    "valid3d": int(props.valid3d),
                    "epsilon": eps,
                    "loss": loss,
                }
            )
            rec = self.best[st.molecule_id]
            rec["end_smiles"] = smiles
            rec["end_reward"] = r


def make_features_from_bits(bits, steps_remaining):
    return (bits, float(steps_remaining))


# ---------------------------------------------------------------------------
# Gradient blobs
# ---------------------------------------------------------------------------


def grads_to_bytes(grads_w, grads_b):
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(np.ascontiguousarray(gw, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(gb, dtype="<f8").tobytes())
    return b"".join(parts)


def grads_from_bytes(blob, sizes):
    params = agent.params_from_bytes(blob, sizes)
    return params.weights, params.biases


def average_gradient_blobs(blobs_by_worker):
    """Elementwise mean over workers, reduced in ascending worker-id order."""
    ordered = [blobs_by_worker[w] for w in sorted(blobs_by_worker)]
    acc = np.frombuffer(ordered[0], dtype="<f8").copy()
    for blob in ordered[1:]:
        acc += np.frombuffer(blob, dtype="<f8")
    acc /= len(ordered)
    return acc.astype("<f8").tobytes()


def all_reduce_gradients(grad_sets):
    """Pure mean of per-worker (grads_w, grads_b) lists, worker order fixed."""
    n = len(grad_sets)
    gw0, gb0 = grad_sets[0]
    avg_w = [g.copy() for g in gw0]
    avg_b = [g.copy() for g in gb0]
    for gw, gb in grad_sets[1:]:
        for a, g in zip(avg_w, gw):
            a += g
        for a, g in zip(avg_b, gb):
            a += g
    for a in avg_w:
        a /= n
    for a in avg_b:
        a /= n
    return avg_w, avg_b


# ---------------------------------------------------------------------------
# Coordinator / distributed workers
# ---------------------------------------------------------------------------


@dataclass
class SyncOutcome:
    episode: int
    checksums: dict  # worker_id -> post-sync checksum


class Coordinator:
    """Star-topology coordinator for synchronous training.

    ``sync_mode`` is "lockstep" (gradients averaged at every training step,
    episode-end broadcast re-asserts worker 0's parameters) or "episode"
    (no gradient averaging; parameters averaged across workers at episode
    end).
    """

    def __init__(self, n_workers, host="127.0.0.1", port=0, sync_mode="lockstep",
                 timeout=120.0):
        if sync_mode not in ("lockstep", "episode"):
            raise ValueError(f"unknown sync mode {sync_mode!r}")
        self.n_workers = n_workers
        self.sync_mode = sync_mode
        self.timeout = timeout
        self.listener = socket.create_server((host, port))
        self.listener.settimeout(timeout)
        self.address = self.listener.getsockname()
        self.conns = {}
        self.sync_log = []

    def accept_workers(self):
        while len(self.conns) < self.n_workers:
            conn, _ = self.listener.accept()
            conn.settimeout(self.timeout)
            kind, payload = recv_message(conn)
            if kind != MSG_REGISTER:
                raise ProtocolError(f"expected Register, got kind {kind}")
            (worker_id,) = struct.unpack("!I", payload)
            if worker_id in self.conns:
                raise ProtocolError(f"duplicate worker id {worker_id}")
            self.conns[worker_id] = conn

    def send_assignments(self, assignments, loop_payload):
        for a in assignments:
            payload = json.dumps(
                {
                    "worker_id": a.worker_id,
                    "molecules": list(a.molecules),
                    "seed": a.seed,
                    **loop_payload,
                }
            ).encode()
            send_message(self.conns[a.worker_id], MSG_ASSIGN, payload)

    def gradient_round(self):
        blobs = {}
        for w, conn in self.conns.items():
            kind, payload = recv_message(conn)
            if kind != MSG_GRADIENT:
                raise ProtocolError(f"expected Gradient, got kind {kind}")
            blobs[w] = payload
        averaged = average_gradient_blobs(blobs)
        for w in sorted(self.conns):
            send_message(self.conns[w], MSG_GRADIENT, averaged)

    def episode_sync(self, episode):
        """Collect parameters, broadcast the canonical set, verify checksums."""
        blobs = {}
        for w, conn in self.conns.items():
            kind, payload = recv_message(conn)
            if kind != MSG_PARAMS:
                raise ProtocolError(f"expected Params, got kind {kind}")
            blobs[w] = payload
        if self.sync_mode == "lockstep":
            canonical = blobs[min(blobs)]
        else:
            models = {w: deserialize_params(b) for w, b in blobs.items()}
            first = models[min(models)]
            acc = [np.zeros_like(a) for a in first.arrays()]
            for w in sorted(models):
                for a, g in zip(acc, models[w].arrays()):
                    a += g
            for a in acc:
                a /= len(models)
            avg = ModelParams(acc[0::2], acc[1::2])
            canonical = serialize_params(avg)
        for w in sorted(self.conns):
            send_message(self.conns[w], MSG_PARAMS, canonical)
        checksums = {}
        for w, conn in self.conns.items():
            kind, payload = recv_message(conn)
            if kind != MSG_BARRIER:
                raise ProtocolError(f"expected Barrier, got kind {kind}")
            ep, checksum = struct.unpack("!IQ", payload)
            if ep != episode:
                raise ProtocolError(f"barrier for episode {ep}, expected {episode}")
            checksums[w] = checksum
        if len(set(checksums.values())) != 1:
            raise ProtocolError(f"post-sync checksum divergence: {checksums}")
        self.sync_log.append(SyncOutcome(episode, checksums))
        return checksums

    def run(self, episodes, steps_per_episode_train=1):
        for episode in range(episodes):
            if self.sync_mode == "lockstep":
                for _ in range(steps_per_episode_train):
                    self.gradient_round()
            self.episode_sync(episode)

    def shutdown(self):
        for conn in self.conns.values():
            try:
                send_message(conn, MSG_SHUTDOWN)
            except OSError:
                pass
            conn.close()
        self.listener.close()


class RemoteSync:
    """Worker-side sync driver talking to the coordinator."""

    def __init__(self, host, port, worker_id, sizes, sync_mode="lockstep",
                 timeout=120.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(timeout)
        self.worker_id = worker_id
        self.sizes = sizes
        self.sync_mode = sync_mode
        send_message(self.sock, MSG_REGISTER, struct.pack("!I", worker_id))

    def receive_assignment(self):
        kind, payload = recv_message(self.sock)
        if kind != MSG_ASSIGN:
            raise ProtocolError(f"expected Assign, got kind {kind}")
        return json.loads(payload.decode())

    def average_gradients(self, grads_w, grads_b):
        if self.sync_mode != "lockstep":
            return grads_w, grads_b
        send_message(self.sock, MSG_GRADIENT, grads_to_bytes(grads_w, grads_b))
        kind, payload = recv_message(self.sock)
        if kind != MSG_GRADIENT:
            raise ProtocolError(f"expected Gradient, got kind {kind}")
        return grads_from_bytes(payload, self.sizes)

    def end_episode(self, params, episode):
        send_message(self.sock, MSG_PARAMS, serialize_params(params))
        kind, payload = recv_message(self.sock)
        if kind != MSG_PARAMS:
            raise ProtocolError(f"expected Params, got kind {kind}")
        new_params = deserialize_params(payload)
        send_message(
            self.sock,
            MSG_BARRIER,
            struct.pack("!IQ", episode, new_params.checksum()),
        )
        return new_params

    def shutdown(self):
        self.sock.close()


def run_distributed(assignments, params, loop_cfg, backend_factory, episodes,
                    sync_mode="lockstep", timeout=120.0, host="127.0.0.1"):
    """Run coordinator plus one worker thread per assignment; returns the
    worker loops (metrics, best molecules, final parameters)."""
    coord = Coordinator(len(assignments), host=host, sync_mode=sync_mode,
                        timeout=timeout)
    loops = [None] * len(assignments)
    errors = []

    def worker_main(assignment):
        try:
            sync = RemoteSync(
                coord.address[0], coord.address[1], assignment.worker_id,
                params.sizes, sync_mode, timeout,
            )
            import random as _random

            loop = WorkerLoop(
                assignment.worker_id,
                assignment.molecules,
                params,
                loop_cfg,
                backend_factory(),
                _random.Random(assignment.seed),
            )
            loops[assignment.worker_id] = loop
            for episode in range(episodes):
                loop.run_episode(episode, sync)
            sync.shutdown()
        except Exception as exc:  # surfaced after join
            errors.append((assignment.worker_id, exc))

    threads = [
        threading.Thread(target=worker_main, args=(a,), daemon=True)
        for a in assignments
    ]
    for t in threads:
        t.start()
    coord.accept_workers()
    try:
        coord.run(episodes)
    finally:
        coord.shutdown()
    for t in threads:
        t.join(timeout=timeout)
    if errors:
        raise errors[0][1]
    return coord, loops


def run_sequential(smiles_list, params, loop_cfg, backend, episodes, seed):
    """Single-process reference trainer sharing the worker loop code."""
    import random as _random

    loop = WorkerLoop(0, smiles_list, params, loop_cfg, backend, _random.Random(seed))
    sync = LocalSync()
    for episode in range(episodes):
        loop.run_episode(episode, sync)
    return loop
