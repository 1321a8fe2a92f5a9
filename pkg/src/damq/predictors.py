"""Property prediction: deterministic surrogates, external backends, LRU cache.

All backends answer the same four properties per molecule: lowest O-H bond
dissociation energy (kcal/mol), ionization potential (kcal/mol), a 3D
validity flag, and a synthetic-accessibility score.  Results are cached by
canonical SMILES so isomorphic queries never hit a backend twice.

The built-in surrogates are fixed closed-form stand-ins for the real ML
predictors; the SA proxy is NOT the Ertl score.  External processes plug in
over a newline-delimited JSON protocol (see docs/predictor-protocol.md).
"""

from __future__ import annotations

import json
import shlex
import socket
import subprocess
from collections import OrderedDict
from dataclasses import dataclass

from .molgraph import (
    MolGraph,
    oh_oxygens,
    parse_smiles,
    ring_membership,
    write_smiles,
)
from .actions import NoOhBond


class BackendUnavailable(RuntimeError):
    pass


class BackendTimeout(RuntimeError):
    pass


class MalformedResponse(RuntimeError):
    pass


@dataclass(frozen=True)
class PropertyResult:
    bde: float | None  # kcal/mol; None when the molecule has no O-H bond
    ip: float
    valid3d: bool
    sa: float


# ---------------------------------------------------------------------------
# Surrogates
# ---------------------------------------------------------------------------

BDE_CLAMP = (55.0, 110.0)
IP_CLAMP = (95.0, 220.0)
SA_CLAMP = (1.0, 10.0)


def _clamp(x, lo_hi):
    lo, hi = lo_hi
    return min(max(x, lo), hi)


def surrogate_bde(mol):
    """Deterministic BDE stand-in: hydroxyls get weaker (lower BDE) as the
    neighborhood within two bonds grows and when attached to a ring."""
    oxygens = oh_oxygens(mol)
    if not oxygens:
        raise NoOhBond("BDE undefined without an O-H bond")
    rings = ring_membership(mol)
    scores = []
    for o in oxygens:
        near = mol.distances_from([o], cutoff=2)
        n2 = len(near) - 1
        ring_adj = any(rings.atom_in_ring(nb) for nb in mol.neighbors(o))
        scores.append(100.0 - 2.0 * n2 - 3.0 * (1 if ring_adj else 0))
    return _clamp(min(scores), BDE_CLAMP)


def surrogate_ip(mol):
    """Deterministic IP stand-in, positively coupled to BDE so lowering BDE
    tends to lower IP (the usual trade-off)."""
    try:
        bde = surrogate_bde(mol)
    except NoOhBond:
        bde = 100.0
    return _clamp(130.0 + 0.5 * (bde - 100.0) + 0.8 * mol.n_atoms, IP_CLAMP)


def surrogate_valid3d(mol):
    """3D plausibility rule: reject atoms in 3+ rings and spiro/fused
    three-membered ring pairs sharing an atom."""
    rings = ring_membership(mol)
    if any(c >= 3 for c in rings.atom_ring_count):
        return False
    three = [r for r in rings.rings if len(r) == 3]
    for i in range(len(three)):
        for j in range(i + 1, len(three)):
            if three[i] & three[j]:
                return False
    return True


def surrogate_sa(mol):
    """Size/ring/branching SA proxy in [1,10]; not the Ertl SA score."""
    rings = ring_membership(mol)
    branched = sum(1 for i in range(mol.n_atoms) if mol.degree(i) >= 3)
    score = (
        1.0
        + 0.05 * mol.n_atoms
        + 0.3 * rings.ring_count()
        + 0.5 * branched / mol.n_atoms
    )
    return _clamp(score, SA_CLAMP)


class SurrogateBackend:
    """Pure in-process backend built from the surrogate formulas."""

    def predict(self, smiles_batch):
        out = []
        for smiles in smiles_batch:
            mol = parse_smiles(smiles)
            try:
                bde = surrogate_bde(mol)
            except NoOhBond:
                bde = None
            out.append(
                PropertyResult(
                    bde=bde,
                    ip=surrogate_ip(mol),
                    valid3d=surrogate_valid3d(mol),
                    sa=surrogate_sa(mol),
                )
            )
        return out

    def close(self):
        pass


# ---------------------------------------------------------------------------
# LRU cache
# ---------------------------------------------------------------------------


class PredictorCache:
    """Least-recently-used map canonical SMILES -> PropertyResult."""

    def __init__(self, capacity=100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def get(self, key):
        if key not in self._data:
            return None
        self._data.move_to_end(key)
        return self._data[key]

    def put(self, key, value):
        if key in self._data:
            self._data.move_to_end(key)
        self._data[key] = value
        if len(self._data) > self.capacity:
            self._data.popitem(last=False)

    def keys(self):
        return list(self._data)


def predict(mol_or_smiles, backend, cache=None):
    """Cached single-molecule prediction."""
    if isinstance(mol_or_smiles, MolGraph):
        smiles = write_smiles(mol_or_smiles)
    else:
        smiles = write_smiles(parse_smiles(mol_or_smiles))
    if cache is not None:
        hit = cache.get(smiles)
        if hit is not None:
            cache.hits += 1
            return hit
        cache.misses += 1
    result = backend.predict([smiles])[0]
    if cache is not None:
        cache.put(smiles, result)
    return result


def predict_batch(smiles_batch, backend, cache=None):
    """Cached batch prediction; the backend sees each distinct miss once."""
    results = {}
    missing = []
    for s in smiles_batch:
        if cache is not None:
            hit = cache.get(s)
            if hit is not None:
                cache.hits += 1
                results[s] = hit
                continue
        if s not in results:
            missing.append(s)
            results[s] = None
    if missing:
        if cache is not None:
            cache.misses += len(missing)
        for s, r in zip(missing, backend.predict(missing)):
            results[s] = r
            if cache is not None:
                cache.put(s, r)
    return [results[s] for s in smiles_batch]


# ---------------------------------------------------------------------------
# External process / TCP backends
# ---------------------------------------------------------------------------

PROPS = ("bde", "ip", "valid3d", "sa")


def _decode_response(line):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedResponse(f"bad JSON from backend: {line!r}") from exc
    if not isinstance(obj, dict) or "id" not in obj:
        raise MalformedResponse(f"response missing id: {line!r}")
    try:
        return int(obj["id"]), PropertyResult(
            bde=None if obj.get("bde") is None else float(obj["bde"]),
            ip=float(obj["ip"]),
            valid3d=bool(obj["valid3d"]),
            sa=float(obj["sa"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"bad response fields: {line!r}") from exc


class _StreamBackend:
    """Shared request/response logic over a pair of text streams.

    Requests are newline-delimited JSON objects; responses may arrive in any
    order and are matched back by id.
    """

    def __init__(self, timeout=30.0):
        self.timeout = timeout
        self._next_id = 0

    def _send_line(self, line):
        raise NotImplementedError

    def _recv_line(self):
        raise NotImplementedError

    def predict(self, smiles_batch):
        ids = []
        for smiles in smiles_batch:
            req_id = self._next_id
            self._next_id += 1
            ids.append(req_id)
            self._send_line(
                json.dumps({"id": req_id, "smiles": smiles, "props": list(PROPS)})
            )
        pending = dict.fromkeys(ids)
        waiting = set(ids)
        while waiting:
            line = self._recv_line()
            if not line:
                raise BackendUnavailable("backend closed the stream mid-batch")
            req_id, result = _decode_response(line)
            if req_id not in waiting:
                raise MalformedResponse(f"unexpected response id {req_id}")
            pending[req_id] = result
            waiting.discard(req_id)
        return [pending[i] for i in ids]


class ExecBackend(_StreamBackend):
    """Child-process backend speaking the JSON-lines protocol on stdio."""

    def __init__(self, command, timeout=30.0):
        super().__init__(timeout)
        try:
            self.proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise BackendUnavailable(f"cannot start backend: {exc}") from exc

    def _send_line(self, line):
        if self.proc.poll() is not None:
            raise BackendUnavailable("backend process has exited")
        try:
            self.proc.stdin.write(line + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendUnavailable(f"backend pipe broken: {exc}") from exc

    def _recv_line(self):
        import select

        ready, _, _ = select.select([self.proc.stdout], [], [], self.timeout)
        if not ready:
            raise BackendTimeout(f"no response within {self.timeout}s")
        return self.proc.stdout.readline().rstrip("\n")

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class TcpBackend(_StreamBackend):
    """TCP socket backend speaking the same JSON-lines protocol."""

    def __init__(self, host, port, timeout=30.0):
        super().__init__(timeout)
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BackendUnavailable(f"cannot connect: {exc}") from exc
        self.sock.settimeout(timeout)
        self._rfile = self.sock.makefile("r")

    def _send_line(self, line):
        try:
            self.sock.sendall((line + "\n").encode())
        except OSError as exc:
            raise BackendUnavailable(f"socket send failed: {exc}") from exc

    def _recv_line(self):
        try:
            return self._rfile.readline().rstrip("\n")
        except socket.timeout as exc:
            raise BackendTimeout(f"no response within {self.timeout}s") from exc
        except OSError as exc:
            raise BackendUnavailable(f"socket recv failed: {exc}") from exc

    def close(self):
        self._rfile.close()
        self.sock.close()


class RetryingBackend:
    """Wraps a backend factory; retries a dead backend once per batch."""

    def __init__(self, factory, retries=1):
        self.factory = factory
        self.retries = retries
        self._backend = factory()

    def predict(self, smiles_batch):
        attempts = self.retries + 1
        last = None
        for attempt in range(attempts):
            try:
                return self._backend.predict(smiles_batch)
            except BackendUnavailable as exc:
                last = exc
                try:
                    self._backend.close()
                except Exception:
                    pass
                if attempt < attempts - 1:
                    self._backend = self.factory()
        raise last

    def close(self):
        self._backend.close()


def make_backend(spec, timeout=30.0):
    """Build a backend from a CLI spec: surrogate | exec:<cmd> | tcp:<h:p>."""
    if spec == "surrogate":
        return SurrogateBackend()
    if spec.startswith("exec:"):
        cmd = spec[len("exec:") :]
        return RetryingBackend(lambda: ExecBackend(cmd, timeout))
    if spec.startswith("tcp:"):
        host, _, port = spec[len("tcp:") :].rpartition(":")
        return RetryingBackend(lambda: TcpBackend(host, int(port), timeout))
    raise ValueError(f"unknown predictor spec {spec!r}")
