"""Q-learning agent over fingerprint features.

The Q-network is a fully connected ReLU MLP scoring candidate *successor*
states: input is the 2048-bit fingerprint plus a steps-remaining scalar.
Forward/backward passes are written directly in numpy; the first layer is
evaluated sparsely from the set-bit indices, which is much faster than a
dense matmul on binary inputs.  Training uses Huber loss and Adam.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from .fingerprint import FP_LENGTH


def blob_checksum(data):
    """Fast 64-bit content checksum for parameter blobs."""
    return struct.unpack("<Q", hashlib.blake2b(data, digest_size=8).digest())[0]

LAYER_SIZES = (FP_LENGTH + 1, 1024, 512, 128, 32, 1)

CHECKPOINT_MAGIC = b"DAMQ1"


class ShapeMismatch(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class ChecksumError(ValueError):
    pass


# features are (bits, extra): sorted set-bit indices plus the trailing
# steps-remaining scalar
def make_features(fingerprint, steps_remaining):
    return (fingerprint.bits, float(steps_remaining))


@dataclass
class ModelParams:
    weights: list
    biases: list

    @staticmethod
    def init(rng, sizes=LAYER_SIZES):
        """He-initialized network; rng is a numpy Generator."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return ModelParams(weights, biases)

    @staticmethod
    def zeros(sizes=LAYER_SIZES):
        return ModelParams(
            [np.zeros((i, o)) for i, o in zip(sizes, sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
        )

    @property
    def sizes(self):
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    def copy(self):
        return ModelParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def to_bytes(self):
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())

    def checksum(self):
        return blob_checksum(self.to_bytes())


def params_from_bytes(blob, sizes):
    arrays = []
    offset = 0
    shapes = []
    for i, o in zip(sizes, sizes[1:]):
        shapes.append((i, o))
        shapes.append((o,))
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(
            shape
        )
        arrays.append(arr.copy())
        offset += count * 8
    weights = arrays[0::2]
    biases = arrays[1::2]
    return ModelParams(weights, biases)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _first_layer_sparse(params, feats):
    """Sparse evaluation of layer 1 for binary+scalar features."""
    w1 = params.weights[0]
    b1 = params.biases[0]
    z = np.empty((len(feats), w1.shape[1]))
    scalar_row = w1[-1]
    for k, (bits, extra) in enumerate(feats):
        if bits:
            z[k] = w1[list(bits)].sum(axis=0)
        else:
            z[k] = 0.0
        if extra:
            z[k] += extra * scalar_row
    z += b1
    return z


def q_values(params, feats):
    """Q for a batch of (bits, extra) features."""
    if not feats:
        return np.empty(0)
    a = np.maximum(_first_layer_sparse(params, feats), 0.0)
    for w, b in zip(params.weights[1:], params.biases[1:]):
        z = a @ w + b
        if w is not params.weights[-1]:
            a = np.maximum(z, 0.0)
        else:
            a = z
    return a[:, 0]


def q_value(params, feature_vector):
    """Q for one dense feature vector (fingerprint bits + scalar)."""
    x = np.asarray(feature_vector, dtype=np.float64)
    if x.shape != (params.weights[0].shape[0],):
        raise ShapeMismatch(
            f"expected input of shape ({params.weights[0].shape[0]},), got {x.shape}"
        )
    a = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        a = z if i == len(params.weights) - 1 else np.maximum(z, 0.0)
    return float(a[0])


def _forward_cached(params, feats):
    """Forward pass keeping activations for backprop."""
    zs = [_first_layer_sparse(params, feats)]
    acts = [np.maximum(zs[0], 0.0)]
    for i, (w, b) in enumerate(zip(params.weights[1:], params.biases[1:]), start=1):
        z = acts[-1] @ w + b
        zs.append(z)
        acts.append(z if i == len(params.weights) - 1 else np.maximum(z, 0.0))
    return zs, acts


def _backward(params, feats, zs, acts, dout):
    """Gradients of sum(dout * q) w.r.t. all parameters."""
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    delta = dout[:, None]  # (N,1) at the output layer
    for layer in range(len(params.weights) - 1, 0, -1):
        grads_w[layer] = acts[layer - 1].T @ delta
        grads_b[layer] = delta.sum(axis=0)
        delta = delta @ params.weights[layer].T
        delta = delta * (zs[layer - 1] > 0.0)
    # layer 0: accumulate rows for the active bits of each sample
    w1 = params.weights[0]
    gw1 = np.zeros_like(w1)
    all_bits = []
    sample_ids = []
    for k, (bits, extra) in enumerate(feats):
        if bits:
            all_bits.extend(bits)
            sample_ids.extend([k] * len(bits))
        if extra:
            gw1[-1] += extra * delta[k]
    if all_bits:
        np.add.at(gw1, np.array(all_bits), delta[np.array(sample_ids)])
    grads_w[0] = gw1
    grads_b[0] = delta.sum(axis=0)
    return grads_w, grads_b


def huber(residual, delta=1.0):
    a = np.abs(residual)
    return np.where(a <= delta, 0.5 * residual**2, delta * (a - 0.5 * delta))


def huber_grad(residual, delta=1.0):
    return np.clip(residual, -delta, delta)


def compute_targets(target_params, batch, discount=1.0):
    """y = r (+ discount * max successor Q for non-terminal transitions)."""
    y = np.array([t.reward for t in batch])
    flat = []
    owner = []
    for k, t in enumerate(batch):
        if not t.terminal and t.successor_features:
            flat.extend(t.successor_features)
            owner.extend([k] * len(t.successor_features))
    if flat:
        qs = q_values(target_params, flat)
        best = {}
        for k, q in zip(owner, qs):
            if k not in best or q > best[k]:
                best[k] = q
        for k, q in best.items():
            y[k] += discount * q
    return y


def loss_and_grads(params, target_params, batch, discount=1.0):
    """Mean Huber loss and its parameter gradients for one batch."""
    if not batch:
        raise EmptyBatch("cannot train on an empty batch")
    feats = [t.result_features for t in batch]
    zs, acts = _forward_cached(params, feats)
    q = acts[-1][:, 0]
    y = compute_targets(target_params, batch, discount)
    residual = q - y
    loss = float(huber(residual).mean())
    dout = huber_grad(residual) / len(batch)
    grads_w, grads_b = _backward(params, feats, zs, acts, dout)
    return loss, grads_w, grads_b


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @staticmethod
    def for_params(params):
        return AdamState(
            [np.zeros_like(a) for a in params.arrays()],
            [np.zeros_like(a) for a in params.arrays()],
        )


def adam_update(params, grads_w, grads_b, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam step."""
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.append(gw)
        grads.append(gb)
    state.t += 1
    t = state.t
    arrays = params.arrays()
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        a -= lr * mhat / (np.sqrt(vhat) + eps)


def train_step(params, target_params, batch, adam_state, lr=1e-4, discount=1.0,
               average_gradients=None):
    """One DQN update; optionally routes gradients through an all-reduce."""
    loss, grads_w, grads_b = loss_and_grads(params, target_params, batch, discount)
    if average_gradients is not None:
        grads_w, grads_b = average_gradients(grads_w, grads_b)
    adam_update(params, grads_w, grads_b, adam_state, lr)
    return loss


def sync_target(params):
    """Fresh target-network copy of the online parameters."""
    return params.copy()


# ---------------------------------------------------------------------------
# Action selection, replay, epsilon schedule
# ---------------------------------------------------------------------------


def select_action(params, action_set, features, epsilon, rng):
    """Index of the chosen action: epsilon-random, else greedy.

    ``features`` aligns with ``action_set`` (sorted by canonical SMILES), so
    numpy's first-argmax tie break picks the lowest SMILES.
    """
    n = len(action_set)
    if n == 0:
        raise ValueError("empty action set")
    if rng.random() < epsilon:
        return rng.randrange(n)
    qs = q_values(params, features)
    return int(np.argmax(qs))


@dataclass(frozen=True)
class Transition:
    result_features: tuple  # (bits, steps_remaining) of the chosen successor
    reward: float
    successor_features: tuple  # features of the next state's action set
    terminal: bool


class ReplayBuffer:
    """Bounded FIFO transition store with uniform sampling."""

    def __init__(self, capacity=4000):
        self._data = deque(maxlen=capacity)
        self.capacity = capacity

    def __len__(self):
        return len(self._data)

    def push(self, transition):
        self._data.append(transition)

    def sample(self, n, rng):
        """Uniform sample without replacement; n is capped at the size."""
        n = min(n, len(self._data))
        idx = rng.sample(range(len(self._data)), n)
        return [self._data[i] for i in idx]

    def contents(self):
        return list(self._data)


@dataclass(frozen=True)
class EpsilonSchedule:
    initial: float = 1.0
    decay: float = 0.999
    floor: float = 0.01

    def __call__(self, episode):
        return max(self.initial * self.decay**episode, self.floor)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def serialize_params(params):
    """Versioned binary blob: magic, layer-shape header, float64 payload,
    trailing 64-bit checksum."""
    header = [CHECKPOINT_MAGIC, struct.pack("<I", len(params.weights))]
    for w in params.weights:
        header.append(struct.pack("<II", *w.shape))
    body = b"".join(header) + params.to_bytes()
    return body + struct.pack("<Q", blob_checksum(body))


def deserialize_params(blob):
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ChecksumError("bad checkpoint magic")
    body, tail = blob[:-8], blob[-8:]
    (stored,) = struct.unpack("<Q", tail)
    if blob_checksum(body) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    (n_layers,) = struct.unpack_from("<I", blob, 5)
    offset = 9
    sizes = []
    for k in range(n_layers):
        i, o = struct.unpack_from("<II", blob, offset)
        offset += 8
        if k == 0:
            sizes.append(i)
        sizes.append(o)
    return params_from_bytes(blob[offset : len(blob) - 8], tuple(sizes))


def save_checkpoint(path, params):
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())
