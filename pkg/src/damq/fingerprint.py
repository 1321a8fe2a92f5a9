"""Circular (Morgan/ECFP-style) fingerprints with an incremental update path.

Each atom contributes one environment per radius 0..3; an environment hash is
a 64-bit FNV-1a over the atom's invariants and, at higher radii, the sorted
(bond order, neighbor hash) pairs of the previous round.  Environments whose
atom set duplicates one already emitted are folded once, keeping the
(lowest radius, lowest hash) representative so the result is independent of
atom numbering.  Bits are set at hash mod length.

The incremental path recomputes environments only for atoms near an edit and
is bit-identical to a full recompute.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .actions import ATOM_ADD, NO_OP, Action
from .molgraph import RingInfo, install_ring_info, ring_membership

RADIUS = 3
FP_LENGTH = 2048

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class StaleCache(ValueError):
    pass


def fnv1a64(ints):
    """64-bit FNV-1a over the 8-byte little-endian encoding of each value."""
    h = _FNV_OFFSET
    for value in ints:
        for b in (value & _MASK64).to_bytes(8, "little"):
            h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Fingerprint:
    bits: tuple  # sorted set-bit indices
    length: int = FP_LENGTH

    @property
    def set_count(self):
        return len(self.bits)

    def to_array(self, dtype=np.float64):
        arr = np.zeros(self.length, dtype=dtype)
        arr[list(self.bits)] = 1.0
        return arr


_ELEMENT_CODE = {"C": 6, "N": 7, "O": 8}


def _atom_invariant(mol, i, in_ring):
    return (
        _ELEMENT_CODE[mol.atoms[i]],
        mol.degree(i),
        mol.bond_order_sum(i),
        mol.free_valence(i),
        1 if in_ring else 0,
    )


@dataclass
class FeatureTable:
    """Per-molecule cache of atom environments, keyed to the labeled graph.

    ``hashes[i][r]`` holds atom i's radius-r environment hash;
    ``atomsets[i][r]`` the covered atom set as an index bitmask.
    """

    mol_key: tuple
    hashes: list
    atomsets: list


def _mol_key(mol):
    return (mol.atoms, mol.bonds)


def _compute_atom_env(adj, i, r, hashes, atomsets):
    """One refinement round for a single atom, reading radius r-1 rows."""
    rp = r - 1
    nb = [(order, hashes[j][rp]) for j, order in adj[i].items()]
    nb.sort()
    seq = [hashes[i][rp]]
    for pair in nb:
        seq.extend(pair)
    new_set = atomsets[i][rp]
    for j in adj[i]:
        new_set |= atomsets[j][rp]
    return fnv1a64(seq), new_set


def compute_features(mol):
    """Full environment table for every atom and radius."""
    n = mol.n_atoms
    adj = mol.adjacency()
    rings = ring_membership(mol)
    hashes = [[0] * (RADIUS + 1) for _ in range(n)]
    atomsets = [[0] * (RADIUS + 1) for _ in range(n)]
    for i in range(n):
        hashes[i][0] = fnv1a64(_atom_invariant(mol, i, rings.atom_in_ring(i)))
        atomsets[i][0] = 1 << i
    for r in range(1, RADIUS + 1):
        for i in range(n):
            hashes[i][r], atomsets[i][r] = _compute_atom_env(
                adj, i, r, hashes, atomsets
            )
    return FeatureTable(_mol_key(mol), hashes, atomsets)


def _select_features(table):
    """Fold duplicate environments: one feature per distinct atom set."""
    chosen = {}
    get = chosen.get
    for row_hashes, row_sets in zip(table.hashes, table.atomsets):
        for r, (h, key) in enumerate(zip(row_hashes, row_sets)):
            cand = (r, h)
            prev = get(key)
            if prev is None or cand < prev:
                chosen[key] = cand
    return chosen


def _fold(chosen, length):
    bits = {h % length for _, h in chosen.values()}
    return Fingerprint(tuple(sorted(bits)), length)


def _fold_table(table, length):
    """Bits of a feature table; vectorized when atom-set masks fit uint64."""
    if len(table.hashes) > 64:
        return _fold(_select_features(table), length)
    keys = np.array(table.atomsets, dtype=np.uint64).ravel()
    hs = np.array(table.hashes, dtype=np.uint64).ravel()
    rs = np.tile(np.arange(RADIUS + 1, dtype=np.uint8), len(table.hashes))
    order = np.lexsort((hs, rs, keys))
    ks = keys[order]
    first = np.empty(ks.shape, dtype=bool)
    first[0] = True
    np.not_equal(ks[1:], ks[:-1], out=first[1:])
    bits = np.unique(hs[order][first] % length)
    return Fingerprint(tuple(int(b) for b in bits), length)


def morgan_fp(mol, length=FP_LENGTH):
    """Fingerprint by full recomputation."""
    return _fold_table(compute_features(mol), length)


def fingerprint_from_table(table, length=FP_LENGTH):
    return _fold_table(table, length)


@lru_cache(maxsize=256)
def _identity_map(n):
    return tuple(range(n))


def _remap_bits(mask, atom_map):
    out = 0
    while mask:
        low = mask & -mask
        m = atom_map[low.bit_length() - 1]
        if m >= 0:  # dropped-fragment atoms vanish; such rows are recomputed
            out |= 1 << m
        mask ^= low
    return out


def _rings_for_result(prev_mol, prev_rings, action):
    """Ring info of the edit result, reusing the source's when cycles survive.

    Bond-order changes keep the topology, and a new leaf atom lies on no
    cycle; both cases avoid a fresh SSSR computation.
    """
    result = action.result
    prev_bonds = prev_mol.bonds
    if result.atoms == prev_mol.atoms:
        bonds = result.bonds
        if len(bonds) == len(prev_bonds) and all(
            x[0] == y[0] and x[1] == y[1] for x, y in zip(bonds, prev_bonds)
        ):
            install_ring_info(result, prev_rings)
            return prev_rings
    elif (
        action.kind == ATOM_ADD
        and result.atoms[:-1] == prev_mol.atoms
        and result.n_bonds == len(prev_bonds) + 1
    ):
        new_i = result.n_atoms - 1
        if tuple(
            b for b in result.bonds if b[0] != new_i and b[1] != new_i
        ) == prev_bonds:
            info = RingInfo(
                prev_rings.rings, prev_rings.atom_ring_count + (0,)
            )
            install_ring_info(result, info)
            return info
    return ring_membership(result)


def incremental_features(prev_mol, prev_table, action: Action):
    """Feature table of ``action.result`` reusing unaffected rows.

    Raises StaleCache when the cached table does not belong to ``prev_mol``.
    """
    if prev_table.mol_key != _mol_key(prev_mol):
        raise StaleCache("feature table does not match the given molecule")
    if action.kind == NO_OP:
        return prev_table
    result = action.result
    atom_map = action.atom_map
    n = result.n_atoms

    prev_rings = ring_membership(prev_mol)
    rings = _rings_for_result(prev_mol, prev_rings, action)

    n_prev = len(atom_map)
    identity = atom_map == _identity_map(n_prev)

    # seed atoms: edit sites plus every atom whose ring flag flipped; shared
    # ring tuples mean the edit provably left every ring flag alone
    seeds = set(action.edited_atoms)
    if rings.rings is not prev_rings.rings:
        for old_i, new_i in enumerate(atom_map):
            if new_i >= 0 and rings.atom_in_ring(
                new_i
            ) != prev_rings.atom_in_ring(old_i):
                seeds.add(new_i)
    # atoms present in result but absent from the source (atom additions)
    if identity:
        seeds.update(range(n_prev, n))
    else:
        mapped = set(atom_map)
        for new_i in range(n):
            if new_i not in mapped:
                seeds.add(new_i)

    # an atom's radius-r row changes only when a seed lies within distance r,
    # so the distance to the nearest seed decides which radii to recompute
    dist = result.distances_from(sorted(seeds), cutoff=RADIUS)

    hashes = [None] * n
    atomsets = [None] * n
    prev_hashes, prev_sets = prev_table.hashes, prev_table.atomsets
    if identity:
        for i in range(n_prev):
            if i in dist:
                hashes[i] = list(prev_hashes[i])
                atomsets[i] = list(prev_sets[i])
            else:
                hashes[i] = prev_hashes[i]
                atomsets[i] = prev_sets[i]
        for i in range(n_prev, n):
            hashes[i] = [0] * (RADIUS + 1)
            atomsets[i] = [None] * (RADIUS + 1)
    else:
        reverse = {new: old for old, new in enumerate(atom_map) if new >= 0}
        for new_i in range(n):
            old_i = reverse.get(new_i)
            if old_i is None:  # brand-new atom, every row is computed below
                hashes[new_i] = [0] * (RADIUS + 1)
                atomsets[new_i] = [None] * (RADIUS + 1)
                continue
            old_hashes = prev_hashes[old_i]
            hashes[new_i] = list(old_hashes) if new_i in dist else old_hashes
            atomsets[new_i] = [
                _remap_bits(s, atom_map) for s in prev_sets[old_i]
            ]

    adj = result.adjacency()
    order = sorted(dist)
    for i in order:
        if dist[i] == 0:
            hashes[i][0] = fnv1a64(
                _atom_invariant(result, i, rings.atom_in_ring(i))
            )
            atomsets[i][0] = 1 << i
    for r in range(1, RADIUS + 1):
        for i in order:
            if dist[i] <= r:
                hashes[i][r], atomsets[i][r] = _compute_atom_env(
                    adj, i, r, hashes, atomsets
                )
    return FeatureTable(_mol_key(result), hashes, atomsets)


def incremental_fp(prev_mol, prev_table, action: Action, length=FP_LENGTH):
    """Fingerprint of the edit result via the incremental path."""
    return fingerprint_from_table(
        incremental_features(prev_mol, prev_table, action), length
    )


def tanimoto(a: Fingerprint, b: Fingerprint):
    """|a AND b| / |a OR b|; 1.0 when both fingerprints are empty."""
    sa, sb = set(a.bits), set(b.bits)
    union = len(sa | sb)
    if union == 0:
        return 1.0
    return len(sa & sb) / union
