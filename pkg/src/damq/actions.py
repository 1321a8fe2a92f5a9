"""Single-edit successor enumeration for the molecule modification MDP.

A state's actions are all distinct molecules reachable by one graph edit:
adding an atom, raising a bond order (possibly closing a ring of an allowed
size), lowering or removing a bond, or keeping the molecule unchanged.
Hydroxyl protection excludes any edit that would leave the molecule without
an O-H bond, and edits that disconnect the graph keep only the fragment that
still carries one.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .molgraph import (
    MAX_VALENCE,
    MolError,
    MolGraph,
    has_oh_bond,
    ring_membership,
    write_smiles,
)

ATOM_ADD = "atom_add"
BOND_CHANGE = "bond_change"
BOND_REMOVE = "bond_remove"
NO_OP = "no_op"


class NoOhBond(MolError):
    pass


@dataclass(frozen=True)
class ActionConfig:
    allowed_elements: tuple = ("C", "N", "O")
    allowed_ring_sizes: tuple = (3, 5, 6)
    protect_oh: bool = True
    allow_no_op: bool = True


DEFAULT_CONFIG = ActionConfig()


@dataclass(frozen=True)
class Action:
    kind: str
    result: MolGraph
    smiles: str
    # result-graph indices adjacent to the edit; empty for no-op
    edited_atoms: tuple = ()
    # atom_map[i] = index of source atom i in the result, or -1 if dropped
    atom_map: tuple = ()


@dataclass(frozen=True)
class ActionSet:
    source: MolGraph
    actions: tuple

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def __getitem__(self, i):
        return self.actions[i]

    @property
    def smiles(self):
        return [a.smiles for a in self.actions]


def enumerate_actions(mol, cfg=DEFAULT_CONFIG):
    """All valid one-edit successors, deduplicated by canonical SMILES and
    sorted by it for reproducible selection order."""
    if cfg.protect_oh and not has_oh_bond(mol):
        raise NoOhBond("state has no O-H bond but protection is enabled")
    return _enumerate_cached(mol, cfg)


@lru_cache(maxsize=10_000)
def _enumerate_cached(mol, cfg):
    candidates = []
    candidates.extend(_atom_additions(mol, cfg))
    candidates.extend(_bond_increases(mol, cfg))
    candidates.extend(_bond_decreases(mol, cfg))

    source_smiles = write_smiles(mol)
    by_smiles = {}
    for action in candidates:
        if cfg.protect_oh and not has_oh_bond(action.result):
            continue
        if action.smiles == source_smiles:
            continue
        by_smiles.setdefault(action.smiles, action)
    if cfg.allow_no_op:
        identity = tuple(range(mol.n_atoms))
        by_smiles.setdefault(
            source_smiles,
            Action(NO_OP, mol, source_smiles, (), identity),
        )
    ordered = tuple(by_smiles[s] for s in sorted(by_smiles))
    return ActionSet(mol, ordered)


def _atom_additions(mol, cfg):
    n = mol.n_atoms
    identity = tuple(range(n))
    for i in range(n):
        fv = mol.free_valence(i)
        if fv < 1:
            continue
        for element in cfg.allowed_elements:
            for order in range(1, min(fv, MAX_VALENCE[element], 3) + 1):
                result = MolGraph(
                    mol.atoms + (element,),
                    tuple(sorted(mol.bonds + ((i, n, order),))),
                )
                yield Action(
                    ATOM_ADD, result, write_smiles(result), (i, n), identity
                )


def _bond_increases(mol, cfg):
    identity = tuple(range(mol.n_atoms))
    adj = mol.adjacency()
    for a in range(mol.n_atoms):
        fa = mol.free_valence(a)
        if fa < 1:
            continue
        for b in range(a + 1, mol.n_atoms):
            fb = mol.free_valence(b)
            if fb < 1:
                continue
            current = adj[a].get(b, 0)
            if current == 0:
                # new bond closes a ring; only allowed sizes may form
                path = mol.shortest_path_length(a, b)
                if path is None or path + 1 not in cfg.allowed_ring_sizes:
                    continue
            for delta in range(1, min(fa, fb) + 1):
                order = current + delta
                if order > 3:
                    break
                result = _with_bond(mol, a, b, order)
                yield Action(
                    BOND_CHANGE, result, write_smiles(result), (a, b), identity
                )


def _bond_decreases(mol, cfg):
    for a, b, order in mol.bonds:
        for new_order in range(order - 1, -1, -1):
            result, atom_map, edited = _remove_or_lower(mol, a, b, new_order, cfg)
            if result is None:
                continue
            yield Action(
                BOND_REMOVE, result, write_smiles(result), edited, atom_map
            )


def _with_bond(mol, a, b, order):
    bonds = [bd for bd in mol.bonds if (bd[0], bd[1]) != (a, b)]
    if order > 0:
        bonds.append((a, b, order))
    return MolGraph(mol.atoms, tuple(sorted(bonds)))


def _remove_or_lower(mol, a, b, new_order, cfg):
    """Lower bond (a,b); on disconnection keep one fragment (see docs)."""
    lowered = _with_bond(mol, a, b, new_order)
    if new_order > 0 or _still_connected(lowered):
        return lowered, tuple(range(mol.n_atoms)), (a, b)
    fragments = _components(lowered)
    keep = _pick_fragment(lowered, fragments, cfg)
    if keep is None:
        return None, None, None
    keep_sorted = sorted(keep)
    atom_map = [-1] * mol.n_atoms
    for new_idx, old_idx in enumerate(keep_sorted):
        atom_map[old_idx] = new_idx
    atoms = tuple(mol.atoms[i] for i in keep_sorted)
    bonds = tuple(
        sorted(
            (atom_map[x], atom_map[y], o)
            for x, y, o in lowered.bonds
            if atom_map[x] >= 0 and atom_map[y] >= 0
        )
    )
    result = MolGraph(atoms, bonds)
    edited = tuple(atom_map[x] for x in (a, b) if atom_map[x] >= 0)
    return result, tuple(atom_map), edited


def _still_connected(mol):
    seen = {0}
    stack = [0]
    adj = mol.adjacency()
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == mol.n_atoms


def _components(mol):
    seen = set()
    comps = []
    adj = mol.adjacency()
    for start in range(mol.n_atoms):
        if start in seen:
            continue
        comp = {start}
        stack = [start]
        seen.add(start)
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    comp.add(nb)
                    stack.append(nb)
        comps.append(comp)
    return comps


def _fragment_has_oh(mol, comp):
    return any(
        mol.atoms[i] == "O" and mol.free_valence(i) >= 1 for i in comp
    )


def _pick_fragment(lowered, fragments, cfg):
    """Deterministic fragment choice after a disconnecting edit.

    Prefer fragments that keep an O-H bond; among those (or among all when
    protection is off and none qualifies) keep the largest, breaking ties by
    the lexicographically smallest canonical SMILES.
    """

    def frag_smiles(comp):
        comp_sorted = sorted(comp)
        remap = {old: new for new, old in enumerate(comp_sorted)}
        atoms = tuple(lowered.atoms[i] for i in comp_sorted)
        bonds = tuple(
            sorted(
                (remap[x], remap[y], o)
                for x, y, o in lowered.bonds
                if x in comp and y in comp
            )
        )
        return write_smiles(MolGraph(atoms, bonds))

    with_oh = [c for c in fragments if _fragment_has_oh(lowered, c)]
    pool = with_oh if with_oh else (None if cfg.protect_oh else fragments)
    if pool is None:
        return None
    return min(pool, key=lambda c: (-len(c), frag_smiles(c)))
