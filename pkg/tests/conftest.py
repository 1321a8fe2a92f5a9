"""Shared test helpers: independent graph oracles and molecule generators.

Everything here deliberately avoids the library's own canonicalization and
action logic where a test needs an independent route: isomorphism goes
through networkx (or a small backtracking matcher for hot loops), and random
/ exhaustive molecule generation applies raw valence rules directly.
"""

import itertools
import random

import networkx as nx
import pytest

from damq.molgraph import MAX_VALENCE, MolGraph

ELEMENTS = ("C", "N", "O")


# ---------------------------------------------------------------------------
# Isomorphism oracles
# ---------------------------------------------------------------------------


def to_networkx(mol):
    g = nx.Graph()
    for i, el in enumerate(mol.atoms):
        g.add_node(i, element=el)
    for a, b, order in mol.bonds:
        g.add_edge(a, b, order=order)
    return g


def nx_isomorphic(m1, m2):
    return nx.is_isomorphic(
        to_networkx(m1),
        to_networkx(m2),
        node_match=lambda a, b: a["element"] == b["element"],
        edge_match=lambda a, b: a["order"] == b["order"],
    )


def _atom_signature(mol, i):
    return (
        mol.atoms[i],
        mol.degree(i),
        tuple(sorted(mol.adjacency()[i].values())),
    )


def fast_isomorphic(m1, m2):
    """Backtracking isomorphism check tuned for tiny molecules."""
    if len(m1.atoms) != len(m2.atoms):
        return False
    sig1 = [_atom_signature(m1, i) for i in range(m1.n_atoms)]
    sig2 = [_atom_signature(m2, i) for i in range(m2.n_atoms)]
    if sorted(sig1) != sorted(sig2):
        return False
    adj1, adj2 = m1.adjacency(), m2.adjacency()
    n = m1.n_atoms
    mapping = [-1] * n
    used = [False] * n
    order = sorted(range(n), key=lambda i: -m1.degree(i))

    def extend(k):
        if k == n:
            return True
        u = order[k]
        for v in range(n):
            if used[v] or sig1[u] != sig2[v]:
                continue
            ok = True
            for w, bond in adj1[u].items():
                mw = mapping[w]
                if mw >= 0 and adj2[v].get(mw) != bond:
                    ok = False
                    break
            if not ok:
                continue
            # mapped neighbors of v must be neighbors of u too
            for w2, bond in adj2[v].items():
                if used[w2]:
                    src = mapping.index(w2)
                    if adj1[u].get(src) != bond:
                        ok = False
                        break
            if not ok:
                continue
            mapping[u] = v
            used[v] = True
            if extend(k + 1):
                return True
            mapping[u] = -1
            used[v] = False
        return False

    return extend(0)


def permutation_certificate(mol):
    """Exact canonical form by brute force over all atom orders (tiny n)."""
    n = mol.n_atoms
    best = None
    for perm in itertools.permutations(range(n)):
        atoms = tuple(mol.atoms[p] for p in perm)
        inv = {p: i for i, p in enumerate(perm)}
        bonds = tuple(
            sorted(
                (min(inv[a], inv[b]), max(inv[a], inv[b]), o)
                for a, b, o in mol.bonds
            )
        )
        key = (atoms, bonds)
        if best is None or key < best:
            best = key
    return best


def relabel(mol, perm):
    """MolGraph with atom i moved to position perm[i]."""
    atoms = [None] * mol.n_atoms
    for i, p in enumerate(perm):
        atoms[p] = mol.atoms[i]
    bonds = tuple(
        sorted(
            (min(perm[a], perm[b]), max(perm[a], perm[b]), o)
            for a, b, o in mol.bonds
        )
    )
    return MolGraph(tuple(atoms), bonds)


# ---------------------------------------------------------------------------
# Molecule generators
# ---------------------------------------------------------------------------


def random_molecule(rng, max_atoms=12, ring_bias=0.3):
    """Random connected valence-valid molecule built by raw graph edits."""
    n_target = rng.randint(1, max_atoms)
    atoms = [rng.choice(ELEMENTS)]
    bonds = []
    bond_sum = [0]
    while len(atoms) < n_target:
        hosts = [
            i
            for i in range(len(atoms))
            if MAX_VALENCE[atoms[i]] - bond_sum[i] >= 1
        ]
        if not hosts:
            break
        i = rng.choice(hosts)
        el = rng.choice(ELEMENTS)
        cap = min(MAX_VALENCE[atoms[i]] - bond_sum[i], MAX_VALENCE[el], 3)
        order = rng.randint(1, cap)
        j = len(atoms)
        atoms.append(el)
        bond_sum.append(order)
        bond_sum[i] += order
        bonds.append((i, j, order))
    # sprinkle ring closures / bond raises
    for _ in range(rng.randint(0, 3)):
        if rng.random() > ring_bias:
            continue
        free = [
            i
            for i in range(len(atoms))
            if MAX_VALENCE[atoms[i]] - bond_sum[i] >= 1
        ]
        pairs = [
            (a, b)
            for a in free
            for b in free
            if a < b and (a, b) not in {(x, y) for x, y, _ in bonds}
        ]
        if not pairs:
            continue
        a, b = rng.choice(pairs)
        bonds.append((a, b, 1))
        bond_sum[a] += 1
        bond_sum[b] += 1
    return MolGraph.make(atoms, bonds)


def raw_successors(mol, max_atoms, elements=ELEMENTS):
    """All growth edits (attach atom, add/raise bond) by raw valence rules."""
    n = mol.n_atoms
    adj = mol.adjacency()
    if n < max_atoms:
        for i in range(n):
            fv = mol.free_valence(i)
            for el in elements:
                for order in range(1, min(fv, MAX_VALENCE[el], 3) + 1):
                    yield MolGraph(
                        mol.atoms + (el,),
                        tuple(sorted(mol.bonds + ((i, n, order),))),
                    )
    for a in range(n):
        fa = mol.free_valence(a)
        if fa < 1:
            continue
        for b in range(a + 1, n):
            fb = mol.free_valence(b)
            if fb < 1:
                continue
            cur = adj[a].get(b, 0)
            for delta in range(1, min(fa, fb) + 1):
                if cur + delta > 3:
                    break
                bonds = [bd for bd in mol.bonds if (bd[0], bd[1]) != (a, b)]
                bonds.append((a, b, cur + delta))
                yield MolGraph(mol.atoms, tuple(sorted(bonds)))


def exhaustive_molecules(max_atoms, canonical, on_duplicate=None):
    """All connected valence-valid C/N/O molecules with <= max_atoms atoms.

    Keyed and deduplicated by ``canonical``; when a key repeats,
    ``on_duplicate(new_graph, representative)`` is invoked so callers can
    verify the collision is genuine.
    """
    seen = {}
    frontier = []
    for el in ELEMENTS:
        m = MolGraph((el,), ())
        seen[canonical(m)] = m
        frontier.append(m)
    while frontier:
        nxt = []
        for mol in frontier:
            for res in raw_successors(mol, max_atoms):
                s = canonical(res)
                rep = seen.get(s)
                if rep is None:
                    seen[s] = res
                    nxt.append(res)
                elif on_duplicate is not None:
                    on_duplicate(res, rep)
        frontier = nxt
    return seen


@pytest.fixture
def rng():
    return random.Random(0xDA90)
