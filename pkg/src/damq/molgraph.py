"""Molecular graphs with implicit hydrogens, a C/N/O SMILES subset, and canonical forms.

Molecules are undirected simple graphs over heavy atoms (C, N, O) with integer
bond orders 1-3.  Hydrogens are never stored: the hydrogen count of an atom is
its free valence.  Aromatic input is kekulized at the parse boundary; the
internal form is always Kekule.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

MAX_VALENCE = {"C": 4, "N": 3, "O": 2}

_AROMATIC = {"c": "C", "n": "N", "o": "O"}
_BOND_CHARS = {"-": 1, "=": 2, "#": 3}
_BOND_SYMBOL = {1: "", 2: "=", 3: "#"}


class MolError(ValueError):
    """Base class for molecule construction and parse failures."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class UnclosedRing(MolError):
    pass


class UnbalancedParen(MolError):
    pass


class UnsupportedElement(MolError):
    pass


class ValenceViolation(MolError):
    pass


class DisconnectedGraph(MolError):
    pass


@dataclass(frozen=True)
class MolGraph:
    """Immutable heavy-atom molecular graph.

    ``bonds`` entries are (a, b, order) with a < b, sorted.  Use
    :meth:`make` to normalize and validate raw atom/bond lists.
    """

    atoms: tuple
    bonds: tuple

    @staticmethod
    def make(atoms, bonds):
        atoms = tuple(atoms)
        if not atoms:
            raise MolError("molecule must contain at least one atom")
        for el in atoms:
            if el not in MAX_VALENCE:
                raise UnsupportedElement(f"unsupported element {el!r}")
        norm = []
        seen_pairs = set()
        for a, b, order in bonds:
            if a == b:
                raise MolError(f"self-bond on atom {a}")
            if not (0 <= a < len(atoms) and 0 <= b < len(atoms)):
                raise MolError(f"bond ({a},{b}) references missing atom")
            if order not in (1, 2, 3):
                raise MolError(f"bad bond order {order}")
            if a > b:
                a, b = b, a
            if (a, b) in seen_pairs:
                raise MolError(f"duplicate bond ({a},{b})")
            seen_pairs.add((a, b))
            norm.append((a, b, order))
        mol = MolGraph(atoms, tuple(sorted(norm)))
        for i in range(len(atoms)):
            if mol.free_valence(i) < 0:
                raise ValenceViolation(
                    f"atom {i} ({atoms[i]}) exceeds valence {MAX_VALENCE[atoms[i]]}"
                )
        if not mol.is_connected():
            raise DisconnectedGraph("graph has more than one connected component")
        return mol

    @property
    def n_atoms(self):
        return len(self.atoms)

    @property
    def n_bonds(self):
        return len(self.bonds)

    def adjacency(self):
        """Dict atom -> dict neighbor -> bond order (cached)."""
        adj = self.__dict__.get("_adj")
        if adj is None:
            adj = {i: {} for i in range(len(self.atoms))}
            for a, b, order in self.bonds:
                adj[a][b] = order
                adj[b][a] = order
            self.__dict__["_adj"] = adj
        return adj

    def neighbors(self, i):
        return self.adjacency()[i]

    def degree(self, i):
        return len(self.adjacency()[i])

    def bond_order_sum(self, i):
        return sum(self.adjacency()[i].values())

    def free_valence(self, i):
        return MAX_VALENCE[self.atoms[i]] - self.bond_order_sum(i)

    def bond_order(self, a, b):
        return self.adjacency()[a].get(b, 0)

    def is_connected(self):
        if not self.atoms:
            return False
        seen = {0}
        stack = [0]
        adj = self.adjacency()
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.atoms)

    def distances_from(self, sources, cutoff=None):
        """BFS graph distances from a set of source atoms."""
        dist = {s: 0 for s in sources}
        frontier = list(sources)
        adj = self.adjacency()
        d = 0
        while frontier and (cutoff is None or d < cutoff):
            d += 1
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = d
                        nxt.append(v)
            frontier = nxt
        return dist

    def shortest_path_length(self, a, b):
        """Unweighted shortest path length between two atoms, or None."""
        return self.distances_from([a]).get(b)


def free_valence(mol, i):
    return mol.free_valence(i)


def has_oh_bond(mol):
    """True iff some oxygen carries an implicit hydrogen."""
    return any(
        el == "O" and mol.free_valence(i) >= 1 for i, el in enumerate(mol.atoms)
    )


def oh_oxygens(mol):
    """Indices of oxygens bearing at least one implicit hydrogen."""
    return [
        i
        for i, el in enumerate(mol.atoms)
        if el == "O" and mol.free_valence(i) >= 1
    ]


# ---------------------------------------------------------------------------
# Ring perception (SSSR-style)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RingInfo:
    rings: tuple  # tuple of frozenset of atom indices, one per SSSR ring
    atom_ring_count: tuple  # per-atom number of SSSR rings containing it

    @property
    def sizes(self):
        return tuple(sorted(len(r) for r in self.rings))

    def atom_in_ring(self, i):
        return self.atom_ring_count[i] > 0

    def ring_count(self):
        return len(self.rings)


def _bridges(mol):
    """Bridge edges as sorted (a, b) pairs, via iterative low-link DFS."""
    adj = mol.adjacency()
    n = mol.n_atoms
    disc = [0] * n
    low = [0] * n
    seen = [False] * n
    bridges = set()
    timer = 1
    for root in range(n):
        if seen[root]:
            continue
        seen[root] = True
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            u, parent, it = stack[-1]
            advanced = False
            for v in it:
                if not seen[v]:
                    seen[v] = True
                    disc[v] = low[v] = timer
                    timer += 1
                    stack.append((v, u, iter(adj[v])))
                    advanced = True
                    break
                if v != parent and disc[v] < low[u]:
                    low[u] = disc[v]
            if not advanced:
                stack.pop()
                if stack:
                    p = stack[-1][0]
                    if low[u] < low[p]:
                        low[p] = low[u]
                    if low[u] > disc[p]:
                        bridges.add((p, u) if p < u else (u, p))
    return bridges


def _smallest_cycle_through(mol, a, b):
    """Shortest cycle containing bond (a,b): shortest a..b path avoiding it."""
    adj = mol.adjacency()
    dist = {a: 0}
    parent = {a: None}
    frontier = [a]
    while frontier and b not in dist:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if u == a and v == b:
                    continue
                if v not in dist:
                    dist[v] = dist[u] + 1
                    parent[v] = u
                    nxt.append(v)
        frontier = nxt
    if b not in dist:
        return None
    path = [b]
    while path[-1] != a:
        path.append(parent[path[-1]])
    return tuple(sorted(path))


def _cycle_edges(mol, atoms):
    edges = set()
    aset = set(atoms)
    for x, y, _ in mol.bonds:
        if x in aset and y in aset:
            edges.add((x, y))
    return edges


_RING_CACHE = OrderedDict()
_RING_CACHE_MAX = 100_000


def install_ring_info(mol, info):
    """Pre-seed the ring cache, e.g. for edits that preserve cycle structure."""
    _RING_CACHE[mol] = info
    if len(_RING_CACHE) > _RING_CACHE_MAX:
        _RING_CACHE.popitem(last=False)


def ring_membership(mol):
    """SSSR-style ring decomposition (cached)."""
    info = _RING_CACHE.get(mol)
    if info is None:
        info = _compute_ring_membership(mol)
        install_ring_info(mol, info)
    return info


def _compute_ring_membership(mol):
    """SSSR-style ring decomposition; ring count = bonds - atoms + 1."""
    n_rings = mol.n_bonds - mol.n_atoms + 1
    counts = [0] * mol.n_atoms
    if n_rings <= 0:
        return RingInfo((), tuple(counts))
    bridges = _bridges(mol)
    candidates = {}
    for a, b, _ in mol.bonds:
        if (a, b) in bridges:  # bridge bonds lie on no cycle
            continue
        cyc = _smallest_cycle_through(mol, a, b)
        if cyc is not None:
            candidates[cyc] = None
    ordered = sorted(candidates, key=lambda c: (len(c), c))
    basis = []  # GF(2) echelon over edge space
    chosen = []
    all_edges = sorted((a, b) for a, b, _ in mol.bonds)
    edge_bit = {e: 1 << k for k, e in enumerate(all_edges)}

    def reduce(vec):
        for bvec in basis:
            low = bvec & -bvec
            if vec & low:
                vec ^= bvec
        return vec

    for cyc in ordered:
        if len(chosen) == n_rings:
            break
        vec = 0
        ring_edges = set()
        # cycle atoms alone do not determine edges in fused systems; rebuild
        # the actual cycle path by re-running the bond search
        vec_edges = _ring_edge_path(mol, cyc)
        if vec_edges is None:
            continue
        for e in vec_edges:
            vec |= edge_bit[e]
            ring_edges.add(e)
        red = reduce(vec)
        if red:
            basis.append(red)
            basis.sort(key=lambda v: v & -v)
            chosen.append(frozenset(cyc))
    if len(chosen) < n_rings:
        # fall back to a spanning-tree fundamental basis for the remainder
        for cyc_atoms in _fundamental_cycles(mol):
            if len(chosen) == n_rings:
                break
            vec = 0
            for e in _ring_edge_path(mol, tuple(sorted(cyc_atoms))) or []:
                vec |= edge_bit[e]
            red = reduce(vec)
            if red:
                basis.append(red)
                basis.sort(key=lambda v: v & -v)
                chosen.append(frozenset(cyc_atoms))
    for ring in chosen:
        for i in ring:
            counts[i] += 1
    chosen.sort(key=lambda r: (len(r), sorted(r)))
    return RingInfo(tuple(chosen), tuple(counts))


def _ring_edge_path(mol, cyc_atoms):
    """Edges of a cycle through exactly the given atom set, if one exists."""
    aset = set(cyc_atoms)
    adj = mol.adjacency()
    start = min(aset)
    path = [start]
    used = set()

    def walk(u):
        if len(path) == len(aset):
            if start in adj[u]:
                used.add(tuple(sorted((u, start))))
                return True
            return False
        for v in sorted(adj[u]):
            if v in aset and v not in path:
                path.append(v)
                used.add(tuple(sorted((u, v))))
                if walk(v):
                    return True
                path.pop()
                used.discard(tuple(sorted((u, v))))
        return False

    if walk(start):
        return sorted(used)
    return None


def _fundamental_cycles(mol):
    """Cycles from non-tree edges over a BFS spanning tree."""
    adj = mol.adjacency()
    parent = {0: None}
    order = [0]
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in sorted(adj[u]):
                if v not in parent:
                    parent[v] = u
                    order.append(v)
                    nxt.append(v)
        frontier = nxt
    tree = set()
    for v, p in parent.items():
        if p is not None:
            tree.add(tuple(sorted((v, p))))
    cycles = []
    for a, b, _ in mol.bonds:
        if (a, b) in tree:
            continue
        pa = []
        x = a
        while x is not None:
            pa.append(x)
            x = parent[x]
        anc = set(pa)
        x = b
        pb = []
        while x not in anc:
            pb.append(x)
            x = parent[x]
        join = x
        cyc = pa[: pa.index(join) + 1] + pb[::-1]
        cycles.append(cyc)
    return cycles


# ---------------------------------------------------------------------------
# SMILES parsing
# ---------------------------------------------------------------------------


def parse_smiles(text):
    """Parse the supported C/N/O SMILES subset into a MolGraph.

    Aromatic (lowercase) atoms are kekulized to alternating single/double
    bonds.  Errors carry the byte offset of the offending token.
    """
    if not text:
        raise MolError("empty SMILES", 0)
    atoms = []  # (element, aromatic, bracket_h, offset)
    bonds = {}  # (a,b) -> order or "ar"
    prev = None
    stack = []
    pending = None  # explicit bond order for the next bond
    ring_open = {}  # digit -> (atom, pending order, offset)
    i = 0
    n = len(text)

    def add_bond(a, b, order, off):
        key = (min(a, b), max(a, b))
        if a == b:
            raise ValenceViolation("ring closure to the same atom", off)
        if key in bonds:
            raise ValenceViolation("duplicate bond", off)
        bonds[key] = order

    while i < n:
        ch = text[i]
        if ch in "CNO" or ch in _AROMATIC:
            atoms.append((ch.upper(), ch in _AROMATIC, None, i))
            idx = len(atoms) - 1
            if prev is not None:
                order = pending
                if order is None:
                    order = (
                        "ar" if atoms[prev][1] and atoms[idx][1] else 1
                    )
                add_bond(prev, idx, order, i)
            pending = None
            prev = idx
            i += 1
        elif ch == "[":
            j = text.find("]", i)
            if j < 0:
                raise UnbalancedParen("unterminated bracket atom", i)
            body = text[i + 1 : j]
            el, hcount = _parse_bracket(body, i + 1)
            atoms.append((el.upper(), el in _AROMATIC, hcount, i))
            idx = len(atoms) - 1
            if prev is not None:
                order = pending
                if order is None:
                    order = "ar" if atoms[prev][1] and atoms[idx][1] else 1
                add_bond(prev, idx, order, i)
            pending = None
            prev = idx
            i = j + 1
        elif ch in _BOND_CHARS:
            if pending is not None:
                raise MolError("two bond symbols in a row", i)
            pending = _BOND_CHARS[ch]
            i += 1
        elif ch == "(":
            if prev is None:
                raise UnbalancedParen("branch before any atom", i)
            stack.append(prev)
            i += 1
        elif ch == ")":
            if not stack:
                raise UnbalancedParen("unmatched ')'", i)
            prev = stack.pop()
            i += 1
        elif ch.isdigit():
            if prev is None:
                raise UnclosedRing("ring digit before any atom", i)
            d = ch
            if d in ring_open:
                a, open_order, open_off = ring_open.pop(d)
                order = pending if pending is not None else open_order
                if (
                    pending is not None
                    and open_order is not None
                    and pending != open_order
                ):
                    raise MolError("conflicting ring bond orders", i)
                if order is None:
                    order = "ar" if atoms[a][1] and atoms[prev][1] else 1
                add_bond(a, prev, order, i)
            else:
                ring_open[d] = (prev, pending, i)
            pending = None
            i += 1
        else:
            raise UnsupportedElement(f"unsupported character {ch!r}", i)
    if stack:
        raise UnbalancedParen("unclosed '('", len(text))
    if ring_open:
        d, (_, _, off) = sorted(ring_open.items())[0]
        raise UnclosedRing(f"ring closure {d} never closed", off)
    if pending is not None:
        raise MolError("dangling bond symbol", len(text))
    if not atoms:
        raise MolError("no atoms", 0)

    order_map = _kekulize(atoms, bonds)
    elements = [a[0] for a in atoms]
    final = [(a, b, order_map[(a, b)]) for (a, b) in bonds]
    try:
        mol = MolGraph.make(elements, final)
    except ValenceViolation as exc:
        # re-raise with the offset of the first offending atom
        raise ValenceViolation(str(exc), atoms[0][3]) from exc
    # validate explicit bracket hydrogen counts against the implicit model
    for idx, (el, _, hcount, off) in enumerate(atoms):
        if hcount is not None and mol.free_valence(idx) != hcount:
            raise ValenceViolation(
                f"bracket H{hcount} disagrees with free valence "
                f"{mol.free_valence(idx)} on atom {idx}",
                off,
            )
    return mol


def _parse_bracket(body, offset):
    """Parse a bracket atom body like 'OH', 'nH', 'CH3'."""
    if not body:
        raise UnsupportedElement("empty bracket atom", offset)
    el = body[0]
    if el not in "CNO" and el not in _AROMATIC:
        raise UnsupportedElement(f"unsupported element {body!r}", offset)
    rest = body[1:]
    hcount = None
    if rest:
        if rest[0] != "H":
            raise UnsupportedElement(f"unsupported bracket syntax {body!r}", offset)
        digits = rest[1:]
        if digits and not digits.isdigit():
            raise UnsupportedElement(f"unsupported bracket syntax {body!r}", offset)
        hcount = int(digits) if digits else 1
    return el, hcount


def _kekulize(atoms, bonds):
    """Resolve 'ar' bond orders to alternating single/double via matching."""
    order_map = {}
    flex = []
    for key, order in bonds.items():
        if order == "ar":
            flex.append(key)
        else:
            order_map[key] = order
    aromatic_flex_deg = {}
    for a, b in flex:
        aromatic_flex_deg[a] = aromatic_flex_deg.get(a, 0) + 1
        aromatic_flex_deg[b] = aromatic_flex_deg.get(b, 0) + 1
    for i, (el, aromatic, hcount, off) in enumerate(atoms):
        if aromatic and aromatic_flex_deg.get(i, 0) == 0:
            raise ValenceViolation(f"aromatic atom {i} has no aromatic bonds", off)
    if not flex:
        return order_map

    # free valence after counting fixed bonds, bracket hydrogens, and one
    # unit per flexible bond; atoms that can take one more unit must receive
    # exactly one double bond (sp2 centers); others stay single
    fixed_sum = {i: 0 for i in range(len(atoms))}
    flex_deg = {i: 0 for i in range(len(atoms))}
    for (a, b), order in order_map.items():
        fixed_sum[a] += order
        fixed_sum[b] += order
    for a, b in flex:
        flex_deg[a] += 1
        flex_deg[b] += 1
    must = set()
    for i, (el, aromatic, hcount, off) in enumerate(atoms):
        if not aromatic:
            continue
        used = fixed_sum[i] + flex_deg[i] + (hcount or 0)
        free = MAX_VALENCE[el] - used
        if free < 0:
            raise ValenceViolation(f"aromatic atom {i} over valence", off)
        if free >= 1 and el in ("C", "N"):
            must.add(i)

    flex_adj = {}
    for a, b in flex:
        flex_adj.setdefault(a, []).append(b)
        flex_adj.setdefault(b, []).append(a)

    matched = {}

    def match(remaining):
        if not remaining:
            return True
        u = min(remaining)
        for v in sorted(flex_adj.get(u, [])):
            if v in remaining:
                matched[u] = v
                matched[v] = u
                if match(remaining - {u, v}):
                    return True
                del matched[u], matched[v]
        return False

    if not match(frozenset(must)):
        off = atoms[min(must)][3] if must else 0
        raise ValenceViolation("cannot kekulize aromatic system", off)
    for a, b in flex:
        order_map[(a, b)] = 2 if matched.get(a) == b else 1
    return order_map


# ---------------------------------------------------------------------------
# Canonical SMILES
# ---------------------------------------------------------------------------


def _refine(nbrs, seed_ranks):
    """Iterative neighborhood refinement of atom ranks until stable."""
    n = len(nbrs)
    ranks = list(seed_ranks)
    while True:
        keys = [
            (ranks[i], tuple(sorted((order, ranks[j]) for order, j in row)))
            for i, row in enumerate(nbrs)
        ]
        uniq = {k: r for r, k in enumerate(sorted(set(keys)))}
        new = [uniq[k] for k in keys]
        if new == ranks or len(uniq) == n:
            # a discrete partition cannot refine further: keys sort primarily
            # by the already-distinct ranks
            return new
        ranks = new


def _initial_ranks(mol):
    adj = mol.adjacency()
    keys = []
    for i, el in enumerate(mol.atoms):
        bos = sum(adj[i].values())
        keys.append((el, len(adj[i]), bos, MAX_VALENCE[el] - bos))
    uniq = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [uniq[k] for k in keys]


def _canonical_orderings(mol):
    """Yield total atom orders via individualization-refinement."""
    results = []
    nbrs = [
        [(order, j) for j, order in row.items()]
        for row in mol.adjacency().values()
    ]

    def descend(ranks):
        ranks = _refine(nbrs, ranks)
        n = mol.n_atoms
        by_rank = {}
        for i, r in enumerate(ranks):
            by_rank.setdefault(r, []).append(i)
        tied = [r for r, members in sorted(by_rank.items()) if len(members) > 1]
        if not tied:
            results.append(ranks)
            return
        r = tied[0]
        for atom in by_rank[r]:
            branched = [2 * x for x in ranks]
            branched[atom] -= 1
            descend(branched)

    descend(_initial_ranks(mol))
    return results


def _smiles_from_ranks(mol, ranks):
    adj = mol.adjacency()
    root = ranks.index(min(ranks))
    visited = set()
    ring_bonds = {}  # atom -> list of (digit, order) to emit
    next_digit = [1]
    free_digits = []
    rank_of = ranks.__getitem__

    # find back edges with a DFS following rank order
    tree_children = {i: [] for i in range(mol.n_atoms)}
    back_edges = []
    parent = {root: None}
    visited.add(root)
    stack = [(root, iter(sorted(adj[root], key=rank_of)))]
    while stack:
        u, it = stack[-1]
        advanced = False
        for v in it:
            if v not in visited:
                visited.add(v)
                parent[v] = u
                tree_children[u].append(v)
                stack.append((v, iter(sorted(adj[v], key=rank_of))))
                advanced = True
                break
            elif parent.get(u) != v and (v, u) not in back_edges:
                back_edges.append((u, v))
        if not advanced:
            stack.pop()

    for u, v in back_edges:
        if free_digits:
            d = free_digits.pop(0)
        else:
            d = next_digit[0]
            next_digit[0] += 1
        if d > 9:
            raise MolError("more than 9 concurrently open rings unsupported")
        ring_bonds.setdefault(v, []).append((d, adj[u][v], "open"))
        ring_bonds.setdefault(u, []).append((d, adj[u][v], "close"))

    out = []

    def emit(u, bond_in):
        out.append(_BOND_SYMBOL[bond_in] if bond_in else "")
        out.append(mol.atoms[u])
        for d, order, side in ring_bonds.get(u, []):
            if side == "close":
                out.append(_BOND_SYMBOL[order])
            out.append(str(d))
        children = tree_children[u]
        for k, v in enumerate(children):
            if k < len(children) - 1:
                out.append("(")
                emit(v, adj[u][v])
                out.append(")")
            else:
                emit(v, adj[u][v])

    emit(root, 0)
    return "".join(out)


@lru_cache(maxsize=200_000)
def write_smiles(mol):
    """Canonical SMILES: byte-equal iff two graphs are isomorphic."""
    best = None
    seen = set()
    for ranks in _canonical_orderings(mol):
        key = tuple(ranks)
        if key in seen:
            continue
        seen.add(key)
        s = _smiles_from_ranks(mol, ranks)
        if best is None or s < best:
            best = s
    return best


def canonical_smiles(text_or_mol):
    if isinstance(text_or_mol, MolGraph):
        return write_smiles(text_or_mol)
    return write_smiles(parse_smiles(text_or_mol))
