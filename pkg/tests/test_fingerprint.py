"""Fingerprint tests: hashing, folding, incremental-vs-full equivalence."""

import random

import pytest

from conftest import random_molecule, relabel
from damq.actions import ActionConfig, enumerate_actions
from damq.fingerprint import (
    FP_LENGTH,
    RADIUS,
    Fingerprint,
    StaleCache,
    compute_features,
    fnv1a64,
    incremental_features,
    incremental_fp,
    morgan_fp,
    tanimoto,
)
from damq.molgraph import parse_smiles


def reference_fnv1a64(ints):
    """Independent FNV-1a over the same 8-byte little-endian encoding."""
    h = 0xCBF29CE484222325
    for value in ints:
        for byte in int(value & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"):
            h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class TestHash:
    def test_matches_reference(self):
        for seq in ([], [0], [1, 2, 3], [2**63, 2**64 - 1], list(range(50))):
            assert fnv1a64(seq) == reference_fnv1a64(seq)

    def test_order_sensitive(self):
        assert fnv1a64([1, 2]) != fnv1a64([2, 1])


class TestFingerprintType:
    def test_to_array(self):
        fp = Fingerprint((0, 5, 2047))
        arr = fp.to_array()
        assert arr.shape == (FP_LENGTH,)
        assert arr.sum() == 3
        assert arr[5] == 1.0 and arr[6] == 0.0
        assert fp.set_count == 3

    def test_single_atom_has_one_bit(self):
        # all radii of a lone atom cover the same atom set -> one feature
        for s in ("C", "N", "O"):
            assert morgan_fp(parse_smiles(s)).set_count == 1

    def test_distinct_elements_distinct_bits(self):
        assert morgan_fp(parse_smiles("C")) != morgan_fp(parse_smiles("O"))

    def test_symmetry_collapses_features(self):
        # benzene has at most one distinct environment per radius
        fp = morgan_fp(parse_smiles("c1ccccc1"))
        assert 1 <= fp.set_count <= RADIUS + 1

    def test_invariant_under_relabeling(self, rng):
        for _ in range(100):
            mol = random_molecule(rng, max_atoms=12, ring_bias=0.5)
            perm = list(range(mol.n_atoms))
            rng.shuffle(perm)
            assert morgan_fp(relabel(mol, perm)) == morgan_fp(mol)

    def test_custom_length_folding(self):
        fp = morgan_fp(parse_smiles("OCC(N)C=O"), length=64)
        assert fp.length == 64
        assert all(0 <= b < 64 for b in fp.bits)


class TestTanimoto:
    def test_identical(self):
        fp = morgan_fp(parse_smiles("OCC"))
        assert tanimoto(fp, fp) == 1.0

    def test_empty_pair(self):
        assert tanimoto(Fingerprint(()), Fingerprint(())) == 1.0

    def test_disjoint(self):
        assert tanimoto(Fingerprint((1, 2)), Fingerprint((3,))) == 0.0

    def test_known_ratio(self):
        a = Fingerprint((1, 2, 3))
        b = Fingerprint((2, 3, 4, 5))
        assert tanimoto(a, b) == pytest.approx(2 / 5)
        assert tanimoto(b, a) == tanimoto(a, b)

    def test_similar_molecules_score_high(self):
        phenol = morgan_fp(parse_smiles("OC1C=CC=CC=1"))
        catechol = morgan_fp(parse_smiles("OC1C(O)=CC=CC=1"))
        methane = morgan_fp(parse_smiles("C"))
        assert tanimoto(phenol, catechol) > tanimoto(phenol, methane)


class TestIncremental:
    def test_stale_cache_detected(self):
        mol = parse_smiles("OCC")
        other = parse_smiles("OCCC")
        table = compute_features(other)
        action = enumerate_actions(mol)[0]
        with pytest.raises(StaleCache):
            incremental_features(mol, table, action)

    def test_no_op_returns_same_table(self):
        mol = parse_smiles("OCC")
        table = compute_features(mol)
        noop = [a for a in enumerate_actions(mol) if a.kind == "no_op"][0]
        assert incremental_features(mol, table, noop) is table

    def test_full_table_match_on_all_actions(self):
        for s in ("O", "OCC", "OC1C=CC=CC=1", "OCC(O)CO", "OC1CC1C#N"):
            mol = parse_smiles(s)
            table = compute_features(mol)
            for action in enumerate_actions(mol):
                inc = incremental_features(mol, table, action)
                full = compute_features(action.result)
                assert inc.hashes == full.hashes
                assert inc.atomsets == full.atomsets

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_random_chain_bit_identical(self, seed):
        rng = random.Random(seed)
        mol = parse_smiles("O")
        table = compute_features(mol)
        for _ in range(60):
            aset = enumerate_actions(mol)
            action = aset[rng.randrange(len(aset))]
            fp_inc = incremental_fp(mol, table, action)
            assert fp_inc == morgan_fp(action.result)
            table = incremental_features(mol, table, action)
            mol = action.result

    def test_unprotected_chain_with_fragment_drops(self):
        rng = random.Random(7)
        cfg = ActionConfig(protect_oh=False)
        mol = parse_smiles("OCCN")
        table = compute_features(mol)
        for _ in range(80):
            aset = enumerate_actions(mol, cfg)
            action = aset[rng.randrange(len(aset))]
            assert incremental_fp(mol, table, action) == morgan_fp(action.result)
            table = incremental_features(mol, table, action)
            mol = action.result

    def test_locality_reuses_far_rows(self):
        # a 20-carbon chain edited at one end keeps distant rows by identity
        mol = parse_smiles("O" + "C" * 20)
        table = compute_features(mol)
        grow = [
            a
            for a in enumerate_actions(mol)
            if a.kind == "atom_add" and max(a.edited_atoms) == mol.n_atoms
        ]
        action = max(grow, key=lambda a: min(a.edited_atoms))
        inc = incremental_features(mol, table, action)
        edit_site = min(action.edited_atoms)
        far = [i for i in range(mol.n_atoms) if abs(i - edit_site) > RADIUS]
        assert far
        for i in far:
            assert inc.hashes[i] is table.hashes[i]
