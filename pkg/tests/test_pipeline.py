"""Dataset ingestion, presets, training orchestration, filter, and reports."""

import csv
from pathlib import Path

import pytest

from damq.agent import EpsilonSchedule, load_checkpoint
from damq.molgraph import canonical_smiles
from damq.pipeline import (
    MODE_PRESETS,
    DatasetError,
    EmptyDataset,
    FilterCriteria,
    RunConfig,
    apply_filter,
    apply_overrides,
    compute_ofr,
    dataset_bounds,
    fine_tune,
    load_config_file,
    load_dataset,
    report,
    run_training,
    success_predicate,
)


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------


class TestLoadDataset:
    def test_comments_and_blanks(self, tmp_path):
        path = tmp_path / "mols.smi"
        path.write_text("CO\n#x\n\nCCO  # inline comment\n")
        assert load_dataset(path) == [canonical_smiles("CO"),
                                      canonical_smiles("CCO")]

    def test_triple_bond_not_a_comment(self, tmp_path):
        path = tmp_path / "mols.smi"
        path.write_text("OCC#N # a nitrile, hash bond intact\n")
        assert load_dataset(path) == [canonical_smiles("OCC#N")]

    def test_no_oh_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "mols.smi"
        path.write_text("CO\nCOC\n")
        with pytest.raises(DatasetError, match=r"mols\.smi:2.*NoOhBond"):
            load_dataset(path)

    def test_parse_error_with_line_number(self, tmp_path):
        path = tmp_path / "mols.smi"
        path.write_text("CO\nC1CC\n")
        with pytest.raises(DatasetError, match=r"mols\.smi:2"):
            load_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "mols.smi"
        path.write_text("# only comments\n\n")
        with pytest.raises(EmptyDataset):
            load_dataset(path)

    def test_bundled_corpus_loads(self):
        corpus = load_dataset(Path(__file__).parent.parent / "data/phenolics.smi")
        assert len(corpus) == 100
        assert len(set(corpus)) == 100


# ---------------------------------------------------------------------------
# Presets and config
# ---------------------------------------------------------------------------


class TestPresets:
    def test_table_snapshot(self):
        assert MODE_PRESETS["individual"] == dict(
            episodes=8000, epsilon_initial=1.0, epsilon_decay=0.999,
            train_batch=128, workers=1, modification_batch=1,
        )
        assert MODE_PRESETS["parallel"]["modification_batch"] == 8
        assert MODE_PRESETS["general"] == dict(
            episodes=250, epsilon_initial=1.0, epsilon_decay=0.970,
            train_batch=512, workers=4, modification_batch=4,
        )
        assert MODE_PRESETS["fine_tune"] == dict(
            episodes=200, epsilon_initial=0.5, epsilon_decay=0.961,
            train_batch=128, workers=1, modification_batch=1,
        )

    def test_preset_construction(self):
        cfg = RunConfig.preset("fine_tune")
        assert cfg.episodes == 200
        assert cfg.epsilon_schedule() == EpsilonSchedule(0.5, 0.961, 0.01)

    def test_preset_overrides(self):
        cfg = RunConfig.preset("general", episodes=10)
        assert cfg.episodes == 10
        assert cfg.epsilon_decay == 0.970

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            RunConfig.preset("turbo")

    def test_default_max_steps(self):
        assert RunConfig().max_steps == 10


class TestConfigFile:
    def test_preset_inheritance_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "preset=fine_tune\n"
            "episodes=5  # short\n"
            "bde_bounds=50,120\n"
            "sequential=true\n"
            "\n"
        )
        cfg = load_config_file(path)
        assert cfg.episodes == 5
        assert cfg.epsilon_initial == 0.5  # inherited
        assert cfg.bde_bounds == (50.0, 120.0)
        assert cfg.sequential is True

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("turbo=yes\n")
        with pytest.raises(DatasetError):
            load_config_file(path)

    def test_bad_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("episodes\n")
        with pytest.raises(DatasetError, match=":1"):
            load_config_file(path)

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DAMQ_SEED", "777")
        cfg = apply_overrides(RunConfig(), {"seed": 1})
        assert cfg.seed == 777


class TestDatasetBounds:
    def test_bounds_span_dataset(self):
        lo_b, hi_b, lo_i, hi_i = dataset_bounds(["O", "OCC", "OC1C=CC=CC=1"])
        assert lo_b == 91.0 and hi_b == 100.0
        assert lo_i < hi_i

    def test_degenerate_bounds_widened(self):
        lo_b, hi_b, lo_i, hi_i = dataset_bounds(["O"])
        assert lo_b < hi_b
        assert lo_i < hi_i


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------


def quick_cfg(tmp_path, **kw):
    defaults = dict(
        episodes=2, workers=1, max_steps=3, train_batch=8, seed=3,
        sequential=True, output_dir=str(tmp_path / "run"),
    )
    defaults.update(kw)
    return RunConfig(**defaults)


DATASET = ["O", "OC", "OCC", "OCO"]


class TestRunTraining:
    def test_outputs(self, tmp_path):
        rep = run_training(quick_cfg(tmp_path), DATASET)
        rows = list(csv.DictReader(open(rep.metrics_path)))
        # one row per (episode, molecule)
        assert len(rows) == 2 * len(DATASET)
        assert [r["episode"] for r in rows] == ["0"] * 4 + ["1"] * 4
        params = load_checkpoint(rep.checkpoint_path)
        assert params.checksum() == rep.final_checksum
        best = list(csv.DictReader(open(rep.best_path)))
        assert len(best) == len(DATASET)
        assert {r["initial_smiles"] for r in best} == set(DATASET)

    def test_requires_dataset(self, tmp_path):
        with pytest.raises(DatasetError):
            run_training(quick_cfg(tmp_path))

    def test_deterministic_metrics(self, tmp_path):
        rep1 = run_training(quick_cfg(tmp_path, output_dir=str(tmp_path / "a")),
                            DATASET)
        rep2 = run_training(quick_cfg(tmp_path, output_dir=str(tmp_path / "b")),
                            DATASET)
        assert Path(rep1.metrics_path).read_bytes() == Path(
            rep2.metrics_path
        ).read_bytes()
        assert rep1.final_checksum == rep2.final_checksum


class TestFineTune:
    def test_zero_episodes_is_passthrough(self, tmp_path):
        rep = run_training(quick_cfg(tmp_path), DATASET)
        out = fine_tune(
            rep.checkpoint_path, "OC",
            quick_cfg(tmp_path, episodes=0, output_dir=str(tmp_path / "ft")),
        )
        assert out.final_checksum == rep.final_checksum
        assert load_checkpoint(out.checkpoint_path).checksum() == rep.final_checksum

    def test_fine_tune_runs_single_molecule(self, tmp_path):
        rep = run_training(quick_cfg(tmp_path), DATASET)
        out = fine_tune(
            rep.checkpoint_path, "OC",
            quick_cfg(tmp_path, episodes=2, output_dir=str(tmp_path / "ft2")),
        )
        assert list(out.best) == ["OC"]

    def test_default_preset_epsilon(self):
        cfg = RunConfig.preset("fine_tune")
        assert cfg.epsilon_initial == 0.5
        assert cfg.episodes == 200


# ---------------------------------------------------------------------------
# Filter / OFR
# ---------------------------------------------------------------------------


def rec(smiles="OCCCCCCCCCC", bde=75.0, ip=150.0, sa=3.0):
    return {"smiles": smiles, "bde": bde, "ip": ip, "sa": sa}


class TestFilter:
    def test_accept_all_thresholds_met(self):
        accepted, rejected = apply_filter([rec()], ["O"])
        assert len(accepted) == 1 and not rejected

    def test_reject_reasons(self):
        results = [
            rec(bde=80.0),
            rec(ip=140.0),
            rec(sa=4.0),
            rec(bde=None),
        ]
        accepted, rejected = apply_filter(results, ["O"])
        assert not accepted
        assert [r for _, r in rejected] == [
            ["bde_max"], ["ip_min"], ["sa_max"], ["bde_max"]
        ]

    def test_boundary_semantics(self):
        # bde must be strictly below 76, ip strictly above 145; sa 3.5 passes
        _, rejected = apply_filter([rec(bde=76.0)], ["O"])
        assert rejected
        _, rejected = apply_filter([rec(ip=145.0)], ["O"])
        assert rejected
        accepted, _ = apply_filter([rec(sa=3.5)], ["O"])
        assert accepted

    def test_identical_to_dataset_rejected(self):
        dataset = ["OCCCCCCCCCC"]
        _, rejected = apply_filter([rec(smiles="CCCCCCCCCCO")], dataset)
        assert rejected[0][1] == ["identical"]
        accepted, _ = apply_filter(
            [rec(smiles="CCCCCCCCCCO")], dataset,
            FilterCriteria(exclude_identical=False),
        )
        assert accepted

    def test_partition_property(self):
        results = [rec(bde=70.0 + i, sa=2.0 + i * 0.5) for i in range(8)]
        accepted, rejected = apply_filter(results, ["O"])
        assert len(accepted) + len(rejected) == len(results)
        accepted_ids = {id(r) for r in accepted}
        rejected_ids = {id(r) for r, _ in rejected}
        assert not accepted_ids & rejected_ids


class TestOfr:
    def test_examples(self):
        assert compute_ofr(3, 4) == 0.25
        assert compute_ofr(7, 7) == 0.0

    def test_reference_value(self):
        assert abs(compute_ofr(99, 256) - 0.6133) < 5e-5

    def test_zero_attempts(self):
        with pytest.raises(ValueError):
            compute_ofr(0, 0)

    def test_success_predicate(self):
        assert success_predicate(75.0, 150.0)
        assert not success_predicate(76.0, 150.0)
        assert not success_predicate(75.0, 145.0)
        assert not success_predicate(None, 150.0)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class TestReport:
    def test_summary_tables(self, tmp_path):
        rep = run_training(quick_cfg(tmp_path, episodes=3), DATASET)
        out = tmp_path / "report"
        summary = report([Path(rep.metrics_path).parent], out, svg=True)
        hist = list(csv.DictReader(open(out / "reward_histogram.csv")))
        assert sum(int(r["count"]) for r in hist) == len(DATASET)
        ofr_row = list(csv.DictReader(open(out / "ofr.csv")))[0]
        assert float(ofr_row["ofr"]) == compute_ofr(
            int(ofr_row["successes"]), int(ofr_row["attempts"])
        )
        assert summary["attempts"] == len(DATASET)
        scatter = list(csv.DictReader(open(out / "bde_ip_scatter.csv")))
        assert len(scatter) == summary["accepted_scatter"]
        assert (out / "reward_histogram.svg").exists()

    def test_empty_run_dirs_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        (tmp_path / "empty" / "best.csv").write_text(
            "initial_smiles,best_smiles,best_reward,best_bde,best_ip,"
            "end_smiles,end_reward\n"
        )
        with pytest.raises(DatasetError):
            report([tmp_path / "empty"], tmp_path / "r")
