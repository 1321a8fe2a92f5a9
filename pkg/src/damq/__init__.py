"""Distributed DQN optimization of antioxidant-like molecules."""

from .molgraph import (
    MolGraph,
    MolError,
    parse_smiles,
    write_smiles,
    canonical_smiles,
    has_oh_bond,
    free_valence,
    ring_membership,
)
from .actions import Action, ActionConfig, ActionSet, NoOhBond, enumerate_actions
from .fingerprint import Fingerprint, incremental_fp, morgan_fp, tanimoto
from .predictors import (
    PredictorCache,
    PropertyResult,
    SurrogateBackend,
    make_backend,
    predict,
)
from .reward import RewardConfig, dft_bde, dft_ip, gamma_term, normalize, reward
from .agent import (
    EpsilonSchedule,
    ModelParams,
    ReplayBuffer,
    Transition,
    q_value,
    select_action,
    train_step,
)
from .pipeline import (
    FilterCriteria,
    RunConfig,
    apply_filter,
    compute_ofr,
    fine_tune,
    load_dataset,
    report,
    run_training,
)

__version__ = "0.1.0"
