"""Adversarial lower-bound simulator for the fractional (h,k)-server problem on trees."""

from .adversary import EpochAdversary, PhaseAdversary, infinite_server_mode, lemma_adversary, marking_candidate_bound
from .algorithms import ALGORITHMS, OnlineAlgorithm, ServeDecision, make_algorithm
from .harness import RunConfig, RunSummary, emit_plot_data, run, sweep, verify
from .mass import CostLedger, MassConfig, Transfer, apply_transfers, capped_view, initial_config, subtree_mass
from .offline import adv_cost, brute_force_opt, enumerate_opt, validate_bounds
from .tree import ConstructionParams, MetricTree, derive_params, theorem_schedule

__version__ = "0.1.0"
