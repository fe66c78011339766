"""Simulation and verification toolkit for permutation processes on lattices.

Configurations are particle occupancies; dynamics fire finite permutations at
shift-invariant rates.  The package pairs every stochastic engine with an
exact or combinatorial counterpart so each claim is checkable two ways.
"""

from .errors import (
    BadInitial,
    InvalidFamily,
    NoCover,
    NotRangeClosed,
    NotSymmetric,
    PermutaError,
    PropertyViolation,
    SectorReducible,
    TooLarge,
    TorusTooSmall,
)
from .lattice import Lattice
from .permutation import (
    IDENTITY,
    FinitePermutation,
    apply,
    canonical_range_order,
    compose,
    cycle_notation,
    derangement_count,
    derangement_count_inclusion_exclusion,
    enumerate_cyclic,
    enumerate_derangements,
    inverse,
    orbit,
    order,
    power,
    select_sigma_general,
    select_sigma_two_discrepancy,
    word_apply,
)
from .rates import (
    ClosureReport,
    FamilyReport,
    RateFamily,
    check_irreducibility,
    check_range_closure,
    check_symmetry,
    compute_M_I,
    compute_M_II,
    compute_M_PL,
    consecutive_three_cycles,
    expand,
    family_hash,
    family_to_dict,
    load_family,
    nearest_neighbor_swaps,
    parse_family,
    range_stats,
    ranges_covering,
    require_simulatable,
    validate_family,
    z_d,
)
from .process import (
    Configuration,
    DualState,
    Estimate,
    Trajectory,
    duality_mc,
    run_config,
    run_finite,
    sample_product,
    write_trajectory_csv,
)
from .coupling import (
    CoupledState,
    CouplingEvent,
    CouplingResult,
    GEstimates,
    GInequalityReport,
    LemmaReport,
    SuccessBoundReport,
    TableRow,
    TripleResult,
    TripleState,
    check_g_inequalities,
    estimate_g,
    general_block_rows,
    lemma_D_monotone,
    lemma_cover_existence,
    recurrent_block_rows,
    run_general_coupling,
    run_recurrent_coupling,
    run_triple,
    success_bound_check,
    write_coupling_csv,
)
from .exact import (
    FalsifierReport,
    GeneratorMatrix,
    SectorDistribution,
    asymmetric_duality_falsifier,
    build_generator,
    duality_exact,
    product_measure_vector,
    sector_stationary,
    stationarity_residual,
)

__version__ = "0.1.0"
