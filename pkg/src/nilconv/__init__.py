"""Multi-parameter convolution calculus on products of graded nilpotent groups.

Subsystems: graded groups and their products (groups, product), lattice
discretization (grid), kernel representations and diagnostics (kernels),
group convolution and operator norms (convolution), localized seminorms
(seminorms), two-sided product estimates (tame), damped Neumann inversion
(inversion), and the command line front end (cli).
"""

from .convolution import (
    OpNormEstimate,
    adjoint_kernel,
    apply_op,
    boundary_mass_fraction,
    compose_kernels,
    convolve,
    left_derivative,
    op_norm,
    power_method,
    right_translate,
)
from .grid import GridFunction, GridSpec, zero_lowest_face
from .groups import GradedLieAlgebra, abelian, heisenberg1, load_group, save_group
from .inversion import (
    NOT_INVERTIBLE,
    DecayReport,
    EpsilonChoice,
    InversionResult,
    choose_epsilon,
    near_identity_kernel,
    neumann_invert,
    probe_functions,
    seminorm_decay,
    smallest_singular,
)
from .kernels import (
    CLOSED_FORM_CATALOG,
    CancellationReport,
    ClosedFormKernel,
    DeltaKernel,
    DiscreteHilbertKernel,
    DyadicKernel,
    GridKernel,
    GrowthReport,
    KernelRep,
    TensorKernel,
    check_cancellation,
    check_growth,
    load_kernel,
    save_kernel,
    synth_dyadic,
)
from .product import MultiIndex, ProductGroup, load_product, preset
from .seminorms import SeminormConfig, SeminormReport, fk_seminorm, pk_seminorm
from .tame import (
    TameReport,
    swap_consistent,
    tame_csv,
    tame_report_fk,
    tame_report_pk,
    tame_report_single,
)

__all__ = [
    "CLOSED_FORM_CATALOG",
    "CancellationReport",
    "ClosedFormKernel",
    "DecayReport",
    "DeltaKernel",
    "DiscreteHilbertKernel",
    "DyadicKernel",
    "EpsilonChoice",
    "GradedLieAlgebra",
    "GridFunction",
    "GridKernel",
    "GridSpec",
    "GrowthReport",
    "InversionResult",
    "KernelRep",
    "MultiIndex",
    "NOT_INVERTIBLE",
    "OpNormEstimate",
    "ProductGroup",
    "SeminormConfig",
    "SeminormReport",
    "TameReport",
    "TensorKernel",
    "abelian",
    "adjoint_kernel",
    "apply_op",
    "boundary_mass_fraction",
    "check_cancellation",
    "check_growth",
    "choose_epsilon",
    "compose_kernels",
    "convolve",
    "fk_seminorm",
    "heisenberg1",
    "left_derivative",
    "load_group",
    "load_kernel",
    "load_product",
    "near_identity_kernel",
    "neumann_invert",
    "op_norm",
    "pk_seminorm",
    "power_method",
    "preset",
    "probe_functions",
    "right_translate",
    "save_group",
    "save_kernel",
    "seminorm_decay",
    "smallest_singular",
    "swap_consistent",
    "synth_dyadic",
    "tame_csv",
    "tame_report_fk",
    "tame_report_pk",
    "tame_report_single",
    "zero_lowest_face",
]
