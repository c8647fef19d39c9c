"""Dyadic scaffolding and square-function checks on regular boundary sets.

The package builds discretized regular boundary sets, dyadic cube
hierarchies on them, Whitney decompositions of the complement, and the
cone/chain functionals that tie local test-function estimates to global
square-function bounds.  `scenario.run_tb_pipeline` sequences the whole
verification; the `adrsq` console script drives it from JSON configs.
"""

from .geometry import (
    KINDS,
    UNBOUNDED_KINDS,
    AdrReport,
    BoundarySet,
    GeometryError,
    SurfaceBall,
    load_boundary_set,
    make_boundary_set,
    save_boundary_set,
    sigma_ball,
    verify_adr,
)
from .dyadic import (
    Cutoff,
    DyadicCube,
    DyadicGrid,
    GridConstants,
    GridError,
    GridReport,
    build_cutoff,
    build_grid,
    save_grid,
    verify_grid,
)
from .whitney import (
    ConeIndex,
    ConeRegion,
    WhitneyDecomposition,
    WhitneyError,
    WhitneyReport,
    beta_star,
    build_whitney,
    collection_CQ,
    cone,
    save_whitney,
    verify_whitney,
)
from .operators import (
    KERNEL_NAMES,
    ApproxIdentity,
    BoxSamples,
    Kernel,
    KernelError,
    KernelReport,
    build_approx_identity,
    dyadic_average,
    dyadic_maximal,
    global_square_norm,
    make_kernel,
    reproduce_residual,
    square_sum_Dj,
    theta_apply,
    theta_constant,
    theta_on_boxes,
    verify_kernel,
)
from .tb import (
    SYSTEM_GENERATORS,
    CarlesonCoefficients,
    HypothesesReport,
    K_epsilon,
    PackingReport,
    StoppingFamily,
    T1Report,
    TailReport,
    TbError,
    TestSystem,
    bounded_tail,
    carleson_embedding_check,
    carleson_functional,
    certificate_check,
    embedding_layer_cake,
    generate_test_system,
    good_cubes,
    level_set_fraction,
    local_square_function,
    sawtooth_inclusion_check,
    stopping_time,
    system_theta_samples,
    t1_check,
    verify_packing,
    verify_tb_hypotheses,
)
from .scenario import (
    PIPELINE_STAGES,
    PipelineResult,
    Scenario,
    ScenarioBundle,
    ScenarioError,
    emit_convergence,
    load_scenario,
    make_test_function,
    run_tb_pipeline,
    scenario_from_dict,
)
from .report import (
    REPORT_SCHEMA_VERSION,
    ReportError,
    report_schema,
    validate_report,
    write_csv,
    write_json,
)

__version__ = "0.1.0"
