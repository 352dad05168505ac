"""Joint estimation of hemodynamic responses and activation amplitudes
via a shared-shape (rank-1) constraint on the general linear model."""

__version__ = "0.1.0"

from .benchmark import (
    METHOD_GRID,
    BenchmarkConfig,
    ScoreReport,
    generate_benchmark_data,
    run_benchmark,
)
from .design import (
    DesignMatrix,
    EventTable,
    NuisanceMatrix,
    SeparateDesigns,
    build_condition_regressor,
    build_design,
    build_drift,
    build_separate_designs,
    concat_runs,
    read_events_csv,
    write_events_csv,
)
from .estimators import (
    VolumeFitResult,
    VoxelFit,
    extract_betas_and_hrfs,
    fit_volume,
    glm_fit,
    glms_fit,
    make_two_gamma_model,
    r1_objective_grad,
    r1glm_fit,
    r1glm_parametric_fit,
    r1glms_fit,
    r1glms_objective_grad,
)
from .hrf import (
    BasisSet,
    SampledHrf,
    hrf_peak_amplitude,
    make_3hrf_basis,
    make_basis,
    make_fir_basis,
    make_fixed_basis,
    sample_reference_hrf,
)
from .metrics import (
    binomial_proportion_test,
    encoding_score,
    identify_images,
    kendall_tau,
    pearson_r,
    ridge_gcv,
    wilcoxon_signed_rank,
)
from .solver import SolverConfig, check_gradient, lbfgs_box_minimize, qr_reduce
from .synth import (
    SynthConfig,
    generate_dataset,
    generate_multirun_dataset,
    generate_voxel,
    savgol_detrend,
)
