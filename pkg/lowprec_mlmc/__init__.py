from .softfloat import PrecisionSpec, parse_precision, round_to_precision, fp_add, fp_sub, fp_mul, fp_div, fp_sqrt
from .randvar import InvCdfApprox, build_inv_cdf_approx, parse_approx, exact_inv_cdf, approx_inv_cdf
from .sde import GeometricBrownianMotion, NumericalError, simulate_coupled, simulate_paths, step_error_probe
from .mlmc import CostModel, LevelStats, allocate_samples, estimate_level_stats, per_level_speedup, run_nested_estimator
