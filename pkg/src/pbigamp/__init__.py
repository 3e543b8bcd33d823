"""Scalar-variance parametric bilinear generalized AMP.

Jointly estimates the two parameter vectors of a bilinear measurement model
under separable priors and likelihoods, with structured operator backends,
adaptive damping, and EM hyperparameter learning.
"""

from .channels import (Awgn, BernoulliGaussian, FiniteAlphabet, Gaussian,
                       InputDenoiser, PosteriorMoment)
from .em import EMConfig, default_theta, em_fit, em_update
from .parametrization import (DenseTensor, LowRankPlusSparse, LowRankTrace,
                              MatrixProduct, MultiSnapshot, Tensorization,
                              from_matrix_product, lift_matrix_uncertainty)
from .problems import (Metrics, ProblemInstance, counting_bound, evaluate,
                       gen_blind_deconv, gen_iid, gen_matrix_cs,
                       gen_matrix_uncertainty, gen_self_calibration,
                       load_instance, save_instance)
from .solver import (DampingConfig, RunReport, SolverState, cost, init_state,
                     iterate_once, restart_schedule, run)

__version__ = "0.1.0"
