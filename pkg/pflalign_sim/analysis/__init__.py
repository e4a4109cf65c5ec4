from .metrics import GSNR_CAP, aggregation_consistency, gsnr, student_t_interval
from .oracles import (
    GaussianDiag,
    PacBayesPreconditionerState,
    alignment_gamma_signed,
    alignment_probability,
    kl_gaussian_diag,
    kl_grad_wrt_delta,
    mc_alignment_probability,
    pacbayes_alpha_cumulative,
    pacbayes_mean_fraction,
    pacbayes_objective,
    pacbayes_precond_update,
    preconditioner_divergence,
    svag_deviation,
    svag_factor,
    svrg_estimator,
)

__all__ = [
    "GSNR_CAP",
    "GaussianDiag",
    "PacBayesPreconditionerState",
    "aggregation_consistency",
    "alignment_gamma_signed",
    "alignment_probability",
    "gsnr",
    "kl_gaussian_diag",
    "kl_grad_wrt_delta",
    "mc_alignment_probability",
    "pacbayes_alpha_cumulative",
    "pacbayes_mean_fraction",
    "pacbayes_objective",
    "pacbayes_precond_update",
    "preconditioner_divergence",
    "student_t_interval",
    "svag_deviation",
    "svag_factor",
    "svrg_estimator",
]
