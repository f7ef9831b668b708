"""Homotopy path following for the bivariate penalized DAG-learning problem."""
from .errors import AdmissibilityError, DomainError, NumericFailure, PreconditionError
from .model import (Dataset, ModelParams, PenalizedObjective, Point, SecondMoment,
                    acyclicity_penalty, enumeration_oracle, gradient, hessian,
                    loss_from_moments, penalized_objective, population_loss, sample_sem,
                    smoothness_bound)
from .stationary import (Branch, CurvatureBounds, Kind, RegionFlags, StationaryPoint,
                         StationarySet, Threshold, classify_stationary, critical_tau, eval_perturbed,
                         eval_r, eval_t, region_membership, solve_stationary_points,
                         x_curvature_bounds, y_curvature_bounds)
from .dynamics import DescentOptions, FlowOptions, SolveResult, gradient_descent, gradient_flow
from .homotopy import (HomotopyReport, Schedule, StageRecord, StopRule, distance_to_global,
                       gd_stage_params, next_mu, outer_iteration_bound, run_homotopy_flow,
                       run_homotopy_gd, validate_mu0)

__version__ = "0.1.0"
