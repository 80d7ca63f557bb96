"""Exact simulation, discretisation and coupling of piecewise deterministic Markov processes."""

__version__ = "0.1.0"

from .core import (EventLog, Flow, KernelFamily, PdmpSpec, RateFamily, SkeletonPath, advance_exact,
                   next_event_time_exact, sample_kernel_index, simulate_exact)
from .couplings import (CoupledRun, couple_higher_order_step, couple_subsampling_step, couple_tv_step,
                        couple_wasserstein_step, run_coupled)
from .diagnostics import (MomentTrace, SweepResult, fit_loglog_order, forward_pde_oracle_1d,
                          lyapunov_moment_trace, stationary_bias_curve, tv_indicator_curve,
                          wasserstein_proxy_curve, weak_error_sweep)
from .errors import (ConfigError, EventStorm, GridTooCoarse, InsufficientSignal, InvalidConfig, NoExactFlow,
                     NoSimulationPath, NoVectorField, PdmpError, ThinningBoundViolated, ZeroGradient,
                     ZeroTotalRate)
from .models import (BpsModel, CellSizeModel, GaussianPotential, LogisticRegressionPotential, MorrisLecarModel,
                     Potential, RhmcModel, TelegraphModel, ZzsModel, ZzsSubsamplingModel, bps_reflect,
                     lyapunov_bps, lyapunov_zzs, lyapunov_zzs_discrete, subsampling_step, zzs_flip, zzs_rate)
from .rng import Streams
from .schemes import (DiscretePath, FlowApprox, KernelApprox, SchemeConfig, rate_approx, simulate_scheme,
                      step_fd, step_order_p, step_pd)
