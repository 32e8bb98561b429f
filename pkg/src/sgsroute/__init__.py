"""Routing to parallel exponential servers with semi-gradient SARSA(0).

Modules: ``queueing`` (embedded-chain kernel and simulation), ``features``
(linear basis families), ``policy`` (softmax, greedy, JSQ, Bernoulli),
``learner`` (restrained SARSA(0) training), ``oracle`` (exact truncated-MDP
targets), ``diagnostics`` (drift certificates and convergence monitors) and
``harness``/``cli`` (runs and result tables).
"""

__version__ = "0.1.0"

from .features import BasisSpec, paper_basis  # noqa: E402
from .learner import AggregateLogCost, LearnerState, SeparableCost, StepSchedule, evaluate, train  # noqa: E402
from .policy import JSQ, Bernoulli, Greedy, Softmax  # noqa: E402
from .queueing import RandomStreams, SystemConfig  # noqa: E402

__all__ = [
    "AggregateLogCost", "BasisSpec", "Bernoulli", "Greedy", "JSQ", "LearnerState", "RandomStreams",
    "SeparableCost", "Softmax", "StepSchedule", "SystemConfig", "evaluate", "paper_basis", "train",
]
