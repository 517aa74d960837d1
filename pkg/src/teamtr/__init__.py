"""Sequential per-agent trust-region updates for shared-context agent teams, with exact tabular evaluation."""

__version__ = "0.1.0"

from .env import EnvConfig, RewardSpec, Router, StateSpace
from .errors import (CapacityError, ConfigError, DomainError, EstimationError, NumericalError, TeamTRError,
                     ValidationError)
from .policy import AgentPolicy, TeamPolicy, init_team

__all__ = ["EnvConfig", "RewardSpec", "Router", "StateSpace", "AgentPolicy", "TeamPolicy", "init_team",
           "TeamTRError", "ConfigError", "DomainError", "EstimationError", "NumericalError", "CapacityError",
           "ValidationError", "__version__"]
