"""Learning-based distributionally robust MPC over scenario trees for a road-crossing scenario."""

from .decision import THETA_TRUE, Dataset, sample_dataset
from .dynamics import AgentState, WorldParams
from .eval import ExperimentConfig, evaluate_plan, run_experiment
from .learn import LearnedModel, NormBallLogisticRegression, erm_fit
from .ocp import OCPSettings, PlannerMode, PlanSolution, assemble, plan
from .risk import AmbiguitySet, risk_dual
from .solve import NLP, solve
from .tree import ConfigurationError, ScenarioTree, build_tree

__version__ = "0.1.0"

__all__ = [
    "AgentState", "AmbiguitySet", "ConfigurationError", "Dataset", "ExperimentConfig", "LearnedModel", "NLP",
    "NormBallLogisticRegression", "OCPSettings", "PlanSolution", "PlannerMode", "ScenarioTree", "THETA_TRUE",
    "WorldParams", "assemble", "build_tree", "erm_fit", "evaluate_plan", "plan", "risk_dual", "run_experiment",
    "sample_dataset", "solve",
]
