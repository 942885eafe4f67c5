"""Differentiable channel sparsity search on a small numpy autodiff engine."""

from .config import ExperimentConfig, load_config, parse_config
from .extraction import SlimPlan, derive_plan, extract_slim, plan_from_model
from .gates import CandidateSet, TemperatureSchedule, gate_probs, make_candidates, temperature_at
from .models import ModelSpec, SuperNet, build_model
from .pipeline import run_pipeline
from .search import SearchConfig, search, warmup

__version__ = "0.1.0"
