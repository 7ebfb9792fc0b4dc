"""Off-chain transfer protocol simulator with a symbolic attacker oracle."""

from .adversary import SCENARIOS, Verdict, can_spend, closure, run_attack
from .backend import get_backend
from .ledger import Ledger
from .protocol import MODES, Simulation
from .scenario import parse_scenario, run_scenario
from .store import DestructiveStore

__all__ = [
    "SCENARIOS",
    "MODES",
    "Verdict",
    "can_spend",
    "closure",
    "run_attack",
    "get_backend",
    "Ledger",
    "Simulation",
    "parse_scenario",
    "run_scenario",
    "DestructiveStore",
]

__version__ = "0.1.0"
