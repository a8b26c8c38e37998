"""UAV relay placement by searching the balance surface with locally fitted channel maps."""

from .citymap import CityMap, Scenario, generate_manhattan_map, make_scenario, place_users
from .channel import ChannelParams
from .trajectory import SearchConfig, run_search
from .baselines import evaluate_objective, exhaustive_2d, exhaustive_3d, genius_aided, proposed, statistical_geometry

__version__ = "0.1.0"

__all__ = [
    "CityMap",
    "Scenario",
    "ChannelParams",
    "SearchConfig",
    "generate_manhattan_map",
    "make_scenario",
    "place_users",
    "run_search",
    "evaluate_objective",
    "exhaustive_2d",
    "exhaustive_3d",
    "genius_aided",
    "proposed",
    "statistical_geometry",
]
