from .assignment import assignment_cost, hungarian_assign
from .capt import CaptPlan, UnsupportedConfigurationError, capt_metrics, capt_plan
from .formations import FormationSpec, check_inside, make_formation
from .vo import VOConfig, closest_approach, vo_filter
