from .distortion import DistortionParams
from .allocator import AllocatorConfig, Allocation, PathEstimate, allocate
from .scenario import Scenario, ScenarioError, load_scenario, load_scenario_file
from .schedulers import SchedulerScheme
from .metrics import MetricsReport
from .simulator import run
