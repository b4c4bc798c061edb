"""LAST: low-rank attention side-tuning of a frozen vision transformer."""
import os
from last.side_tuning.backbone import Backbone, BackboneConfig
from last.side_tuning.side_network import SideConfig
from last.side_tuning.feature_cache import FeatureCache, extract, open_cache
from last.side_tuning.training import SweepPlan, TrainRun, sweep, train
from last.memory import estimate

LAST_PATH = os.path.abspath(os.path.dirname(os.path.realpath(__file__)))

__version__ = "0.1.0"
