from last.side_tuning.backbone import Backbone, BackboneConfig, TapSchedule, ViTWeights, forward_with_taps
from last.side_tuning.side_network import SideConfig, SideState, init_side, side_forward
from last.side_tuning.datasets import ImageDataset, load_dataset, make_synth
from last.side_tuning.feature_cache import FeatureCache, extract, open_cache
from last.side_tuning.training import SweepPlan, TrainRun, evaluate, sweep, train
