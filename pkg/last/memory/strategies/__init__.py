from . import full
from . import bias_only
from . import prompt
from . import entangled_lowrank
from . import ladder_side
from . import linear_probe
from . import last
