from .tensor import ParamStore
from .optim import OptimizerState, adam_step, sgd_step
from .gradcheck import grad_check
from . import ops
from . import layers
