"""Array autodiff core: tensors, layers, optimizer, RNG, checkpoints."""
from .config import (
    NonFiniteError,
    check_finite_enabled,
    default_dtype,
    ensure_finite,
    grad_enabled,
    no_grad,
    precision,
    set_check_finite,
    set_default_dtype,
)
from .tensor import Tensor, concat, ones, tensor, zeros
from .functional import (
    avg_pool2d,
    conv2d,
    conv_transpose2d,
    group_norm,
    linear,
    softmax,
    upsample_nearest,
)
from .optim import AdamState, ParamStore, adamw_step, ema_update
from .rng import make_rng
from .checkpoint import (
    FORMAT_NAME,
    CheckpointError,
    import_weights,
    load_checkpoint,
    save_checkpoint,
)
from .gradcheck import grad_check
from . import init

__all__ = [
    "AdamState",
    "CheckpointError",
    "FORMAT_NAME",
    "NonFiniteError",
    "ParamStore",
    "Tensor",
    "adamw_step",
    "avg_pool2d",
    "check_finite_enabled",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "default_dtype",
    "ema_update",
    "ensure_finite",
    "grad_check",
    "grad_enabled",
    "group_norm",
    "import_weights",
    "init",
    "linear",
    "load_checkpoint",
    "make_rng",
    "no_grad",
    "ones",
    "precision",
    "save_checkpoint",
    "set_check_finite",
    "set_default_dtype",
    "softmax",
    "tensor",
    "upsample_nearest",
    "zeros",
]
