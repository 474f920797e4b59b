from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import (
    FeatureExtractor,
    HashGridConfig,
    HashGridEncoder,
    OneBlobEncoder,
    hashgrid_backward,
    hashgrid_encode,
    oneblob_encode,
    quantize,
)
from .mlp import MlpHead, mlp_backward, mlp_forward, param_count, widths_for_target
from .optim import AdamWState, adamw_step

__all__ = [
    "AdamWState", "FeatureExtractor", "HashGridConfig", "HashGridEncoder", "MlpHead",
    "OneBlobEncoder", "adamw_step", "hashgrid_backward", "hashgrid_encode", "load_checkpoint",
    "mlp_backward", "mlp_forward", "oneblob_encode", "param_count", "quantize",
    "save_checkpoint", "widths_for_target",
]
