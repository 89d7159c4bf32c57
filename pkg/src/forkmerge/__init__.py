"""Fork-merge decoding for audio-visual transformer decoders, at desk scale."""
from .decoder import Decoder, ModelConfig, init_weights
from .engine import ForkConfig, FusionWeights, decode_fmd, decode_vanilla, estimate_alpha
from .fusion import ModalityLayout, assemble_channel_wise, assemble_token_wise, mask_modality

__version__ = "0.1.0"
