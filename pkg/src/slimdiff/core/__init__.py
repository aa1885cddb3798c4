from .batch import LatentBatch
from .scheduler import Scheduler, SchedulerConfig, add_noise, ddim_step, denoise_step, make_scheduler
from .codec import CodecConfig, ConvAutoencoderCodec, PoolStubCodec, decode_latent, encode_latent, make_codec
from .conditioning import ConditioningTable, build_conditioning

__all__ = [
    "LatentBatch",
    "Scheduler",
    "SchedulerConfig",
    "add_noise",
    "ddim_step",
    "denoise_step",
    "make_scheduler",
    "CodecConfig",
    "ConvAutoencoderCodec",
    "PoolStubCodec",
    "decode_latent",
    "encode_latent",
    "make_codec",
    "ConditioningTable",
    "build_conditioning",
]
