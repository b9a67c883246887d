"""Nonintrusive image-watermark channel around a frozen model, with verification,
attack bench and a two-channel HTTP service."""

__version__ = "0.1.0"

from .data import WatermarkImage, make_mark, render_text_mark  # noqa: E402
from .keys import Key, keygen, load_key, sample_wrong_key, save_key  # noqa: E402
from .train import TrainConfig, TrainedPipeline, decode, encode  # noqa: E402
from .verdict import (  # noqa: E402
    VerificationPolicy,
    VerificationReport,
    ncc,
    nccd,
    verify_original,
    verify_surrogate,
)
from .zoo import (  # noqa: E402
    ProtectedModelHandle,
    build_network,
    load_blackbox,
    load_checkpoint,
    load_protected,
    pretrain_protected_model,
    save_checkpoint,
)

__all__ = [
    "Key",
    "ProtectedModelHandle",
    "TrainConfig",
    "TrainedPipeline",
    "VerificationPolicy",
    "VerificationReport",
    "WatermarkImage",
    "build_network",
    "decode",
    "encode",
    "keygen",
    "load_blackbox",
    "load_checkpoint",
    "load_key",
    "load_protected",
    "make_mark",
    "ncc",
    "nccd",
    "pretrain_protected_model",
    "render_text_mark",
    "sample_wrong_key",
    "save_checkpoint",
    "save_key",
    "verify_original",
    "verify_surrogate",
]
