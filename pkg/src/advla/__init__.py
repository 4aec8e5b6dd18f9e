"""Gray-box feature-space PGD attacks on a ViT encoder and projector.

Modules: ``tensor`` (reverse-mode autodiff), ``encoder`` (ViT + projector),
``guidance`` (attention maps, Top-K masks), ``attack`` (PGD and its guided
variants), ``harness`` (closed-loop reaching task), ``cli``.
"""

from .attack import AttackConfig, AttackResult, NumericalError, Strategy, run_attack
from .encoder import EncoderConfig, VisionEncoder, init_encoder, load_encoder, save_encoder

__all__ = [
    "AttackConfig", "AttackResult", "NumericalError", "Strategy", "run_attack",
    "EncoderConfig", "VisionEncoder", "init_encoder", "load_encoder", "save_encoder",
]
__version__ = "0.1.0"
