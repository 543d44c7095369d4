from .losses import LossWeights, TERM_NAMES, total_loss
from .model import AttributeCode, NonFiniteLossError, StyleTransferGAN
from .networks import NetConfig, TranslationNets

__all__ = ["AttributeCode", "LossWeights", "NetConfig", "NonFiniteLossError", "StyleTransferGAN",
           "TERM_NAMES", "TranslationNets", "total_loss"]
