"""Multi-source domain adaptation by whitening/coloring image translation."""

from .config import ExperimentConfig
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig

__all__ = ["ExperimentConfig", "Discriminator", "DiscriminatorConfig", "Generator", "GeneratorConfig"]
__version__ = "0.1.0"
