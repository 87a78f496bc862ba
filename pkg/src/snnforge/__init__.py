"""Spiking conversion toolkit for small convolutional encoder-decoder networks.

The package covers the full path from a conventionally trained network to a
deployable spiking one: dense tensor kernels (`tensor`), multi-threshold
integrate-and-fire neurons (`neuron`), U-Net construction and training
(`ann`), activation-statistics driven weight normalization (`conversion`),
time-stepped simulation (`runtime`), fine-tuning on accumulated spiking flows
(`finetune`), spike-driven energy accounting (`energy`) and quality metrics
(`metrics`).  `cli` wires everything into a reproducible command line.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    MissingArtifactError,
    NumericalError,
    ShapeError,
)
