"""CPU inference engine with frozen core-neuron sparse decoding."""

__version__ = "0.1.0"
