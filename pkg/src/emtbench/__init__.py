"""emtbench: real-time EMT simulation and HiL relay test bench."""

__version__ = "0.1.0"
