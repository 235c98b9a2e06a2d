"""Joint search of layer kernels and per-layer crossbar sizes for memristive
in-memory accelerators, with a nodal crossbar simulator and cost model."""

__version__ = "0.1.0"

from pathlib import Path

CONFIG_DIR = Path(__file__).parent / "configs"  # shipped network, hardware, cost and search files
