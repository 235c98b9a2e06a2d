from .config import LUT_SIZES, CrossbarConfig, HardwareConfig, dump_hardware, load_hardware
from .layer import ProgrammedLayer, layer_nonideal_forward, quantized_ideal_forward
from .mvm import AdcSpec, ConductanceSliceStack, nonideal_mvm, program_weights
from .solver import CrossbarNetwork, SolverReport, device_conductance, ideal_mvm, solve_crossbar

__all__ = [
    "LUT_SIZES",
    "AdcSpec",
    "ConductanceSliceStack",
    "CrossbarConfig",
    "CrossbarNetwork",
    "HardwareConfig",
    "ProgrammedLayer",
    "SolverReport",
    "device_conductance",
    "dump_hardware",
    "ideal_mvm",
    "layer_nonideal_forward",
    "load_hardware",
    "nonideal_mvm",
    "program_weights",
    "quantized_ideal_forward",
    "solve_crossbar",
]
