"""Search hyper-parameters and their ``key = value`` file."""

from __future__ import annotations

from dataclasses import dataclass

from ..configio import dump_dataclass, load_dataclass, parse_bool, parse_int_list
from ..errors import ConfigError


@dataclass(frozen=True)
class SearchConfig:
    lambda1: float = 5e-4  # weight decay
    lambda2: float = 0.0  # expected latency (s*mm2)
    lambda3: float = 0.0  # expected energy (mJ)
    lr_w: float = 0.05
    lr_arch: float = 0.05
    momentum: float = 0.9  # weight steps and compact training
    epochs: int = 6
    val_fraction: float = 0.2
    nonideal_layers_per_step: int = 2
    all_paths: bool = True
    seed: int = 0
    kernels: tuple = (3, 5, 7)
    xbar_sizes: tuple = (16, 32, 64, 128)
    batch_size: int = 64
    warmup_epochs: int = 2  # weight-only epochs before alternation starts
    arch_steps: int = 0  # per architecture epoch; 0 means one pass over the val set
    train_epochs: int = 10  # training of the extracted network

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr_w <= 0 or self.lr_arch <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.arch_steps < 0 or self.train_epochs < 0:
            raise ConfigError("epoch and step counts must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.nonideal_layers_per_step < 0:
            raise ConfigError("nonideal_layers_per_step must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.kernels or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError("kernels must be odd and positive")
        if not self.xbar_sizes or min(self.xbar_sizes) < 2:
            raise ConfigError("xbar_sizes must be >= 2")


_CONVERTERS = {
    "lambda1": float,
    "lambda2": float,
    "lambda3": float,
    "lr_w": float,
    "lr_arch": float,
    "momentum": float,
    "epochs": int,
    "val_fraction": float,
    "nonideal_layers_per_step": int,
    "all_paths": parse_bool,
    "seed": int,
    "kernels": parse_int_list,
    "xbar_sizes": parse_int_list,
    "batch_size": int,
    "warmup_epochs": int,
    "arch_steps": int,
    "train_epochs": int,
}


def load_search(path):
    return load_dataclass(SearchConfig, path, _CONVERTERS)


def dump_search(cfg):
    return dump_dataclass(cfg)
