"""
SketchReg configuration
Defaults for sketch sizing, streaming and verification, with environment overrides
"""

import os

from sketchreg_errors import ContractViolation


def _env_int(name, default):
    """Read a positive integer from the environment"""
    raw = os.environ.get(name)
    if raw is None or raw == '':
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ContractViolation(f"{name} must be an integer, got {raw!r}")
    if value < 1:
        raise ContractViolation(f"{name} must be >= 1, got {value}")
    return value


SKETCHREG_CONFIG = {
    # sizing
    'default_alpha': 0.1,
    'cw_constant': 1.0 / 20.0,
    # streaming
    'srht_block_size': 1024,
    'read_block_rows': 4096,
    'threads': _env_int('SKETCHREG_THREADS', 1),
    # numerics
    'rank_rtol': 1e-12,
    'bound_rtol': 1e-9,
    'bound_atol': 1e-12,
    'symmetry_atol': 1e-10,
    # file formats
    'sketch_format_version': 1,
    'data_format_version': 1,
    'export_formats': ('csv', 'xlsx', 'json'),
    # logging
    'log_level': os.environ.get('SKETCHREG_LOG_LEVEL', 'INFO').upper(),
}


def get_config(key):
    """Look up a configuration value"""
    try:
        return SKETCHREG_CONFIG[key]
    except KeyError:
        raise ContractViolation(f"unknown configuration key: {key}")
