"""NVM Device Variation Models

This module models the non-idealities of non-volatile memory cells. Every stored level
is read back as its nominal normalized conductance plus a zero-mean Gaussian deviation
whose standard deviation depends on the level (v = v0 + dv, dv ~ N(0, sigma_v)).

Two noise knobs are exposed:
    - per-level table sigma of a DeviceProfile, used by crossbar cell reads and writes
    - a global relative sigma (VariationConfig) applied to real values before they are
      deployed, used by the device-variation sweeps

Randomness always comes from an explicit numpy Generator (PCG64 bit generator, Gaussian
draws via the ziggurat sampler of Generator.standard_normal). The same seed gives
bit-identical sequences on every platform numpy supports.

Example usage:
    - Load a profile: profile = get_profile('nvm-3')
    - Read a cell: read_level(profile, 2, make_rng(0))
"""

import json
import logging
import os
import zlib
from dataclasses import dataclass

import numpy as np

from nvcim_pt.ml.exceptions import ConfigurationError, StorageFormatError

logger = logging.getLogger(__name__)

# Measured and extrapolated per-level variations (normalized conductance units).
# RRAM_1 is listed with a single level in the source table but carries four sigmas;
# all five devices are modeled as 4-level cells.
BUILTIN_DEVICE_TABLE = {
    'NVM-1': (0.0100, 0.0100, 0.0100, 0.0100),  # RRAM_1
    'NVM-2': (0.0067, 0.0135, 0.0135, 0.0067),  # FeFET_2
    'NVM-3': (0.0049, 0.0146, 0.0146, 0.0049),  # FeFET_3
    'NVM-4': (0.0038, 0.0151, 0.0151, 0.0038),  # RRAM_4
    'NVM-5': (0.0026, 0.0155, 0.0155, 0.0026),  # FeFET_6
}

IDEAL_PROFILE_NAME = 'IDEAL'

DEFAULT_GLOBAL_SIGMA = 0.1


@dataclass(frozen=True)
class DeviceProfile:
    """Per-level conductance noise model for one NVM device type

    Args:
        name (str): Profile name, e.g. 'NVM-2'
        num_levels (int): Number of distinct representable values (L >= 2)
        sigma_per_level (tuple): L non-negative standard deviations
    """
    name: str
    num_levels: int
    sigma_per_level: tuple

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigma_per_level)
        object.__setattr__(self, 'sigma_per_level', sigmas)
        if int(self.num_levels) != self.num_levels or self.num_levels < 2:
            raise ConfigurationError(f"Profile {self.name}: num_levels must be an integer >= 2, got {self.num_levels}")
        if len(sigmas) != self.num_levels:
            raise ConfigurationError(
                f"Profile {self.name}: expected {self.num_levels} sigmas, got {len(sigmas)}"
            )
        if any(not np.isfinite(s) or s < 0 for s in sigmas):
            raise ConfigurationError(f"Profile {self.name}: sigmas must be finite and non-negative")

    @property
    def level_values(self):
        """Nominal normalized conductance of every level, evenly spaced on [0, 1]"""
        return np.linspace(0.0, 1.0, self.num_levels)

    @property
    def max_sigma(self):
        return max(self.sigma_per_level)

    @property
    def is_noiseless(self):
        return self.max_sigma == 0.0

    def to_dict(self):
        return {
            'name': self.name,
            'num_levels': self.num_levels,
            'sigma_per_level': list(self.sigma_per_level),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                name=str(data['name']),
                num_levels=int(data['num_levels']),
                sigma_per_level=tuple(data['sigma_per_level']),
            )
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"Invalid device profile document: {e}") from e

    @classmethod
    def from_json(cls, path):
        """Load a profile from a JSON document {"name", "num_levels", "sigma_per_level"}"""
        with open(path, 'r') as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise StorageFormatError(f"Profile file {path} is not valid JSON: {e}") from e
        profile = cls.from_dict(data)
        logger.info(f"Loaded device profile {profile.name} from {path}")
        return profile


@dataclass(frozen=True)
class VariationConfig:
    """Relative value perturbation used by the device-variation sweeps

    Args:
        global_sigma (float): Standard deviation relative to max(|values|)
        seed (int): Seed for the perturbation stream
    """
    global_sigma: float = DEFAULT_GLOBAL_SIGMA
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.global_sigma) or self.global_sigma < 0:
            raise ConfigurationError(f"global_sigma must be >= 0, got {self.global_sigma}")


def builtin_profiles():
    """Return the five built-in device profiles NVM-1..NVM-5"""
    return [
        DeviceProfile(name=name, num_levels=len(sigmas), sigma_per_level=sigmas)
        for name, sigmas in BUILTIN_DEVICE_TABLE.items()
    ]


def ideal_profile(num_levels=4):
    """Zero-variation profile, handy for noiseless reference runs"""
    return DeviceProfile(name=IDEAL_PROFILE_NAME, num_levels=num_levels, sigma_per_level=(0.0,) * num_levels)


def get_profile(name_or_path):
    """Resolve a profile by built-in name (case-insensitive), 'ideal', or JSON file path"""
    if isinstance(name_or_path, DeviceProfile):
        return name_or_path
    key = str(name_or_path).strip().upper()
    if key in BUILTIN_DEVICE_TABLE:
        sigmas = BUILTIN_DEVICE_TABLE[key]
        return DeviceProfile(name=key, num_levels=len(sigmas), sigma_per_level=sigmas)
    if key == IDEAL_PROFILE_NAME:
        return ideal_profile()
    if os.path.exists(str(name_or_path)):
        return DeviceProfile.from_json(name_or_path)
    raise ConfigurationError(
        f"Unknown device profile '{name_or_path}'. Use nvm-1..nvm-5, ideal, or a JSON file path"
    )


def make_rng(seed):
    """Seedable, portable generator (PCG64)"""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rng(seed, stream):
    """Independent generator for one named noise concern derived from a run seed"""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode('utf-8'))]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _check_levels(profile, levels):
    levels = np.asarray(levels)
    if levels.size and (levels.min() < 0 or levels.max() >= profile.num_levels):
        raise ConfigurationError(
            f"Level out of range for {profile.name}: valid levels are 0..{profile.num_levels - 1}"
        )
    return levels.astype(np.int64)


def read_level(profile, level, rng):
    """Read one cell programmed at `level`: nominal value plus unclamped Gaussian noise"""
    if int(level) != level or not 0 <= level < profile.num_levels:
        raise ConfigurationError(
            f"Level {level} out of range for {profile.name} (0..{profile.num_levels - 1})"
        )
    level = int(level)
    nominal = level / (profile.num_levels - 1)
    return nominal + rng.normal(0.0, profile.sigma_per_level[level])


def level_sigmas(profile, levels):
    """Per-cell standard deviation for an array of levels"""
    levels = _check_levels(profile, levels)
    return np.asarray(profile.sigma_per_level)[levels]


def read_levels(profile, levels, rng):
    """Vectorized read_level over an integer array of levels"""
    levels = _check_levels(profile, levels)
    nominal = levels / (profile.num_levels - 1)
    return nominal + rng.standard_normal(levels.shape) * level_sigmas(profile, levels)


def perturb_values(v0, cfg, rng):
    """Apply relative Gaussian variation: v0 + N(0, (global_sigma * max|v0|)^2) per entry"""
    v0 = np.asarray(v0, dtype=np.float64)
    peak = np.max(np.abs(v0)) if v0.size else 0.0
    if cfg.global_sigma == 0 or peak == 0:
        return v0.copy()
    return v0 + rng.standard_normal(v0.shape) * (cfg.global_sigma * peak)
