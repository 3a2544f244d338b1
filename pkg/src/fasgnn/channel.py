"""Physical-layer model of a fluid-antenna MU-MISO downlink.

Everything here is plain numpy on immutable inputs.  The differentiable
versions used during training live in :mod:`fasgnn.stage1` and :mod:`fasgnn.stage2`; both share
:func:`unit_phasor` and :func:`phase_matrix` so that the two code paths
produce bitwise identical channels.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
CARRIER_HZ = 1.8e9
POSITION_TOL = 1e-9
POWER_RTOL = 1e-9


@dataclass(frozen=True)
class SystemConfig:
    """Physical and budget constants of one scenario.

    ``path_loss`` is a tuple of per-user scales; an empty tuple means 1.0
    for every user.
    """

    n_antennas: int = 4
    n_users: int = 2
    wavelength: float = SPEED_OF_LIGHT / CARRIER_HZ
    aperture: float | None = None
    min_spacing: float | None = None
    p_max: float = 1.0
    p_c: float = 0.5
    noise_power: float | None = None
    snr_db: float = 20.0
    path_loss: tuple = ()

    def __post_init__(self):
        # Defaults that depend on other fields: D = 10 lambda, spacing = lambda/2,
        # noise = P_max / 10^(SNR/10).
        if self.aperture is None:
            object.__setattr__(self, "aperture", 10.0 * self.wavelength)
        if self.min_spacing is None:
            object.__setattr__(self, "min_spacing", self.wavelength / 2.0)
        if self.noise_power is None:
            object.__setattr__(self, "noise_power", self.p_max / 10.0 ** (self.snr_db / 10.0))
        object.__setattr__(self, "path_loss", tuple(float(d) for d in self.path_loss))
        self.validate()

    def validate(self):
        if self.n_antennas < 1 or self.n_users < 1:
            raise ValueError("n_antennas and n_users must be >= 1")
        if self.wavelength <= 0 or self.min_spacing <= 0:
            raise ValueError("wavelength and min_spacing must be positive")
        if self.p_max <= 0 or self.p_c < 0 or self.noise_power <= 0:
            raise ValueError("need p_max > 0, p_c >= 0, noise_power > 0")
        if self.aperture < (self.n_antennas - 1) * self.min_spacing - POSITION_TOL:
            raise ValueError(
                f"aperture {self.aperture} too short for {self.n_antennas} antennas "
                f"at spacing {self.min_spacing}"
            )
        if self.path_loss and len(self.path_loss) != self.n_users:
            raise ValueError("path_loss must have one entry per user")
        if any(d <= 0 for d in self.path_loss):
            raise ValueError("path_loss entries must be positive")

    @property
    def delta_max(self) -> float:
        """Total slack that can be distributed over the antenna gaps."""
        return self.aperture - (self.n_antennas - 1) * self.min_spacing

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength

    def gains(self, n_users: int | None = None) -> np.ndarray:
        k = self.n_users if n_users is None else n_users
        if not self.path_loss:
            return np.ones(k)
        if k != len(self.path_loss):
            raise ValueError(f"path_loss configured for {len(self.path_loss)} users, got {k}")
        return np.asarray(self.path_loss, dtype=np.float64)

    def with_users(self, n_users: int) -> "SystemConfig":
        path_loss = self.path_loss if len(self.path_loss) in (0, n_users) else ()
        return dataclasses.replace(self, n_users=n_users, path_loss=path_loss)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["path_loss"] = list(self.path_loss)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown system keys: {sorted(unknown)}")
        d = dict(d)
        if "path_loss" in d:
            d["path_loss"] = tuple(d["path_loss"] or ())
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# channels


def unit_phasor(phi: np.ndarray) -> np.ndarray:
    """exp(i*phi) for real phi."""
    phi = np.asarray(phi, dtype=np.float64)
    return np.cos(phi) + 1j * np.sin(phi)


def phase_matrix(x: np.ndarray, theta: np.ndarray, wavelength: float) -> np.ndarray:
    """Phases (2 pi / lambda) x_n cos(theta_k), shape (..., K, N)."""
    k0 = 2.0 * math.pi / wavelength
    kc = k0 * np.cos(np.asarray(theta, dtype=np.float64))
    return kc[..., :, None] * np.asarray(x, dtype=np.float64)[..., None, :]


def steering_vector(x, theta: float, wavelength: float) -> np.ndarray:
    """Steering vector h(x, theta) of a linear array at positions ``x``."""
    return unit_phasor(phase_matrix(x, np.asarray([theta]), wavelength)[0])


def channel_matrix(x, angles, cfg: SystemConfig) -> np.ndarray:
    """Stack conjugated steering vectors into G (K x N); works batched.

    ``x`` has shape (..., N) and ``angles`` shape (..., K).
    """
    x = np.asarray(x, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if x.shape[-1] != cfg.n_antennas:
        raise ValueError(f"expected {cfg.n_antennas} positions, got {x.shape[-1]}")
    if angles.shape[-1] < 1:
        raise ValueError("need at least one user angle")
    return unit_phasor(-phase_matrix(x, angles, cfg.wavelength))


# ---------------------------------------------------------------------------
# utilities


def _gains_for(cfg: SystemConfig, k: int) -> np.ndarray:
    return cfg.gains(k) if cfg.path_loss else np.ones(k)


def sinr_all(w, g, cfg: SystemConfig) -> np.ndarray:
    """Per-user SINR for beams ``w`` (..., N, K) over channels ``g`` (..., K, N).

    With h_k the conjugate of row k of g, ``|w_i^H h_k| = |(g w)_{k,i}|``.
    """
    w = np.asarray(w)
    g = np.asarray(g)
    k = g.shape[-2]
    gain = np.abs(g @ w) ** 2
    signal = np.diagonal(gain, axis1=-2, axis2=-1)
    interference = gain.sum(axis=-1) - signal
    d = _gains_for(cfg, k)
    return d * signal / (d * interference + cfg.noise_power)


def rate_from_sinr(sinr) -> np.ndarray:
    return np.log2(1.0 + np.asarray(sinr)).sum(axis=-1)


def sum_rate(w, g, cfg: SystemConfig):
    return rate_from_sinr(sinr_all(w, g, cfg))


def transmit_power(w) -> np.ndarray:
    w = np.asarray(w)
    return (np.abs(w) ** 2).sum(axis=(-2, -1))


def energy_efficiency(w, g, cfg: SystemConfig):
    return sum_rate(w, g, cfg) / (transmit_power(w) + cfg.p_c)


def utility(w, g, cfg: SystemConfig, kind: str = "sum_rate"):
    if kind == "sum_rate":
        return sum_rate(w, g, cfg)
    if kind == "energy_efficiency":
        return energy_efficiency(w, g, cfg)
    raise ValueError(f"unknown utility {kind!r}")


# ---------------------------------------------------------------------------
# feasibility


@dataclass
class ConstraintCheck:
    name: str
    passed: bool
    slack: float


@dataclass
class FeasibilityReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> ConstraintCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __str__(self):
        rows = [f"{c.name:>10s}  {'ok' if c.passed else 'FAIL'}  slack={c.slack:.3e}" for c in self.checks]
        return "\n".join(rows)


def check_feasibility(w, x, cfg: SystemConfig) -> FeasibilityReport:
    """Check the power budget, the aperture bounds and the minimum spacing.

    Slack is positive when the constraint holds with margin.  The power
    check is relative to P_max, the position checks are in meters.
    """
    x = np.asarray(x, dtype=np.float64)
    report = FeasibilityReport()
    if w is not None:
        power = float(transmit_power(w))
        slack = (cfg.p_max - power) / cfg.p_max
        report.checks.append(ConstraintCheck("power", slack >= -POWER_RTOL, slack))
    lo = float(x[0])
    hi = float(cfg.aperture - x[-1])
    report.checks.append(ConstraintCheck("x_first", lo >= -POSITION_TOL, lo))
    report.checks.append(ConstraintCheck("x_last", hi >= -POSITION_TOL, hi))
    if x.size > 1:
        gap = float(np.min(np.diff(x)) - cfg.min_spacing)
    else:
        gap = math.inf
    report.checks.append(ConstraintCheck("spacing", gap >= -POSITION_TOL, gap))
    return report


def feasible_batch(w, x, cfg: SystemConfig) -> np.ndarray:
    """Vectorised form of :func:`check_feasibility`; returns a bool per sample."""
    x = np.asarray(x, dtype=np.float64)
    ok = (x[..., 0] >= -POSITION_TOL) & (x[..., -1] <= cfg.aperture + POSITION_TOL)
    if x.shape[-1] > 1:
        ok &= np.min(np.diff(x, axis=-1), axis=-1) >= cfg.min_spacing - POSITION_TOL
    if w is not None:
        ok &= transmit_power(w) <= cfg.p_max * (1.0 + POWER_RTOL)
    return ok


# ---------------------------------------------------------------------------
# reference geometry


def equidistant_positions(cfg: SystemConfig, mode: str = "aperture") -> np.ndarray:
    """Uniform array: spread over the whole aperture, or at half-wavelength pitch."""
    n = cfg.n_antennas
    if n == 1:
        return np.zeros(1)
    if mode == "aperture":
        return np.arange(n) * (cfg.aperture / (n - 1))
    if mode == "half_wavelength":
        if (n - 1) * cfg.wavelength / 2 > cfg.aperture + POSITION_TOL:
            raise ValueError("half-wavelength array does not fit in the aperture")
        return np.arange(n) * (cfg.wavelength / 2.0)
    raise ValueError(f"unknown equidistant mode {mode!r}")
