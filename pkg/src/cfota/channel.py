"""Large-scale fading, correlated shadowing, and correlated Rayleigh channels.

Path loss follows an urban-microcell power law with log-normal shadowing
that is spatially correlated across devices (and independent across
receivers, which sit far apart).  Per-antenna spatial correlation uses the
Gaussian local scattering model for a half-wavelength uniform linear array,
with the nominal angle per link given by the wrap-around bearing from the
receiver to the device.
"""

from dataclasses import dataclass

import numpy as np

from .topology import wrap_bearing, wrap_distances


class NotPSD(ValueError):
    """Raised when an assembled covariance is indefinite beyond tolerance."""


@dataclass(frozen=True)
class LargeScaleParams:
    """Urban-microcell large-scale fading parameters (dB-domain)."""

    beta0_db: float = -30.5     # path loss at the reference distance
    alpha: float = 3.67         # path-loss exponent
    d0_m: float = 1.0           # reference distance
    shadow_std_db: float = 4.0  # shadowing standard deviation
    decorr_m: float = 9.0       # shadowing decorrelation distance

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("path-loss exponent must be positive")
        if self.shadow_std_db < 0:
            raise ValueError("shadowing std must be non-negative")


@dataclass(frozen=True)
class SpatialCorrelation:
    """Hermitian per-antenna correlation matrix with its large-scale gain.

    ``beta`` equals ``trace(matrix)/N`` in linear power units.
    """

    matrix: np.ndarray
    beta: float


def pathloss_db(d, params=LargeScaleParams()):
    """Distance-dependent path gain in dB, excluding shadowing.

    Distances below the reference distance are clamped to it, so the gain
    never exceeds the reference-point value.
    """
    d = max(float(d), params.d0_m)
    return params.beta0_db - 10.0 * params.alpha * np.log10(d / params.d0_m)


def shadow_covariance(device_positions, area, params=LargeScaleParams()):
    """Covariance (dB^2) of the shadow terms seen by one receiver.

    Entry (k, i) is ``sigma^2 * 2^(-x_ki/decorr)`` with x_ki the wrap
    distance between devices k and i.  Shadowing for different receivers is
    modeled as independent; sample this matrix once per receiver.
    """
    x = wrap_distances(device_positions, device_positions, area)
    cov = params.shadow_std_db**2 * np.exp2(-x / params.decorr_m)
    min_eig = np.linalg.eigvalsh(cov).min()
    if min_eig < -1e-8 * max(np.trace(cov), 1.0):
        raise NotPSD(f"shadow covariance has eigenvalue {min_eig:.3e}")
    return cov


def sample_shadowing(cov, rng):
    """Zero-mean jointly Gaussian shadow terms (dB) with the given covariance.

    Uses the symmetric square root with negative eigenvalues clamped to 0.
    """
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    return root @ rng.standard_normal(cov.shape[0])


def local_scattering_R(n_antennas, nominal_angle, asd, beta):
    """Spatial correlation of a half-wavelength ULA under Gaussian scattering.

    Uses the standard small-angular-spread closed form: entry (m, n) is
    ``beta * exp(j*pi*(m-n)*sin(phi)) * exp(-(asd*pi*(m-n)*cos(phi))^2 / 2)``
    where phi is the nominal angle and asd the angular standard deviation,
    both in radians.  asd = 0 degenerates to the rank-1 steering outer
    product.  The result is Hermitian PSD with trace/N equal to beta.
    """
    if n_antennas < 1:
        raise ValueError("need at least one antenna")
    if asd < 0:
        raise ValueError("angular spread must be non-negative")
    diff = np.subtract.outer(np.arange(n_antennas), np.arange(n_antennas))
    phase = np.exp(1j * np.pi * diff * np.sin(nominal_angle))
    spread = np.exp(-0.5 * (asd * np.pi * diff * np.cos(nominal_angle)) ** 2)
    mat = beta * phase * spread
    mat = 0.5 * (mat + mat.conj().T)
    return SpatialCorrelation(matrix=mat, beta=float(beta))


def sqrt_psd(mat):
    """Hermitian square root with negative eigenvalues clamped to zero."""
    w, v = np.linalg.eigh(mat)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T


def sample_channels(correlations, rng):
    """Correlated Rayleigh draws h = R^(1/2) z, z circularly-symmetric CN(0, I).

    ``correlations`` has shape (..., N, N); the result has shape (..., N).
    Draws are independent across the leading axes and across calls.
    """
    correlations = np.asarray(correlations)
    n = correlations.shape[-1]
    w, v = np.linalg.eigh(correlations)
    root = v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]
    z = rng.standard_normal(correlations.shape[:-1]) + 1j * rng.standard_normal(
        correlations.shape[:-1]
    )
    z /= np.sqrt(2.0)
    return np.einsum("...ij,...j->...i", root, z)


def correlation_matrices(device_positions, rx_positions, n_antennas, area,
                         params, asd, rng):
    """Per-link correlation matrices R[k, r] for all device-receiver pairs.

    Combines path loss, per-receiver correlated shadowing (independent
    across receivers), and local scattering with the nominal angle set to
    the wrap-around bearing from the receiver to the device.  Returns an
    array of shape (K, n_rx, N, N).
    """
    device_positions = np.asarray(device_positions)
    rx_positions = np.asarray(rx_positions)
    n_dev, n_rx = len(device_positions), len(rx_positions)
    shadow_cov = shadow_covariance(device_positions, area, params)
    out = np.empty((n_dev, n_rx, n_antennas, n_antennas), dtype=complex)
    for r in range(n_rx):
        shadows = sample_shadowing(shadow_cov, rng)
        for k in range(n_dev):
            d = wrap_distances(device_positions[k:k + 1], rx_positions[r:r + 1], area)[0, 0]
            beta_db = pathloss_db(d, params) + shadows[k]
            angle = wrap_bearing(rx_positions[r], device_positions[k], area)
            out[k, r] = local_scattering_R(
                n_antennas, angle, asd, 10.0 ** (beta_db / 10.0)
            ).matrix
    return out
