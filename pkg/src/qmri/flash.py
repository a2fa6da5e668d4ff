"""Steady-state spoiled gradient echo (FLASH) signal, its analytic Jacobian and noise.

    y = PD * sin(a) * exp(-TE/T2*) * (1 - E1) / (1 - cos(a) * E1),  E1 = exp(-TR/T1)

All array functions broadcast over their arguments, so a (N, 1) block of
tissue values against a (1, K) block of protocol values yields (N, K).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AcquisitionParams,
    ContrastStack,
    DomainError,
    PropertyMap,
    Protocol,
    TissueProperties,
    require_valid,
)


@dataclass(frozen=True)
class SignalJacobian:
    dy_dt1: float
    dy_dt2s: float
    dy_dpd: float


def _unit_pd_signal(t1, t2s, tr, te, fa_deg):
    alpha = np.deg2rad(fa_deg)
    e1 = np.exp(-tr / t1)
    one_minus_e1 = -np.expm1(-tr / t1)
    return np.sin(alpha) * np.exp(-te / t2s) * one_minus_e1 / (1.0 - np.cos(alpha) * e1)


def signal(t1, t2s, pd, tr, te, fa_deg):
    """Array form of the forward model; no validation."""
    return pd * _unit_pd_signal(t1, t2s, tr, te, fa_deg)


def jacobian(t1, t2s, pd, tr, te, fa_deg):
    """Array form of the partials ``(dy/dT1, dy/dT2*, dy/dPD)``; no validation.

    ``dy/dPD`` is the unit-PD signal, so ``pd * dy/dPD`` reproduces ``signal``
    bit for bit.
    """
    alpha = np.deg2rad(fa_deg)
    s, c = np.sin(alpha), np.cos(alpha)
    e1 = np.exp(-tr / t1)
    e2 = np.exp(-te / t2s)
    denom = 1.0 - c * e1
    unit = s * e2 * (-np.expm1(-tr / t1)) / denom
    dy_dpd = unit
    dy_dt2s = pd * unit * te / (t2s * t2s)
    # d/dE1 of (1-E1)/(1-cE1) is (c-1)/(1-cE1)^2, dE1/dT1 = E1*TR/T1^2
    dy_dt1 = pd * s * e2 * (c - 1.0) / (denom * denom) * e1 * tr / (t1 * t1)
    return dy_dt1, dy_dt2s, dy_dpd


def flash_signal(p: TissueProperties, phi: AcquisitionParams) -> float:
    require_valid(p, phi)
    return float(signal(p.t1_ms, p.t2s_ms, p.pd, phi.tr_ms, phi.te_ms, phi.fa_deg))


def flash_jacobian(p: TissueProperties, phi: AcquisitionParams) -> SignalJacobian:
    require_valid(p, phi)
    d1, d2, dp = jacobian(p.t1_ms, p.t2s_ms, p.pd, phi.tr_ms, phi.te_ms, phi.fa_deg)
    return SignalJacobian(float(d1), float(d2), float(dp))


def flash_signal_batch(props: PropertyMap, protocol: Protocol) -> ContrastStack:
    """Simulate every protocol entry voxel-wise; channel k uses ``protocol[k]``."""
    require_valid(props, protocol)
    phi = protocol.as_array()[:, :, None, None]
    out = signal(props.t1_ms[None], props.t2s_ms[None], props.pd[None], phi[:, 0], phi[:, 1], phi[:, 2])
    return ContrastStack(out, protocol, noisy=False)


def noise_sigma(stack: ContrastStack, snr: float, mask: np.ndarray | None = None) -> float:
    """Noise level: mean first-channel intensity over signal-bearing voxels, divided by ``snr``."""
    if not snr > 0:
        raise DomainError("snr must be positive")
    first = stack.intensities[0]
    if mask is None:
        peak = float(np.max(np.abs(first)))
        if peak == 0.0:
            raise DomainError("cannot set a noise level for an identically zero stack")
        mask = first > 1e-12 * peak
    vals = first[mask]
    if vals.size == 0 or float(vals.mean()) == 0.0:
        raise DomainError("cannot set a noise level for an identically zero stack")
    return float(vals.mean()) / snr


def add_gaussian_noise(
    stack: ContrastStack,
    snr: float,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> ContrastStack:
    """Add i.i.d. zero-mean Gaussian noise to a noiseless stack.

    ``mask`` selects the voxels whose first-channel mean defines the signal
    level; by default every voxel with non-negligible signal.
    """
    if stack.noisy:
        raise DomainError("stack already carries noise")
    sigma = noise_sigma(stack, snr, mask)
    noise = rng.standard_normal(stack.intensities.shape) * sigma
    return ContrastStack(stack.intensities + noise, stack.protocol, noisy=True)


def confound_partner(p: TissueProperties, tr_ms: float, fa_deg: float, t1_new: float) -> TissueProperties:
    """Return (T1', T2*, PD') that gives the same signal as ``p`` at every echo of a
    session with this TR and flip angle.

    A single-FA session only constrains PD * (1-E1)/(1-cos(a)E1), so any T1'
    is matched by rescaling PD.
    """
    g_old = _unit_pd_signal(p.t1_ms, np.inf, tr_ms, 0.0, fa_deg)
    g_new = _unit_pd_signal(t1_new, np.inf, tr_ms, 0.0, fa_deg)
    pd_new = p.pd * g_old / g_new
    if not 0 < pd_new <= 1:
        raise DomainError(f"T1'={t1_new} needs PD'={pd_new:.6g}, outside (0, 1]")
    return TissueProperties(float(t1_new), p.t2s_ms, float(pd_new))


def ernst_angle_deg(t1_ms: float, tr_ms: float) -> float:
    return float(np.rad2deg(np.arccos(np.exp(-tr_ms / t1_ms))))
