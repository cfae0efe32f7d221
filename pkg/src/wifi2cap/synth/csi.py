"""Synthetic CSI generation and standard preprocessing.

Amplitude and phase tensors are smooth functions of (class, direction,
position, receiver geometry) plus additive noise. The direction term is
coupled through a per-receiver factor so a mirrored action produces a
measurably different channel at every receiver; without that asymmetry a
left/right flip would be invisible to the student.

Raw phase carries a per-packet linear-in-subcarrier slope and constant
offset (timing/frequency error stand-ins); ``sanitize_phase`` removes
them the standard way: unwrap along subcarriers, subtract the
least-squares line, re-wrap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wifi2cap.synth.features import position_xy

# Receiver geometry: positions around the grid (same units as position_xy
# output) and the direction-coupling factor that breaks mirror symmetry.
RECEIVER_XY = ((0.0, -1.2), (1.4, 0.7), (-1.4, 0.7))
RECEIVER_DIR_COUPLING = (1.0, -0.6, 0.8)

AMP_BASE = 1.5
AMP_DIR = 0.25
AMP_POS_TILT = 0.20
AMP_POS_ATTEN = 0.30
PHASE_DIR = 0.22
PHASE_CURVE = 0.45
N_COMPONENTS = 3

_DIR_SIGN = {"left": 1.0, "right": -1.0, "none": 0.0}


@dataclass
class CsiTensor:
    """Per-receiver amplitude/phase arrays of shape T x N_a x N_sc."""

    amplitude: np.ndarray
    phase: np.ndarray
    receiver_id: int

    def __post_init__(self):
        if self.amplitude.shape != self.phase.shape:
            raise ValueError(
                f"amplitude shape {self.amplitude.shape} != phase shape {self.phase.shape}"
            )
        if self.amplitude.ndim != 3:
            raise ValueError(f"expected rank-3 CSI tensors, got rank {self.amplitude.ndim}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.amplitude.shape


def wrap_phase(x: np.ndarray) -> np.ndarray:
    """Wrap radians into [-pi, pi)."""
    return (x + np.pi) % (2.0 * np.pi) - np.pi


def sanitize_phase(raw_phase: np.ndarray) -> np.ndarray:
    """Remove the linear-in-subcarrier offset from every (time, antenna) slice.

    Per slice: unwrap along the subcarrier axis, subtract the least-squares
    line in subcarrier index (kills slope and constant offset), then wrap
    back to [-pi, pi]. Idempotent on smooth inputs.
    """
    raw_phase = np.asarray(raw_phase, dtype=np.float64)
    n_sc = raw_phase.shape[-1]
    if n_sc < 2:
        raise ValueError("need at least 2 subcarriers to fit a line")
    unwrapped = np.unwrap(raw_phase, axis=-1)
    x = np.arange(n_sc, dtype=np.float64)
    x_c = x - x.mean()
    # closed-form least squares per slice: slope = <x_c, y> / <x_c, x_c>
    slope = (unwrapped * x_c).sum(axis=-1, keepdims=True) / (x_c * x_c).sum()
    intercept = unwrapped.mean(axis=-1, keepdims=True)
    detrended = unwrapped - (slope * x_c + intercept)
    return wrap_phase(detrended)


def prune_subcarriers(csi: CsiTensor, pruned_indices) -> CsiTensor:
    """Drop the listed subcarrier columns from amplitude and phase.

    Remaining columns keep their relative order; an empty index set is the
    identity.
    """
    n_sc = csi.shape[-1]
    idx = sorted(set(int(i) for i in pruned_indices))
    for i in idx:
        if not 0 <= i < n_sc:
            raise IndexError(f"subcarrier index {i} out of range [0, {n_sc})")
    keep = np.setdiff1d(np.arange(n_sc), idx)
    return CsiTensor(
        amplitude=np.ascontiguousarray(csi.amplitude[..., keep]),
        phase=np.ascontiguousarray(csi.phase[..., keep]),
        receiver_id=csi.receiver_id,
    )


class CsiSynthesizer:
    """Deterministic CSI generator for a fixed dataset seed.

    Per-class spectral signatures (temporal frequencies, subcarrier
    envelopes, amplitudes) are drawn once from the dataset seed; per-clip
    noise and timing offsets are drawn from the clip seed, so regenerating
    any clip is exact.
    """

    def __init__(self, num_classes: int, csi_time: int, csi_antennas: int,
                 csi_subcarriers_raw: int, seed: int):
        self.t_len = csi_time
        self.n_ant = csi_antennas
        self.n_sc = csi_subcarriers_raw
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC51_57A7]))
        k = N_COMPONENTS
        self.amp_w = rng.uniform(0.12, 0.28, size=(num_classes, k))
        self.amp_freq = rng.uniform(1.0, 6.0, size=(num_classes, k))
        self.amp_phase0 = rng.uniform(0, 2 * np.pi, size=(num_classes, k))
        self.amp_sc_freq = rng.uniform(0.5, 3.0, size=(num_classes, k))
        self.amp_sc_phase = rng.uniform(0, 2 * np.pi, size=(num_classes, k))
        self.pha_w = rng.uniform(0.15, PHASE_CURVE / N_COMPONENTS * 2.0, size=(num_classes, k))
        self.pha_sc_freq = rng.uniform(0.5, 2.5, size=(num_classes, k))
        self.pha_sc_phase = rng.uniform(0, 2 * np.pi, size=(num_classes, k))
        self.pha_t_freq = rng.uniform(0.5, 3.0, size=(num_classes, k))
        self.dir_t_freq = float(rng.uniform(1.5, 3.5))
        self.dir_sc_freq = float(rng.uniform(1.2, 2.4))

    def synthesize(self, class_id: int, direction: str, position_index: int,
                   clip_seed: int, receiver_id: int, noise_level: float) -> CsiTensor:
        """Raw (unsanitized, unpruned) CSI for one clip at one receiver."""
        if not 0 <= receiver_id < len(RECEIVER_XY):
            raise ValueError(f"receiver_id {receiver_id} out of range")
        t = np.arange(self.t_len)[:, None, None] / self.t_len
        a = np.arange(self.n_ant)[None, :, None].astype(np.float64)
        s = np.arange(self.n_sc)[None, None, :] / self.n_sc

        px, py = position_xy(position_index)
        rx, ry = RECEIVER_XY[receiver_id]
        dist = float(np.hypot(px - rx, py - ry))
        coupling = RECEIVER_DIR_COUPLING[receiver_id]
        dsign = _DIR_SIGN[direction]

        amp = np.full((self.t_len, self.n_ant, self.n_sc), AMP_BASE)
        pha = np.zeros_like(amp)
        for k in range(N_COMPONENTS):
            temporal = np.sin(
                2 * np.pi * self.amp_freq[class_id, k] * t
                + self.amp_phase0[class_id, k] + 0.7 * a + 2.1 * dist
            )
            spectral = np.cos(
                2 * np.pi * self.amp_sc_freq[class_id, k] * s
                + self.amp_sc_phase[class_id, k] + 0.5 * a
            )
            amp += self.amp_w[class_id, k] * temporal * spectral
            pha += self.pha_w[class_id, k] * np.sin(
                2 * np.pi * self.pha_sc_freq[class_id, k] * s
                + self.pha_sc_phase[class_id, k] + 0.9 * a + 1.3 * dist
                + 2 * np.pi * self.pha_t_freq[class_id, k] * t
            )

        # Direction-sensitive component, asymmetric across receivers.
        amp += dsign * coupling * AMP_DIR * np.sin(
            2 * np.pi * self.dir_t_freq * t + 2.2 * np.pi * s + 0.4 * receiver_id
        )
        pha += dsign * coupling * PHASE_DIR * np.sin(
            2 * np.pi * self.dir_sc_freq * s + 0.6 * a + 2 * np.pi * 1.3 * t
        )

        # Position footprint: per-receiver path attenuation plus a static
        # spectral tilt, both of which survive pooling in downstream encoders.
        if AMP_POS_ATTEN:
            amp *= 1.15 - AMP_POS_ATTEN * dist
        if AMP_POS_TILT:
            amp += AMP_POS_TILT * (
                px * np.cos(2 * np.pi * 1.5 * s + 0.5 * a)
                + py * np.sin(2 * np.pi * 2.5 * s + 0.3 * a)
            ) * np.ones_like(t)

        rng = np.random.default_rng(np.random.SeedSequence([clip_seed, receiver_id, 0x0C51]))
        # Per-packet timing offsets: linear-in-subcarrier slope + constant,
        # present even at zero noise (they model hardware, not noise).
        slope = rng.uniform(-1.2, 1.2, size=(self.t_len, self.n_ant, 1))
        offset = rng.uniform(-np.pi, np.pi, size=(self.t_len, self.n_ant, 1))
        pha_raw = pha + slope * np.arange(self.n_sc)[None, None, :] + offset

        if noise_level > 0:
            amp = amp + noise_level * rng.standard_normal(amp.shape)
            pha_raw = pha_raw + 0.5 * noise_level * rng.standard_normal(pha_raw.shape)

        return CsiTensor(
            amplitude=np.maximum(amp, 0.0),
            phase=wrap_phase(pha_raw),
            receiver_id=receiver_id,
        )
