"""Pseudo-random ternary tilt stimulus for the support surface.

The support surface follows a sequence of constant-velocity stages whose
signs come from a maximal-length ternary sequence, giving a broadband,
unpredictable excitation. The velocity profile is integrated to a position
trace and rescaled to a requested peak-to-peak tilt amplitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# Feedback taps for maximal-length shift registers over GF(3), verified by
# exhaustive state-cycle enumeration: next = sum(taps[i] * state[i]) mod 3,
# state shifts left. Period is 3**m - 1 for register length m.
_GF3_TAPS = {
    2: (1, 1),
    3: (2, 0, 1),
    4: (1, 0, 0, 1),
    5: (2, 0, 0, 0, 1),
    6: (1, 0, 0, 0, 0, 1),
    7: (2, 0, 0, 0, 0, 1, 0),
}

# GF(3) element -> ternary velocity symbol
_SYMBOL = np.array([0, 1, -1], dtype=np.int64)


@dataclass(frozen=True)
class PrtsConfig:
    """Parameters of the ternary tilt profile.

    register_length: shift-register stages m; one period is 3**m - 1 stages.
    stage_duration: seconds each velocity step is held.
    peak_to_peak: tilt range max - min of the final trace, radians.
    repetitions: number of periods concatenated into the trace.
    initial_state: register seed; rotates the sequence. None selects the
        canonical (1, 0, ..., 0) start.
    taps: feedback taps; None selects the stored maximal-length set.
    """

    register_length: int = 5
    stage_duration: float = 0.25
    peak_to_peak: float = 0.0349
    repetitions: int = 2
    initial_state: tuple = None
    taps: tuple = None

    def __post_init__(self):
        if self.register_length < 2:
            raise ConfigError("register_length must be >= 2")
        if self.taps is None and self.register_length not in _GF3_TAPS:
            raise ConfigError(
                "no stored maximal-length taps for register_length="
                f"{self.register_length}; supply taps explicitly"
            )
        if self.stage_duration <= 0:
            raise ConfigError("stage_duration must be positive")
        if self.peak_to_peak < 0:
            raise ConfigError("peak_to_peak must be >= 0")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")

    @property
    def period_stages(self) -> int:
        return 3 ** self.register_length - 1

    @property
    def duration(self) -> float:
        return self.repetitions * self.period_stages * self.stage_duration


def ternary_msequence(config: PrtsConfig) -> np.ndarray:
    """One period of the maximal-length ternary sequence, values {-1, 0, +1}.

    Every nonzero m-tuple over GF(3) appears exactly once per period as a
    cyclic window of the underlying register states.
    """
    m = config.register_length
    taps = config.taps if config.taps is not None else _GF3_TAPS[m]
    if len(taps) != m:
        raise ConfigError(f"taps must have length {m}")
    state = config.initial_state
    if state is None:
        state = (1,) + (0,) * (m - 1)
    if len(state) != m or all(s % 3 == 0 for s in state):
        raise ConfigError("initial_state must be a nonzero length-m tuple")
    state = [s % 3 for s in state]
    taps = [t % 3 for t in taps]
    n = 3 ** m - 1
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = state[0]
        new = sum(t * s for t, s in zip(taps, state)) % 3
        state = state[1:] + [new]
    return _SYMBOL[out]


def generate_prts(config: PrtsConfig, dt: float = 0.001) -> np.ndarray:
    """Tilt position trace sampled at dt, starting at 0 rad.

    The symbol sequence sets the sign of the stage velocity; positions are
    the running integral, rescaled so max - min equals peak_to_peak. The
    sample count is duration / dt; stage boundaries must fall on the grid.
    """
    sps = round(config.stage_duration / dt)
    if sps < 1 or abs(sps * dt - config.stage_duration) > 1e-9 * config.stage_duration:
        raise ConfigError(f"stage_duration must be an integer multiple of dt={dt}")
    symbols = ternary_msequence(config)
    velocity = np.tile(np.repeat(symbols, sps), config.repetitions)
    # integer cumulative sum is exact; position k integrates steps 0..k-1
    pos = np.concatenate(([0], np.cumsum(velocity[:-1])))
    span = pos.max() - pos.min()
    if span == 0:
        return np.zeros(pos.shape[0], dtype=np.float64)
    # normalize to unit peak-to-peak first so the trace scales exactly
    # linearly in peak_to_peak
    unit = pos / float(span)
    return unit * config.peak_to_peak


def decimate(trace: np.ndarray, factor: int) -> np.ndarray:
    """Keep every factor-th sample, starting at index 0."""
    if factor < 1:
        raise ConfigError("decimation factor must be >= 1")
    return trace[::factor]
