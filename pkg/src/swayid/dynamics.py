"""Closed-loop simulation of a standing single inverted pendulum.

The body is an inverted pendulum pivoting about the ankle. A servo PD
controller acts on a reconstructed body-in-space angle assembled from two
disturbance estimates: a gravity estimate taken from the (noisy) vestibular
body angle, and a support-tilt estimate obtained by integrating the
dead-banded sum of vestibular and proprioceptive angular velocities. The
active command passes through a lumped transport delay; a passive
stiffness/damping torque acts directly on the ankle joint.

Sign conventions: angles are positive in the same rotation sense for body
and surface; the proprioceptive ankle signal is body-to-foot,
alpha_prop = alpha_fs - alpha_bs, so the velocity sum fed to the tilt
estimator telescopes to the foot rotation velocity (plus the noise
derivative). The simulation is a fixed-step explicit Euler loop at dt with
backward-difference derivatives; signal history before t = 0 is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dep, fallback for safety
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco

from .errors import ConfigError

#: vestibular noise gain -> radians of angle noise; calibrated so corpora
#: drawn from the default parameter ranges keep the canonical stimulus
#: response of mid-range parameters well inside the 5 degree stability
#: bound while the noise still shapes the sway visibly.
DEFAULT_NOISE_SCALE = 0.004


@dataclass(frozen=True)
class DecParams:
    """The seven identifiable controller parameters.

    kp, kd: active PD gains, N*m/rad and N*m*s/rad.
    kp_pass, kd_pass: passive ankle stiffness and damping.
    nv: dimensionless vestibular noise gain.
    theta: dead-band threshold on foot rotation velocity, rad/s.
    delta: lumped feedback delay, seconds (quantized to the integration
        step when simulated).
    """

    kp: float
    kd: float
    kp_pass: float
    kd_pass: float
    nv: float
    theta: float
    delta: float

    def __post_init__(self):
        for name in ("kp", "kd", "kp_pass", "kd_pass", "nv", "theta", "delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.kp, self.kd, self.kp_pass, self.kd_pass, self.nv, self.theta, self.delta]
        )

    @classmethod
    def from_array(cls, values) -> "DecParams":
        kp, kd, kp_pass, kd_pass, nv, theta, delta = (float(v) for v in values)
        return cls(kp, kd, kp_pass, kd_pass, nv, theta, delta)


PARAM_NAMES = ("kp", "kd", "kp_pass", "kd_pass", "nv", "theta", "delta")


@dataclass(frozen=True)
class BodyParams:
    """Anthropometrics of the pendulum: mass, COM height, ankle inertia."""

    mass: float = 80.0
    com_height: float = 1.0
    inertia: float = 80.0
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("mass", "com_height", "inertia", "gravity"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def mgh(self) -> float:
        return self.mass * self.gravity * self.com_height


@dataclass(frozen=True)
class SimConfig:
    """Fixed-step integration settings.

    output_dt must be an integer multiple of dt; duration / output_dt gives
    the output trace length. noise_scale converts the dimensionless noise
    gain nv into radians of vestibular angle noise. noise_in_gravity
    selects whether the gravity estimate sees the noisy vestibular angle
    (default) or the clean body angle.
    """

    dt: float = 0.001
    output_dt: float = 0.01
    duration: float = 121.0
    seed: int = 0
    g_gain: float = 1.0
    noise_scale: float = DEFAULT_NOISE_SCALE
    noise_in_gravity: bool = True

    def __post_init__(self):
        if self.dt <= 0 or self.output_dt <= 0 or self.duration <= 0:
            raise ConfigError("dt, output_dt and duration must be positive")
        if abs(self.output_dt / self.dt - round(self.output_dt / self.dt)) > 1e-9:
            raise ConfigError("output_dt must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return round(self.duration / self.dt)

    @property
    def output_every(self) -> int:
        return round(self.output_dt / self.dt)

    @property
    def n_output(self) -> int:
        return -(-self.n_steps // self.output_every)


@njit(cache=True)
def dead_band(x, theta):
    """Odd piecewise-linear threshold: zero inside [-theta, theta],
    magnitude reduced by theta outside."""
    if x > theta:
        return x - theta
    if x < -theta:
        return x + theta
    return 0.0


def gravity_estimate(alpha_vest, g_gain):
    """Angle equivalent of the gravity disturbance torque."""
    return g_gain * alpha_vest


def pink_noise(nv, n, dt, seed):
    """Vestibular noise trace with one-sided power density nv**2 / f.

    Seeded white Gaussian noise is shaped by 1/sqrt(f) in the frequency
    domain (DC zeroed) and transformed back; the amplitude therefore scales
    linearly in nv. nv = 0 returns exact zeros.
    """
    if n < 2:
        raise ConfigError("pink_noise needs n >= 2")
    if dt <= 0:
        raise ConfigError("pink_noise needs dt > 0")
    if nv == 0:
        return np.zeros(n, dtype=np.float64)
    rng = np.random.default_rng(seed)
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freq = np.fft.rfftfreq(n, dt)
    shaping = np.zeros_like(freq)
    shaping[1:] = 1.0 / np.sqrt(freq[1:])
    spectrum *= shaping
    trace = np.fft.irfft(spectrum, n)
    # white input has E|X_k|^2 = n, so the one-sided periodogram
    # 2*|X|^2*dt/n of the shaped trace equals 2*dt/f; rescale to nv^2/f
    return trace * (nv / math.sqrt(2.0 * dt))


@njit(cache=True)
def controller_step(
    alpha,
    tilt,
    noise,
    prev_vest,
    prev_prop,
    prev_err,
    fs_est,
    kp,
    kd,
    kp_pass,
    kd_pass,
    theta,
    g_gain,
    noise_in_gravity,
    dt,
    buf,
    buf_idx,
):
    """One controller update; returns the ankle torque and updated state.

    Returns (torque, fs_est, vest, prop, err, buf_idx); buf is mutated in
    place (ring buffer of delayed active commands, oldest at buf_idx).
    """
    vest = alpha + noise
    prop = tilt - alpha
    vel_sum = (vest - prev_vest) / dt + (prop - prev_prop) / dt
    fs_est = fs_est + dt * dead_band(vel_sum, theta)
    servo = fs_est - prop
    if noise_in_gravity:
        t_g = g_gain * vest
    else:
        t_g = g_gain * alpha
    err = t_g + servo
    u = -(kp * err + kd * (err - prev_err) / dt)
    n_delay = buf.shape[0]
    if n_delay > 0:
        delayed = buf[buf_idx]
        buf[buf_idx] = u
        buf_idx += 1
        if buf_idx == n_delay:
            buf_idx = 0
    else:
        delayed = u
    torque = delayed - (kp_pass * prop + kd_pass * (prop - prev_prop) / dt)
    return torque, fs_est, vest, prop, err, buf_idx


@njit(cache=True)
def plant_step(alpha, omega, torque, mgh, inertia, dt):
    """Explicit Euler update of J*d2(alpha) = mgh*sin(alpha) + torque.

    The support tilt axis coincides with the ankle joint axis, so platform
    rotation exerts no inertial forcing; it enters only through the
    controller's proprioceptive signal.
    """
    accel = (mgh * math.sin(alpha) + torque) / inertia
    return alpha + dt * omega, omega + dt * accel


@njit(cache=True)
def _run_loop(
    tilt,
    noise,
    kp,
    kd,
    kp_pass,
    kd_pass,
    theta,
    delay_steps,
    g_gain,
    noise_in_gravity,
    mgh,
    inertia,
    dt,
    out_every,
    abort_above,
    out,
):
    """Fused simulation loop; returns the number of completed steps."""
    n = tilt.shape[0]
    alpha = 0.0
    omega = 0.0
    fs_est = 0.0
    prev_vest = 0.0
    prev_prop = 0.0
    prev_err = 0.0
    buf = np.zeros(delay_steps)
    buf_idx = 0
    for k in range(n):
        if k % out_every == 0:
            out[k // out_every] = alpha
        torque, fs_est, prev_vest, prev_prop, prev_err, buf_idx = controller_step(
            alpha,
            tilt[k],
            noise[k],
            prev_vest,
            prev_prop,
            prev_err,
            fs_est,
            kp,
            kd,
            kp_pass,
            kd_pass,
            theta,
            g_gain,
            noise_in_gravity,
            dt,
            buf,
            buf_idx,
        )
        alpha, omega = plant_step(alpha, omega, torque, mgh, inertia, dt)
        if not (np.isfinite(alpha) and np.isfinite(omega)) or abs(alpha) > abort_above:
            return k + 1
    return n


@dataclass
class SimState:
    """Mutable controller + plant state for step-by-step simulation."""

    alpha: float = 0.0
    omega: float = 0.0
    fs_est: float = 0.0
    prev_vest: float = 0.0
    prev_prop: float = 0.0
    prev_err: float = 0.0
    delay_buf: np.ndarray = None
    buf_idx: int = 0

    @classmethod
    def initial(cls, params: DecParams, cfg: SimConfig) -> "SimState":
        steps = round(params.delta / cfg.dt)
        return cls(delay_buf=np.zeros(steps))


def step(state: SimState, params: DecParams, body: BodyParams, tilt, noise, cfg: SimConfig):
    """Advance one integration step in place; returns the applied torque."""
    torque, fs_est, vest, prop, err, buf_idx = controller_step(
        state.alpha,
        tilt,
        noise,
        state.prev_vest,
        state.prev_prop,
        state.prev_err,
        state.fs_est,
        params.kp,
        params.kd,
        params.kp_pass,
        params.kd_pass,
        params.theta,
        cfg.g_gain,
        cfg.noise_in_gravity,
        cfg.dt,
        state.delay_buf,
        state.buf_idx,
    )
    state.fs_est = fs_est
    state.prev_vest = vest
    state.prev_prop = prop
    state.prev_err = err
    state.buf_idx = buf_idx
    state.alpha, state.omega = plant_step(
        state.alpha, state.omega, torque, body.mgh, body.inertia, cfg.dt
    )
    return torque


def simulate(
    params: DecParams,
    body: BodyParams,
    tilt: np.ndarray,
    cfg: SimConfig,
    noise: np.ndarray = None,
    abort_above: float = np.inf,
) -> np.ndarray:
    """Run the closed loop from rest and return the decimated sway trace.

    tilt must cover cfg.n_steps samples at cfg.dt. The vestibular noise is
    synthesized from cfg.seed unless an explicit noise trace is supplied.
    If the state diverges (or |alpha| exceeds abort_above), the remainder
    of the output is NaN, which downstream stability checks treat as
    unstable.
    """
    n = cfg.n_steps
    tilt = np.asarray(tilt, dtype=np.float64)
    if tilt.shape[0] < n:
        raise ConfigError(
            f"tilt trace has {tilt.shape[0]} samples; {n} required for duration "
            f"{cfg.duration} at dt {cfg.dt}"
        )
    if noise is None:
        if params.nv > 0 and cfg.noise_scale != 0:
            noise = pink_noise(params.nv * cfg.noise_scale, n, cfg.dt, cfg.seed)
        else:
            noise = np.zeros(n, dtype=np.float64)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape[0] < n:
            raise ConfigError("noise trace shorter than the simulation")
    out = np.empty(cfg.n_output, dtype=np.float64)
    done = _run_loop(
        tilt[:n],
        noise[:n],
        params.kp,
        params.kd,
        params.kp_pass,
        params.kd_pass,
        params.theta,
        round(params.delta / cfg.dt),
        cfg.g_gain,
        cfg.noise_in_gravity,
        body.mgh,
        body.inertia,
        cfg.dt,
        cfg.output_every,
        abort_above,
        out,
    )
    if done < n:
        out[-(-done // cfg.output_every):] = np.nan
        out[-1] = np.nan  # guarantee the marker even for late aborts
    return out


def refine_config(cfg: SimConfig, factor: int) -> SimConfig:
    """A config with dt divided by factor (same duration and output grid)."""
    return replace(cfg, dt=cfg.dt / factor)
