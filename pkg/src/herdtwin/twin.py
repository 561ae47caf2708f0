"""Closed-loop per-cow digital twin.

Per minute the twin runs one cycle of: thermal-balance ODE prior, behavioral
Markov context, Kalman measurement correction, Gaussian-process residual
model, online parameter feedback, and feature emission. The loop is strictly
causal: everything emitted at minute t is a function of frame content at
minutes <= t, and parameter updates for minute t use prediction errors from
minute t-1 and earlier only.

Core temperature dynamics (deg C per minute):

    dT/dt = (q_metabolic * alpha_activity
             + k_th * (t_eff(thi) - T)
             - k_d * (T - t_set) * beta_tolerance) / c_thermal

with q_metabolic = m_basal + gamma * activity and t_eff a linear map from the
unitless THI to an equivalent ambient temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .timeseries import AlignedFrame, Channel, Modality, Timestamp

T_CLAMP_LO = 35.0
T_CLAMP_HI = 43.0

BEHAVIOR_STATES = ("lying", "standing", "walking", "feeding")

DT_FEATURE_COLUMNS = (
    "dt_cbt_prediction",
    "dt_future_cbt",
    "dt_stress_probability",
    "dt_p_lying",
    "dt_p_standing",
    "dt_p_walking",
    "dt_p_feeding",
    "dt_uncertainty",
)


class TwinError(Exception):
    """Base error for twin configuration and execution."""


class NumericalError(TwinError):
    """A linear solve failed (singular or non-PD matrix)."""


class ModelError(TwinError):
    """A model invariant was violated (e.g. zero-mass transition row)."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

#: Learnable parameter names in canonical order.
PARAM_NAMES = (
    "alpha_activity",
    "beta_tolerance",
    "c_thermal",
    "k_d",
    "t_set",
    "k_th",
    "m_basal",
    "gamma",
    "teff_c0",
    "teff_c1",
)

DEFAULT_BOUNDS: dict[str, tuple[float, float]] = {
    "alpha_activity": (0.25, 4.0),
    "beta_tolerance": (0.25, 4.0),
    "c_thermal": (1000.0, 4000.0),
    "k_d": (1.0, 30.0),
    "t_set": (37.5, 39.5),
    "k_th": (0.5, 20.0),
    "m_basal": (5.0, 60.0),
    "gamma": (0.0, 12.0),
    "teff_c0": (10.0, 35.0),
    "teff_c1": (0.01, 0.5),
}


@dataclass(frozen=True)
class TwinParams:
    """Physiological parameter vector with per-parameter box bounds.

    Defaults place the ODE fixed point at 38.6 degC for THI 68 at rest and
    about 39.3 degC for THI 84; c_thermal is 650 kg x 3.5 kJ/kg/degC. These
    are configuration priors, not ground truth — the feedback loop fits them
    per cow.
    """

    alpha_activity: float = 1.0
    beta_tolerance: float = 1.0
    c_thermal: float = 2275.0
    k_d: float = 8.5
    t_set: float = 38.6
    k_th: float = 4.0
    m_basal: float = 21.0
    gamma: float = 3.0
    teff_c0: float = 23.83
    teff_c1: float = 0.14
    bounds: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BOUNDS))

    def __post_init__(self):
        if self.c_thermal <= 0:
            raise TwinError("c_thermal must be strictly positive")
        for name in PARAM_NAMES:
            lo, hi = self.bounds[name]
            v = getattr(self, name)
            if not (lo <= v <= hi):
                raise TwinError(f"{name}={v} outside bounds [{lo}, {hi}]")

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    def with_vector(self, vec) -> "TwinParams":
        clipped = {}
        for name, v in zip(PARAM_NAMES, vec):
            lo, hi = self.bounds[name]
            clipped[name] = float(min(max(v, lo), hi))
        return replace(self, **clipped)

    def t_eff(self, thi: float) -> float:
        return self.teff_c0 + self.teff_c1 * thi


def ode_rhs(t_core: float, activity: float, thi: float, p: TwinParams) -> float:
    """Rate of change of core temperature, deg C per minute."""
    q_metabolic = p.m_basal + p.gamma * activity
    q_env = p.k_th * (p.t_eff(thi) - t_core)
    q_dissipation = p.k_d * (t_core - p.t_set)
    return (q_metabolic * p.alpha_activity + q_env - q_dissipation * p.beta_tolerance) / p.c_thermal


class EulerResult(NamedTuple):
    t_core: float
    clamped: bool


def euler_step(t_core: float, activity: float, thi: float, p: TwinParams, dt: float = 1.0) -> EulerResult:
    """One explicit Euler step, clamped to the physiological window."""
    if dt <= 0:
        raise TwinError(f"dt must be positive, got {dt}")
    t_new = t_core + dt * ode_rhs(t_core, activity, thi, p)
    if t_new < T_CLAMP_LO:
        return EulerResult(T_CLAMP_LO, True)
    if t_new > T_CLAMP_HI:
        return EulerResult(T_CLAMP_HI, True)
    return EulerResult(t_new, False)


# ---------------------------------------------------------------------------
# Behavior
# ---------------------------------------------------------------------------

def _default_psi_env(thi: float) -> np.ndarray:
    # Above THI 72 standing is favored over lying, rising linearly; the
    # direction follows field behavior findings, the magnitude is a default.
    excess = max(0.0, thi - 72.0)
    return np.array([1.0, 1.0 + 0.05 * excess, 1.0, 1.0])


DEFAULT_TRANSITIONS = np.array(
    [
        [0.950, 0.040, 0.005, 0.005],
        [0.050, 0.880, 0.040, 0.030],
        [0.010, 0.090, 0.850, 0.050],
        [0.010, 0.050, 0.040, 0.900],
    ]
)

DEFAULT_ACTIVITY_MEANS = np.array([0.1, 1.0, 3.0, 1.6])


@dataclass(frozen=True)
class BehaviorModel:
    """First-order Markov model over {lying, standing, walking, feeding}.

    phi_hour is a 24 x 4 lookup of positive diurnal multipliers (initialized
    to 1); psi_env maps THI to four positive multipliers. Rows of the
    modulated matrix are renormalized so each remains a distribution.
    """

    transition: np.ndarray = field(default_factory=lambda: DEFAULT_TRANSITIONS.copy())
    phi_hour: np.ndarray = field(default_factory=lambda: np.ones((24, 4)))
    psi_env: Callable[[float], np.ndarray] = _default_psi_env
    activity_means: np.ndarray = field(default_factory=lambda: DEFAULT_ACTIVITY_MEANS.copy())

    def __post_init__(self):
        m = np.asarray(self.transition, dtype=float)
        if m.shape != (4, 4) or (m < 0).any():
            raise ModelError("transition must be a nonnegative 4x4 matrix")
        if not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
            raise ModelError("transition rows must sum to 1")
        if np.asarray(self.phi_hour).shape != (24, 4) or (np.asarray(self.phi_hour) <= 0).any():
            raise ModelError("phi_hour must be a 24x4 array of positive multipliers")
        object.__setattr__(self, "transition", m)
        object.__setattr__(self, "phi_hour", np.asarray(self.phi_hour, dtype=float))
        object.__setattr__(self, "activity_means", np.asarray(self.activity_means, dtype=float))

    def modulated(self, hour: int, thi: float) -> np.ndarray:
        psi = np.asarray(self.psi_env(thi), dtype=float)
        if psi.shape != (4,) or (psi <= 0).any():
            raise ModelError("psi_env must return 4 positive multipliers")
        m = self.transition * self.phi_hour[hour][None, :] * psi[None, :]
        totals = m.sum(axis=1, keepdims=True)
        if (totals <= 0).any():
            raise ModelError("a transition row renormalizes over total 0")
        return m / totals


def markov_step(behavior_dist: np.ndarray, hour: int, thi: float, bm: BehaviorModel) -> np.ndarray:
    """Propagate the behavior distribution one minute."""
    dist = np.asarray(behavior_dist, dtype=float)
    out = dist @ bm.modulated(hour, thi)
    out = np.clip(out, 0.0, None)
    return out / out.sum()


# ---------------------------------------------------------------------------
# Kalman fusion
# ---------------------------------------------------------------------------

@dataclass
class TwinState:
    """Kalman state [T_core, dT_core, A_level] with covariance and context."""

    x: np.ndarray
    p_cov: np.ndarray
    behavior_dist: np.ndarray
    t: Timestamp

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        cov = np.asarray(self.p_cov, dtype=float)
        self.p_cov = 0.5 * (cov + cov.T)
        self.behavior_dist = np.asarray(self.behavior_dist, dtype=float)

    def validate(self):
        if abs(self.behavior_dist.sum() - 1.0) > 1e-9 or (self.behavior_dist < -1e-12).any():
            raise ModelError("behavior_dist is not a distribution")
        if not (T_CLAMP_LO <= self.x[0] <= T_CLAMP_HI):
            raise ModelError(f"T_core {self.x[0]} outside clamp window")
        eig = np.linalg.eigvalsh(self.p_cov)
        if eig.min() < -1e-9:
            raise ModelError(f"covariance not PSD (min eigenvalue {eig.min()})")
        return self


@dataclass(frozen=True)
class NoiseModel:
    """Process/measurement covariances and observation-row selectors.

    The CBT logger variance default is 0.01 degC^2 (sigma ~ 0.1 degC);
    activity is observed more loosely through the IMMU magnitude.
    """

    q: np.ndarray = field(default_factory=lambda: np.diag([2e-4, 1e-5, 0.25]))
    r_cbt: float = 0.01
    r_activity: float = 0.25

    def observation(self, cbt: bool, activity: bool):
        """(H, R) rows for the currently available observations."""
        rows = []
        variances = []
        if cbt:
            rows.append([1.0, 0.0, 0.0])
            variances.append(self.r_cbt)
        if activity:
            rows.append([0.0, 0.0, 1.0])
            variances.append(self.r_activity)
        if not rows:
            return np.zeros((0, 3)), np.zeros((0, 0))
        return np.array(rows), np.diag(variances)


class TwinInputs(NamedTuple):
    thi: float
    hour: int


class PredictResult(NamedTuple):
    state: TwinState
    clamped: bool


def kalman_predict(
    state: TwinState,
    inputs: TwinInputs,
    p: TwinParams,
    bm: BehaviorModel,
    noise: NoiseModel,
    dt: float = 1.0,
) -> PredictResult:
    """Prior state from the ODE and Markov models.

    Covariance propagates through the reduced Jacobian: the exact dT'/dT and
    dT'/dA terms for the temperature row; the dT and A rows are driven states
    refreshed by their process-noise entries.
    """
    t_prev, _, a_prev = state.x
    dist = markov_step(state.behavior_dist, inputs.hour, inputs.thi, bm)
    a_exp = float(dist @ bm.activity_means)
    stepped = euler_step(t_prev, a_prev, inputs.thi, p, dt)
    dT_new = ode_rhs(stepped.t_core, a_exp, inputs.thi, p)

    drhs_dT = -(p.k_th + p.k_d * p.beta_tolerance) / p.c_thermal
    f = np.zeros((3, 3))
    f[0, 0] = 1.0 + dt * drhs_dT
    f[0, 2] = dt * p.gamma * p.alpha_activity / p.c_thermal
    p_new = f @ state.p_cov @ f.T + noise.q

    prior = TwinState(
        x=np.array([stepped.t_core, dT_new, a_exp]),
        p_cov=p_new,
        behavior_dist=dist,
        t=state.t + int(dt),
    )
    return PredictResult(prior, stepped.clamped)


def _inv_small(s: np.ndarray) -> np.ndarray:
    """Inverse of the (at most 2x2) innovation covariance, with a cond guard."""
    if s.shape[0] == 1:
        if abs(s[0, 0]) < 1e-300:
            raise NumericalError("singular innovation covariance (1x1 ~ 0)")
        return np.array([[1.0 / s[0, 0]]])
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    scale = max(abs(s[0, 0]), abs(s[1, 1]), abs(s[0, 1]))
    if scale == 0.0 or abs(det) < 1e-12 * scale * scale:
        raise NumericalError(f"singular innovation covariance (det={det:.3e}, scale={scale:.3e})")
    return np.array([[s[1, 1], -s[0, 1]], [-s[1, 0], s[0, 0]]]) / det


def kalman_update(prior: TwinState, y: np.ndarray, h: np.ndarray, r: np.ndarray) -> TwinState:
    """Standard measurement update; with no observations the prior passes through."""
    if h.shape[0] == 0:
        return prior
    p_cov = prior.p_cov
    s = h @ p_cov @ h.T + r
    gain = p_cov @ h.T @ _inv_small(s)
    x = prior.x + gain @ (y - h @ prior.x)
    x[0] = min(max(x[0], T_CLAMP_LO), T_CLAMP_HI)
    p_new = (np.eye(3) - gain @ h) @ p_cov
    return TwinState(x=x, p_cov=p_new, behavior_dist=prior.behavior_dist, t=prior.t)


# ---------------------------------------------------------------------------
# Gaussian-process residual layer
# ---------------------------------------------------------------------------

# Fixed, data-independent standardization of GP inputs (THI, sin/cos hour,
# expected activity). Data-dependent scaling would leak future statistics.
_GP_CENTER = np.array([70.0, 0.0, 0.0, 1.0])
_GP_SCALE = np.array([10.0, 1.0, 1.0, 1.5])


def gp_input(thi: float, hour_float: float, activity: float) -> np.ndarray:
    angle = 2.0 * math.pi * hour_float / 24.0
    raw = np.array([thi, math.sin(angle), math.cos(angle), activity])
    return (raw - _GP_CENTER) / _GP_SCALE


@dataclass
class GpResidualModel:
    """Exact GP regression over a bounded ring of (input, residual) pairs.

    Kernel: sigma_const2 * RBF(length_scale) + white(sigma_n2). The factor of
    the regularized kernel matrix is cached and rebuilt when the window
    changes; posteriors are exact for the current window.
    """

    capacity: int = 256
    sigma_const2: float = 0.04
    length_scale: float = 1.0
    sigma_n2: float = 0.01

    def __post_init__(self):
        self._x: list[np.ndarray] = []
        self._r: list[float] = []
        self._inv = None
        self._weights = None
        self._xs = None  # stacked window, rebuilt with the factor

    def __len__(self) -> int:
        return len(self._x)

    @property
    def prior_std(self) -> float:
        return math.sqrt(self.sigma_const2 + self.sigma_n2)

    def add(self, x: np.ndarray, residual: float) -> None:
        self._x.append(np.asarray(x, dtype=float))
        self._r.append(float(residual))
        if len(self._x) > self.capacity:
            self._x.pop(0)
            self._r.pop(0)
        self._inv = None

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # |a-b|^2 = |a|^2 + |b|^2 - 2ab^T, clipped against rounding
        sq_a = (a * a).sum(axis=1)[:, None]
        sq_b = (b * b).sum(axis=1)[None, :]
        d2 = np.clip(sq_a + sq_b - 2.0 * (a @ b.T), 0.0, None)
        return self.sigma_const2 * np.exp(-0.5 * d2 / self.length_scale**2)

    def _refresh(self):
        xs = np.vstack(self._x)
        kn = self._kernel(xs, xs) + self.sigma_n2 * np.eye(len(self._x))
        for jitter in (0.0, 1e-10, 1e-8, 1e-6):
            try:
                np.linalg.cholesky(kn + jitter * np.eye(kn.shape[0]))
            except np.linalg.LinAlgError:
                continue
            self._inv = np.linalg.inv(kn + jitter * np.eye(kn.shape[0]))
            self._weights = self._inv @ np.asarray(self._r)
            self._xs = xs
            return
        raise NumericalError("kernel matrix not positive definite after jitter escalation")

    def posterior(self, x_query: np.ndarray) -> tuple[float, float]:
        """Exact posterior (mean residual, std) at a query input."""
        if not self._x:
            return 0.0, self.prior_std
        if self._inv is None:
            self._refresh()
        diff = self._xs - np.asarray(x_query, dtype=float)
        k_star = self.sigma_const2 * np.exp(
            -0.5 * (diff * diff).sum(axis=1) / self.length_scale**2
        )
        mean = float(k_star @ self._weights)
        var = self.sigma_const2 + self.sigma_n2 - float(k_star @ self._inv @ k_star)
        return mean, math.sqrt(max(var, 0.0))

    def log_marginal_likelihood(self) -> float:
        if not self._x:
            return 0.0
        xs = np.vstack(self._x)
        r = np.asarray(self._r)
        kn = self._kernel(xs, xs) + self.sigma_n2 * np.eye(len(self._x))
        chol = np.linalg.cholesky(kn + 1e-12 * np.eye(kn.shape[0]))
        alpha = np.linalg.solve(kn, r)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        return float(-0.5 * r @ alpha - 0.5 * logdet - 0.5 * len(r) * math.log(2 * math.pi))

    def refit_hyperparams(self) -> None:
        """Grid-search (3x3x3 around the current values) maximizing the LML."""
        if len(self._x) < 8:
            return
        best = (self.log_marginal_likelihood(), self.sigma_const2, self.length_scale, self.sigma_n2)
        base = (self.sigma_const2, self.length_scale, self.sigma_n2)
        for fc in (0.5, 1.0, 2.0):
            for fl in (0.5, 1.0, 2.0):
                for fn in (0.5, 1.0, 2.0):
                    self.sigma_const2 = base[0] * fc
                    self.length_scale = base[1] * fl
                    self.sigma_n2 = base[2] * fn
                    self._inv = None
                    lml = self.log_marginal_likelihood()
                    if lml > best[0]:
                        best = (lml, self.sigma_const2, self.length_scale, self.sigma_n2)
        _, self.sigma_const2, self.length_scale, self.sigma_n2 = best
        self._inv = None


def gp_fit_predict(model: GpResidualModel, x_query: np.ndarray) -> tuple[float, float]:
    return model.posterior(x_query)


# ---------------------------------------------------------------------------
# Online parameter feedback
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeedbackSignal:
    """One-step CBT prediction error and the operating point it was made at.

    error = (t_core + dt * rhs(t_core, activity, thi)) - observed_cbt, with
    every quantity taken from minute t-1 (or earlier) relative to the forecast
    that will consume the updated parameters.
    """

    error: float
    t_core: float
    activity: float
    thi: float
    dt: float = 1.0


def rhs_param_gradients(t_core: float, activity: float, thi: float, p: TwinParams) -> np.ndarray:
    """Analytic d(rhs)/d(theta) in PARAM_NAMES order, from the closed form."""
    c = p.c_thermal
    rhs = ode_rhs(t_core, activity, thi, p)
    return np.array(
        [
            (p.m_basal + p.gamma * activity) / c,          # alpha_activity
            -p.k_d * (t_core - p.t_set) / c,               # beta_tolerance
            -rhs / c,                                      # c_thermal
            -p.beta_tolerance * (t_core - p.t_set) / c,    # k_d
            p.k_d * p.beta_tolerance / c,                  # t_set
            (p.t_eff(thi) - t_core) / c,                   # k_th
            p.alpha_activity / c,                          # m_basal
            activity * p.alpha_activity / c,               # gamma
            p.k_th / c,                                    # teff_c0
            p.k_th * thi / c,                              # teff_c1
        ]
    )


def loss_gradients(signal: FeedbackSignal, p: TwinParams) -> np.ndarray:
    """d(error^2)/d(theta): the chain rule through the one-step Euler map."""
    return 2.0 * signal.error * signal.dt * rhs_param_gradients(
        signal.t_core, signal.activity, signal.thi, p
    )


def feedback_update(p: TwinParams, signal: FeedbackSignal, alpha_theta: float = 0.01) -> TwinParams:
    """Gradient step on the squared one-step prediction error, clamped to bounds.

    The step for each parameter is scaled by its squared bound width, which is
    plain gradient descent in bound-normalized coordinates and keeps all
    parameters comparably mobile.
    """
    if alpha_theta == 0.0 or signal.error == 0.0:
        return p
    grads = loss_gradients(signal, p)
    widths = np.array([p.bounds[n][1] - p.bounds[n][0] for n in PARAM_NAMES])
    return p.with_vector(p.as_vector() - alpha_theta * widths**2 * grads)


# ---------------------------------------------------------------------------
# The per-cow loop
# ---------------------------------------------------------------------------

FLAG_CBT = 1
FLAG_IMMU = 2
FLAG_THI = 4
FLAG_CLAMPED = 8


@dataclass(frozen=True)
class TwinRunConfig:
    horizon_minutes: int = 120
    theta_stress: float = 38.8
    beta_stress: float = 5.0
    alpha_theta: float = 0.01
    gp_stride: int = 10  # residual pairs admitted every this many observed minutes
    feedback: bool = True
    gp_refit_daily: bool = False


@dataclass(frozen=True)
class DtFeatureVector:
    t_cbt_hat: float
    t_future_hat: float
    p_stress: float
    p_behavior: np.ndarray
    sigma_uncertainty: float

    def __post_init__(self):
        if not (0.0 <= self.p_stress <= 1.0):
            raise ModelError(f"p_stress {self.p_stress} outside [0, 1]")
        if abs(float(np.sum(self.p_behavior)) - 1.0) > 1e-9:
            raise ModelError("p_behavior must sum to 1")
        if self.sigma_uncertainty < 0:
            raise ModelError("sigma_uncertainty must be nonnegative")


@dataclass
class TwinRunResult:
    """Per-minute DT outputs plus the final adapted parameters."""

    start: Timestamp
    t_cbt_hat: np.ndarray
    t_future_hat: np.ndarray
    p_stress: np.ndarray
    p_behavior: np.ndarray  # (T, 4)
    sigma_uncertainty: np.ndarray
    flags: np.ndarray
    clamp_events: int
    final_params: TwinParams

    @property
    def length(self) -> int:
        return self.t_cbt_hat.size

    def feature_vector(self, t: int) -> DtFeatureVector:
        return DtFeatureVector(
            t_cbt_hat=float(self.t_cbt_hat[t]),
            t_future_hat=float(self.t_future_hat[t]),
            p_stress=float(self.p_stress[t]),
            p_behavior=self.p_behavior[t],
            sigma_uncertainty=float(self.sigma_uncertainty[t]),
        )

    def columns(self) -> dict[str, np.ndarray]:
        return {
            "dt_cbt_prediction": self.t_cbt_hat,
            "dt_future_cbt": self.t_future_hat,
            "dt_stress_probability": self.p_stress,
            "dt_p_lying": self.p_behavior[:, 0],
            "dt_p_standing": self.p_behavior[:, 1],
            "dt_p_walking": self.p_behavior[:, 2],
            "dt_p_feeding": self.p_behavior[:, 3],
            "dt_uncertainty": self.sigma_uncertainty,
        }


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def extract_activity(frame: AlignedFrame, t: int) -> float | None:
    """Activity magnitude proxy: mean |acceleration| over the IMMU axes."""
    if not frame.has(Modality.IMMU):
        return None
    chans = frame.channels[Modality.IMMU][:3]
    vals = [abs(ch.values[t]) for ch in chans if ch.mask[t]]
    return float(np.mean(vals)) if vals else None


def initial_state(p: TwinParams, bm: BehaviorModel, t: Timestamp) -> TwinState:
    # T-variance starts below the no-observation steady state Q_tt/(1-f00^2)
    # so uncertainty grows monotonically through sensor gaps.
    dist = np.full(4, 0.25)
    return TwinState(
        x=np.array([p.t_set, 0.0, float(dist @ bm.activity_means)]),
        p_cov=np.diag([0.01, 1e-5, 1.0]),
        behavior_dist=dist,
        t=t,
    )


def run_twin(
    frame: AlignedFrame,
    p0: TwinParams | None = None,
    bm: BehaviorModel | None = None,
    noise: NoiseModel | None = None,
    gp: GpResidualModel | None = None,
    cfg: TwinRunConfig | None = None,
) -> TwinRunResult:
    """Strict forward pass of the twin over one cow's frame.

    Per minute: predict, update with whatever observations exist (missing
    modalities are conditionally skipped), roll the ODE out to t+horizon
    under persistence inputs, GP-correct that rollout, emit the feature
    vector, then feed the minute's prediction error back into the parameters
    for use from the next minute on.
    """
    p = p0 if p0 is not None else TwinParams()
    bm = bm if bm is not None else BehaviorModel()
    noise = noise if noise is not None else NoiseModel()
    gp = gp if gp is not None else GpResidualModel()
    cfg = cfg if cfg is not None else TwinRunConfig()

    length = frame.length
    cbt_ch = frame.channel(Modality.CBT) if frame.has(Modality.CBT) else None
    thi_ch = frame.channel(Modality.THI) if frame.has(Modality.THI) else None

    out_cbt = np.zeros(length)
    out_future = np.zeros(length)
    out_stress = np.zeros(length)
    out_behavior = np.zeros((length, 4))
    out_sigma = np.zeros(length)
    out_flags = np.zeros(length, dtype=np.uint8)
    clamp_events = 0

    state = initial_state(p, bm, frame.start - 1)
    last_thi = 68.0
    minutes_since_gp = cfg.gp_stride  # admit the first eligible pair

    for t in range(length):
        ts = frame.start + t
        flags = 0
        if thi_ch is not None and thi_ch.mask[t]:
            last_thi = float(thi_ch.values[t])
            flags |= FLAG_THI
        thi = last_thi
        hour = int(ts.hour_float)

        prev_t_core = float(state.x[0])
        prev_activity = float(state.x[2])
        prior, clamped = kalman_predict(state, TwinInputs(thi, hour), p, bm, noise)
        if clamped:
            clamp_events += 1
            flags |= FLAG_CLAMPED

        y_cbt = None
        if cbt_ch is not None and cbt_ch.mask[t]:
            y_cbt = float(cbt_ch.values[t])
            flags |= FLAG_CBT
        y_act = extract_activity(frame, t)
        if y_act is not None:
            flags |= FLAG_IMMU

        obs = []
        if y_cbt is not None:
            obs.append(y_cbt)
        if y_act is not None:
            obs.append(y_act)
        h, r = noise.observation(y_cbt is not None, y_act is not None)
        state = kalman_update(prior, np.array(obs), h, r)

        # GP window: residual between measured and one-step simulated CBT.
        residual = None
        if y_cbt is not None:
            residual = y_cbt - float(prior.x[0])
            minutes_since_gp += 1
            if minutes_since_gp >= cfg.gp_stride:
                gp.add(gp_input(thi, ts.hour_float, float(state.x[2])), residual)
                minutes_since_gp = 0
        if cfg.gp_refit_daily and t > 0 and t % 1440 == 0:
            gp.refit_hyperparams()

        # Open-loop rollout to t + horizon under persistence inputs. With
        # constant inputs the Euler recursion is affine, T' = f*T + g, so the
        # horizon composes in closed form; the trajectory approaches its fixed
        # point monotonically, so clamping the endpoint equals clamping the path.
        act_hold = float(state.x[2])
        f_step = 1.0 - (p.k_th + p.k_d * p.beta_tolerance) / p.c_thermal
        g_step = (
            (p.m_basal + p.gamma * act_hold) * p.alpha_activity
            + p.k_th * p.t_eff(thi)
            + p.k_d * p.beta_tolerance * p.t_set
        ) / p.c_thermal
        f_h = f_step**cfg.horizon_minutes
        t_roll = f_h * float(state.x[0]) + g_step * (1.0 - f_h) / (1.0 - f_step)
        t_roll = min(max(t_roll, T_CLAMP_LO), T_CLAMP_HI)
        future_ts = ts + cfg.horizon_minutes
        gp_mean, gp_std = gp.posterior(gp_input(thi, future_ts.hour_float, act_hold))
        t_future = t_roll + gp_mean

        out_cbt[t] = state.x[0]
        out_future[t] = t_future
        out_stress[t] = _logistic(cfg.beta_stress * (t_future - cfg.theta_stress))
        out_behavior[t] = state.behavior_dist
        out_sigma[t] = math.sqrt(max(state.p_cov[0, 0], 0.0) + gp_std**2)
        out_flags[t] = flags

        # Feedback strictly after emission: the parameters used for minute t
        # saw errors from minute t-1 and earlier only.
        if cfg.feedback and residual is not None:
            signal = FeedbackSignal(
                error=-residual, t_core=prev_t_core, activity=prev_activity, thi=thi
            )
            p = feedback_update(p, signal, cfg.alpha_theta)

    return TwinRunResult(
        start=frame.start,
        t_cbt_hat=out_cbt,
        t_future_hat=out_future,
        p_stress=out_stress,
        p_behavior=out_behavior,
        sigma_uncertainty=out_sigma,
        flags=out_flags,
        clamp_events=clamp_events,
        final_params=p,
    )


def attach_dt_features(frame: AlignedFrame, result: TwinRunResult) -> AlignedFrame:
    """Return a frame with the twin's outputs appended as the dt_features modality."""
    if result.length != frame.length or result.start != frame.start:
        raise TwinError("twin result does not align with the frame")
    cols = result.columns()
    units = ("degC", "degC", "prob", "prob", "prob", "prob", "prob", "degC")
    mask = np.ones(frame.length, dtype=bool)
    chans = tuple(
        Channel(cols[name], mask, unit) for name, unit in zip(DT_FEATURE_COLUMNS, units)
    )
    channels = dict(frame.channels)
    channels[Modality.DT_FEATURES] = chans
    return AlignedFrame(
        cow=frame.cow, start=frame.start, channels=channels, step_minutes=frame.step_minutes
    )


# ---------------------------------------------------------------------------
# TWINPARAMS v1 serialization
# ---------------------------------------------------------------------------

PARAMS_MAGIC = "TWINPARAMS v1"


def write_params(p: TwinParams, path) -> None:
    lines = [PARAMS_MAGIC]
    for name in PARAM_NAMES:
        lines.append(f"{name} {repr(getattr(p, name))}")
    for name in PARAM_NAMES:
        lo, hi = p.bounds[name]
        lines.append(f"bound {name} {repr(lo)} {repr(hi)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_params(path) -> TwinParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != PARAMS_MAGIC:
        raise TwinError(f"expected {PARAMS_MAGIC!r} header in {path}")
    values: dict[str, float] = {}
    bounds: dict[str, tuple[float, float]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] == "bound":
            bounds[parts[1]] = (float(parts[2]), float(parts[3]))
        else:
            values[parts[0]] = float(parts[1])
    missing = set(PARAM_NAMES) - set(values)
    if missing:
        raise TwinError(f"missing parameters in {path}: {sorted(missing)}")
    return TwinParams(**values, bounds=bounds or dict(DEFAULT_BOUNDS))
