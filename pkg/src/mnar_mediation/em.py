"""Parametric maximum likelihood under MNAR mediation missingness.

The observed-data likelihood integrates latent values out of each unit's
contribution.  A unit only carries completions for latent variables that
actually enter its contribution: the mediator whenever it is missing, and the
outcome only when outcome missingness depends on the outcome value (directly,
or through the positivity indicator of a two-part outcome).  Under the
mediator-side mechanisms a missing outcome integrates out of the likelihood
exactly, so those units need no outcome completion.

EM with fractional imputation: discrete latents are enumerated with exact
posterior weights.  Continuous latents get one weighted completion per
quadrature node (default) or per importance draw from the refreshed
current-iteration mediator/outcome model; either way the self-normalized
weights multiply every component model's contribution in the weighted M-step.
Monte Carlo draws reuse one fixed set of standard-normal shocks across
iterations so the update map stays deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, gammaln

from . import glm
from .core import (ABSENT, ConfigError, CovariateSpec, Dataset, FittedParams,
                   MnarMechanism, ModelConfig, covariate_row)

_LOG2PI = float(np.log(2.0 * np.pi))


class EmError(RuntimeError):
    pass


class NonFiniteLoglikError(EmError):
    def __init__(self, unit_index: int):
        self.unit_index = unit_index
        super().__init__(
            f"unit {unit_index} has a non-finite likelihood contribution")


@dataclass(frozen=True)
class EmOptions:
    """Iteration controls for the EM engine.

    ``s_draws`` is the number of fractional imputations per continuous latent
    when ``proposal="monte_carlo"``; the default ``"gauss_hermite"`` proposal
    places deterministic quadrature completions through the same
    current-iteration model (``quad_nodes`` per latent, ``quad_nodes_2d`` per
    dimension when two continuous latents are imputed jointly).
    """

    max_iterations: int = 2000
    loglik_tol: float = 1e-8
    param_tol: float = 1e-6
    s_draws: int = 100
    quad_nodes: int = 31
    quad_nodes_2d: int = 15
    proposal: str = "gauss_hermite"
    init: str = "complete_case"
    seed: int = 0
    two_stage: bool = False
    accelerate: bool = True

    def __post_init__(self):
        if self.s_draws < 1:
            raise ConfigError("s_draws must be >= 1")
        if self.loglik_tol <= 0 or self.param_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.proposal not in ("gauss_hermite", "monte_carlo"):
            raise ConfigError(f"unknown proposal {self.proposal!r}")
        if self.init not in ("complete_case", "zeros"):
            raise ConfigError(f"unknown init policy {self.init!r}")


@dataclass
class EmState:
    params: FittedParams
    loglik_trace: np.ndarray
    converged: bool
    n_iterations: int
    unit_weights: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


# ---------------------------------------------------------------------------
# Column-array view of a dataset


@dataclass
class _Arrays:
    t: np.ndarray
    x: np.ndarray
    m: np.ndarray
    y: np.ndarray
    rm: np.ndarray
    ry: np.ndarray
    J: int | None  # mediator level count, None when continuous
    two_part: bool
    cont_y: bool

    @property
    def n(self) -> int:
        return self.t.shape[0]

    @property
    def mw(self) -> int:
        return 1 if self.J is None or self.J == 2 else self.J - 1


def _arrays_from_dataset(ds: Dataset) -> _Arrays:
    n = ds.n
    t = np.fromiter((r.t for r in ds.records), dtype=float, count=n)
    x = np.array([covariate_row(ds.schema, r.x) for r in ds.records],
                 dtype=float).reshape(n, -1)
    m = np.array([np.nan if r.m is ABSENT else float(r.m) for r in ds.records])
    y = np.array([np.nan if r.y is ABSENT else float(r.y) for r in ds.records])
    rm = np.fromiter((r.r_m for r in ds.records), dtype=float, count=n)
    ry = np.fromiter((r.r_y for r in ds.records), dtype=float, count=n)
    J = ds.mediator_kind.n_levels if ds.mediator_kind.is_discrete else None
    two_part = ds.outcome_kind.base == "two_part_nonnegative"
    cont_y = ds.outcome_kind.base in ("continuous", "two_part_nonnegative")
    return _Arrays(t=t, x=x, m=m, y=y, rm=rm, ry=ry, J=J, two_part=two_part,
                   cont_y=cont_y)


def _mblock(m: np.ndarray, J: int | None) -> np.ndarray:
    if J is None or J == 2:
        return m[:, None]
    return np.column_stack([(m == j).astype(float) for j in range(1, J)])


def _design(kind: str, t, x, m, reg, config: ModelConfig, J) -> np.ndarray:
    ones = np.ones_like(t)
    if kind == "mediator":
        return np.column_stack([ones, t, x])
    if kind in ("outcome", "hurdle"):
        mb = _mblock(m, J)
        cols = [ones[:, None], mb, t[:, None]]
        if config.interaction:
            cols.append(mb * t[:, None])
        cols.append(x)
        return np.column_stack(cols)
    if kind == "rm":
        return np.column_stack([ones, _mblock(m, J), t, x])
    if kind == "ry":
        block = _mblock(reg, J) if config.ry_regressor == "m" else reg[:, None]
        return np.column_stack([ones[:, None], block, t[:, None], x])
    raise ConfigError(f"unknown design kind {kind!r}")


def _log_bernoulli(y, eta):
    return y * eta - np.logaddexp(0.0, eta)


def _log_gaussian(y, mu, sigma):
    z = (y - mu) / sigma
    return -0.5 * _LOG2PI - np.log(sigma) - 0.5 * z * z


def _log_multinomial(m, eta):
    """eta: (R, J-1) non-reference logits; m: level codes."""
    emax = np.maximum(eta.max(axis=1), 0.0)
    logz = emax + np.log(np.exp(-emax)
                         + np.exp(eta - emax[:, None]).sum(axis=1))
    pick = np.zeros(eta.shape[0])
    pos = m > 0
    if np.any(pos):
        pick[pos] = eta[pos, (m[pos] - 1).astype(int)]
    return pick - logz


# ---------------------------------------------------------------------------
# Completion frame


@dataclass
class _Frame:
    """Completed-data rows: observed values plus weighted latent completions.

    ``m_kind``/``y_kind`` say how each row enters the log joint density:
    m_kind 0 = include the mediator density, 1 = absorbed into ``base_logw``
    (quadrature placement or a cancelling importance proposal); y_kind 0 = no
    outcome term, 1 = outcome density at the row value, 2 = positivity
    indicator only (two-part), 3 = absorbed completion (still enters the
    outcome M-step).
    """

    unit: np.ndarray
    t: np.ndarray
    x: np.ndarray
    m: np.ndarray
    y: np.ndarray
    h: np.ndarray
    rm: np.ndarray
    ry: np.ndarray
    m_kind: np.ndarray
    y_kind: np.ndarray
    base_logw: np.ndarray
    groups: list  # (slice, unit_indices, G)
    static: bool


def _needs_y_completion(config: ModelConfig) -> bool:
    fixed = {name for name, _ in config.ry_fixed}
    return config.ry_regressor in ("y", "h") or bool(fixed & {"y", "h"})


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gh_nodes(q: int) -> tuple[np.ndarray, np.ndarray]:
    if q not in _GH_CACHE:
        u, w = np.polynomial.hermite.hermgauss(q)
        _GH_CACHE[q] = (u * np.sqrt(2.0), np.log(w) - 0.5 * np.log(np.pi))
    return _GH_CACHE[q]


def _outcome_location(params: FittedParams, config: ModelConfig, t, x, m, J):
    X = _design("outcome", t, x, m, None, config, J)
    return X @ params.beta


def _build_frame(arr: _Arrays, params: FittedParams, config: ModelConfig,
                 mech: MnarMechanism, opts: EmOptions,
                 draws: dict | None = None) -> _Frame:
    """Expand the dataset into completion rows under the current parameters."""
    need_y = mech.has_ry_model and _needs_y_completion(config)
    lat_m = arr.rm == 0
    lat_y = (arr.ry == 0) & need_y if mech.has_ry_model else np.zeros(arr.n, bool)
    g00 = np.flatnonzero(~lat_m & ~lat_y)
    g10 = np.flatnonzero(lat_m & ~lat_y)
    g01 = np.flatnonzero(~lat_m & lat_y)
    g11 = np.flatnonzero(lat_m & lat_y)

    mc = opts.proposal == "monte_carlo"
    cont_m = arr.J is None
    # Latent-outcome completions are continuous only for a plain continuous
    # outcome; binary and two-part outcomes reduce to a binary completion.
    cont_y_lat = arr.cont_y and not arr.two_part

    cols: dict[str, list] = {k: [] for k in
                             ("unit", "t", "x", "m", "y", "h", "rm", "ry",
                              "m_kind", "y_kind", "base_logw")}
    groups = []
    cursor = 0

    def emit(unit_idx, G, m_vals, m_kind, y_vals, y_kind, base):
        nonlocal cursor
        R = unit_idx.size * G
        rep = np.repeat(unit_idx, G)
        cols["unit"].append(rep)
        cols["t"].append(arr.t[rep])
        cols["x"].append(arr.x[rep])
        cols["rm"].append(arr.rm[rep])
        cols["ry"].append(arr.ry[rep])
        cols["m"].append(m_vals)
        cols["y"].append(y_vals)
        h = np.where(np.isnan(y_vals), np.nan, (y_vals > 0).astype(float))
        cols["h"].append(h)
        cols["m_kind"].append(np.broadcast_to(m_kind, (R,)).astype(np.int8))
        cols["y_kind"].append(y_kind.astype(np.int8))
        cols["base_logw"].append(base)
        groups.append((slice(cursor, cursor + R), unit_idx, G))
        cursor += R

    def observed_y_kind(units):
        # 1 where the outcome value enters the likelihood, 0 where a missing
        # outcome integrates out exactly.
        return np.where(arr.ry[units] == 1, 1, 0)

    if g00.size:
        yk = np.repeat(observed_y_kind(g00), 1)
        emit(g00, 1, arr.m[g00], 0, np.where(yk == 1, arr.y[g00], np.nan), yk,
             np.zeros(g00.size))

    static = True

    if g10.size:
        yk_unit = observed_y_kind(g10)
        if not cont_m:
            G = arr.J
            m_vals = np.tile(np.arange(G, dtype=float), g10.size)
            yk = np.repeat(yk_unit, G)
            emit(g10, G, m_vals, 0,
                 np.where(yk == 1, np.repeat(arr.y[g10], G), np.nan), yk,
                 np.zeros(g10.size * G))
        else:
            static = False
            mu = params.alpha[0] + params.alpha[1] * arr.t[g10] \
                + arr.x[g10] @ params.alpha[2:]
            if mc:
                S = opts.s_draws
                z = draws["m_single"][:g10.size, :S]
                m_vals = (mu[:, None] + params.sigma_m * z).ravel()
                base = np.full(g10.size * S, -np.log(S))
                G = S
            else:
                nodes, logw = _gh_nodes(opts.quad_nodes)
                m_vals = (mu[:, None] + params.sigma_m * nodes[None, :]).ravel()
                base = np.tile(logw, g10.size)
                G = nodes.size
            yk = np.repeat(yk_unit, G)
            emit(g10, G, m_vals, 1,
                 np.where(yk == 1, np.repeat(arr.y[g10], G), np.nan), yk, base)

    if g01.size:
        if not cont_y_lat:
            G = 2
            y_vals = np.tile(np.array([0.0, 1.0]), g01.size)
            ykind = np.full(g01.size * G, 2 if arr.two_part else 1, np.int8)
            emit(g01, G, np.repeat(arr.m[g01], G), 0, y_vals, ykind,
                 np.zeros(g01.size * G))
        else:
            static = False
            mu_y = _outcome_location(params, config, arr.t[g01], arr.x[g01],
                                     arr.m[g01], arr.J)
            if mc:
                S = opts.s_draws
                z = draws["y_single"][:g01.size, :S]
                y_vals = (mu_y[:, None] + params.sigma_y * z).ravel()
                base = np.full(g01.size * S, -np.log(S))
                G = S
            else:
                nodes, logw = _gh_nodes(opts.quad_nodes)
                y_vals = (mu_y[:, None] + params.sigma_y * nodes[None, :]).ravel()
                base = np.tile(logw, g01.size)
                G = nodes.size
            emit(g01, G, np.repeat(arr.m[g01], G), 0, y_vals,
                 np.full(g01.size * G, 3, np.int8), base)

    if g11.size:
        if not cont_m:
            m_grid = np.arange(arr.J, dtype=float)
            if not cont_y_lat:
                G = arr.J * 2
                m_vals = np.tile(np.repeat(m_grid, 2), g11.size)
                y_vals = np.tile(np.array([0.0, 1.0]), g11.size * arr.J)
                ykind = np.full(g11.size * G, 2 if arr.two_part else 1, np.int8)
                emit(g11, G, m_vals, 0, y_vals, ykind, np.zeros(g11.size * G))
            else:
                static = False
                Q = opts.s_draws if mc else opts.quad_nodes
                m_vals = np.tile(np.repeat(m_grid, Q), g11.size)
                rep_t = np.repeat(arr.t[g11], arr.J * Q)
                rep_x = np.repeat(arr.x[g11], arr.J * Q, axis=0)
                mu_y = _outcome_location(params, config, rep_t, rep_x, m_vals,
                                         arr.J)
                if mc:
                    z = draws["y_pair"][:g11.size, :Q]
                    zz = np.repeat(z, arr.J, axis=0).reshape(g11.size, arr.J, Q)
                    y_vals = mu_y + params.sigma_y * zz.ravel()
                    base = np.full(g11.size * arr.J * Q, -np.log(Q))
                else:
                    nodes, logw = _gh_nodes(opts.quad_nodes)
                    y_vals = mu_y + params.sigma_y * np.tile(nodes, g11.size * arr.J)
                    base = np.tile(logw, g11.size * arr.J)
                emit(g11, arr.J * Q, m_vals, 0, y_vals,
                     np.full(g11.size * arr.J * Q, 3, np.int8), base)
        else:
            static = False
            mu_m = params.alpha[0] + params.alpha[1] * arr.t[g11] \
                + arr.x[g11] @ params.alpha[2:]
            if not cont_y_lat:
                Q = opts.s_draws if mc else opts.quad_nodes
                if mc:
                    z = draws["m_pair"][:g11.size, :Q]
                    m_nodes = mu_m[:, None] + params.sigma_m * z
                    base_m = np.full((g11.size, Q), -np.log(Q))
                else:
                    nodes, logw = _gh_nodes(opts.quad_nodes)
                    m_nodes = mu_m[:, None] + params.sigma_m * nodes[None, :]
                    base_m = np.broadcast_to(logw, (g11.size, Q))
                G = Q * 2
                m_vals = np.repeat(m_nodes.ravel(), 2)
                y_vals = np.tile(np.array([0.0, 1.0]), g11.size * Q)
                ykind = np.full(g11.size * G, 2 if arr.two_part else 1, np.int8)
                emit(g11, G, m_vals, 1, y_vals, ykind,
                     np.repeat(base_m.ravel(), 2))
            else:
                if mc:
                    S = opts.s_draws
                    zm = draws["m_pair"][:g11.size, :S]
                    zy = draws["y_pair"][:g11.size, :S]
                    m_vals = (mu_m[:, None] + params.sigma_m * zm).ravel()
                    rep_t = np.repeat(arr.t[g11], S)
                    rep_x = np.repeat(arr.x[g11], S, axis=0)
                    mu_y = _outcome_location(params, config, rep_t, rep_x,
                                             m_vals, arr.J)
                    y_vals = mu_y + params.sigma_y * zy.ravel()
                    base = np.full(g11.size * S, -np.log(S))
                    emit(g11, S, m_vals, 1, y_vals,
                         np.full(g11.size * S, 3, np.int8), base)
                else:
                    Q = opts.quad_nodes_2d
                    nodes, logw = _gh_nodes(Q)
                    m_nodes = mu_m[:, None] + params.sigma_m * nodes[None, :]
                    m_vals = np.repeat(m_nodes.ravel(), Q)
                    rep_t = np.repeat(arr.t[g11], Q * Q)
                    rep_x = np.repeat(arr.x[g11], Q * Q, axis=0)
                    mu_y = _outcome_location(params, config, rep_t, rep_x,
                                             m_vals, arr.J)
                    y_vals = mu_y + params.sigma_y * np.tile(nodes, g11.size * Q)
                    base = (np.repeat(np.tile(logw, g11.size), Q)
                            + np.tile(logw, g11.size * Q))
                    emit(g11, Q * Q, m_vals, 1, y_vals,
                         np.full(g11.size * Q * Q, 3, np.int8), base)

    frame = _Frame(
        unit=np.concatenate(cols["unit"]).astype(int),
        t=np.concatenate(cols["t"]),
        x=np.concatenate(cols["x"], axis=0),
        m=np.concatenate(cols["m"]),
        y=np.concatenate(cols["y"]),
        h=np.concatenate(cols["h"]),
        rm=np.concatenate(cols["rm"]),
        ry=np.concatenate(cols["ry"]),
        m_kind=np.concatenate(cols["m_kind"]),
        y_kind=np.concatenate(cols["y_kind"]),
        base_logw=np.concatenate(cols["base_logw"]),
        groups=groups, static=static)
    return frame


def _ry_regressor_values(frame: _Frame, config: ModelConfig) -> np.ndarray:
    reg = config.ry_regressor
    if reg == "rm":
        return frame.rm
    if reg == "m":
        return frame.m
    if reg == "y":
        return frame.y
    if reg == "h":
        return frame.h
    raise ConfigError("no outcome-missingness regressor configured")


def _ry_offset(frame: _Frame, config: ModelConfig) -> np.ndarray | None:
    if not config.ry_fixed:
        return None
    off = np.zeros(frame.t.shape[0])
    for name, value in config.ry_fixed:
        term = {"m": frame.m, "h": frame.h, "y": frame.y}[name]
        off = off + value * term
    return off


@dataclass
class _Designs:
    med_X: np.ndarray
    out_X: np.ndarray
    rm_X: np.ndarray
    ry_X: np.ndarray | None
    ry_offset: np.ndarray | None


def _designs_from_frame(frame: _Frame, config: ModelConfig,
                        mech: MnarMechanism, J) -> _Designs:
    med_X = _design("mediator", frame.t, frame.x, None, None, config, J)
    out_X = _design("outcome", frame.t, frame.x, frame.m, None, config, J)
    rm_X = _design("rm", frame.t, frame.x, frame.m, None, config, J)
    ry_X = None
    ry_off = None
    if mech.has_ry_model:
        ry_X = _design("ry", frame.t, frame.x, frame.m,
                       _ry_regressor_values(frame, config), config, J)
        ry_off = _ry_offset(frame, config)
    return _Designs(med_X=med_X, out_X=out_X, rm_X=rm_X, ry_X=ry_X,
                    ry_offset=ry_off)


def _log_outcome_value(frame, designs, params, config, mask):
    """Outcome log density at the row's value, for rows in ``mask``."""
    eta = designs.out_X[mask] @ params.beta
    y = frame.y[mask]
    if config.outcome_model == "logistic":
        return _log_bernoulli(y, eta)
    if config.outcome_model == "linear_gaussian":
        return _log_gaussian(y, eta, params.sigma_y)
    # two-part: hurdle plus positive-part density
    eta_h = designs.out_X[mask] @ params.delta
    h = frame.h[mask]
    out = _log_bernoulli(h, eta_h)
    pos = y > 0
    if np.any(pos):
        ypos = y[pos]
        mu = eta[pos]
        if config.outcome_model == "two_part_gamma":
            nu = params.nu
            out[pos] += (nu * (np.log(nu) - mu) + (nu - 1.0) * np.log(ypos)
                         - nu * ypos / np.exp(mu) - gammaln(nu))
        else:
            out[pos] += _log_gaussian(np.log(ypos), mu, params.sigma_y) \
                - np.log(ypos)
    return out


def _logjoint(frame: _Frame, designs: _Designs, params: FittedParams,
              config: ModelConfig, mech: MnarMechanism, J) -> np.ndarray:
    lj = frame.base_logw.copy()
    m_rows = frame.m_kind == 0
    if np.any(m_rows):
        if config.mediator_model == "logistic":
            eta = designs.med_X[m_rows] @ params.alpha
            lj[m_rows] += _log_bernoulli(frame.m[m_rows], eta)
        elif config.mediator_model == "multinomial":
            eta = designs.med_X[m_rows] @ params.alpha.T
            lj[m_rows] += _log_multinomial(frame.m[m_rows], eta)
        else:
            eta = designs.med_X[m_rows] @ params.alpha
            lj[m_rows] += _log_gaussian(frame.m[m_rows], eta, params.sigma_m)
    val_rows = frame.y_kind == 1
    if np.any(val_rows):
        lj[val_rows] += _log_outcome_value(frame, designs, params, config,
                                           val_rows)
    h_rows = frame.y_kind == 2
    if np.any(h_rows):
        eta_h = designs.out_X[h_rows] @ params.delta
        lj[h_rows] += _log_bernoulli(frame.h[h_rows], eta_h)
    lj += _log_bernoulli(frame.rm, designs.rm_X @ params.lam)
    if mech.has_ry_model:
        eta = designs.ry_X @ params.gamma
        if designs.ry_offset is not None:
            eta = eta + designs.ry_offset
        lj += _log_bernoulli(frame.ry, eta)
    return lj


def _normalize(frame: _Frame, logjoint: np.ndarray, n_units: int):
    """Per-unit log likelihood and per-row posterior weights."""
    unit_ll = np.full(n_units, np.nan)
    weights = np.ones_like(logjoint)
    for rows, unit_idx, G in frame.groups:
        block = logjoint[rows].reshape(unit_idx.size, G)
        mx = block.max(axis=1)
        ex = np.exp(block - mx[:, None])
        s = ex.sum(axis=1)
        unit_ll[unit_idx] = mx + np.log(s)
        if G > 1:
            weights[rows] = (ex / s[:, None]).ravel()
    return unit_ll, weights


# ---------------------------------------------------------------------------
# Observed-data log likelihood


def loglik_evaluator(ds: Dataset, mech: MnarMechanism, config: ModelConfig,
                     quad_nodes: int = 31):
    """Callable ``params -> observed log likelihood`` for repeated evaluation.

    With purely discrete latents the completion frame does not depend on the
    parameters, so it is built once and reused; continuous latents rebuild it
    per call (quadrature nodes track the evaluated model).
    """
    arr = _arrays_from_dataset(ds)
    opts = EmOptions(quad_nodes=quad_nodes, quad_nodes_2d=min(quad_nodes, 15))
    cache: list = []

    def evaluate(params: FittedParams) -> float:
        if cache and cache[0].static:
            frame, designs = cache
        else:
            frame = _build_frame(arr, params, config, mech, opts)
            designs = _designs_from_frame(frame, config, mech, arr.J)
            if frame.static:
                cache[:] = [frame, designs]
        lj = _logjoint(frame, designs, params, config, mech, arr.J)
        unit_ll, _ = _normalize(frame, lj, arr.n)
        bad = np.flatnonzero(~np.isfinite(unit_ll))
        if bad.size:
            raise NonFiniteLoglikError(int(bad[0]))
        return float(unit_ll.sum())

    return evaluate


def observed_loglik(ds: Dataset, params: FittedParams, mech: MnarMechanism,
                    config: ModelConfig, quad_nodes: int = 31) -> float:
    """Sum over units of the log observed-data contribution.

    Discrete latents are summed exactly; continuous latents use fixed-order
    Gauss-Hermite quadrature (``quad_nodes`` points per latent dimension).
    """
    return loglik_evaluator(ds, mech, config, quad_nodes)(params)


# ---------------------------------------------------------------------------
# Initialization and component-model M-step


def _frozen_logistic(rate: float, width: int) -> np.ndarray:
    coef = np.zeros(width)
    rate = min(max(rate, 1e-12), 1.0 - 1e-12)
    coef[0] = float(np.log(rate / (1.0 - rate)))
    return coef


def _init_params(arr: _Arrays, config: ModelConfig, mech: MnarMechanism,
                 opts: EmOptions) -> FittedParams:
    """Complete-case starts for the substantive models, response-rate
    intercepts for the missingness models."""
    p = FittedParams()
    xw = arr.x.shape[1]
    mw = arr.mw
    out_w = 2 + mw * (2 if config.interaction else 1) + xw
    cc = arr.rm == 1
    ccy = cc & (arr.ry == 1)
    use_cc = opts.init == "complete_case"

    med_X = _design("mediator", arr.t[cc], arr.x[cc], None, None, config, arr.J)
    if config.mediator_model == "logistic":
        p.alpha = np.zeros(2 + xw)
        if use_cc:
            try:
                p.alpha = glm.fit_logistic(med_X, arr.m[cc], model_name="mediator")
            except glm.FitError:
                pass
    elif config.mediator_model == "multinomial":
        p.alpha = np.zeros((arr.J - 1, 2 + xw))
        if use_cc:
            try:
                p.alpha = glm.fit_multinomial(med_X, arr.m[cc].astype(int),
                                              arr.J, model_name="mediator")
            except glm.FitError:
                pass
    else:
        p.alpha, p.sigma_m = np.zeros(2 + xw), 1.0
        if use_cc:
            p.alpha, p.sigma_m = glm.fit_wls(med_X, arr.m[cc])

    out_X = _design("outcome", arr.t[ccy], arr.x[ccy], arr.m[ccy], None,
                    config, arr.J)
    yv = arr.y[ccy]
    if config.outcome_model == "logistic":
        p.beta = np.zeros(out_w)
        if use_cc:
            try:
                p.beta = glm.fit_logistic(out_X, yv, model_name="outcome")
            except glm.FitError:
                pass
    elif config.outcome_model == "linear_gaussian":
        p.beta, p.sigma_y = np.zeros(out_w), 1.0
        if use_cc:
            p.beta, p.sigma_y = glm.fit_wls(out_X, yv)
    else:
        h = (yv > 0).astype(float)
        p.delta = np.zeros(out_w)
        p.beta = np.zeros(out_w)
        pos = yv > 0
        if use_cc:
            try:
                p.delta = glm.fit_logistic(out_X, h, model_name="hurdle")
            except glm.FitError:
                pass
        if config.outcome_model == "two_part_gamma":
            p.nu = 1.0
            if use_cc and np.any(pos):
                p.beta, p.nu = glm.fit_gamma_loglink(out_X[pos], yv[pos])
        else:
            p.sigma_y = 1.0
            if use_cc and np.any(pos):
                p.beta, p.sigma_y = glm.fit_wls(out_X[pos], np.log(yv[pos]))

    p.lam = _frozen_logistic(float(arr.rm.mean()), 2 + mw + xw)
    if mech.has_ry_model:
        ry_w = 2 + (mw if config.ry_regressor == "m" else 1) + xw
        p.gamma = _frozen_logistic(float(arr.ry.mean()), ry_w)
    return p


def _mstep(frame: _Frame, designs: _Designs, weights: np.ndarray,
           params: FittedParams, config: ModelConfig, mech: MnarMechanism,
           arr: _Arrays, opts: EmOptions) -> FittedParams:
    new = replace(params)
    # Mediator model: every row carries a mediator value.
    if config.mediator_model == "logistic":
        new.alpha = glm.fit_logistic(designs.med_X, frame.m, w=weights,
                                     start=params.alpha, model_name="mediator")
    elif config.mediator_model == "multinomial":
        new.alpha = glm.fit_multinomial(designs.med_X, frame.m.astype(int),
                                        arr.J, w=weights, start=params.alpha,
                                        model_name="mediator")
    else:
        new.alpha, new.sigma_m = glm.fit_wls(designs.med_X, frame.m, w=weights)

    if not opts.two_stage:
        y_rows = np.flatnonzero(np.isin(frame.y_kind, (1, 3)))
        if config.outcome_model == "logistic":
            new.beta = glm.fit_logistic(designs.out_X[y_rows], frame.y[y_rows],
                                        w=weights[y_rows], start=params.beta,
                                        model_name="outcome")
        elif config.outcome_model == "linear_gaussian":
            new.beta, new.sigma_y = glm.fit_wls(designs.out_X[y_rows],
                                                frame.y[y_rows],
                                                w=weights[y_rows])
        else:
            h_rows = np.flatnonzero(frame.y_kind > 0)
            new.delta = glm.fit_logistic(designs.out_X[h_rows],
                                         frame.h[h_rows], w=weights[h_rows],
                                         start=params.delta,
                                         model_name="hurdle")
            pos = np.flatnonzero((frame.y_kind == 1) & (frame.y > 0))
            if pos.size:
                if config.outcome_model == "two_part_gamma":
                    new.beta, new.nu = glm.fit_gamma_loglink(
                        designs.out_X[pos], frame.y[pos], w=weights[pos],
                        start=params.beta, start_nu=params.nu)
                else:
                    new.beta, new.sigma_y = glm.fit_wls(
                        designs.out_X[pos], np.log(frame.y[pos]),
                        w=weights[pos])

    if np.all(frame.rm == 1) or np.all(frame.rm == 0):
        new.lam = _frozen_logistic(float(frame.rm[0]), designs.rm_X.shape[1])
    else:
        new.lam = glm.fit_logistic(designs.rm_X, frame.rm, w=weights,
                                   start=params.lam,
                                   model_name="mediator-missingness")
    if mech.has_ry_model:
        if np.all(frame.ry == 1) or np.all(frame.ry == 0):
            new.gamma = _frozen_logistic(float(frame.ry[0]),
                                         designs.ry_X.shape[1])
        else:
            new.gamma = glm.fit_logistic(designs.ry_X, frame.ry, w=weights,
                                         start=params.gamma,
                                         offset=designs.ry_offset,
                                         model_name="outcome-missingness")
    return new


def _param_delta(a: FittedParams, b: FittedParams) -> float:
    out = 0.0
    for name in ("alpha", "beta", "lam", "gamma", "delta"):
        va, vb = getattr(a, name), getattr(b, name)
        if va is not None and vb is not None:
            out = max(out, float(np.max(np.abs(np.asarray(va) - np.asarray(vb)))))
    for name in ("sigma_m", "sigma_y", "nu"):
        va, vb = getattr(a, name), getattr(b, name)
        if va is not None and vb is not None:
            out = max(out, abs(va - vb))
    return out


def em_fit(ds: Dataset, mech: MnarMechanism, config: ModelConfig,
           opts: EmOptions = EmOptions(), start: FittedParams | None = None,
           allow_rank_deficient: bool = False) -> EmState:
    """Maximum likelihood by EM with fractional imputation.

    E-step: exact posterior weights for discrete latents, self-normalized
    weighted completions through the refreshed current-iteration models for
    continuous latents.  M-step: weighted MLE of every component model.
    Convergence requires both a small observed-log-likelihood change and a
    small maximum parameter change; a non-converged state is returned with
    ``converged=False`` rather than raised.
    """
    if mech.tag in ("MCAR", "MAR"):
        raise ConfigError(
            "ignorable mechanisms: use complete_case_fit or mar_impute_fit")
    config.validate_for(mech, ds, allow_rank_deficient=allow_rank_deficient)
    if mech.monotone:
        return _monotone_fit(ds, mech, config)
    arr = _arrays_from_dataset(ds)
    params = start if start is not None else _init_params(arr, config, mech, opts)

    draws = None
    if opts.proposal == "monte_carlo":
        need_y = mech.has_ry_model and _needs_y_completion(config)
        lat_m = arr.rm == 0
        lat_y = (arr.ry == 0) & need_y if mech.has_ry_model \
            else np.zeros(arr.n, bool)
        rng = np.random.default_rng(np.random.SeedSequence(opts.seed))
        S = opts.s_draws
        draws = {
            "m_single": rng.standard_normal((int((lat_m & ~lat_y).sum()), S)),
            "y_single": rng.standard_normal((int((~lat_m & lat_y).sum()), S)),
            "m_pair": rng.standard_normal((int((lat_m & lat_y).sum()), S)),
            "y_pair": rng.standard_normal((int((lat_m & lat_y).sum()), S)),
        }

    state: dict = {"frame": None, "designs": None, "weights": None}

    def estep(p: FittedParams) -> float:
        if state["frame"] is None or not state["frame"].static:
            state["frame"] = _build_frame(arr, p, config, mech, opts, draws)
            state["designs"] = _designs_from_frame(state["frame"], config,
                                                   mech, arr.J)
        lj = _logjoint(state["frame"], state["designs"], p, config, mech, arr.J)
        unit_ll, weights = _normalize(state["frame"], lj, arr.n)
        bad = np.flatnonzero(~np.isfinite(unit_ll))
        if bad.size:
            raise NonFiniteLoglikError(int(bad[0]))
        state["weights"] = weights
        return float(unit_ll.sum())

    def mstep(p: FittedParams) -> FittedParams:
        return _mstep(state["frame"], state["designs"], state["weights"], p,
                      config, mech, arr, opts)

    trace: list[float] = []
    converged = False
    n_e = 0
    step_cap = 4.0
    while n_e < opts.max_iterations:
        ll0 = estep(params)
        trace.append(ll0)
        n_e += 1
        theta1 = mstep(params)
        d01 = _param_delta(params, theta1)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < opts.loglik_tol \
                and d01 < opts.param_tol:
            converged = True
            break
        if not opts.accelerate or n_e + 2 > opts.max_iterations:
            params = theta1
            continue
        ll1 = estep(theta1)
        trace.append(ll1)
        n_e += 1
        theta2 = mstep(theta1)
        # Squared-extrapolation step from the last two plain updates, kept
        # monotone by an explicit likelihood check with plain-step fallback.
        v0 = params_to_vector(params)
        r = params_to_vector(theta1) - v0
        v = params_to_vector(theta2) - v0 - 2.0 * r
        nv = float(np.linalg.norm(v))
        if nv == 0.0:
            params = theta2
            continue
        step = max(min(-float(np.linalg.norm(r)) / nv, -1.0), -step_cap)
        candidate = params_from_vector(v0 - 2.0 * step * r + step * step * v,
                                       theta1)
        try:
            ll_c = estep(candidate)
            n_e += 1
            accepted = ll_c >= ll1
        except (EmError, ConfigError, FloatingPointError):
            accepted = False
        if accepted:
            if step == -step_cap:
                step_cap *= 2.0
            trace.append(ll_c)
            try:
                params = mstep(candidate)
            except glm.FitError:
                trace.pop()
                params = theta2
        else:
            step_cap = max(step_cap / 2.0, 1.0)
            params = theta2

    # Final E-pass at the returned parameters: trace entry plus final weights.
    final_ll = estep(params)
    trace.append(final_ll)
    frame, weights = state["frame"], state["weights"]

    unit_weights = {}
    for rows, unit_idx, G in frame.groups:
        if G == 1:
            continue
        block = weights[rows].reshape(unit_idx.size, G)
        for k, u in enumerate(unit_idx):
            unit_weights[int(u)] = block[k].copy()
    return EmState(params=params, loglik_trace=np.asarray(trace),
                   converged=converged, n_iterations=n_e,
                   unit_weights=unit_weights)


def _monotone_fit(ds: Dataset, mech: MnarMechanism,
                  config: ModelConfig) -> EmState:
    """Monotone A2 branch: with ignorable mediator missingness the joint law
    equals its complete-case version, so the substantive models come from
    complete cases; the missingness models are fit on their observable
    margins (outcome response only among mediator-observed units)."""
    arr = _arrays_from_dataset(ds)
    if np.any((arr.rm == 0) & (arr.ry == 1)):
        raise ConfigError(
            "monotone mechanism declared, but some units have an observed "
            "outcome with a missing mediator")
    params = complete_case_fit(ds, config)
    cc = arr.rm == 1
    med_X = _design("mediator", arr.t, arr.x, None, None, config, arr.J)
    # Ignorable mediator missingness: no mediator term in the response model.
    lam_free = glm.fit_logistic(med_X, arr.rm, model_name="mediator-missingness")
    params.lam = np.zeros(2 + arr.mw + arr.x.shape[1])
    params.lam[0] = lam_free[0]
    params.lam[1 + arr.mw:] = lam_free[1:]
    ry_X = np.column_stack([np.ones(int(cc.sum())), arr.t[cc], arr.x[cc]])
    if np.all(arr.ry[cc] == arr.ry[cc][0]):
        gfree = _frozen_logistic(float(arr.ry[cc][0]), ry_X.shape[1])
    else:
        gfree = glm.fit_logistic(ry_X, arr.ry[cc],
                                 model_name="outcome-missingness")
    gamma = np.zeros(3 + arr.x.shape[1])
    gamma[0], gamma[2:] = gfree[0], gfree[1:]
    params.gamma = gamma
    # Observed loglik under the monotone factorization: each component model
    # contributes on its observable margin (mediator and outcome are both
    # ignorable here; outcome response is structural zero when the mediator
    # is missing).
    ll = 0.0
    n_cc = int(cc.sum())
    med_X_cc = _design("mediator", arr.t[cc], arr.x[cc], None, None, config,
                       arr.J)
    if config.mediator_model == "logistic":
        ll += glm.logistic_loglik(params.alpha, med_X_cc, arr.m[cc],
                                  np.ones(n_cc))
    elif config.mediator_model == "multinomial":
        ll += glm.multinomial_loglik(params.alpha, med_X_cc,
                                     arr.m[cc].astype(int),
                                     np.ones(n_cc), arr.J)
    else:
        ll += glm.gaussian_loglik(params.alpha, params.sigma_m, med_X_cc,
                                  arr.m[cc], np.ones(n_cc))
    rm_X = np.column_stack([np.ones(arr.n), arr.t, arr.x])
    ll += glm.logistic_loglik(lam_free, rm_X, arr.rm, np.ones(arr.n))
    ll += glm.logistic_loglik(gfree, ry_X, arr.ry[cc], np.ones(int(cc.sum())))
    ccy = cc & (arr.ry == 1)
    out_X = _design("outcome", arr.t[ccy], arr.x[ccy], arr.m[ccy], None,
                    config, arr.J)
    w1 = np.ones(int(ccy.sum()))
    if config.outcome_model == "logistic":
        ll += glm.logistic_loglik(params.beta, out_X, arr.y[ccy], w1)
    elif config.outcome_model == "linear_gaussian":
        ll += glm.gaussian_loglik(params.beta, params.sigma_y, out_X,
                                  arr.y[ccy], w1)
    return EmState(params=params, loglik_trace=np.asarray([ll]),
                   converged=True, n_iterations=1)


# ---------------------------------------------------------------------------
# Baseline fitters


def complete_case_fit(ds: Dataset, config: ModelConfig) -> FittedParams:
    """Substantive-model MLEs restricted to fully observed units."""
    arr = _arrays_from_dataset(ds)
    cc = (arr.rm == 1) & (arr.ry == 1)
    if not np.any(cc):
        raise EmError("no complete cases")
    return _fit_substantive(arr, cc, config)


def oracle_fit(oracle_ds: Dataset, config: ModelConfig,
               mech: MnarMechanism | None = None) -> FittedParams:
    """MLEs on the unmasked latent data (simulation benchmark only).

    With a mechanism given, the missingness models are also fit, using the
    true latent regressor values.
    """
    if not oracle_ds.latent_complete:
        raise EmError("oracle_fit needs a latent-complete dataset")
    arr = _arrays_from_dataset(oracle_ds)
    params = _fit_substantive(arr, np.ones(arr.n, bool), config)
    if mech is not None:
        rm_X = _design("rm", arr.t, arr.x, arr.m, None, config, arr.J)
        params.lam = glm.fit_logistic(rm_X, arr.rm,
                                      model_name="mediator-missingness")
        if mech.has_ry_model:
            reg = {"rm": arr.rm, "m": arr.m, "y": arr.y,
                   "h": (arr.y > 0).astype(float)}[config.ry_regressor]
            ry_X = _design("ry", arr.t, arr.x, arr.m, reg, config, arr.J)
            params.gamma = glm.fit_logistic(ry_X, arr.ry,
                                            model_name="outcome-missingness")
    return params


def _fit_substantive(arr: _Arrays, mask: np.ndarray,
                     config: ModelConfig) -> FittedParams:
    p = FittedParams()
    med_X = _design("mediator", arr.t[mask], arr.x[mask], None, None, config,
                    arr.J)
    if config.mediator_model == "logistic":
        p.alpha = glm.fit_logistic(med_X, arr.m[mask], model_name="mediator")
    elif config.mediator_model == "multinomial":
        p.alpha = glm.fit_multinomial(med_X, arr.m[mask].astype(int), arr.J,
                                      model_name="mediator")
    else:
        p.alpha, p.sigma_m = glm.fit_wls(med_X, arr.m[mask])
    out_X = _design("outcome", arr.t[mask], arr.x[mask], arr.m[mask], None,
                    config, arr.J)
    yv = arr.y[mask]
    if config.outcome_model == "logistic":
        p.beta = glm.fit_logistic(out_X, yv, model_name="outcome")
    elif config.outcome_model == "linear_gaussian":
        p.beta, p.sigma_y = glm.fit_wls(out_X, yv)
    else:
        p.delta = glm.fit_logistic(out_X, (yv > 0).astype(float),
                                   model_name="hurdle")
        pos = yv > 0
        if config.outcome_model == "two_part_gamma":
            p.beta, p.nu = glm.fit_gamma_loglink(out_X[pos], yv[pos])
        else:
            p.beta, p.sigma_y = glm.fit_wls(out_X[pos], np.log(yv[pos]))
    return p


def mar_impute_fit(ds: Dataset, config: ModelConfig, n_imputations: int = 20,
                   seed: int = 0, n_candidates: int = 40) -> FittedParams:
    """Parametric missing-at-random imputation baseline.

    The mediator and outcome regressions are fit on their ignorable margins
    (mediator-observed units and complete cases respectively, which is valid
    when missingness is ignorable and biased when it is not), missing values
    are drawn from the implied conditional laws given each unit's observed
    data, the substantive models are refit per completed copy, and point
    estimates are pooled by averaging.  A missing mediator with an observed
    outcome is drawn from its posterior under the fitted models (exactly for
    discrete cases, via weighted candidate resampling with ``n_candidates``
    proposals for a Gaussian mediator under a logistic outcome).  A
    qualitative stand-in for chained-equations imputation: it shares the
    ignorability assumption and therefore the same bias profile when
    missingness is not ignorable.
    """
    if n_imputations < 2:
        raise EmError("need at least two imputations")
    arr = _arrays_from_dataset(ds)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cc = (arr.rm == 1) & (arr.ry == 1)
    cm = arr.rm == 1

    binary_m = config.mediator_model == "logistic"
    cont_m = config.mediator_model == "linear_gaussian"
    if not (binary_m or cont_m):
        raise EmError("imputation baseline supports binary or Gaussian mediators")
    if config.two_part:
        raise EmError("imputation baseline does not cover two-part outcomes")
    binary_y = config.outcome_model == "logistic"

    med_X = _design("mediator", arr.t[cm], arr.x[cm], None, None, config, arr.J)
    if binary_m:
        alpha = glm.fit_logistic(med_X, arr.m[cm], model_name="mediator-imputation")
        sigma_m = None
    else:
        alpha, sigma_m = glm.fit_wls(med_X, arr.m[cm])
    out_X_cc = _design("outcome", arr.t[cc], arr.x[cc], arr.m[cc], None,
                       config, arr.J)
    if binary_y:
        beta = glm.fit_logistic(out_X_cc, arr.y[cc], model_name="outcome-imputation")
        sigma_y = None
    else:
        beta, sigma_y = glm.fit_wls(out_X_cc, arr.y[cc])

    def log_f_y(y, m, t, x):
        X = _design("outcome", t, x, m, None, config, arr.J)
        eta = X @ beta
        if binary_y:
            return _log_bernoulli(y, eta)
        return _log_gaussian(y, eta, sigma_y)

    miss_m = np.flatnonzero(arr.rm == 0)
    miss_y = np.flatnonzero(arr.ry == 0)
    mm_y = miss_m[arr.ry[miss_m] == 1]  # mediator missing, outcome observed
    mm_n = miss_m[arr.ry[miss_m] == 0]

    fits = []
    for _ in range(n_imputations):
        m_imp = arr.m.copy()
        y_imp = arr.y.copy()
        # mediator draws: posterior given the observed outcome where present
        if mm_y.size:
            t, x, y = arr.t[mm_y], arr.x[mm_y], arr.y[mm_y]
            if binary_m:
                p1 = expit(np.column_stack([np.ones(mm_y.size), t, x]) @ alpha)
                w1 = np.log(p1) + log_f_y(y, np.ones(mm_y.size), t, x)
                w0 = np.log1p(-p1) + log_f_y(y, np.zeros(mm_y.size), t, x)
                post = 1.0 / (1.0 + np.exp(w0 - w1))
                m_imp[mm_y] = (rng.random(mm_y.size) < post).astype(float)
            else:
                mu = alpha[0] + alpha[1] * t + x @ alpha[2:]
                if not binary_y:
                    # conjugate Gaussian posterior under a linear outcome
                    slope = beta[1] + (beta[3] if config.interaction else 0.0) * t
                    prec = 1.0 / sigma_m ** 2 + slope ** 2 / sigma_y ** 2
                    resid = y - (_design("outcome", t, x, np.zeros(mm_y.size),
                                         None, config, arr.J) @ beta)
                    mean = (mu / sigma_m ** 2 + slope * resid / sigma_y ** 2) / prec
                    m_imp[mm_y] = mean + rng.standard_normal(mm_y.size) / np.sqrt(prec)
                else:
                    # weighted resampling from mediator-model candidates
                    K = n_candidates
                    cand = mu[:, None] + sigma_m * rng.standard_normal(
                        (mm_y.size, K))
                    lw = log_f_y(np.repeat(y, K), cand.ravel(),
                                 np.repeat(t, K),
                                 np.repeat(x, K, axis=0)).reshape(mm_y.size, K)
                    lw -= lw.max(axis=1, keepdims=True)
                    w = np.exp(lw)
                    w /= w.sum(axis=1, keepdims=True)
                    pick = (rng.random(mm_y.size)[:, None]
                            > np.cumsum(w, axis=1)).sum(axis=1)
                    m_imp[mm_y] = cand[np.arange(mm_y.size), pick]
        if mm_n.size:
            t, x = arr.t[mm_n], arr.x[mm_n]
            if binary_m:
                p1 = expit(np.column_stack([np.ones(mm_n.size), t, x]) @ alpha)
                m_imp[mm_n] = (rng.random(mm_n.size) < p1).astype(float)
            else:
                mu = alpha[0] + alpha[1] * t + x @ alpha[2:]
                m_imp[mm_n] = mu + sigma_m * rng.standard_normal(mm_n.size)
        # outcome draws given the (possibly imputed) mediator
        if miss_y.size:
            rows = _design("outcome", arr.t[miss_y], arr.x[miss_y],
                           m_imp[miss_y], None, config, arr.J)
            eta = rows @ beta
            if binary_y:
                y_imp[miss_y] = (rng.random(miss_y.size) < expit(eta)).astype(float)
            else:
                y_imp[miss_y] = eta + sigma_y * rng.standard_normal(miss_y.size)
        completed = replace(arr, m=m_imp, y=y_imp)
        fits.append(_fit_substantive(completed, np.ones(arr.n, bool), config))

    pooled = FittedParams()
    for name in ("alpha", "beta", "delta"):
        vals = [getattr(f, name) for f in fits]
        if vals[0] is not None:
            pooled_val = np.mean(np.stack([np.asarray(v) for v in vals]), axis=0)
            setattr(pooled, name, pooled_val)
    for name in ("sigma_m", "sigma_y", "nu"):
        vals = [getattr(f, name) for f in fits]
        if vals[0] is not None:
            setattr(pooled, name, float(np.mean(vals)))
    return pooled


# ---------------------------------------------------------------------------
# Flat parameter vector (for generic optimizers and tests)


def params_to_vector(params: FittedParams) -> np.ndarray:
    parts = []
    for name in ("alpha", "beta", "lam", "gamma", "delta"):
        v = getattr(params, name)
        if v is not None:
            parts.append(np.asarray(v, dtype=float).ravel())
    for name in ("sigma_m", "sigma_y", "nu"):
        v = getattr(params, name)
        if v is not None:
            parts.append(np.array([np.log(v)]))
    return np.concatenate(parts)


def params_from_vector(vec: np.ndarray, template: FittedParams) -> FittedParams:
    out = FittedParams()
    pos = 0
    for name in ("alpha", "beta", "lam", "gamma", "delta"):
        v = getattr(template, name)
        if v is not None:
            shape = np.asarray(v).shape
            size = int(np.prod(shape))
            setattr(out, name, np.asarray(vec[pos:pos + size]).reshape(shape))
            pos += size
    for name in ("sigma_m", "sigma_y", "nu"):
        v = getattr(template, name)
        if v is not None:
            setattr(out, name, float(np.exp(vec[pos])))
            pos += 1
    return out
