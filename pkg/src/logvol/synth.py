"""Synthetic price panels with planted factor structure and long memory.

Log-volatilities are built additively,

    omega_i(t) = b_i0 F_0(t) + b_ik F_k(t) + sum_k' g_kk' F_k'(t) + s * e_i(t),

and returns are ``scale * sign * exp(omega)`` with independent random signs.
Each factor mixes white noise with a long-memory process (a sum of five
AR(1) components with log-spaced time scales), so the factor memory strength
sets both the ACF amplitude and its power-law exponent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from scipy.optimize import nnls
from scipy.signal import lfilter

from .panel_io import PricePanel, write_prices

N_COMPONENTS = 5
TAU_MAX = 1000.0
# lags over which the component weights are fitted to a power law
FIT_LAGS = 300
# memory strength s maps to the target ACF exponent 1 - 0.75 s
EXPONENT_AT_ZERO = 1.0
EXPONENT_SLOPE = 0.75
START_DATE = "2000-01-03"


@dataclass
class SynthSpec:
    n_stocks: int
    n_days: int
    cluster_sizes: tuple[int, ...]
    market_memory: float = 0.5
    cluster_memory: tuple[float, ...] = ()
    interactions: tuple[tuple[int, int, float], ...] = ()
    # leading share of cluster a's stocks that carry each interaction; a share of 1
    # is absorbed by cluster a's own mode
    interaction_share: float = 1.0
    noise: float | tuple[float, ...] = 1.0
    seed: int = 0
    market_loading: tuple[float, float] = (0.8, 1.2)
    cluster_loading: tuple[float, float] = (0.8, 1.2)
    # per-cluster (start, end) fractions of the sample where the cluster factor acts
    cluster_active: tuple[tuple[float, float], ...] = ()
    # optional 0-based cluster per stock used before ``switch_at`` (fraction of the sample)
    early_membership: tuple[int, ...] = ()
    switch_at: float = 0.5
    n_sectors: int = 0
    sector_purity: float = 0.8
    return_scale: float = 0.01
    vol_of_vol: float = 0.5

    def __post_init__(self):
        self.cluster_sizes = tuple(int(s) for s in self.cluster_sizes)
        K = len(self.cluster_sizes)
        if not self.cluster_memory:
            self.cluster_memory = (0.0,) * K
        self.cluster_memory = tuple(float(s) for s in self.cluster_memory)
        self.interactions = tuple((int(a), int(b), float(g)) for a, b, g in self.interactions)
        if not self.cluster_active:
            self.cluster_active = ((0.0, 1.0),) * K
        self.cluster_active = tuple((float(a), float(b)) for a, b in self.cluster_active)
        self.early_membership = tuple(int(k) for k in self.early_membership)
        if isinstance(self.noise, (list, tuple, np.ndarray)):
            self.noise = tuple(float(x) for x in self.noise)
        self.validate()

    def validate(self):
        K = len(self.cluster_sizes)
        if K == 0 or min(self.cluster_sizes) < 1:
            raise ValueError("need at least one non-empty cluster")
        if sum(self.cluster_sizes) != self.n_stocks:
            raise ValueError("cluster sizes must sum to n_stocks")
        if self.n_days < 3:
            raise ValueError("n_days must be >= 3")
        if len(self.cluster_memory) != K or len(self.cluster_active) != K:
            raise ValueError("one memory strength and activity window per cluster")
        strengths = (self.market_memory,) + self.cluster_memory
        if any(not 0 <= s <= 1 for s in strengths):
            raise ValueError("memory strengths must lie in [0, 1]")
        for a, b, g in self.interactions:
            if not (0 <= a < K and 0 <= b < K) or a == b:
                raise ValueError(f"bad interaction ({a}, {b})")
            if g < 0:
                raise ValueError("interaction strengths must be >= 0")
        noise = np.atleast_1d(self.noise)
        if noise.size not in (1, self.n_stocks) or np.any(noise < 0):
            raise ValueError("noise must be a non-negative scalar or one value per stock")
        if self.early_membership:
            if len(self.early_membership) != self.n_stocks:
                raise ValueError("early_membership needs one cluster per stock")
            if min(self.early_membership) < 0 or max(self.early_membership) >= K:
                raise ValueError("early_membership refers to an unknown cluster")
        if not 0 < self.interaction_share <= 1:
            raise ValueError("interaction_share must lie in (0, 1]")
        if not 0 <= self.switch_at <= 1:
            raise ValueError("switch_at must lie in [0, 1]")
        if self.n_sectors < 0 or not 0 <= self.sector_purity <= 1:
            raise ValueError("bad sector settings")

    @property
    def tickers(self) -> list[str]:
        width = max(3, len(str(self.n_stocks - 1)))
        return [f"S{i:0{width}d}" for i in range(self.n_stocks)]


@dataclass
class GroundTruth:
    tickers: list[str]
    membership: np.ndarray
    market_beta: np.ndarray
    cluster_beta: np.ndarray
    factors: np.ndarray
    exponents: np.ndarray
    interactions: list = field(default_factory=list)
    sectors: list[str] | None = None
    omega: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        d = {"tickers": self.tickers,
             "membership": self.membership.tolist(),
             "market_beta": self.market_beta.tolist(),
             "cluster_beta": self.cluster_beta.tolist(),
             "exponents": self.exponents.tolist(),
             "interactions": [list(x) for x in self.interactions],
             "sectors": self.sectors,
             "factors": self.factors.tolist()}
        return d


def memory_exponent(strength: float) -> float:
    """Target ACF power-law exponent for a memory strength in [0, 1]."""
    return EXPONENT_AT_ZERO - EXPONENT_SLOPE * strength


def component_weights(exponent: float, n_components: int = N_COMPONENTS,
                      tau_max: float = TAU_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Time scales and variance shares of the AR(1) mixture.

    Scales are log-spaced in ``[1, tau_max]``; the shares are the
    non-negative least-squares fit of the mixture ACF to ``L**-exponent``
    (in relative error) over lags ``1..FIT_LAGS``.
    """
    taus = np.geomspace(1.0, tau_max, n_components)
    phis = np.exp(-1.0 / taus)
    lags = np.arange(1, FIT_LAGS + 1)
    A = phis[None, :] ** lags[:, None] * lags[:, None] ** exponent
    w, _ = nnls(A, np.ones(lags.size))
    return taus, w / w.sum()


def long_memory_process(T: int, exponent: float, rng: np.random.Generator,
                        n_components: int = N_COMPONENTS, tau_max: float = TAU_MAX) -> np.ndarray:
    """Unit-variance AR(1) mixture whose ACF decays roughly as ``L**-exponent``."""
    taus, w = component_weights(exponent, n_components, tau_max)
    phis = np.exp(-1.0 / taus)
    shocks = rng.standard_normal((n_components, T))
    x = _ar1_paths(phis, shocks)
    return np.sqrt(w) @ x


def _ar1_paths(phis, shocks) -> np.ndarray:
    """Stationary AR(1) paths ``x_t = phi x_{t-1} + sqrt(1 - phi^2) e_t`` per row."""
    out = np.empty_like(shocks)
    for c, phi in enumerate(phis):
        drive = np.sqrt(1.0 - phi ** 2) * shocks[c]
        drive[0] = shocks[c, 0]
        out[c] = lfilter([1.0], [1.0, -phi], drive)
    return out


def memory_factor(T: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance factor: ``sqrt(s)`` long memory plus ``sqrt(1 - s)`` white noise."""
    lm = long_memory_process(T, memory_exponent(strength), rng)
    wn = rng.standard_normal(T)
    return np.sqrt(strength) * lm + np.sqrt(1.0 - strength) * wn


def _trading_days(n: int) -> np.ndarray:
    start = np.datetime64(START_DATE, "D")
    return np.busday_offset(start, np.arange(n), roll="forward")


def generate_panel(spec: SynthSpec) -> tuple[PricePanel, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    N, K = spec.n_stocks, len(spec.cluster_sizes)
    T = spec.n_days - 1
    membership = np.repeat(np.arange(K), spec.cluster_sizes)

    factors = np.vstack([memory_factor(T, s, rng)
                         for s in (spec.market_memory,) + spec.cluster_memory])
    active = np.zeros((K, T))
    for k, (a, b) in enumerate(spec.cluster_active):
        active[k, int(round(a * T)):int(round(b * T))] = 1.0

    b0 = rng.uniform(*spec.market_loading, size=N)
    bk = rng.uniform(*spec.cluster_loading, size=N)
    noise = np.broadcast_to(np.asarray(spec.noise, dtype=float), (N,))
    eps = rng.standard_normal((N, T))
    signs = rng.choice(np.array([-1.0, 1.0]), size=(N, T))

    # cluster factor loaded by each stock at each time
    assigned = np.repeat(membership[:, None], T, axis=1)
    if spec.early_membership:
        cut = int(round(spec.switch_at * T))
        assigned[:, :cut] = np.asarray(spec.early_membership)[:, None]
    cols = np.arange(T)
    own = factors[1 + assigned, cols] * active[assigned, cols]
    omega = b0[:, None] * factors[0] + bk[:, None] * own
    for a, b, g in spec.interactions:
        rows = np.flatnonzero(membership == a)
        rows = rows[:max(1, int(round(spec.interaction_share * rows.size)))]
        omega[rows] += g * factors[1 + b] * active[b]
    omega += noise[:, None] * eps
    sd = omega.std(axis=1, keepdims=True)
    sd[sd == 0] = 1.0
    omega = (omega - omega.mean(axis=1, keepdims=True)) / sd * spec.vol_of_vol

    returns = spec.return_scale * signs * np.exp(omega)
    logp = np.log(100.0) + np.concatenate([np.zeros((N, 1)), np.cumsum(returns, axis=1)], axis=1)
    panel = PricePanel(spec.tickers, _trading_days(spec.n_days), np.exp(logp))

    sectors = None
    if spec.n_sectors:
        names = [f"SEC{j:02d}" for j in range(spec.n_sectors)]
        dominant = np.arange(K) % spec.n_sectors
        pick = np.where(rng.random(N) < spec.sector_purity, dominant[membership],
                        rng.integers(0, spec.n_sectors, size=N))
        sectors = [names[j] for j in pick]

    truth = GroundTruth(spec.tickers, membership + 1, b0, bk, factors,
                        np.array([memory_exponent(s) for s in (spec.market_memory,) + spec.cluster_memory]),
                        list(spec.interactions), sectors, omega)
    return panel, truth


def write_synthetic(spec: SynthSpec, out_dir) -> tuple[Path, Path]:
    """Emit ``prices.csv``, ``ground_truth.json`` and (with sectors) ``sectors.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel, truth = generate_panel(spec)
    prices = out / "prices.csv"
    write_prices(panel, prices)
    gt = out / "ground_truth.json"
    record = truth.to_json()
    record["spec"] = asdict(spec)
    gt.write_text(json.dumps(record) + "\n")
    if truth.sectors is not None:
        with open(out / "sectors.csv", "w") as fh:
            fh.write("ticker,sector\n")
            for t, s in zip(truth.tickers, truth.sectors):
                fh.write(f"{t},{s}\n")
    return prices, gt


def block_correlation(sizes, rho_in: float, rho_out: float, T: int, seed: int = 0):
    """Sample correlation of a block-factor model and its true labels (1..K).

    Stocks in the same block correlate at ``rho_in`` and across blocks at
    ``rho_out`` in population.
    """
    if not 0 <= rho_out <= rho_in <= 1:
        raise ValueError("need 0 <= rho_out <= rho_in <= 1")
    rng = np.random.default_rng(seed)
    sizes = list(sizes)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    common = rng.standard_normal(T)
    blocks = rng.standard_normal((len(sizes), T))
    idio = rng.standard_normal((labels.size, T))
    X = (np.sqrt(rho_out) * common + np.sqrt(rho_in - rho_out) * blocks[labels]
         + np.sqrt(1.0 - rho_in) * idio)
    X = (X - X.mean(axis=1, keepdims=True)) / X.std(axis=1, keepdims=True)
    C = X @ X.T / T
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C, labels + 1
