"""Fully digital baselines and constant-modulus hybrid factorization.

The hybrid factorization splits the GMD precoder R1 into an analog part
R_A, whose entries all have modulus 1/sqrt(nt) (phase shifters), and a small
digital part R_D. R_A is parameterized by its phases, so the modulus
constraint holds exactly at every iterate, and both parts are driven by
momentum SGD on the squared Frobenius mismatch: v <- alpha*v - eps*g,
p <- p + v. Gradients are analytic (Wirtinger calculus on the real
parameterization) and are validated against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hybridprec.channel import ChannelRealization
from hybridprec.decomp import GmdFactors, RankDeficiencyError, gmd, svd


@dataclass(frozen=True)
class SystemDims:
    """Antenna/RF-chain/stream counts shared by the simulation layers."""

    nt: int
    nr: int
    nt_rf: int
    nr_rf: int
    ns: int
    p_nlos: int = 3
    spacing_ratio: float = 0.5

    def __post_init__(self) -> None:
        for name in ("nt", "nr", "nt_rf", "nr_rf", "ns"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.ns <= self.nt_rf <= self.nt:
            raise ValueError(
                f"ns <= nt_rf <= nt must hold, got ns={self.ns}, nt_rf={self.nt_rf}, nt={self.nt}"
            )
        if not self.ns <= self.nr_rf <= self.nr:
            raise ValueError(
                f"ns <= nr_rf <= nr must hold, got ns={self.ns}, nr_rf={self.nr_rf}, nr={self.nr}"
            )
        if self.p_nlos < 0:
            raise ValueError(f"p_nlos must be >= 0, got {self.p_nlos}")


@dataclass(frozen=True)
class HybridFactors:
    """Analog (nt x nt_rf, constant modulus 1/sqrt(nt)) and digital (nt_rf x ns) precoders."""

    analog: np.ndarray
    digital: np.ndarray

    @property
    def product(self) -> np.ndarray:
        return self.analog @ self.digital

    @property
    def nt(self) -> int:
        return self.analog.shape[0]


@dataclass(frozen=True)
class FactorizeConfig:
    """Optimizer settings for the momentum-SGD factorization and DNN training."""

    learning_rate: float = 0.001
    momentum: float = 0.9
    max_iters: int = 45000
    tolerance: float = 1e-7
    batch: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.tolerance < 0:
            raise ValueError(f"tolerance must be >= 0, got {self.tolerance}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")


# momentum makes single iterations jitter, so convergence is judged between
# consecutive windows of this many iterations rather than between iterations
STOP_WINDOW = 50


@dataclass(frozen=True)
class FactorizeResult:
    """Factorization output: power-normalized factors plus the loss trajectory.

    ``loss_trace[0]`` is the loss at the initial point; ``loss_trace[k]`` the
    loss after iteration k. ``power_scale`` is the factor applied to the
    digital part by the final power normalization (1.0 when none was needed).
    """

    factors: HybridFactors
    loss_trace: np.ndarray
    converged: bool
    power_scale: float = 1.0


def fully_digital_gmd(h: ChannelRealization, ns: int) -> GmdFactors:
    """GMD precoder/combiner pair: W1^H H R1 equals the upper triangular Q1."""
    return gmd(h.matrix, ns)


def fully_digital_svd(h: ChannelRealization, ns: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-ns singular-vector precoder and combiner with the per-stream gains.

    Returns (precoder, combiner, gains): combiner^H H precoder = diag(gains).
    """
    factors = svd(h.matrix)
    if ns < 1 or ns > factors.sigma.size:
        raise ValueError(f"ns must be in [1, {factors.sigma.size}], got {ns}")
    if factors.sigma[ns - 1] <= 1e-12 * factors.sigma[0]:
        raise RankDeficiencyError(
            f"rank below ns={ns}: sigma_ns={factors.sigma[ns - 1]:.3e} vs sigma_1={factors.sigma[0]:.3e}"
        )
    return factors.v[:, :ns], factors.u[:, :ns], factors.sigma[:ns]


def phase_project(target: np.ndarray) -> np.ndarray:
    """Nearest constant-modulus matrix: keep each entry's phase, force modulus 1/sqrt(nt).

    Zero entries map to phase 0. This is the entrywise (hence global)
    minimizer of ||target - X||_F over matrices with |X_ij| = 1/sqrt(nt).
    """
    target = np.asarray(target)
    nt = target.shape[0]
    return np.exp(1j * np.angle(target)) / np.sqrt(nt)


def analog_from_phases(phases: np.ndarray) -> np.ndarray:
    """Build the analog precoder (1/sqrt(nt)) * exp(j*phases) from its phase matrix."""
    nt = phases.shape[0]
    return np.exp(1j * phases) / np.sqrt(nt)


def hybrid_loss(r1: np.ndarray, hf: HybridFactors) -> float:
    """Frobenius-norm mismatch ||R1 - R_A R_D||_F between target and hybrid product."""
    product = hf.product
    if product.shape != r1.shape:
        raise ValueError(f"shape mismatch: target {r1.shape} vs product {product.shape}")
    return float(np.linalg.norm(r1 - product))


def power_normalize(hf: HybridFactors) -> HybridFactors:
    """Scale the digital part down so trace((R_A R_D)(R_A R_D)^H) <= ns.

    Factors already inside the power budget are returned unchanged; the
    analog part is never touched.
    """
    scaled, _ = _power_normalize_scale(hf)
    return scaled


def _power_normalize_scale(hf: HybridFactors) -> tuple[HybridFactors, float]:
    ns = hf.digital.shape[1]
    power = float(np.linalg.norm(hf.product) ** 2)
    if power <= ns:
        return hf, 1.0
    scale = float(np.sqrt(ns / power))
    return HybridFactors(analog=hf.analog, digital=hf.digital * scale), scale


def precoder_mse(r1, hf) -> float:
    """Squared factorization error, averaged when given matching sequences.

    For a single (r1, factors) pair this is hybrid_loss(...)^2; for a batch
    (two equal-length sequences) it is the mean of the squared losses.
    """
    if isinstance(hf, HybridFactors):
        return hybrid_loss(r1, hf) ** 2
    targets = list(r1)
    factors = list(hf)
    if len(targets) != len(factors):
        raise ValueError(f"batch length mismatch: {len(targets)} targets vs {len(factors)} factors")
    if not targets:
        raise ValueError("batch must be non-empty")
    return float(np.mean([hybrid_loss(t, f) ** 2 for t, f in zip(targets, factors)]))


def phase_projection_baseline(r1: np.ndarray) -> HybridFactors:
    """One-shot baseline: analog = phase projection of R1, digital = matched filter.

    Occupies ns of the available RF chains (the projection has R1's column
    count). The result is power-normalized.
    """
    analog = phase_project(r1)
    digital = analog.conj().T @ r1
    return power_normalize(HybridFactors(analog=analog, digital=digital))


def init_factor_params(nt: int, nt_rf: int, ns: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random factorization start: phases uniform on [0, 2pi), digital CN(0, 1/nt_rf).

    A zero start is a stationary point of the squared loss in the digital
    part with undefined analog phase, so the initial solution is random.
    """
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(nt, nt_rf))
    digital = (rng.standard_normal((nt_rf, ns)) + 1j * rng.standard_normal((nt_rf, ns))) * np.sqrt(
        1.0 / (2.0 * nt_rf)
    )
    return phases, digital


def factorization_gradient(
    r1: np.ndarray, phases: np.ndarray, digital: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ||R1 - R_A(phases) R_D||_F^2 on the real parameterization.

    Returns (g_phases, g_digital). g_digital packs d/dRe(R_D) + j*d/dIm(R_D),
    so a complex update digital += v applies both real gradients at once.
    """
    analog = analog_from_phases(phases)
    err = r1 - analog @ digital
    g_digital = -2.0 * (analog.conj().T @ err)
    g_phases = 2.0 * np.imag(np.conj(err @ digital.conj().T) * analog)
    return g_phases, g_digital


def _windowed_stop(trace: list, it: int, tolerance: float) -> bool:
    """True when the last full window's best loss stopped improving on the previous one's."""
    if it % STOP_WINDOW != 0 or it < 2 * STOP_WINDOW:
        return False
    prev = min(trace[it - 2 * STOP_WINDOW + 1 : it - STOP_WINDOW + 1])
    cur = min(trace[it - STOP_WINDOW + 1 : it + 1])
    return prev - cur < tolerance * max(prev, np.finfo(float).tiny)


def factorize_sgd(
    r1: np.ndarray,
    nt_rf: int,
    cfg: FactorizeConfig,
    optimize_digital: bool = True,
) -> FactorizeResult:
    """Factor R1 into constant-modulus analog and digital parts by momentum SGD.

    The squared loss is optimized for smooth gradients; the trace reports the
    root (the Frobenius mismatch itself). Iteration stops when the relative
    improvement of the windowed-minimum loss between consecutive
    STOP_WINDOW-iteration windows drops below ``cfg.tolerance``, or after
    ``cfg.max_iters`` steps; hitting the cap flags the result as
    non-converged instead of raising. With ``optimize_digital=False`` only
    the phases move, which is the analog-only comparator used by the
    convergence experiments.
    """
    r1 = np.asarray(r1, dtype=complex)
    nt, ns = r1.shape
    if not ns <= nt_rf <= nt:
        raise ValueError(f"ns <= nt_rf <= nt must hold, got ns={ns}, nt_rf={nt_rf}, nt={nt}")
    phases, digital = init_factor_params(nt, nt_rf, ns, cfg.seed)
    v_phases = np.zeros_like(phases)
    v_digital = np.zeros_like(digital)

    def loss() -> float:
        return float(np.linalg.norm(r1 - analog_from_phases(phases) @ digital))

    trace = [loss()]
    converged = False
    for it in range(1, cfg.max_iters + 1):
        g_phases, g_digital = factorization_gradient(r1, phases, digital)
        v_phases = cfg.momentum * v_phases - cfg.learning_rate * g_phases
        phases = phases + v_phases
        if optimize_digital:
            v_digital = cfg.momentum * v_digital - cfg.learning_rate * g_digital
            digital = digital + v_digital
        trace.append(loss())
        if _windowed_stop(trace, it, cfg.tolerance):
            converged = True
            break
    factors, scale = _power_normalize_scale(HybridFactors(analog=analog_from_phases(phases), digital=digital))
    return FactorizeResult(
        factors=factors, loss_trace=np.asarray(trace), converged=converged, power_scale=scale
    )


def factorize_sgd_batch(
    r1_stack: np.ndarray,
    nt_rf: int,
    cfg: FactorizeConfig,
    seeds: np.ndarray | None = None,
    optimize_digital: bool = True,
) -> tuple[list[HybridFactors], np.ndarray, np.ndarray]:
    """Factor a stack of targets (b x nt x ns) in lockstep, vectorized over the batch.

    Per-instance math is identical to :func:`factorize_sgd`; the batch just
    shares the iteration loop, which is what makes Monte-Carlo BER points
    with tens of thousands of factorizations tractable. All instances run
    the same number of iterations: the stop rule applies to the mean loss.
    ``seeds[i]`` seeds instance i (default: cfg.seed + i). Returns the
    power-normalized factors, the loss matrix (iterations+1 x b), and the
    final per-instance losses.
    """
    r1_stack = np.asarray(r1_stack, dtype=complex)
    b, nt, ns = r1_stack.shape
    if not ns <= nt_rf <= nt:
        raise ValueError(f"ns <= nt_rf <= nt must hold, got ns={ns}, nt_rf={nt_rf}, nt={nt}")
    if seeds is None:
        seeds = cfg.seed + np.arange(b)
    phases = np.empty((b, nt, nt_rf))
    digital = np.empty((b, nt_rf, ns), dtype=complex)
    for i, seed in enumerate(seeds):
        phases[i], digital[i] = init_factor_params(nt, nt_rf, ns, seed)
    v_phases = np.zeros_like(phases)
    v_digital = np.zeros_like(digital)
    root_nt = np.sqrt(nt)

    analog = np.exp(1j * phases) / root_nt
    err = r1_stack - analog @ digital
    trace = [np.linalg.norm(err, axis=(1, 2))]
    mean_trace = [float(np.mean(trace[0]))]
    for it in range(1, cfg.max_iters + 1):
        g_digital = -2.0 * (np.conj(np.swapaxes(analog, 1, 2)) @ err)
        g_phases = 2.0 * np.imag(np.conj(err @ np.conj(np.swapaxes(digital, 1, 2))) * analog)
        v_phases *= cfg.momentum
        v_phases -= cfg.learning_rate * g_phases
        phases += v_phases
        if optimize_digital:
            v_digital *= cfg.momentum
            v_digital -= cfg.learning_rate * g_digital
            digital += v_digital
        analog = np.exp(1j * phases) / root_nt
        err = r1_stack - analog @ digital
        trace.append(np.linalg.norm(err, axis=(1, 2)))
        mean_trace.append(float(np.mean(trace[-1])))
        if _windowed_stop(mean_trace, it, cfg.tolerance):
            break
    factors = [
        power_normalize(HybridFactors(analog=analog[i], digital=digital[i])) for i in range(b)
    ]
    return factors, np.asarray(trace), trace[-1]
