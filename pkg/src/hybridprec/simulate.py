"""Monte-Carlo link-level evaluation: BER, spectral efficiency, MSE convergence.

Transmission follows y = B^H H D s + B^H n with unit-power QPSK streams and
per-receive-antenna noise variance sigma^2 = ns * 10^(-snr_db/10), i.e. SNR
is total transmit power (ns) over per-antenna noise power. Hybrid schemes
all use the GMD combiner W1 at the receiver so the precoder is the only
varying factor. Detection is successive interference cancellation down the
upper triangular effective channel. Every result is a deterministic
function of (configuration, master seed): each trial owns a counter-derived
generator, so neither scheduling order nor thread count can change the
numbers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from hybridprec.channel import ChannelRealization, sample_path_params
from hybridprec.decomp import RankDeficiencyError, _gmd_rotations, geometric_mean_sigma, gmd
from hybridprec.dnn import Mlp, infer_precoders
from hybridprec.precoder import (
    FactorizeConfig,
    SystemDims,
    factorize_sgd_batch,
    fully_digital_svd,
    phase_projection_baseline,
)

SCHEME_IDS = (
    "dnn_hybrid",
    "sgd_hybrid",
    "phase_projection",
    "fully_digital_gmd",
    "fully_digital_svd",
)

MSE_METHODS = ("sgd_hybrid", "analog_only")

_SETUP_CHUNK = 1024  # fixed chunk size so threading cannot change results

_QPSK_SCALE = 1.0 / np.sqrt(2.0)


def validate_scheme(scheme: str) -> str:
    if scheme not in SCHEME_IDS:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEME_IDS}")
    return scheme


@dataclass(frozen=True)
class BerCurve:
    """BER point estimates with Wilson 95% half-widths per SNR grid point."""

    scheme: str
    snr_db: np.ndarray
    ber: np.ndarray
    ci_halfwidth: np.ndarray
    trials: int
    bits_per_trial: int
    errors: np.ndarray


@dataclass(frozen=True)
class SeCurve:
    """Average spectral efficiency (bits/s/Hz) per SNR grid point."""

    scheme: str
    snr_db: np.ndarray
    bits_per_s_hz: np.ndarray
    channels: int


@dataclass(frozen=True)
class MseCurve:
    """Factorization MSE after each iteration, averaged over a channel set."""

    scheme: str
    iteration: np.ndarray
    mse: np.ndarray
    channels: int


def noise_sigma_for_snr(snr_db: float, ns: int) -> float:
    """Per-antenna noise std for an SNR defined as total transmit power ns over noise power."""
    return float(np.sqrt(ns * 10.0 ** (-snr_db / 10.0)))


def qpsk_map(bits: np.ndarray) -> np.ndarray:
    """Gray-mapped unit-energy QPSK: bit pair (b0, b1) -> ((1-2*b0) + j(1-2*b1))/sqrt(2)."""
    bits = np.asarray(bits)
    if bits.shape[-1] % 2 != 0:
        raise ValueError(f"bit count must be even, got {bits.shape[-1]}")
    b0 = bits[..., 0::2]
    b1 = bits[..., 1::2]
    return ((1.0 - 2.0 * b0) + 1j * (1.0 - 2.0 * b1)) * _QPSK_SCALE


def qpsk_demap(symbols: np.ndarray) -> np.ndarray:
    """Nearest-quadrant slicing back to bits; exact inverse of qpsk_map without noise."""
    symbols = np.asarray(symbols)
    bits = np.empty(symbols.shape[:-1] + (2 * symbols.shape[-1],), dtype=np.int64)
    bits[..., 0::2] = symbols.real < 0
    bits[..., 1::2] = symbols.imag < 0
    return bits


def qpsk_slice(z: np.ndarray) -> np.ndarray:
    """Nearest QPSK constellation point, elementwise."""
    return (np.where(z.real >= 0, 1.0, -1.0) + 1j * np.where(z.imag >= 0, 1.0, -1.0)) * _QPSK_SCALE


def transmit(
    h: ChannelRealization,
    precoder: np.ndarray,
    combiner: np.ndarray,
    s: np.ndarray,
    noise_sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One use of the link: y = combiner^H H precoder s + combiner^H n.

    The noise n is CN(0, noise_sigma^2 I) on the receive antennas. Raises
    when the precoder violates the transmit power budget trace(DD^H) <= ns.
    """
    ns = precoder.shape[1]
    power = float(np.linalg.norm(precoder) ** 2)
    if power > ns + 1e-9:
        raise ValueError(f"precoder power {power:.6f} exceeds budget ns={ns}")
    noise = (
        noise_sigma * (rng.standard_normal(h.nr) + 1j * rng.standard_normal(h.nr)) / np.sqrt(2.0)
        if noise_sigma > 0
        else np.zeros(h.nr)
    )
    return combiner.conj().T @ (h.matrix @ (precoder @ s) + noise)


def sic_detect(q1: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Successive interference cancellation down an upper triangular channel.

    Detects the last stream first (its row has a single term), slices it to
    the nearest QPSK point, cancels its contribution from the rows above,
    and proceeds upward. Only the upper triangle of q1 is consulted. Accepts
    a batch as (b, ns, ns) matrices with (b, ns) observations.
    """
    q1 = np.asarray(q1)
    y = np.asarray(y)
    ns = q1.shape[-1]
    if np.any(np.abs(np.diagonal(q1, axis1=-2, axis2=-1)) == 0):
        raise ValueError("sic_detect requires a nonzero diagonal")
    batched = y.ndim == 2
    yb = y if batched else y.reshape(1, -1)
    qb = q1 if q1.ndim == 3 else np.broadcast_to(q1, (yb.shape[0],) + q1.shape)
    s_hat = np.empty_like(yb)
    for i in range(ns - 1, -1, -1):
        residual = yb[:, i].copy()
        for k in range(i + 1, ns):
            residual -= qb[:, i, k] * s_hat[:, k]
        s_hat[:, i] = qpsk_slice(residual / qb[:, i, i])
    return s_hat if batched else s_hat[0]


@dataclass(frozen=True)
class PointEnsemble:
    """Channels plus their decompositions and per-trial randomness for one grid point."""

    channels: list[ChannelRealization]
    h: np.ndarray  # (b, nr, nt) stacked channel matrices
    u: np.ndarray  # (b, nr, k) left singular vectors
    sigma: np.ndarray  # (b, k) singular values
    v: np.ndarray  # (b, nt, k) right singular vectors
    w1: np.ndarray  # (b, nr, ns) GMD combiners
    q1: np.ndarray  # (b, ns, ns) GMD effective channels
    r1: np.ndarray  # (b, nt, ns) GMD precoders
    rngs: list[np.random.Generator]
    factor_seeds: list[np.random.SeedSequence]


def _spawn(seed: int, *key: int) -> tuple[np.random.Generator, np.random.SeedSequence]:
    """Counter-derived generator for one trial plus a child seed for its factorization."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    rng_ss, factor_ss = ss.spawn(2)
    return np.random.Generator(np.random.PCG64(rng_ss)), factor_ss


def draw_ensemble(
    dims: SystemDims, trials: int, seed: int, point: int, threads: int = 1
) -> PointEnsemble:
    """Draw ``trials`` channels with their SVD and GMD factors, batched.

    Matrix assembly and the SVD run on stacked arrays; the random draws
    themselves happen per trial in counter order, so the ensemble is
    identical however many threads run the chunks.
    """

    def build_chunk(lo: int) -> PointEnsemble:
        hi = min(lo + _SETUP_CHUNK, trials)
        b = hi - lo
        rngs, factor_seeds, path_lists = [], [], []
        gains = np.empty((b, dims.p_nlos + 1), dtype=complex)
        aod = np.empty((b, dims.p_nlos + 1))
        aoa = np.empty((b, dims.p_nlos + 1))
        for i, t in enumerate(range(lo, hi)):
            rng, factor_ss = _spawn(seed, point, t)
            paths = sample_path_params(rng, dims.p_nlos)
            rngs.append(rng)
            factor_seeds.append(factor_ss)
            path_lists.append(paths)
            gains[i] = [p.gain for p in paths]
            aod[i] = [p.aod for p in paths]
            aoa[i] = [p.aoa for p in paths]
        # batched steering outer products, same formula as generate_channel
        kt = np.arange(dims.nt)
        kr = np.arange(dims.nr)
        a_t = np.exp(-2j * np.pi * dims.spacing_ratio * np.sin(aod)[..., None] * kt) / np.sqrt(dims.nt)
        a_r = np.exp(-2j * np.pi * dims.spacing_ratio * np.sin(aoa)[..., None] * kr) / np.sqrt(dims.nr)
        scale = np.sqrt(dims.nt * dims.nr / (dims.p_nlos + 1))
        h = scale * np.einsum("bp,bpr,bpt->brt", gains, a_r, a_t.conj())
        channels = [
            ChannelRealization(matrix=h[i], paths=tuple(path_lists[i]), nt=dims.nt, nr=dims.nr,
                               spacing_ratio=dims.spacing_ratio)
            for i in range(b)
        ]
        u, s, vh = np.linalg.svd(h, full_matrices=False)
        if np.any(s[:, dims.ns - 1] <= 1e-12 * s[:, 0]):
            raise RankDeficiencyError(f"rank-deficient channel draw at point {point}")
        gl = np.empty((b, dims.ns, dims.ns))
        gr = np.empty((b, dims.ns, dims.ns))
        q1 = np.empty((b, dims.ns, dims.ns), dtype=complex)
        for i in range(b):
            sigma_bar = geometric_mean_sigma(s[i], dims.ns)
            gl[i], q, gr[i] = _gmd_rotations(s[i, : dims.ns], sigma_bar)
            q1[i] = q
        w1 = u[:, :, : dims.ns] @ gl
        v = np.conj(np.swapaxes(vh, 1, 2))
        r1 = v[:, :, : dims.ns] @ gr
        return PointEnsemble(channels, h, u, s, v, w1, q1, r1, rngs, factor_seeds)

    starts = list(range(0, trials, _SETUP_CHUNK))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(build_chunk, starts))
    else:
        parts = [build_chunk(lo) for lo in starts]
    if len(parts) == 1:
        return parts[0]
    return PointEnsemble(
        channels=[c for p in parts for c in p.channels],
        h=np.concatenate([p.h for p in parts]),
        u=np.concatenate([p.u for p in parts]),
        sigma=np.concatenate([p.sigma for p in parts]),
        v=np.concatenate([p.v for p in parts]),
        w1=np.concatenate([p.w1 for p in parts]),
        q1=np.concatenate([p.q1 for p in parts]),
        r1=np.concatenate([p.r1 for p in parts]),
        rngs=[r for p in parts for r in p.rngs],
        factor_seeds=[f for p in parts for f in p.factor_seeds],
    )


def build_scheme_factors(
    scheme: str,
    ensemble: PointEnsemble,
    dims: SystemDims,
    cfg: FactorizeConfig | None = None,
    net: Mlp | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (precoder, combiner) arrays for one scheme over an ensemble.

    Hybrid schemes share the GMD combiner W1; the fully digital schemes use
    their own decomposition factors. Hybrid precoders are power-normalized
    products R_A R_D.
    """
    validate_scheme(scheme)
    b = len(ensemble.channels)
    ns = dims.ns
    if scheme == "fully_digital_gmd":
        return ensemble.r1, ensemble.w1
    if scheme == "fully_digital_svd":
        return ensemble.v[:, :, :ns], ensemble.u[:, :, :ns]
    if scheme == "phase_projection":
        analog = np.exp(1j * np.angle(ensemble.r1)) / np.sqrt(dims.nt)
        digital = np.conj(np.swapaxes(analog, 1, 2)) @ ensemble.r1
        product = analog @ digital
        return _clip_power(product, ns), ensemble.w1
    if scheme == "sgd_hybrid":
        if cfg is None:
            raise ValueError("sgd_hybrid requires a FactorizeConfig")
        factors, _, _ = factorize_sgd_batch(
            ensemble.r1, dims.nt_rf, cfg, seeds=ensemble.factor_seeds
        )
        product = np.stack([f.product for f in factors])
        return product, ensemble.w1
    # dnn_hybrid
    if net is None:
        raise ValueError("dnn_hybrid requires a trained network")
    product = np.stack(
        [infer_precoders(net, ch).product for ch in ensemble.channels]
    )
    return product, ensemble.w1


def _clip_power(product: np.ndarray, ns: int) -> np.ndarray:
    """Scale each stacked precoder down to the trace power budget ns."""
    power = np.sum(np.abs(product) ** 2, axis=(1, 2))
    scale = np.minimum(1.0, np.sqrt(ns / power))
    return product * scale[:, None, None]


def wilson_halfwidth(errors: int, n: int, z: float = 1.96) -> float:
    """Half-width of the Wilson 95% score interval for a binomial proportion."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = errors / n
    denom = 1.0 + z**2 / n
    return float(z * np.sqrt(p * (1.0 - p) / n + z**2 / (4.0 * n**2)) / denom)


def ber_curve(
    scheme: str,
    snr_grid_db,
    trials: int,
    dims: SystemDims,
    seed: int,
    cfg: FactorizeConfig | None = None,
    net: Mlp | None = None,
    threads: int = 1,
) -> BerCurve:
    """Monte-Carlo BER versus SNR for one scheme.

    Each point draws ``trials`` independent channels (one QPSK symbol vector
    each), builds the scheme's precoder/combiner, transmits through the true
    channel and detects by SIC on the upper triangle of the effective
    matrix. Identical seeds give identical channels for every scheme, so
    curves are paired, and the first ``trials`` draws of a longer run
    coincide with a shorter run at the same seed.
    """
    validate_scheme(scheme)
    snr_grid_db = np.asarray(snr_grid_db, dtype=float)
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    bits_per_trial = 2 * dims.ns
    bers, cis, errs = [], [], []
    for point, snr_db in enumerate(snr_grid_db):
        ensemble = draw_ensemble(dims, trials, seed, point, threads)
        precoders, combiners = build_scheme_factors(scheme, ensemble, dims, cfg=cfg, net=net)
        sigma = noise_sigma_for_snr(float(snr_db), dims.ns)
        bits = np.stack([rng.integers(0, 2, size=bits_per_trial) for rng in ensemble.rngs])
        noise = np.stack(
            [
                rng.standard_normal(dims.nr) + 1j * rng.standard_normal(dims.nr)
                for rng in ensemble.rngs
            ]
        ) * (sigma / np.sqrt(2.0))
        s = qpsk_map(bits)
        comb_h = np.conj(np.swapaxes(combiners, 1, 2))
        q_true = comb_h @ ensemble.h @ precoders
        y = (q_true @ s[..., None])[..., 0] + (comb_h @ noise[..., None])[..., 0]
        s_hat = sic_detect(np.triu(q_true), y)
        bit_errors = int(np.sum(qpsk_demap(s_hat) != bits))
        n_bits = trials * bits_per_trial
        bers.append(bit_errors / n_bits)
        cis.append(wilson_halfwidth(bit_errors, n_bits))
        errs.append(bit_errors)
    return BerCurve(
        scheme=scheme,
        snr_db=snr_grid_db,
        ber=np.asarray(bers),
        ci_halfwidth=np.asarray(cis),
        trials=trials,
        bits_per_trial=bits_per_trial,
        errors=np.asarray(errs),
    )


def spectral_efficiency(
    h: ChannelRealization,
    precoder: np.ndarray,
    combiner: np.ndarray,
    snr_db: float,
) -> float:
    """Gaussian-signaling rate log2 det(I + Rn^-1 Heff Heff^H), bits/s/Hz.

    Heff = combiner^H H precoder and Rn = sigma^2 combiner^H combiner whiten
    the combined noise; the precoder carries the transmit power (trace
    budget ns), so no extra power factor appears.
    """
    heff = combiner.conj().T @ h.matrix @ precoder
    ns = precoder.shape[1]
    sigma2 = ns * 10.0 ** (-snr_db / 10.0)
    rn = sigma2 * (combiner.conj().T @ combiner)
    try:
        m = np.linalg.solve(rn, heff @ heff.conj().T)
    except np.linalg.LinAlgError as exc:
        raise ValueError("noise covariance is singular (rank-deficient combiner)") from exc
    if not np.all(np.isfinite(m)):
        raise ValueError("noise covariance is singular (rank-deficient combiner)")
    _, logabsdet = np.linalg.slogdet(np.eye(heff.shape[0]) + m)
    return float(logabsdet / np.log(2.0))


def se_curve(
    scheme: str,
    snr_grid_db,
    n_channels: int,
    dims: SystemDims,
    seed: int,
    cfg: FactorizeConfig | None = None,
    net: Mlp | None = None,
    threads: int = 1,
) -> SeCurve:
    """Spectral efficiency versus SNR, averaged over a fixed channel ensemble.

    The ensemble depends only on (seed, n_channels), so different schemes
    evaluated at the same seed see identical channels.
    """
    validate_scheme(scheme)
    snr_grid_db = np.asarray(snr_grid_db, dtype=float)
    ensemble = draw_ensemble(dims, n_channels, seed, 0, threads)
    precoders, combiners = build_scheme_factors(scheme, ensemble, dims, cfg=cfg, net=net)
    means = [
        float(
            np.mean(
                [
                    spectral_efficiency(ch, precoders[i], combiners[i], float(snr))
                    for i, ch in enumerate(ensemble.channels)
                ]
            )
        )
        for snr in snr_grid_db
    ]
    return SeCurve(
        scheme=scheme, snr_db=snr_grid_db, bits_per_s_hz=np.asarray(means), channels=n_channels
    )


def mse_vs_iterations(
    method: str,
    channels: list[ChannelRealization],
    dims: SystemDims,
    cfg: FactorizeConfig,
) -> MseCurve:
    """Factorization MSE per iteration, averaged over a channel set.

    ``method`` is "sgd_hybrid" (joint phase/digital updates) or
    "analog_only" (digital part frozen at its initialization, phases only,
    mirroring a pure analog precoding comparator). Iteration 0 is the
    initial-point MSE. All instances run ``cfg.max_iters`` iterations when
    ``cfg.tolerance`` is 0, which keeps traces aligned.
    """
    if method not in MSE_METHODS:
        raise ValueError(f"method must be one of {MSE_METHODS}, got {method!r}")
    targets = np.stack([gmd(ch.matrix, dims.ns).r1 for ch in channels])
    _, trace, _ = factorize_sgd_batch(
        targets,
        dims.nt_rf,
        cfg,
        optimize_digital=(method == "sgd_hybrid"),
    )
    mse = np.mean(trace**2, axis=1)
    return MseCurve(
        scheme=method, iteration=np.arange(len(mse)), mse=mse, channels=len(channels)
    )


def iterations_to_plateau(curve: MseCurve, rel: float = 0.05) -> int:
    """Settling iteration: first index within ``rel`` of the floor.

    Measured on the initial-to-floor range (the standard settling-time
    convention), i.e. the first t with
    mse[t] <= floor + rel * (mse[0] - floor), floor being the final value.
    A pure ratio to the floor would be meaningless for runs whose floor
    approaches zero.
    """
    floor = float(curve.mse[-1])
    threshold = floor + rel * (float(curve.mse[0]) - floor)
    hits = np.nonzero(curve.mse <= threshold)[0]
    return int(hits[0])
