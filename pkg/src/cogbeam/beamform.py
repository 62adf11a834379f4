"""Minimum-power beamformers, convolutional (dereverberating) and plain.

All filters operate on one frequency bin at a time; bins are independent.
Per-bin frames are complex (K, M) matrices with frames as rows. The
convolutional variants jointly estimate a multichannel linear-prediction
dereverberation filter G and a beamforming vector q by alternating updates
driven by the time-varying output variance; the conventional variants solve
the same constrained quadratic programs on the raw-signal covariance.

Shapes used throughout:
    spectrogram    (M, K, F) complex
    mask plane     (K, F) real in [0, 1]
    stacked frames (K, M * (l_w - frame_delay + 1)): current frame first,
                   then frames delayed by frame_delay .. l_w - 1
    G              (M * (l_w - frame_delay), M)
    q, RETF        (M,)
"""

from dataclasses import dataclass, field

import numpy as np

from . import linalg

__all__ = [
    "ConvBeamformerConfig",
    "BinState",
    "Diagnostics",
    "BeamformerOutput",
    "DegenerateMaskError",
    "ConstraintRankError",
    "stack_observations",
    "weighted_correlations",
    "dereverberate",
    "estimate_retf",
    "wmpdr_solve",
    "wlcmp_solve",
    "run_conv_beamformer",
    "mpdr",
    "lcmp",
    "mvdr_lcmv",
    "apply_bin_filters",
]

DEFAULT_FILTER_BANDS = ((0.0, 800.0, 20), (800.0, 1500.0, 16), (1500.0, None, 8))

_COND_LIMIT = 1e12


class DegenerateMaskError(ValueError):
    """Mask weights leave one of the two covariance estimates empty."""


class ConstraintRankError(RuntimeError):
    """Constraint matrix is numerically rank-deficient (parallel steering)."""


@dataclass(frozen=True)
class ConvBeamformerConfig:
    """Settings shared by the convolutional and conventional beamformers.

    ``filter_length_bands`` maps half-open frequency ranges [lo, hi) in Hz to
    prediction-filter lengths; the final band must leave ``hi`` as None so it
    extends to Nyquist. ``lambda_floor`` is relative to the bin's mean frame
    power, keeping the variance weights homogeneous under input scaling.
    """

    frame_delay: int = 4
    filter_length_bands: tuple = DEFAULT_FILTER_BANDS
    iterations: int = 10
    delta: float = 0.1
    lambda_floor: float = 1e-10
    ridge: float = 1e-8
    reference_mic: int = 0

    def __post_init__(self):
        if self.frame_delay < 1:
            raise ValueError("frame_delay must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if np.any(np.asarray(self.delta) < 0):
            raise ValueError("delta must be nonnegative")
        if self.lambda_floor <= 0:
            raise ValueError("lambda_floor must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        bands = self.filter_length_bands
        if not bands or bands[-1][1] is not None:
            raise ValueError("last filter band must extend to Nyquist (hi=None)")
        prev_hi = 0.0
        for lo, hi, taps in bands:
            if lo != prev_hi:
                raise ValueError("filter bands must be contiguous from 0 Hz")
            if hi is not None and hi <= lo:
                raise ValueError("filter band limits must increase")
            if taps <= self.frame_delay:
                raise ValueError(
                    f"filter length {taps} must exceed frame_delay {self.frame_delay}"
                )
            prev_hi = hi

    def filter_length(self, frequency_hz):
        for lo, hi, taps in self.filter_length_bands:
            if hi is None or frequency_hz < hi:
                return taps
        return self.filter_length_bands[-1][2]


@dataclass
class BinState:
    """Final per-bin filter: prediction matrix (None if not dereverberating),
    beamforming weights, and the steering vectors they were solved for."""

    filter_taps: int
    derev: np.ndarray | None
    weights: np.ndarray
    target_retf: np.ndarray | None
    interferer_retfs: np.ndarray | None
    passthrough: bool = False


@dataclass
class Diagnostics:
    objective: np.ndarray  # (iterations,) variance-weighted power proxy, bin sum
    objective_per_bin: np.ndarray  # (iterations, F), NaN where unavailable
    max_constraint_residual: float
    failed_bins: list = field(default_factory=list)  # (bin, iteration, message)


@dataclass
class BeamformerOutput:
    z: np.ndarray  # (K, F) complex
    states: list  # BinState per bin
    diagnostics: Diagnostics


class _BinIterationError(Exception):
    """Internal: carries the iteration index of a failed per-bin solve."""

    def __init__(self, iteration, cause):
        super().__init__(str(cause))
        self.iteration = iteration


_CONTAINED = (
    np.linalg.LinAlgError,
    linalg.EigenConvergenceError,
    DegenerateMaskError,
    ConstraintRankError,
)


def _stack_frames(y, frame_delay, l_w):
    """(K, M) frames -> (K, M * (l_w - frame_delay + 1)) stacked observations.

    Column blocks hold the current frame followed by the frames delayed by
    ``frame_delay .. l_w - 1``; frames before the signal start are zero.
    """
    k, m = y.shape
    taps = [0] + list(range(frame_delay, l_w))
    out = np.zeros((k, m * len(taps)), dtype=complex)
    for j, tau in enumerate(taps):
        if tau == 0:
            out[:, :m] = y
        elif tau < k:
            out[tau:, j * m : (j + 1) * m] = y[: k - tau]
    return out


def stack_observations(spec, bin_index, cfg, sample_rate=16000):
    """Stacked observation sequence for one bin of an (M, K, F) spectrogram."""
    spec = np.asarray(spec)
    n_fft = 2 * (spec.shape[2] - 1)
    l_w = cfg.filter_length(bin_index * sample_rate / n_fft)
    return _stack_frames(spec[:, :, bin_index].T, cfg.frame_delay, l_w)


def weighted_correlations(stacked, lam, n_channels):
    """Variance-weighted sample correlations of stacked observations.

    Returns ``(r_delay, p_cross, r_full)`` where ``r_full`` averages
    ``stacked_k stacked_k^H / lam_k`` over frames, ``r_delay`` is its
    delayed-frames block and ``p_cross`` the delayed-to-current block.
    Hermitian parts are symmetrized.
    """
    stacked = np.asarray(stacked)
    lam = np.asarray(lam, dtype=float)
    k = stacked.shape[0]
    r_full = (stacked / lam[:, None]).T @ stacked.conj() / k
    r_full = 0.5 * (r_full + r_full.conj().T)
    m = n_channels
    return r_full[m:, m:], r_full[m:, :m], r_full


def dereverberate(stacked, derev):
    """Subtract the linear prediction from delayed frames: d_k = y_k - G^H y~_k."""
    m = derev.shape[1]
    return stacked[:, :m] - stacked[:, m:] @ derev.conj()


def estimate_retf(frames, weights, reference_mic=0, ridge=1e-8, eig_tol=1e-10, eig_max_iter=200):
    """Steering vector of the weighted source via covariance whitening.

    Builds the weight-averaged covariance of the source (weights) and of
    everything else (1 - weights), whitens, takes the dominant generalized
    eigenvector, de-whitens, and normalizes the reference-microphone entry
    to one. Raises DegenerateMaskError when either covariance is empty.
    """
    frames = np.asarray(frames)
    weights = np.asarray(weights, dtype=float)
    k, m = frames.shape
    w_sum = weights.sum()
    c_sum = (1.0 - weights).sum()
    if w_sum <= 0 or c_sum <= 0:
        raise DegenerateMaskError(
            f"mask leaves no frames for one side (sum={w_sum:.3g}, complement={c_sum:.3g})"
        )
    cov_src = (frames * weights[:, None]).T @ frames.conj() / w_sum
    cov_rest = (frames * (1.0 - weights)[:, None]).T @ frames.conj() / c_sum
    cov_src = 0.5 * (cov_src + cov_src.conj().T)
    cov_rest = 0.5 * (cov_rest + cov_rest.conj().T)
    if not np.any(cov_src) or not np.any(cov_rest):
        raise DegenerateMaskError("weighted covariance is identically zero")
    if ridge > 0:
        cov_rest = cov_rest + (ridge * np.trace(cov_rest).real / m) * np.eye(m)
    vec, _ = linalg.max_generalized_eigvec(cov_src, cov_rest, eig_tol, eig_max_iter)
    steering = cov_rest @ vec
    ref = steering[reference_mic]
    if abs(ref) < 1e-12 * np.linalg.norm(steering):
        raise DegenerateMaskError(
            "steering vector vanishes at the reference microphone"
        )
    return steering / ref


def _constrained_min_power(cov, constraints, response, ridge):
    """q = R^{-1} C (C^H R^{-1} C)^{-1} p, the minimum-power solution of
    min q^H R q subject to C^H q = p."""
    x = linalg.hermitian_solve(cov, constraints, ridge)
    gram = constraints.conj().T @ x
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise ConstraintRankError(
            f"constraint set numerically rank-deficient (cond ~ {cond:.3g})"
        )
    return x @ np.linalg.solve(gram, response)


def wlcmp_solve(cov, constraints, response, ridge=1e-8):
    """Multi-constraint minimum-power weights for Hermitian PD ``cov``.

    ``constraints`` is (M, C) with the target steering first, ``response``
    the desired responses (1 for the target, the suppression levels for
    interferers). Raises ConstraintRankError for near-parallel constraints.
    """
    constraints = np.asarray(constraints, dtype=complex)
    if constraints.ndim != 2:
        raise ValueError("constraints must be a 2-D matrix of column vectors")
    response = np.asarray(response, dtype=complex).reshape(constraints.shape[1])
    return _constrained_min_power(np.asarray(cov), constraints, response, ridge)


def wmpdr_solve(cov, target_retf, ridge=1e-8):
    """Distortionless minimum-power weights: q = R^{-1}a / (a^H R^{-1} a)."""
    target_retf = np.asarray(target_retf, dtype=complex)
    return wlcmp_solve(cov, target_retf[:, None], np.ones(1), ridge)


def _interferer_constraints(target_retf, interferer_retfs, delta):
    cols = [target_retf] + list(interferer_retfs)
    deltas = np.broadcast_to(np.asarray(delta, dtype=float), (len(interferer_retfs),))
    response = np.concatenate([[1.0], deltas])
    return np.column_stack(cols), response


def _objective(z, lam):
    mag_sq = np.abs(z) ** 2
    return float(np.log(lam).sum() + (mag_sq / lam).sum())


def _conv_bin(y, target_mask, interferer_masks, cfg, l_w, constrained):
    """One bin of the convolutional beamformer. Returns
    (z, state, per-iteration objective, constraint residual)."""
    k, m = y.shape
    frame_power = (np.abs(y) ** 2).sum(axis=1)
    floor = max(cfg.lambda_floor * frame_power.mean(), np.finfo(float).tiny)
    lam = np.maximum(frame_power, floor)
    stacked = _stack_frames(y, cfg.frame_delay, l_w)
    delayed = stacked[:, m:]

    objective = np.full(cfg.iterations, np.nan)
    z = derev = weights = target = None
    constraints = response = None
    for it in range(cfg.iterations):
        try:
            r_delay, p_cross, _ = weighted_correlations(stacked, lam, m)
            derev = linalg.hermitian_solve(r_delay, p_cross, cfg.ridge)
            d = y - delayed @ derev.conj()
            _, _, r_d = weighted_correlations(d, lam, m)
            target = estimate_retf(d, target_mask, cfg.reference_mic, cfg.ridge)
            if constrained and interferer_masks:
                retfs = [
                    estimate_retf(d, im, cfg.reference_mic, cfg.ridge)
                    for im in interferer_masks
                ]
                constraints, response = _interferer_constraints(target, retfs, cfg.delta)
            else:
                constraints = target[:, None]
                response = np.ones(1)
            weights = _constrained_min_power(r_d, constraints, response, cfg.ridge)
            z = d @ weights.conj()
            lam = np.maximum(np.abs(z) ** 2, floor)
            objective[it] = _objective(z, lam)
        except _CONTAINED as exc:
            raise _BinIterationError(it, exc) from exc

    residual = float(np.max(np.abs(constraints.conj().T @ weights - response)))
    interferers = constraints[:, 1:] if constraints.shape[1] > 1 else None
    state = BinState(l_w, derev, weights, target, interferers)
    return z, state, objective, residual


def _passthrough_state(m, l_w, reference_mic):
    weights = np.zeros(m, dtype=complex)
    weights[reference_mic] = 1.0
    return BinState(l_w, None, weights, None, None, passthrough=True)


def run_conv_beamformer(
    spec, target_mask, interferer_masks=None, cfg=None, mode="wmpdr", sample_rate=16000
):
    """Convolutional beamformer over all bins: alternate prediction-filter,
    steering, weight and variance updates for ``cfg.iterations`` rounds.

    ``mode`` is "wmpdr" (distortionless only) or "wlcmp" (adds one response
    constraint per interferer mask at level ``cfg.delta``). Bins whose solve
    fails fall back to a reference-microphone passthrough and are recorded in
    the diagnostics instead of aborting the utterance.
    """
    cfg = cfg or ConvBeamformerConfig()
    if mode not in ("wmpdr", "wlcmp"):
        raise ValueError(f"unknown mode {mode!r}")
    spec = np.asarray(spec)
    m_ch, k, f = spec.shape
    target_mask = np.asarray(target_mask, dtype=float)
    if target_mask.shape != (k, f):
        raise ValueError(
            f"target mask shape {target_mask.shape} does not match frames/bins {(k, f)}"
        )
    if interferer_masks is not None:
        interferer_masks = [np.asarray(im, dtype=float) for im in interferer_masks]
        for im in interferer_masks:
            if im.shape != (k, f):
                raise ValueError("interferer mask shape mismatch")
    use_constraints = mode == "wlcmp"

    n_fft = 2 * (f - 1)
    z = np.zeros((k, f), dtype=complex)
    states = []
    objective_per_bin = np.full((cfg.iterations, f), np.nan)
    residuals = []
    failures = []
    for fi in range(f):
        y = spec[:, :, fi].T
        l_w = cfg.filter_length(fi * sample_rate / n_fft)
        if not np.any(y):
            states.append(_passthrough_state(m_ch, l_w, cfg.reference_mic))
            continue
        i_masks = (
            [im[:, fi] for im in interferer_masks] if interferer_masks else None
        )
        try:
            z_bin, state, objective, residual = _conv_bin(
                y, target_mask[:, fi], i_masks, cfg, l_w, use_constraints
            )
            if not np.all(np.isfinite(z_bin)):
                raise _BinIterationError(cfg.iterations - 1, "non-finite output")
        except _BinIterationError as err:
            failures.append((fi, err.iteration, str(err)))
            states.append(_passthrough_state(m_ch, l_w, cfg.reference_mic))
            z[:, fi] = y[:, cfg.reference_mic]
            continue
        z[:, fi] = z_bin
        states.append(state)
        objective_per_bin[:, fi] = objective
        residuals.append(residual)

    diagnostics = Diagnostics(
        objective=np.nansum(objective_per_bin, axis=1),
        objective_per_bin=objective_per_bin,
        max_constraint_residual=max(residuals) if residuals else 0.0,
        failed_bins=failures,
    )
    return BeamformerOutput(z, states, diagnostics)


def _conventional(spec, target_mask, interferer_masks, delta, cfg, noise_cov=None, steering=None, interferer_steering=None):
    """Shared core of the conventional beamformers: one constrained solve per
    bin on either the raw-signal covariance or a supplied noise covariance."""
    cfg = cfg or ConvBeamformerConfig()
    spec = np.asarray(spec)
    m_ch, k, f = spec.shape
    z = np.zeros((k, f), dtype=complex)
    states = []
    residuals = []
    failures = []
    for fi in range(f):
        y = spec[:, :, fi].T
        if not np.any(y) and steering is None:
            states.append(_passthrough_state(m_ch, 1, cfg.reference_mic))
            continue
        try:
            if steering is None:
                cov = y.T @ y.conj() / k
                cov = 0.5 * (cov + cov.conj().T)
                target = estimate_retf(
                    y, target_mask[:, fi], cfg.reference_mic, cfg.ridge
                )
                if interferer_masks is not None:
                    retfs = [
                        estimate_retf(y, im[:, fi], cfg.reference_mic, cfg.ridge)
                        for im in interferer_masks
                    ]
                    constraints, response = _interferer_constraints(target, retfs, delta)
                else:
                    constraints, response = target[:, None], np.ones(1)
            else:
                cov = noise_cov[fi]
                target = steering[fi]
                if interferer_steering is not None:
                    constraints, response = _interferer_constraints(
                        target, list(interferer_steering[fi].T), delta
                    )
                else:
                    constraints, response = target[:, None], np.ones(1)
            weights = _constrained_min_power(cov, constraints, response, cfg.ridge)
        except _CONTAINED as exc:
            failures.append((fi, 0, str(exc)))
            states.append(_passthrough_state(m_ch, 1, cfg.reference_mic))
            z[:, fi] = y[:, cfg.reference_mic]
            continue
        z[:, fi] = y @ weights.conj()
        interferers = constraints[:, 1:] if constraints.shape[1] > 1 else None
        states.append(BinState(1, None, weights, target, interferers))
        residuals.append(float(np.max(np.abs(constraints.conj().T @ weights - response))))

    diagnostics = Diagnostics(
        objective=np.zeros(0),
        objective_per_bin=np.zeros((0, f)),
        max_constraint_residual=max(residuals) if residuals else 0.0,
        failed_bins=failures,
    )
    return BeamformerOutput(z, states, diagnostics)


def mpdr(spec, target_mask, cfg=None):
    """Conventional distortionless minimum-power beamformer on the raw-signal
    covariance, steered by a covariance-whitening estimate from the raw
    frames. Non-iterative."""
    target_mask = np.asarray(target_mask, dtype=float)
    return _conventional(spec, target_mask, None, None, cfg)


def lcmp(spec, target_mask, interferer_masks, delta=None, cfg=None):
    """Conventional linearly constrained minimum-power beamformer; ``delta``
    sets the per-interferer response (0 = hard null)."""
    cfg = cfg or ConvBeamformerConfig()
    if delta is None:
        delta = cfg.delta
    target_mask = np.asarray(target_mask, dtype=float)
    interferer_masks = [np.asarray(im, dtype=float) for im in interferer_masks]
    return _conventional(spec, target_mask, interferer_masks, delta, cfg)


def mvdr_lcmv(spec, steering, noise_cov, delta=None, interferer_steering=None, cfg=None):
    """Minimum-variance beamformer with caller-supplied steering vectors and
    per-bin noise covariance; with ``delta`` and interferer steering it
    becomes the constrained variant."""
    steering = np.asarray(steering, dtype=complex)
    noise_cov = np.asarray(noise_cov, dtype=complex)
    if interferer_steering is not None:
        interferer_steering = np.asarray(interferer_steering, dtype=complex)
        if delta is None:
            cfg_ = cfg or ConvBeamformerConfig()
            delta = cfg_.delta
    return _conventional(
        spec,
        None,
        None,
        delta,
        cfg,
        noise_cov=noise_cov,
        steering=steering,
        interferer_steering=interferer_steering,
    )


def apply_bin_filters(states, spec, cfg=None):
    """Apply previously solved per-bin filters to a spectrogram.

    Useful for measuring how a fixed filter treats an individual scene
    component (target, interferer, noise) of the same mixture.
    """
    cfg = cfg or ConvBeamformerConfig()
    spec = np.asarray(spec)
    m_ch, k, f = spec.shape
    if len(states) != f:
        raise ValueError(f"{len(states)} states for {f} bins")
    z = np.zeros((k, f), dtype=complex)
    for fi, state in enumerate(states):
        y = spec[:, :, fi].T
        if state.derev is None:
            z[:, fi] = y @ state.weights.conj()
        else:
            stacked = _stack_frames(y, cfg.frame_delay, state.filter_taps)
            d = stacked[:, :m_ch] - stacked[:, m_ch:] @ state.derev.conj()
            z[:, fi] = d @ state.weights.conj()
    return z
