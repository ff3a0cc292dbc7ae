"""
Transforms

The segment-level enhancement techniques: spectral energy compression,
GCI-anchored temporal enhancement, healthy-template insertion, and GMM / NMF
spectral conversion, together with the training routines for the two
conversion models.
"""
import csv
import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.fft import dct
from scipy.linalg import LinAlgError, cholesky, solve_toeplitz, solve_triangular
from scipy.signal import lfilter, lfiltic
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from audio_io import Waveform, normalize_rms, read_wav, write_wav
from dsp_core import (DEFAULT_FRAME_LEN, DEFAULT_HOP, LOG_FLOOR, CepstraTrack,
                      cepstra_to_log_envelope, dtw_align, mel_filterbank,
                      padded_istft, padded_stft)
from errors import (ConfigurationError, DimensionMismatchError,
                    InsufficientDataError, TemplateNotFoundError, TooShortError)

# Initialize logger
logger = logging.getLogger(__name__)

DEFAULT_SEED = 0

# GMM training
DEFAULT_GMM_COMPONENTS = 8
DEFAULT_GMM_ORDER = 13
GMM_MAX_ITER = 200
GMM_TOL = 1e-6              # per-frame log-likelihood gain
GMM_REG = 1e-6
GMM_MIN_WEIGHT = 1e-6
GMM_FRAMES_PER_PARAM = 10

# NMF
DEFAULT_NMF_RANK = 64
DEFAULT_NMF_ITERS = 100
NMF_FLOOR = 1e-12

ENVELOPE_LIMIT_DB = 40.0

# Temporal enhancement analysis
TEMPORAL_FRAME_MS = 25.0
TEMPORAL_HOP_MS = 5.0
TEMPORAL_SUBBLOCK = 16      # samples between interpolated coefficient updates

MIN_TEMPLATE_RMS = 1e-4


@dataclass(frozen=True)
class SpectralCompressionConfig:
    cutoff_hz: float = 2000.0
    low_band_gain: float = 0.1
    preserve_total_energy: bool = True

    def __post_init__(self):
        if self.cutoff_hz <= 0:
            raise ValueError(f"cutoff_hz must be positive, got {self.cutoff_hz}")
        if not 0.0 <= self.low_band_gain <= 1.0:
            raise ValueError(f"low_band_gain must be in [0, 1], got {self.low_band_gain}")


@dataclass(frozen=True)
class TemporalEnhanceConfig:
    gci_window_ms: float = 2.0
    base_weight: float = 0.3
    lpc_order: int = 12

    def __post_init__(self):
        if self.gci_window_ms <= 0:
            raise ValueError(f"gci_window_ms must be positive, got {self.gci_window_ms}")
        if not 0.0 <= self.base_weight <= 1.0:
            raise ValueError(f"base_weight must be in [0, 1], got {self.base_weight}")
        if self.lpc_order < 1:
            raise ValueError(f"lpc_order must be at least 1, got {self.lpc_order}")


class TemporalEnhanceResult(NamedTuple):
    waveform: Waveform
    skipped: bool


# --------------------------------------------------------------------------
# Spectral energy compression
# --------------------------------------------------------------------------

def spectral_compress(seg, cfg=SpectralCompressionConfig(), frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """
    Attenuate STFT magnitude below the cutoff, optionally rescaling the upper
    band so each frame keeps its total spectral energy. Phase is unchanged.
    """
    if len(seg) < frame_len:
        raise TooShortError(f"Segment of {len(seg)} samples is shorter than one frame ({frame_len})")
    if cfg.cutoff_hz >= seg.sample_rate / 2.0:
        raise ValueError(f"Cutoff {cfg.cutoff_hz} Hz is not below Nyquist")

    spec = padded_stft(seg, frame_len, hop)
    mag = spec.magnitude
    freqs = np.fft.rfftfreq(frame_len, d=1.0 / seg.sample_rate)
    low = freqs < cfg.cutoff_hz

    new_mag = mag.copy()
    new_mag[:, low] *= cfg.low_band_gain
    if cfg.preserve_total_energy:
        total = np.sum(mag ** 2, axis=1)
        low_after = np.sum(new_mag[:, low] ** 2, axis=1)
        high_before = np.sum(mag[:, ~low] ** 2, axis=1)
        scale = np.ones_like(total)
        ok = high_before > 0
        scale[ok] = np.sqrt(np.maximum(total[ok] - low_after[ok], 0.0) / high_before[ok])
        new_mag[:, ~low] *= scale[:, None]

    out = spec.with_frames(new_mag * np.exp(1j * spec.phase))
    return padded_istft(out, len(seg))


# --------------------------------------------------------------------------
# GCI-anchored temporal enhancement
# --------------------------------------------------------------------------

def gci_weight_function(length, gcis, cfg, sample_rate):
    """base_weight everywhere, raised to 1 by a raised-cosine bump centred on each GCI."""
    weights = np.full(length, cfg.base_weight)
    width = max(int(round(cfg.gci_window_ms * sample_rate / 1000.0)), 1)
    half = width / 2.0
    offsets = np.arange(-int(np.floor(half)), int(np.floor(half)) + 1)
    bump = 0.5 * (1.0 + np.cos(2.0 * np.pi * offsets / width))
    lifted = cfg.base_weight + (1.0 - cfg.base_weight) * bump
    for gci in gcis.instants:
        positions = gci + offsets
        valid = (positions >= 0) & (positions < length)
        weights[positions[valid]] = np.maximum(weights[positions[valid]], lifted[valid])
    return weights


def _frame_autocorrelations(x, order, frame_len, hop):
    """Hann-windowed autocorrelations r[0..order] for frames centred every hop samples."""
    window = np.hanning(frame_len)
    padded = np.pad(x, frame_len // 2)
    centers = np.arange(0, x.shape[0] + hop, hop)
    acs = np.zeros((centers.shape[0], order + 1))
    for index, center in enumerate(centers):
        frame = padded[center:center + frame_len]
        if frame.shape[0] < frame_len:
            frame = np.pad(frame, (0, frame_len - frame.shape[0]))
        frame = frame * window
        full = np.correlate(frame, frame, mode='full')[frame_len - 1:frame_len + order]
        acs[index] = full
    return centers, acs


def _interpolated_lpc(x, order, sample_rate):
    """
    Inverse-filter coefficients per sub-block, from autocorrelations interpolated
    linearly between analysis frames (a convex mix of autocorrelations keeps the
    filter minimum phase).

    Returns:
        list of (start, end, coeffs or None); None marks a degenerate block
    """
    frame_len = int(round(TEMPORAL_FRAME_MS * sample_rate / 1000.0))
    hop = int(round(TEMPORAL_HOP_MS * sample_rate / 1000.0))
    centers, acs = _frame_autocorrelations(x, order, frame_len, hop)
    blocks = []
    for start in range(0, x.shape[0], TEMPORAL_SUBBLOCK):
        end = min(start + TEMPORAL_SUBBLOCK, x.shape[0])
        mid = 0.5 * (start + end - 1)
        left = min(int(mid // hop), centers.shape[0] - 2) if centers.shape[0] > 1 else 0
        if centers.shape[0] > 1:
            alpha = np.clip((mid - centers[left]) / hop, 0.0, 1.0)
            r = (1.0 - alpha) * acs[left] + alpha * acs[left + 1]
        else:
            r = acs[0]
        coeffs = None
        if r[0] > 0:
            r = r.copy()
            r[0] *= 1.0 + 1e-9
            try:
                a = solve_toeplitz(r[:order], -r[1:order + 1])
                if np.all(np.isfinite(a)):
                    coeffs = np.concatenate([[1.0], a])
            except LinAlgError:
                coeffs = None
        blocks.append((start, end, coeffs))
    return blocks


def temporal_enhance(seg, gcis, cfg=TemporalEnhanceConfig()):
    """
    Emphasize excitation around glottal closure instants.

    The LP residual is multiplied by a weight function (base_weight away from
    GCIs, 1 at each GCI) and resynthesized through the same time-varying LP
    filter. Output RMS is matched to the input.

    Returns:
        TemporalEnhanceResult(waveform, skipped)
    """
    if len(gcis) == 0:
        logger.warning("Temporal enhancement skipped: no GCIs in segment")
        return TemporalEnhanceResult(seg, True)
    if len(seg) == 0:
        return TemporalEnhanceResult(seg, True)

    x = seg.samples
    order = cfg.lpc_order
    weights = gci_weight_function(len(seg), gcis, cfg, seg.sample_rate)
    blocks = _interpolated_lpc(x, order, seg.sample_rate)

    residual = np.zeros_like(x)
    out = np.zeros_like(x)
    degenerate = 0
    identity = np.zeros(order + 1)
    identity[0] = 1.0
    for start, end, coeffs in blocks:
        if coeffs is None:
            degenerate += 1
            coeffs = identity
            weights[start:end] = 1.0
        past_x = x[max(start - order, 0):start][::-1]
        past_y = out[max(start - order, 0):start][::-1]
        zi_a = lfiltic(coeffs, [1.0], [], past_x)
        residual[start:end], _ = lfilter(coeffs, [1.0], x[start:end], zi=zi_a)
        zi_s = lfiltic([1.0], coeffs, past_y)
        out[start:end], _ = lfilter([1.0], coeffs, residual[start:end] * weights[start:end], zi=zi_s)

    if degenerate:
        logger.warning(f"Temporal enhancement: {degenerate} degenerate LP block(s) passed through")

    in_rms = seg.rms()
    out_rms = float(np.sqrt(np.mean(out ** 2)))
    if in_rms > 0 and out_rms > 0 and np.all(np.isfinite(out)):
        out = out * (in_rms / out_rms)
    elif not np.all(np.isfinite(out)):
        logger.warning("Temporal enhancement produced non-finite output; passing segment through")
        return TemporalEnhanceResult(seg, True)
    return TemporalEnhanceResult(seg.with_samples(out), False)


# --------------------------------------------------------------------------
# Healthy-template insertion
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TemplateEntry:
    waveform: Waveform
    cv_ratio: float     # healthy consonant RMS / neighbouring vowel RMS


@dataclass
class TemplateBank:
    """Healthy segment exemplars keyed by (phoneme label, vowel context)."""
    entries: dict = field(default_factory=dict)

    def add(self, label, context, waveform, cv_ratio):
        if waveform.rms() <= MIN_TEMPLATE_RMS:
            raise ValueError(f"Template ({label}, {context}) is silent")
        if cv_ratio <= 0:
            raise ValueError(f"Template ({label}, {context}) has non-positive RMS ratio")
        self.entries[(label, context)] = TemplateEntry(waveform, float(cv_ratio))

    def get(self, label, context):
        try:
            return self.entries[(label, context)]
        except KeyError:
            raise TemplateNotFoundError(f"No template for /{label}/ in context /{context}/") from None

    def __contains__(self, key):
        return key in self.entries

    def __len__(self):
        return len(self.entries)

    def save(self, directory):
        """Write exemplars as WAV files plus an index.csv."""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, 'index.csv'), 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['label', 'context', 'wav_path', 'cv_ratio'])
            for (label, context), entry in sorted(self.entries.items()):
                name = f"{label}_{context}.wav"
                write_wav(entry.waveform, os.path.join(directory, name))
                writer.writerow([label, context, name, repr(entry.cv_ratio)])
        logger.info(f"Saved template bank with {len(self.entries)} exemplar(s) to {directory}")

    @classmethod
    def load(cls, directory):
        bank = cls()
        index_path = os.path.join(directory, 'index.csv')
        with open(index_path, newline='', encoding='utf-8') as f:
            for row in csv.DictReader(f):
                wav = read_wav(os.path.join(directory, row['wav_path']))
                bank.add(row['label'], row['context'], wav, float(row['cv_ratio']))
        logger.info(f"Loaded template bank with {len(bank)} exemplar(s) from {directory}")
        return bank


def _time_scale_magnitude(spec, n_out_frames):
    """Nearest-frame resampling of an STFT along time with phase-vocoder phase advance."""
    n_src = spec.num_frames
    if n_out_frames == 1 or n_src == 1:
        mapping = np.zeros(n_out_frames, dtype=int)
    else:
        mapping = np.rint(np.arange(n_out_frames) * (n_src - 1) / (n_out_frames - 1)).astype(int)
    mag = spec.magnitude
    phase = spec.phase
    bins = np.arange(spec.frames.shape[1])
    nominal = 2.0 * np.pi * bins * spec.hop / spec.frame_len
    # Measured per-bin phase advance of each source frame
    advance = np.empty_like(phase)
    advance[0] = nominal
    if n_src > 1:
        deviation = np.diff(phase, axis=0) - nominal
        deviation = np.mod(deviation + np.pi, 2.0 * np.pi) - np.pi
        advance[1:] = nominal + deviation

    out_phase = np.empty((n_out_frames, bins.shape[0]))
    out_phase[0] = phase[mapping[0]]
    for t in range(1, n_out_frames):
        out_phase[t] = out_phase[t - 1] + advance[mapping[t]]
    return spec.with_frames(mag[mapping] * np.exp(1j * out_phase))


def insert_template(slot_len, label, context, bank, neighbor_rms,
                    frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """
    Synthesize a healthy segment for a slot of slot_len samples.

    The exemplar is time-scaled to the slot and its RMS set to
    neighbor_rms * (healthy consonant-to-vowel RMS ratio).
    """
    entry = bank.get(label, context)
    exemplar = entry.waveform
    if slot_len <= 0:
        raise ValueError(f"Slot length must be positive, got {slot_len}")
    target_rms = neighbor_rms * entry.cv_ratio

    if slot_len == len(exemplar):
        scaled = exemplar
    else:
        spec = padded_stft(exemplar, frame_len, hop)
        n_out = 1 + (slot_len + frame_len) // hop
        scaled = padded_istft(_time_scale_magnitude(spec, n_out), slot_len)

    if target_rms <= 0 or scaled.rms() == 0.0:
        return scaled.with_samples(np.zeros(slot_len))
    return normalize_rms(scaled, target_rms)


# --------------------------------------------------------------------------
# GMM spectral conversion
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GmmJointModel:
    """
    Joint-density GMM over stacked [x; y] cepstral features.

    Features are mel cepstra of the given order with c_0 excluded unless
    include_c0 is set, so each side has order - 1 (or order) dimensions.
    """
    weights: np.ndarray         # Q
    means: np.ndarray           # Q x 2d
    covariances: np.ndarray     # Q x 2d x 2d
    order: int = DEFAULT_GMM_ORDER
    include_c0: bool = False

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covariances, dtype=np.float64)
        q = weights.shape[0]
        if means.shape[0] != q or covs.shape[0] != q:
            raise DimensionMismatchError("GMM weights, means and covariances disagree on component count")
        joint = means.shape[1]
        if joint % 2 or covs.shape[1:] != (joint, joint):
            raise DimensionMismatchError(f"Bad joint dimension {joint} / covariance shape {covs.shape}")
        if self.feature_dim(self.order, self.include_c0) * 2 != joint:
            raise DimensionMismatchError(
                f"Joint dimension {joint} does not match order {self.order} (include_c0={self.include_c0})")
        if np.any(weights <= 0) or np.any(weights > 1) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("GMM weights must lie in (0, 1] and sum to 1")
        for index, cov in enumerate(covs):
            if not np.allclose(cov, cov.T, atol=1e-10):
                raise ValueError(f"Covariance {index} is not symmetric")
            if np.linalg.eigvalsh(cov).min() < 1e-8:
                raise ValueError(f"Covariance {index} is not positive definite")
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'covariances', covs)

    @staticmethod
    def feature_dim(order, include_c0):
        return order if include_c0 else order - 1

    @property
    def num_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        """Per-side feature dimension."""
        return self.means.shape[1] // 2

    def select_features(self, cepstra):
        """Feature matrix (frames x dim) from cepstra c_0..c_{order-1}."""
        ceps = cepstra.frames if isinstance(cepstra, CepstraTrack) else np.atleast_2d(cepstra)
        if ceps.shape[1] != self.order:
            raise DimensionMismatchError(f"Cepstral order {ceps.shape[1]} does not match model order {self.order}")
        return ceps if self.include_c0 else ceps[:, 1:]


def _gaussian_log_densities(X, means, covs):
    """log N(x_n; mu_q, Sigma_q) for every frame and component (N x Q)."""
    n, d = X.shape
    out = np.empty((n, means.shape[0]))
    for q in range(means.shape[0]):
        chol = cholesky(covs[q], lower=True)
        sol = solve_triangular(chol, (X - means[q]).T, lower=True)
        maha = np.sum(sol ** 2, axis=0)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, q] = -0.5 * (d * np.log(2.0 * np.pi) + log_det + maha)
    return out


@dataclass
class GmmTrainingLog:
    log_likelihoods: list = field(default_factory=list)     # per-frame objective after each E-step
    pruned: int = 0
    frames: int = 0


def _feature_matrix(track, include_c0):
    if isinstance(track, CepstraTrack):
        frames = track.frames
        return frames if include_c0 else frames[:, 1:]
    return np.atleast_2d(np.asarray(track, dtype=np.float64))


def align_feature_pairs(src_feats, tgt_feats, align=True):
    """Stack DTW-aligned (or already frame-aligned) source/target feature pairs."""
    src_feats = list(src_feats)
    tgt_feats = list(tgt_feats)
    if len(src_feats) != len(tgt_feats):
        raise DimensionMismatchError(f"{len(src_feats)} source utterances but {len(tgt_feats)} targets")
    xs, ys = [], []
    for x, y in zip(src_feats, tgt_feats):
        if x.shape[1] != y.shape[1]:
            raise DimensionMismatchError(f"Feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
        if align:
            path = np.asarray(dtw_align(x, y).pairs)
            xs.append(x[path[:, 0]])
            ys.append(y[path[:, 1]])
        else:
            if x.shape[0] != y.shape[0]:
                raise DimensionMismatchError("Unaligned pairs must have equal frame counts")
            xs.append(x)
            ys.append(y)
    if not xs:
        raise InsufficientDataError("No training pairs")
    return np.vstack(xs), np.vstack(ys)


def fit_gmm(data, num_components, max_iter=GMM_MAX_ITER, tol=GMM_TOL, reg=GMM_REG, seed=DEFAULT_SEED):
    """
    Full-covariance EM with k-means++ seeding.

    Covariances are (scatter + lambda I) / N_q with lambda = reg * N, the MAP
    update under a fixed inverse-Wishart-style prior, so every component keeps
    eigenvalues >= reg and the recorded objective never decreases.

    Returns:
        (weights, means, covariances, GmmTrainingLog)
    """
    X = np.asarray(data, dtype=np.float64)
    n, d = X.shape
    if n < num_components:
        raise InsufficientDataError(f"{n} frames cannot support {num_components} components")
    lam = reg * n
    eye = np.eye(d)
    log = GmmTrainingLog(frames=n)

    centers, _ = kmeans_plusplus(X, n_clusters=num_components, random_state=seed)
    nearest = np.argmin(cdist(X, centers, metric="sqeuclidean"), axis=1)
    resp = np.zeros((n, num_components))
    resp[np.arange(n), nearest] = 1.0
    weights, means, covs = _m_step(X, resp, lam, eye, centers)

    previous = None
    for iteration in range(max_iter):
        log_prob = _gaussian_log_densities(X, means, covs) + np.log(weights)
        lse = logsumexp(log_prob, axis=1)
        penalty = -0.5 * lam * sum(np.trace(np.linalg.inv(c)) for c in covs)
        objective = (lse.sum() + penalty) / n
        log.log_likelihoods.append(float(objective))
        logger.debug(f"EM iteration {iteration}: objective {objective:.6f} per frame")
        if previous is not None and objective - previous < tol:
            break
        previous = objective

        resp = np.exp(log_prob - lse[:, None])
        occupancy = resp.sum(axis=0)
        keep = occupancy / n >= GMM_MIN_WEIGHT
        if not np.all(keep):
            dropped = int((~keep).sum())
            logger.warning(f"Pruning {dropped} collapsed GMM component(s)")
            log.pruned += dropped
            resp = resp[:, keep]
            resp /= resp.sum(axis=1, keepdims=True)
            means = means[keep]
            previous = None
        weights, means, covs = _m_step(X, resp, lam, eye, means)

    return weights, means, covs, log


def _m_step(X, resp, lam, eye, fallback_means):
    n = X.shape[0]
    occupancy = resp.sum(axis=0)
    weights = np.maximum(occupancy, 1e-300) / n
    weights = weights / weights.sum()
    means = np.empty((resp.shape[1], X.shape[1]))
    covs = np.empty((resp.shape[1], X.shape[1], X.shape[1]))
    for q in range(resp.shape[1]):
        if occupancy[q] <= 0:
            means[q] = fallback_means[q]
            covs[q] = np.cov(X, rowvar=False, bias=True).reshape(X.shape[1], X.shape[1]) + lam / n * eye
            continue
        means[q] = resp[:, q] @ X / occupancy[q]
        diff = X - means[q]
        scatter = (resp[:, q][:, None] * diff).T @ diff
        cov = (scatter + lam * eye) / occupancy[q]
        covs[q] = 0.5 * (cov + cov.T)
    return weights, means, covs


def train_joint_gmm(src_feats, tgt_feats, num_components=DEFAULT_GMM_COMPONENTS, order=None,
                    include_c0=False, align=True, max_iter=GMM_MAX_ITER, tol=GMM_TOL, seed=DEFAULT_SEED):
    """
    Train a joint-density GMM on parallel utterances.

    Args:
        src_feats, tgt_feats: sequences of CepstraTrack (or raw frames x dim arrays)
        num_components: Q
        order: cepstral order recorded in the model (inferred from CepstraTrack input)
        align: DTW-align each pair; pass False for frame-aligned pairs

    Returns:
        (GmmJointModel, GmmTrainingLog)
    """
    src_feats = list(src_feats)
    tgt_feats = list(tgt_feats)
    if order is None:
        first = src_feats[0] if src_feats else None
        if isinstance(first, CepstraTrack):
            order = first.order
        elif first is not None:
            dim = np.atleast_2d(first).shape[1]
            order = dim if include_c0 else dim + 1
        else:
            order = DEFAULT_GMM_ORDER
    xs = [_feature_matrix(t, include_c0) for t in src_feats]
    ys = [_feature_matrix(t, include_c0) for t in tgt_feats]
    x, y = align_feature_pairs(xs, ys, align=align)
    joint = np.hstack([x, y])

    needed = GMM_FRAMES_PER_PARAM * num_components * joint.shape[1]
    if joint.shape[0] < needed:
        raise InsufficientDataError(
            f"GMM with Q={num_components} needs {needed} aligned frames, got {joint.shape[0]}")

    logger.info(f"Training joint GMM: Q={num_components}, {joint.shape[0]} frames, dim {joint.shape[1]}")
    weights, means, covs, log = fit_gmm(joint, num_components, max_iter=max_iter, tol=tol, seed=seed)
    if log.pruned:
        logger.warning(f"GMM reduced to {weights.shape[0]} component(s) after pruning")
    return GmmJointModel(weights, means, covs, order=order, include_c0=include_c0), log


def gmm_posteriors(model, x):
    """P(q | x) from the marginal source densities (frames x Q)."""
    d = model.dim
    log_prob = _gaussian_log_densities(x, model.means[:, :d], model.covariances[:, :d, :d]) + np.log(model.weights)
    return np.exp(log_prob - logsumexp(log_prob, axis=1)[:, None])


def gmm_map_features(model, x):
    """Minimum mean-square-error conversion of source features (frames x dim)."""
    x = np.atleast_2d(x)
    d = model.dim
    if x.shape[1] != d:
        raise DimensionMismatchError(f"Feature dimension {x.shape[1]} does not match model dimension {d}")
    post = gmm_posteriors(model, x)
    out = np.zeros_like(x)
    for q in range(model.num_components):
        mu_x = model.means[q, :d]
        mu_y = model.means[q, d:]
        sxx = model.covariances[q, :d, :d]
        syx = model.covariances[q, d:, :d]
        regression = np.linalg.solve(sxx, (x - mu_x).T).T @ syx.T
        out += post[:, q][:, None] * (mu_y + regression)
    return out


def _stft_cepstra(mag, sample_rate, frame_len, order):
    bank = mel_filterbank(sample_rate, frame_len)
    log_energy = np.log(np.maximum((mag ** 2) @ bank.T, LOG_FLOOR))
    return dct(log_energy, type=2, norm='ortho', axis=1)[:, :order]


def conversion_cepstra(w, order=DEFAULT_GMM_ORDER, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """
    Mel cepstra on the padded STFT grid that gmm_convert modifies. GMM training
    features come from here so that training and conversion see the same frames.
    """
    if len(w) < frame_len:
        raise TooShortError(f"Signal of {len(w)} samples is shorter than one frame ({frame_len})")
    mag = padded_stft(w, frame_len, hop).magnitude
    return CepstraTrack(_stft_cepstra(mag, w.sample_rate, frame_len, order), order, frame_len, hop, w.sample_rate)


def gmm_convert(seg, model, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """
    Convert a segment's spectral envelope with a joint GMM.

    Per STFT frame the mel cepstra are mapped through the GMM regression, and
    the magnitude is filtered by the ratio of the converted to the source
    envelope (limited to +/-40 dB). Phase and c_0 are kept.
    """
    if len(seg) < frame_len:
        raise TooShortError(f"Segment of {len(seg)} samples is shorter than one frame ({frame_len})")
    spec = padded_stft(seg, frame_len, hop)
    mag = spec.magnitude
    ceps = _stft_cepstra(mag, seg.sample_rate, frame_len, model.order)

    features = model.select_features(ceps)
    converted = ceps.copy()
    if model.include_c0:
        converted[:, 1:] = gmm_map_features(model, features)[:, 1:]
    else:
        converted[:, 1:] = gmm_map_features(model, features)

    src_env = cepstra_to_log_envelope(ceps, frame_len, seg.sample_rate)
    tgt_env = cepstra_to_log_envelope(converted, frame_len, seg.sample_rate)
    limit = ENVELOPE_LIMIT_DB * np.log(10.0) / 10.0
    log_ratio = np.clip(tgt_env - src_env, -limit, limit)
    gain = np.exp(0.5 * log_ratio)

    out = spec.with_frames(mag * gain * np.exp(1j * spec.phase))
    return padded_istft(out, len(seg))


# --------------------------------------------------------------------------
# NMF spectral conversion
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NmfDictionaries:
    """Paired exemplar dictionaries: column r of w_src and w_tgt is one aligned frame pair."""
    w_src: np.ndarray       # num_bins x R
    w_tgt: np.ndarray       # num_bins x R
    frame_len: int = DEFAULT_FRAME_LEN
    hop: int = DEFAULT_HOP

    def __post_init__(self):
        w_src = np.asarray(self.w_src, dtype=np.float64)
        w_tgt = np.asarray(self.w_tgt, dtype=np.float64)
        if w_src.ndim != 2 or w_src.shape != w_tgt.shape:
            raise DimensionMismatchError(f"Dictionary shapes differ: {w_src.shape} vs {w_tgt.shape}")
        if w_src.shape[0] != self.frame_len // 2 + 1:
            raise DimensionMismatchError(f"{w_src.shape[0]} bins do not match frame_len {self.frame_len}")
        if np.any(w_src < 0) or np.any(w_tgt < 0):
            raise ValueError("Dictionaries must be non-negative")
        if not np.allclose(w_src.sum(axis=0), 1.0, atol=1e-9):
            raise ValueError("Source dictionary columns must have unit L1 norm")
        object.__setattr__(self, 'w_src', w_src)
        object.__setattr__(self, 'w_tgt', w_tgt)

    @property
    def rank(self):
        return self.w_src.shape[1]


def _mel_log_features(mag, sample_rate, frame_len):
    bank = mel_filterbank(sample_rate, frame_len)
    return np.log(np.maximum((mag ** 2) @ bank.T, LOG_FLOOR))


def train_nmf(src_specs, tgt_specs, rank=DEFAULT_NMF_RANK, seed=DEFAULT_SEED, align=True):
    """
    Sample exemplar dictionaries from aligned source/target magnitude frames.

    R frame pairs are drawn evenly across the aligned corpus starting from a
    seeded offset; each pair is scaled by the L1 norm of its source column.
    """
    src_specs = list(src_specs)
    tgt_specs = list(tgt_specs)
    if len(src_specs) != len(tgt_specs):
        raise DimensionMismatchError(f"{len(src_specs)} source spectrograms but {len(tgt_specs)} targets")
    if not src_specs:
        raise InsufficientDataError("No training pairs for NMF")
    frame_len, hop = src_specs[0].frame_len, src_specs[0].hop

    src_frames, tgt_frames = [], []
    for s, t in zip(src_specs, tgt_specs):
        if (s.frame_len, s.hop) != (frame_len, hop) or (t.frame_len, t.hop) != (frame_len, hop):
            raise DimensionMismatchError("All spectrograms must share frame_len and hop")
        sm, tm = s.magnitude, t.magnitude
        if align:
            path = np.asarray(dtw_align(_mel_log_features(sm, s.sample_rate, frame_len),
                                        _mel_log_features(tm, t.sample_rate, frame_len)).pairs)
            sm, tm = sm[path[:, 0]], tm[path[:, 1]]
        elif sm.shape[0] != tm.shape[0]:
            raise DimensionMismatchError("Unaligned pairs must have equal frame counts")
        src_frames.append(sm)
        tgt_frames.append(tm)

    src_pool = np.vstack(src_frames)
    tgt_pool = np.vstack(tgt_frames)
    norms = src_pool.sum(axis=1)
    usable = norms > 0
    src_pool, tgt_pool, norms = src_pool[usable], tgt_pool[usable], norms[usable]
    available = src_pool.shape[0]
    if available < rank:
        raise InsufficientDataError(f"NMF rank {rank} exceeds the {available} aligned frames available")

    rng = np.random.default_rng(seed)
    stride = available / rank
    offset = rng.uniform(0.0, stride)
    picks = np.minimum(np.floor(offset + stride * np.arange(rank)).astype(int), available - 1)

    w_src = (src_pool[picks] / norms[picks, None]).T
    w_tgt = (tgt_pool[picks] / norms[picks, None]).T
    logger.info(f"Sampled {rank} exemplar pair(s) from {available} aligned frames")
    return NmfDictionaries(w_src, w_tgt, frame_len=frame_len, hop=hop)


def kl_divergence(v, wh):
    """Generalized Kullback-Leibler divergence D(V || WH)."""
    return float(np.sum(v * np.log(v / wh) - v + wh))


def nmf_activations(v, w, iters=DEFAULT_NMF_ITERS, h=None):
    """
    Multiplicative KL updates for H with W fixed.

    Returns:
        (H, kl) where kl[i] is the divergence after i updates (kl[0] at the start)
    """
    if iters < 1:
        raise ValueError(f"iters must be at least 1, got {iters}")
    v = np.maximum(np.asarray(v, dtype=np.float64), NMF_FLOOR)
    rank = w.shape[1]
    if h is None:
        h = np.full((rank, v.shape[1]), v.mean() / rank)
    column_sums = w.sum(axis=0)[:, None]
    wh = np.maximum(w @ h, NMF_FLOOR)
    history = [kl_divergence(v, wh)]
    for _ in range(iters):
        h = h * (w.T @ (v / wh)) / column_sums
        wh = np.maximum(w @ h, NMF_FLOOR)
        history.append(kl_divergence(v, wh))
    return h, history


def nmf_convert(seg, dicts, iters=DEFAULT_NMF_ITERS):
    """
    Replace the segment's magnitude spectrum by W_tgt H, where H >= 0 explains
    |STFT| through W_src. Input phase is kept.
    """
    if iters < 1:
        raise ValueError(f"iters must be at least 1, got {iters}")
    if len(seg) < dicts.frame_len:
        raise TooShortError(f"Segment of {len(seg)} samples is shorter than one frame ({dicts.frame_len})")
    spec = padded_stft(seg, dicts.frame_len, dicts.hop)
    v = spec.magnitude.T + NMF_FLOOR
    h, history = nmf_activations(v, dicts.w_src, iters)
    logger.debug(f"NMF conversion: KL {history[0]:.4g} -> {history[-1]:.4g} over {iters} iterations")
    converted = (dicts.w_tgt @ h).T
    out = spec.with_frames(converted * np.exp(1j * spec.phase))
    return padded_istft(out, len(seg))


def require(value, what, segment_name):
    """Raise a configuration error naming the segment when a prerequisite is missing."""
    if value is None:
        raise ConfigurationError(f"{what} required for segment {segment_name} but not provided")
    return value

