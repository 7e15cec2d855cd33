"""Objective evaluation: intelligibility (STOI), distortion (SI-SDR), SNR.

The intelligibility score follows the standard short-time
correlation-of-band-envelopes construction: both signals are resampled to
10 kHz, frames where the reference is more than 40 dB below its loudest
frame are removed, one-third-octave band envelopes are formed from a
256/128 Hann STFT zero-padded to 512 points, and length-30 segment vectors
of the processed envelope are normalized, clipped at -15 dB SDR, and
correlated with the reference.  The final score is the mean correlation
over all bands and segments; for sane signals it lives in [0, 1] but the
formula itself can dip slightly negative, and the raw value is reported.

SI-SDR is the scale-invariant ratio: the estimate is projected onto the
reference and the energy split between projection and residual is reported
in dB (math.inf when the residual vanishes).

All constants are fixed; none are tunable at call sites.  Every function
here is pure.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio, corpus, model as model_mod

EPS = np.finfo(np.float64).eps

STOI_FS = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_NBANDS = 15
STOI_CF0 = 150.0
STOI_SEG = 30          # frames per segment (384 ms at 10 kHz)
STOI_RANGE_DB = 40.0
STOI_BETA = -15.0

_RESAMPLE_L = 5
_RESAMPLE_M = 8
_RESAMPLE_TAPS_PER_PHASE = 64


def _resample_filter() -> np.ndarray:
    """Kaiser-windowed sinc prototype for the 16 kHz -> 10 kHz resampler:
    5 phases x 64 taps, cutoff at the 5 kHz output Nyquist, gain L."""
    n = _RESAMPLE_L * _RESAMPLE_TAPS_PER_PHASE
    center = (n - 1) / 2.0
    k = np.arange(n) - center
    cutoff = 1.0 / (2.0 * _RESAMPLE_M)  # relative to the upsampled rate
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * k)
    return _RESAMPLE_L * h * np.kaiser(n, 8.0)


_H_RESAMPLE = _resample_filter()


def _fft_convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = len(x) + len(h) - 1
    nfft = 1 << (n - 1).bit_length()
    y = np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)
    return y[:n]


def resample_16k_to_10k(x: np.ndarray) -> np.ndarray:
    """Rational 5/8 resampler: zero-stuff, lowpass, decimate."""
    x = np.asarray(x, dtype=np.float64)
    up = np.zeros(len(x) * _RESAMPLE_L)
    up[::_RESAMPLE_L] = x
    full = _fft_convolve(up, _H_RESAMPLE)
    out_len = int(len(x) * _RESAMPLE_L / _RESAMPLE_M)
    delay = len(_H_RESAMPLE) // 2
    idx = delay + _RESAMPLE_M * np.arange(out_len)
    idx = idx[idx < len(full)]
    return full[idx]


def _frame(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n = 1 + (len(x) - frame) // hop if len(x) >= frame else 0
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


_STOI_WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(STOI_FRAME) / STOI_FRAME)


def _remove_silent_frames(clean: np.ndarray, proc: np.ndarray):
    """Drop frames where the windowed clean energy is > 40 dB below its
    maximum, then overlap-add the surviving frames back into signals."""
    cf = _frame(clean, STOI_FRAME, STOI_HOP) * _STOI_WINDOW
    pf = _frame(proc, STOI_FRAME, STOI_HOP) * _STOI_WINDOW
    if len(cf) == 0:
        raise ValueError("signal shorter than one analysis frame")
    energy = 20.0 * np.log10(np.linalg.norm(cf, axis=1) + EPS)
    keep = energy > (energy.max() - STOI_RANGE_DB)
    cf, pf = cf[keep], pf[keep]
    if len(cf) == 0:
        raise ValueError("no frames above the silence threshold")
    out_len = (len(cf) - 1) * STOI_HOP + STOI_FRAME
    c_out = np.zeros(out_len)
    p_out = np.zeros(out_len)
    for i in range(len(cf)):
        c_out[i * STOI_HOP:i * STOI_HOP + STOI_FRAME] += cf[i]
        p_out[i * STOI_HOP:i * STOI_HOP + STOI_FRAME] += pf[i]
    return c_out, p_out


def third_octave_band_masks(fs: int = STOI_FS, nfft: int = STOI_NFFT,
                            n_bands: int = STOI_NBANDS,
                            cf0: float = STOI_CF0) -> np.ndarray:
    """(n_bands, nfft//2+1) boolean masks; band k spans
    [cf*2^(-1/6), cf*2^(1/6)) around cf = cf0 * 2^(k/3)."""
    f = np.arange(nfft // 2 + 1) * (fs / nfft)
    masks = np.zeros((n_bands, len(f)), dtype=bool)
    for k in range(n_bands):
        cf = cf0 * 2.0 ** (k / 3.0)
        lo, hi = cf * 2.0 ** (-1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)
        masks[k] = (f >= lo) & (f < hi)
    return masks


_OBM = third_octave_band_masks()


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    """Signal (10 kHz) -> (T, 15) one-third-octave band magnitudes."""
    frames = _frame(x, STOI_FRAME, STOI_HOP) * _STOI_WINDOW
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2)
    return np.sqrt(power @ _OBM.T)


def stoi(clean, processed, fs: int = audio.SAMPLE_RATE) -> float:
    """Short-time objective intelligibility of ``processed`` against
    ``clean``.  Signals must share length; fs must be 16000 or 10000."""
    c = np.asarray(clean, dtype=np.float64)
    p = np.asarray(processed, dtype=np.float64)
    if c.shape != p.shape:
        raise ValueError(f"length mismatch: {c.shape} vs {p.shape}")
    if fs == audio.SAMPLE_RATE:
        c = resample_16k_to_10k(c)
        p = resample_16k_to_10k(p)
    elif fs != STOI_FS:
        raise ValueError(f"unsupported sample rate {fs}")
    c, p = _remove_silent_frames(c, p)
    xb = _band_envelopes(c)
    yb = _band_envelopes(p)
    if len(xb) < STOI_SEG:
        raise ValueError(
            f"too short after silence removal: {len(xb)} frames < {STOI_SEG}")
    clip_factor = 1.0 + 10.0 ** (-STOI_BETA / 20.0)
    total = 0.0
    count = 0
    for m in range(len(xb) - STOI_SEG + 1):
        x = xb[m:m + STOI_SEG]              # (30, 15)
        y = yb[m:m + STOI_SEG]
        scale = np.linalg.norm(x, axis=0) / (np.linalg.norm(y, axis=0) + EPS)
        y = np.minimum(y * scale, x * clip_factor)
        xc = x - x.mean(axis=0)
        yc = y - y.mean(axis=0)
        r = np.sum(xc * yc, axis=0) / (
            np.linalg.norm(xc, axis=0) * np.linalg.norm(yc, axis=0) + EPS)
        total += float(np.sum(r))
        count += x.shape[1]
    return total / count


def si_sdr(clean, estimate) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    A residual whose power sits below double-precision rounding of the
    projection (relative 1e-28) counts as zero and returns math.inf; a
    scaled copy of the clean signal therefore hits the sentinel even
    though elementwise rounding leaves femto-scale dust.
    """
    s = np.asarray(clean, dtype=np.float64)
    x = np.asarray(estimate, dtype=np.float64)
    if s.shape != x.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {x.shape}")
    den = float(np.dot(s, s))
    if den <= 0:
        raise ValueError("zero clean signal")
    s_t = (float(np.dot(x, s)) / den) * s
    e = x - s_t
    p_e = float(np.dot(e, e))
    p_t = float(np.dot(s_t, s_t))
    if p_t == 0.0:
        return -math.inf   # estimate carries no clean component at all
    if p_e == 0.0 or p_e < p_t * 1e-28:
        return math.inf
    return 10.0 * math.log10(p_t / p_e)


def measure_snr(clean, noisy) -> float:
    """SNR of ``noisy`` against ``clean`` over non-silent clean frames,
    using the corpus silence criterion.  math.inf when they are equal."""
    c = np.asarray(clean, dtype=np.float64)
    y = np.asarray(noisy, dtype=np.float64)
    if c.shape != y.shape:
        raise ValueError(f"length mismatch: {c.shape} vs {y.shape}")
    mask = audio.active_sample_mask(c)
    if not mask.any():
        raise ValueError("clean signal has no active frames")
    p_c = float(np.mean(c[mask] ** 2))
    p_n = float(np.mean((y - c)[mask] ** 2))
    if p_n == 0.0:
        return math.inf
    return 10.0 * math.log10(p_c / p_n)


@dataclass
class EvalRow:
    id: str
    snr_db: float
    noise: str
    stoi_noisy: float
    stoi_enh: float
    sisdr_noisy: float
    sisdr_enh: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregate: list[dict]   # one dict per SNR plus an "all" row


def evaluate(records, base_dir, se_model, ae_model,
             quantize_visual: bool = True, rows_path=None,
             agg_path=None, progress=None) -> EvalReport:
    """Enhance every manifest record and score noisy vs enhanced.

    The reference is the peak-scale-adjusted clean signal, the exact
    clean component inside the mix.  Rows are ordered by record id.
    """
    base = Path(base_dir)
    rows: list[EvalRow] = []
    for r in sorted(records, key=lambda rec: rec.id):
        clean = corpus.load_wav(base / r.clean_path) * r.peak_scale
        noisy = corpus.load_wav(base / r.noisy_path)
        lips = None
        if se_model.mode == "avse":
            lips = corpus.load_lips(base / r.lips_dir)
        enhanced = model_mod.enhance_utterance(
            se_model, ae_model, noisy, lip_frames=lips,
            quantize_visual=quantize_visual)
        rows.append(EvalRow(
            id=r.id, snr_db=r.snr_db, noise=r.noise_kind,
            stoi_noisy=stoi(clean, noisy), stoi_enh=stoi(clean, enhanced),
            sisdr_noisy=si_sdr(clean, noisy), sisdr_enh=si_sdr(clean, enhanced)))
        if progress is not None:
            progress(rows[-1])
    report = EvalReport(rows=rows, aggregate=_aggregate(rows))
    if rows_path is not None:
        write_rows_csv(rows_path, report.rows)
    if agg_path is not None:
        write_aggregate_csv(agg_path, report.aggregate)
    return report


def _aggregate(rows: list[EvalRow]) -> list[dict]:
    def mean_over(subset, field):
        return sum(getattr(r, field) for r in subset) / len(subset)
    out = []
    for snr in sorted({r.snr_db for r in rows}):
        sub = [r for r in rows if r.snr_db == snr]
        out.append({"snr_db": snr, "n": len(sub),
                    "stoi_noisy": mean_over(sub, "stoi_noisy"),
                    "stoi_enh": mean_over(sub, "stoi_enh"),
                    "sisdr_noisy": mean_over(sub, "sisdr_noisy"),
                    "sisdr_enh": mean_over(sub, "sisdr_enh")})
    out.append({"snr_db": "all", "n": len(rows),
                "stoi_noisy": mean_over(rows, "stoi_noisy"),
                "stoi_enh": mean_over(rows, "stoi_enh"),
                "sisdr_noisy": mean_over(rows, "sisdr_noisy"),
                "sisdr_enh": mean_over(rows, "sisdr_enh")})
    return out


ROWS_HEADER = ("id", "snr_db", "noise", "stoi_noisy", "stoi_enh",
               "sisdr_noisy", "sisdr_enh")
AGG_HEADER = ("snr_db", "n", "stoi_noisy", "stoi_enh", "sisdr_noisy", "sisdr_enh")


def write_rows_csv(path, rows: list[EvalRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ROWS_HEADER)
        for r in rows:
            w.writerow([r.id, repr(r.snr_db), r.noise, repr(r.stoi_noisy),
                        repr(r.stoi_enh), repr(r.sisdr_noisy), repr(r.sisdr_enh)])


def write_aggregate_csv(path, aggregate: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(AGG_HEADER)
        for row in aggregate:
            snr = row["snr_db"]
            w.writerow([snr if isinstance(snr, str) else repr(snr), row["n"],
                        repr(row["stoi_noisy"]), repr(row["stoi_enh"]),
                        repr(row["sisdr_noisy"]), repr(row["sisdr_enh"])])


def read_aggregate_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            snr = row["snr_db"]
            out.append({"snr_db": snr if snr == "all" else float(snr),
                        "n": int(row["n"]),
                        "stoi_noisy": float(row["stoi_noisy"]),
                        "stoi_enh": float(row["stoi_enh"]),
                        "sisdr_noisy": float(row["sisdr_noisy"]),
                        "sisdr_enh": float(row["sisdr_enh"])})
    return out
