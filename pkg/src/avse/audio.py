"""Waveform I/O and short-time spectral features.

All audio is mono 16 kHz.  WAV files are 16-bit PCM; in memory, waveforms
are float64 in [-1, 1] (int16 sample / 32768).

The analysis front end is an STFT with FFT size 512 and hop 256, windowed
by the square root of a periodic Hann.  Using the same sqrt-Hann window for
analysis and synthesis makes the sum of shifted *squared* windows equal the
plain periodic-Hann overlap-add, which is exactly 1.0 at hop = N/2.  That
constant-power property is what makes windowed overlap-add reconstruction
exact up to rounding, without a normalization ramp in the interior.

Feature maps are log1p of the magnitude spectrum; enhancement works on that
compressed magnitude and reuses the noisy phase on the way back out.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
N_FFT = 512
HOP = 256
N_BINS = N_FFT // 2 + 1  # 257


def read_wav(path) -> np.ndarray:
    """Read a mono 16-bit PCM WAV as float64 in [-1, 1]."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        if w.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()}")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples) -> None:
    """Write float samples to mono 16-bit PCM, clipping to [-1, 1)."""
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


def _sqrt_hann(n: int = N_FFT) -> np.ndarray:
    # periodic Hann: 0.5 - 0.5 cos(2 pi k / n), k = 0..n-1
    k = np.arange(n)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)
    return np.sqrt(hann)


_WINDOW = _sqrt_hann()


def num_frames(n_samples: int) -> int:
    """Frame count for a waveform of n samples: 1 + ceil(max(0, n-512)/256)."""
    if n_samples <= N_FFT:
        return 1
    return 1 + int(np.ceil((n_samples - N_FFT) / HOP))


def stft(samples) -> np.ndarray:
    """Complex STFT, shape (T, 257).

    The waveform is zero-padded on the right so the last frame is full;
    frame t covers samples [t*256, t*256+512).  Waves shorter than one
    frame are rejected.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected 1-D waveform, got shape {x.shape}")
    if len(x) < N_FFT:
        raise ValueError(f"wave has {len(x)} samples, need at least {N_FFT}")
    t = num_frames(len(x))
    total = (t - 1) * HOP + N_FFT
    if len(x) < total:
        x = np.concatenate([x, np.zeros(total - len(x))])
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(t)[:, None]
    frames = x[idx] * _WINDOW[None, :]
    return np.fft.rfft(frames, n=N_FFT, axis=1)


def istft(spec, n_samples: int | None = None) -> np.ndarray:
    """Windowed overlap-add inverse of :func:`stft`.

    Divides by the accumulated squared-window coverage (clamped at 1e-10)
    so the half-covered edge frames come out right too; the interior
    coverage is exactly 1.
    """
    s = np.asarray(spec, dtype=np.complex128)
    if s.ndim != 2 or s.shape[1] != N_BINS:
        raise ValueError(f"expected (T, {N_BINS}) spectrogram, got {s.shape}")
    t = s.shape[0]
    total = (t - 1) * HOP + N_FFT
    frames = np.fft.irfft(s, n=N_FFT, axis=1) * _WINDOW[None, :]
    out = np.zeros(total)
    cover = np.zeros(total)
    wsq = _WINDOW * _WINDOW
    for i in range(t):
        out[i * HOP:i * HOP + N_FFT] += frames[i]
        cover[i * HOP:i * HOP + N_FFT] += wsq
    out /= np.maximum(cover, 1e-10)
    if n_samples is not None:
        if n_samples > total:
            out = np.concatenate([out, np.zeros(n_samples - total)])
        else:
            out = out[:n_samples]
    return out


ENERGY_FRAME = 256
SILENCE_DB = 40.0


def frame_energies(samples, frame: int = ENERGY_FRAME) -> np.ndarray:
    """Mean power of consecutive non-overlapping frames (tail kept)."""
    x = np.asarray(samples, dtype=np.float64)
    n_full = len(x) // frame
    e = np.mean(x[:n_full * frame].reshape(n_full, frame) ** 2, axis=1)
    if len(x) % frame:
        e = np.append(e, np.mean(x[n_full * frame:] ** 2))
    return e


def active_sample_mask(reference, frame: int = ENERGY_FRAME,
                       threshold_db: float = SILENCE_DB) -> np.ndarray:
    """Boolean per-sample mask of frames within threshold_db of the
    loudest frame of ``reference``.  This is the shared silence criterion:
    SNRs are defined over these samples only."""
    x = np.asarray(reference, dtype=np.float64)
    e = frame_energies(x, frame)
    peak = float(e.max()) if len(e) else 0.0
    active = e > peak * 10.0 ** (-threshold_db / 10.0) if peak > 0 else e > 0
    return np.repeat(active, frame)[:len(x)]


def silence_fraction(samples, frame: int = ENERGY_FRAME) -> float:
    """Fraction of frames more than 40 dB below the loudest frame."""
    x = np.asarray(samples, dtype=np.float64)
    e = frame_energies(x, frame)
    peak = float(e.max()) if len(e) else 0.0
    if peak <= 0:
        return 1.0
    return float(np.mean(e <= peak * 10.0 ** (-SILENCE_DB / 10.0)))


def log1p_mag(spec) -> np.ndarray:
    """Spectrogram -> nonnegative feature frames, ln(1 + |bin|)."""
    return np.log1p(np.abs(np.asarray(spec)))


def expm1_mag(feat) -> np.ndarray:
    """Feature frames -> magnitudes, exp(v) - 1; negatives clamp to zero
    magnitude so network outputs below the feature floor stay valid."""
    return np.expm1(np.maximum(np.asarray(feat, dtype=np.float64), 0.0))


def istft_with_phase(mag, phase_source, n_samples: int | None = None) -> np.ndarray:
    """Combine magnitudes with the phase angles of a complex spectrogram,
    then overlap-add back to a waveform."""
    mag = np.asarray(mag, dtype=np.float64)
    src = np.asarray(phase_source, dtype=np.complex128)
    if mag.shape != src.shape:
        raise ValueError(f"magnitude {mag.shape} vs phase source {src.shape}")
    a = np.abs(src)
    unit = np.where(a > 0, src / np.maximum(a, 1e-300), 1.0)
    return istft(mag * unit, n_samples)


def features(samples) -> tuple[np.ndarray, np.ndarray]:
    """Waveform -> (log1p magnitude (T, 257) float64, complex STFT (T, 257)).

    The second element keeps the full complex spectrogram so callers can
    reuse its phase for reconstruction.
    """
    spec = stft(samples)
    return np.log1p(np.abs(spec)), spec


def reconstruct(log_mag, phase_source, n_samples: int | None = None) -> np.ndarray:
    """Inverse of :func:`features`: expm1 the features, borrow the phase."""
    return istft_with_phase(expm1_mag(log_mag), phase_source, n_samples)
