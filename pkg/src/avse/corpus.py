"""Deterministic synthetic audio-visual corpus.

There is no recorded data anywhere in this project.  Clean "speech" is a
harmonic stack with slow amplitude modulation and a breathy noise floor,
alternating with silences; noises are six procedurally generated kinds;
lip frames are rendered ellipses whose opening tracks the speech envelope.
That last correlation is the causal structure the audio-visual model is
supposed to exploit, so the generator keeps it strong and measurable.

Everything is a pure function of seeds.  Per-utterance seeds are derived
from a master seed through fixed stream codes, so train and test material
can never share a random stream, and regenerating a corpus reproduces it
byte for byte.

Directory layout::

    <out>/{train,test}/clean/utt0000.wav
    <out>/{train,test}/noisy/utt0000_white_snr+06.wav
    <out>/{train,test}/lips/utt0000/frame000.ppm
    <out>/manifest.csv

The manifest records, per noisy file: id, split, clean/noisy/lips paths
(relative to the manifest), snr_db, noise kind, the peak-protection scale
applied to the mix (1.0 when none), and the seeds involved.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio

NOISE_KINDS = ("white", "pink", "babble", "engine", "street", "music")
TRAIN_SNRS = (-12, -6, 0, 6, 12)
TEST_SNRS = (-1, -4, -7, -10)
FPS_V = 25

# stream codes keep every random stream of the corpus disjoint
_STREAM_CLEAN = {"train": 0, "test": 1}
_STREAM_LIPS = {"train": 2, "test": 3}
_STREAM_NOISE = {"train": 4, "test": 5}

# Paths opened by the corpus loaders, for tests that assert a training
# mode never touched a class of files.  Cleared by callers.
AUDIT: list[str] = []


def _rng(seed) -> np.random.Generator:
    entropy = seed if isinstance(seed, (list, tuple)) else [seed]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class CorpusConfig:
    n_train_utt: int = 40
    n_test_utt: int = 12
    duration_s: float = 3.0
    train_snrs_db: tuple = TRAIN_SNRS
    test_snrs_db: tuple = TEST_SNRS
    train_noise_kinds: tuple = ("white", "babble", "engine")
    test_noise_kinds: tuple = ("pink", "street", "music")
    fps_v: int = FPS_V
    master_seed: int = 0

    def __post_init__(self):
        overlap = set(self.train_noise_kinds) & set(self.test_noise_kinds)
        if overlap:
            raise ValueError(f"train/test noise kinds overlap: {sorted(overlap)}")
        unknown = (set(self.train_noise_kinds) | set(self.test_noise_kinds)) - set(NOISE_KINDS)
        if unknown:
            raise ValueError(f"unknown noise kinds: {sorted(unknown)}")
        if self.duration_s < 0.5:
            raise ValueError("duration_s must be at least 0.5")


def _segment_plan(rng: np.random.Generator, duration_s: float):
    """Split the timeline into voiced spans and silences totalling 24-36%."""
    silence_frac = rng.uniform(0.24, 0.36)
    n_voiced = int(rng.integers(2, 5))
    sil_total = silence_frac * duration_s
    voi_total = duration_s - sil_total
    sil_w = rng.uniform(0.5, 1.5, size=n_voiced + 1)
    sil_lens = sil_w / sil_w.sum() * sil_total
    voi_w = rng.uniform(0.7, 1.3, size=n_voiced)
    voi_lens = voi_w / voi_w.sum() * voi_total
    spans = []
    t = sil_lens[0]
    for i in range(n_voiced):
        spans.append((t, t + voi_lens[i]))
        t += voi_lens[i] + sil_lens[i + 1]
    return spans


def gen_clean(seed, duration_s: float = 3.0, fs: int = audio.SAMPLE_RATE) -> np.ndarray:
    """Speech-like clean signal: voiced harmonic spans over silence.

    Each voiced span has its own fundamental in 90-250 Hz, 3 to 8 harmonics
    with 1/k amplitude decay, a slow amplitude modulation, and a breathy
    white-noise floor shaped by the same modulation (it keeps the upper
    spectrum alive, which the intelligibility metric's high bands need).
    Peak-normalized to 0.5.
    """
    if duration_s < 0.5:
        raise ValueError("duration_s must be at least 0.5")
    rng = _rng(seed)
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    out = np.zeros(n)
    for (t0, t1) in _segment_plan(rng, duration_s):
        f0 = rng.uniform(90.0, 250.0)
        n_harm = int(rng.integers(3, 9))
        am_f = rng.uniform(1.5, 4.0)
        am_ph = rng.uniform(0.0, 2.0 * np.pi)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_harm)
        breath = rng.standard_normal(n)
        i0, i1 = int(t0 * fs), min(int(t1 * fs), n)
        if i1 <= i0:
            continue
        seg_t = t[i0:i1]
        tone = np.zeros(i1 - i0)
        for k in range(1, n_harm + 1):
            tone += np.sin(2.0 * np.pi * k * f0 * seg_t + phases[k - 1]) / k
        am = 0.6 + 0.4 * np.sin(2.0 * np.pi * am_f * seg_t + am_ph)
        # 10 ms raised-cosine edges prevent clicks at span boundaries
        ramp = np.ones(i1 - i0)
        m = min(int(0.01 * fs), (i1 - i0) // 2)
        if m > 0:
            edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
            ramp[:m] = edge
            ramp[-m:] = edge[::-1]
        seg = (tone + 0.10 * breath[i0:i1]) * am * ramp
        out[i0:i1] += seg
    peak = float(np.max(np.abs(out)))
    if peak > 0:
        out *= 0.5 / peak
    return out


def _unit_rms(x: np.ndarray) -> np.ndarray:
    rms = float(np.sqrt(np.mean(x * x)))
    if rms <= 0:
        raise ValueError("zero-power noise candidate")
    return x / rms


def gen_noise(kind: str, seed, duration_s: float = 3.0,
              fs: int = audio.SAMPLE_RATE) -> np.ndarray:
    """One of six procedural noise kinds, unit RMS."""
    rng = _rng(seed if isinstance(seed, (list, tuple)) else [seed])
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    if kind == "white":
        x = rng.uniform(-1.0, 1.0, size=n)
    elif kind == "pink":
        x = _pink(rng, n)
    elif kind == "babble":
        base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
        streams = [gen_clean(base + [1000 + k], duration_s, fs) for k in range(6)]
        x = np.sum(streams, axis=0)
    elif kind == "engine":
        f0 = rng.uniform(25.0, 45.0)
        x = np.zeros(n)
        for k in range(1, 41):
            x += np.sin(2.0 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
        x += 0.3 * _pink(rng, n)
    elif kind == "street":
        x = _pink(rng, n)
        for _ in range(int(rng.integers(3, 9))):
            pos = int(rng.integers(0, max(1, n - 800)))
            width = int(rng.integers(80, 800))
            burst = rng.standard_normal(width) * np.exp(-np.arange(width) / (width / 4.0))
            x[pos:pos + width] += 4.0 * burst[:max(0, min(width, n - pos))]
    elif kind == "music":
        x = np.zeros(n)
        scale = 220.0 * 2.0 ** (np.array([0, 2, 4, 7, 9, 12, 14, 16]) / 12.0)
        chord_len = rng.uniform(0.4, 0.8)
        t0 = 0.0
        while t0 < duration_s:
            tones = rng.choice(scale, size=3, replace=False)
            i0, i1 = int(t0 * fs), min(int((t0 + chord_len) * fs), n)
            if i1 <= i0:
                break
            seg_t = t[i0:i1]
            ramp = np.ones(i1 - i0)
            m = min(int(0.02 * fs), (i1 - i0) // 2)
            if m > 0:
                edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
                ramp[:m] = edge
                ramp[-m:] = edge[::-1]
            for f in tones:
                x[i0:i1] += np.sin(2.0 * np.pi * f * seg_t + rng.uniform(0, 2 * np.pi)) * ramp / 3.0
            t0 += chord_len
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return _unit_rms(x)


def _pink(rng: np.random.Generator, n: int) -> np.ndarray:
    """Gaussian noise shaped in the frequency domain to a 1/f power slope."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n)
    scale = np.zeros_like(f)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    return np.fft.irfft(spec * scale, n=n)


@dataclass(frozen=True)
class MixInfo:
    alpha: float          # noise scale hitting the target SNR
    peak_scale: float     # joint rescale applied afterwards (1.0 = none)


def mix_at_snr(clean, noise, snr_db: float) -> tuple[np.ndarray, MixInfo]:
    """clean + alpha*noise at the requested SNR over non-silent clean frames.

    Noise shorter than clean is tiled.  If the mix exceeds full scale,
    clean and scaled noise are rescaled together (preserving the SNR) so
    the peak sits at 1.0; the factor is reported for the manifest.
    An infinite snr_db returns the clean signal unchanged.
    """
    c = np.asarray(clean, dtype=np.float64)
    n = np.asarray(noise, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return c.copy(), MixInfo(alpha=0.0, peak_scale=1.0)
    if len(n) < len(c):
        reps = int(np.ceil(len(c) / len(n)))
        n = np.tile(n, reps)
    n = n[:len(c)]
    mask = audio.active_sample_mask(c)
    p_clean = float(np.mean(c[mask] ** 2)) if mask.any() else 0.0
    p_noise = float(np.mean(n[mask] ** 2)) if mask.any() else 0.0
    if p_clean <= 0:
        raise ValueError("clean signal has no active power")
    if p_noise <= 0:
        raise ValueError("noise has no power over the active region")
    alpha = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    noisy = c + alpha * n
    peak = float(np.max(np.abs(noisy)))
    gamma = 1.0 if peak <= 1.0 else 1.0 / peak
    return noisy * gamma, MixInfo(alpha=alpha, peak_scale=gamma)


def speech_envelope(clean_wave, fps_v: int = FPS_V,
                    fs: int = audio.SAMPLE_RATE) -> np.ndarray:
    """Per-video-frame short-time RMS of the wave, normalized to [0, 1]."""
    x = np.asarray(clean_wave, dtype=np.float64)
    n_frames = int(np.ceil(len(x) / fs * fps_v))
    env = np.zeros(n_frames)
    for k in range(n_frames):
        i0 = int(round(k * fs / fps_v))
        i1 = min(int(round((k + 1) * fs / fps_v)), len(x))
        if i1 > i0:
            env[k] = np.sqrt(np.mean(x[i0:i1] ** 2))
    top = float(env.max())
    return env / top if top > 0 else env


def gen_lip_frames(clean_wave, fps_v: int = FPS_V, fs: int = audio.SAMPLE_RATE,
                   seed=0) -> np.ndarray:
    """Render lip frames (N, 3, 64, 64) whose mouth opening follows the
    speech envelope.

    Scene: smooth per-seed background gradient, an elliptical face patch
    in a per-seed skin tone, a lip ring, and a dark mouth ellipse centered
    at column 32, row 40 with horizontal radius 18 and vertical radius
    2 + 14*env(t).
    """
    rng = _rng(seed)
    env = speech_envelope(clean_wave, fps_v, fs)
    yy, xx = np.mgrid[0:64, 0:64].astype(np.float64)

    bg_top = rng.uniform(0.05, 0.35, size=3)
    bg_bot = rng.uniform(0.05, 0.35, size=3)
    tex_f = rng.uniform(0.5, 1.5)
    tex_ph = rng.uniform(0.0, 2.0 * np.pi)
    skin = np.array([rng.uniform(0.55, 0.85)])
    skin = np.array([skin[0], skin[0] * rng.uniform(0.72, 0.85),
                     skin[0] * rng.uniform(0.55, 0.7)])
    lip = np.array([rng.uniform(0.55, 0.75), 0.15, 0.18])

    grad = yy / 63.0
    tex = 0.03 * np.sin(2.0 * np.pi * tex_f * xx / 64.0 + tex_ph)
    base = np.empty((3, 64, 64))
    for ch in range(3):
        base[ch] = bg_top[ch] + (bg_bot[ch] - bg_top[ch]) * grad + tex

    face = ((xx - 32.0) / 27.0) ** 2 + ((yy - 33.0) / 31.0) ** 2
    face_a = np.clip((1.0 - face) * 6.0, 0.0, 1.0)
    for ch in range(3):
        base[ch] = base[ch] * (1.0 - face_a) + skin[ch] * face_a

    frames = np.empty((len(env), 3, 64, 64))
    for k, e in enumerate(env):
        rv = 2.0 + 14.0 * e
        mouth = ((xx - 32.0) / 18.0) ** 2 + ((yy - 40.0) / rv) ** 2
        ring = ((xx - 32.0) / (18.0 + 2.5)) ** 2 + ((yy - 40.0) / (rv + 2.5)) ** 2
        ring_a = np.clip((1.0 - ring) * 5.0, 0.0, 1.0)
        mouth_a = np.clip((1.0 - mouth) * 5.0, 0.0, 1.0)
        img = base.copy()
        for ch in range(3):
            img[ch] = img[ch] * (1.0 - ring_a) + lip[ch] * ring_a
        dark = np.array([0.12, 0.04, 0.05])
        for ch in range(3):
            img[ch] = img[ch] * (1.0 - mouth_a) + dark[ch] * mouth_a
        frames[k] = np.clip(img, 0.0, 1.0)
    return frames


@dataclass
class ManifestRecord:
    id: str
    split: str
    utt: str
    clean_path: str
    noisy_path: str
    lips_dir: str
    snr_db: float
    noise_kind: str
    peak_scale: float
    seed_clean: int
    seed_lips: int


MANIFEST_COLUMNS = ("id", "split", "utt", "clean_path", "noisy_path", "lips_dir",
                    "snr_db", "noise_kind", "peak_scale", "seed_clean", "seed_lips")


def write_manifest(path, records: list[ManifestRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([r.id, r.split, r.utt, r.clean_path, r.noisy_path,
                        r.lips_dir, repr(float(r.snr_db)), r.noise_kind,
                        repr(float(r.peak_scale)), r.seed_clean, r.seed_lips])


def read_manifest(path) -> list[ManifestRecord]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: unexpected manifest columns {reader.fieldnames}")
        for row in reader:
            out.append(ManifestRecord(
                id=row["id"], split=row["split"], utt=row["utt"],
                clean_path=row["clean_path"], noisy_path=row["noisy_path"],
                lips_dir=row["lips_dir"], snr_db=float(row["snr_db"]),
                noise_kind=row["noise_kind"], peak_scale=float(row["peak_scale"]),
                seed_clean=int(row["seed_clean"]), seed_lips=int(row["seed_lips"])))
    return out


def check_manifest(records: list[ManifestRecord], base_dir) -> None:
    """Integrity: ids unique, every referenced file present."""
    base = Path(base_dir)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate manifest ids")
    for r in records:
        for p in (r.clean_path, r.noisy_path):
            if not (base / p).is_file():
                raise FileNotFoundError(f"manifest references missing file {p}")
        lips = base / r.lips_dir
        if not lips.is_dir() or not any(lips.glob("frame*.ppm")):
            raise FileNotFoundError(f"manifest references missing lips {r.lips_dir}")


def load_wav(path) -> np.ndarray:
    AUDIT.append(str(path))
    return audio.read_wav(path)


def load_lips(lips_dir) -> np.ndarray:
    """All PPM frames of one utterance, ordered, as (N, 3, 64, 64)."""
    from . import ae
    paths = sorted(Path(lips_dir).glob("frame*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no lip frames under {lips_dir}")
    AUDIT.extend(str(p) for p in paths)
    return np.stack([ae.read_ppm(p) for p in paths])


def _snr_tag(snr_db) -> str:
    v = int(round(snr_db))
    return f"snr{v:+03d}"


def build_corpus(cfg: CorpusConfig, out_dir) -> list[ManifestRecord]:
    """Generate the full corpus and its manifest; returns the records.

    Train and test draw from disjoint seed streams, noise kinds, and SNR
    sets, so no (noise kind, SNR) pair and no random stream is shared.
    """
    from . import ae
    out = Path(out_dir)
    records: list[ManifestRecord] = []
    plan = (
        ("train", cfg.n_train_utt, cfg.train_snrs_db, cfg.train_noise_kinds),
        ("test", cfg.n_test_utt, cfg.test_snrs_db, cfg.test_noise_kinds),
    )
    for split, n_utt, snrs, kinds in plan:
        for i in range(n_utt):
            utt = f"utt{i:04d}"
            seed_clean = [cfg.master_seed, _STREAM_CLEAN[split], i]
            seed_lips = [cfg.master_seed, _STREAM_LIPS[split], i]
            clean = gen_clean(seed_clean, cfg.duration_s)
            clean_rel = f"{split}/clean/{utt}.wav"
            audio.write_wav(out / clean_rel, clean)
            lips_rel = f"{split}/lips/{utt}"
            frames = gen_lip_frames(clean, cfg.fps_v, audio.SAMPLE_RATE, seed_lips)
            for k in range(len(frames)):
                ae.write_ppm(out / lips_rel / f"frame{k:03d}.ppm", frames[k])
            for kind in kinds:
                for snr in snrs:
                    seed_noise = [cfg.master_seed, _STREAM_NOISE[split], i,
                                  NOISE_KINDS.index(kind), int(round(snr)) + 1000]
                    noise = gen_noise(kind, seed_noise, cfg.duration_s)
                    noisy, info = mix_at_snr(clean, noise, snr)
                    rid = f"{split}_{utt}_{kind}_{_snr_tag(snr)}"
                    noisy_rel = f"{split}/noisy/{utt}_{kind}_{_snr_tag(snr)}.wav"
                    audio.write_wav(out / noisy_rel, noisy)
                    records.append(ManifestRecord(
                        id=rid, split=split, utt=f"{split}_{utt}",
                        clean_path=clean_rel, noisy_path=noisy_rel,
                        lips_dir=lips_rel, snr_db=float(snr), noise_kind=kind,
                        peak_scale=info.peak_scale,
                        seed_clean=i, seed_lips=i))
    write_manifest(out / "manifest.csv", records)
    return records
