"""Audio-visual speech enhancement model and its audio-only baseline.

Signal path (avse mode): per-frame audio net (257 -> 512 -> 257, ReLU
after each) pre-enhances the noisy log1p features; its output is
concatenated with the 2048-dim dequantized lip latent of the aligned video
frame; an LSTM (hidden 256) runs over the frame sequence; two FC layers
(hidden -> 512 ReLU -> 2305 linear) produce both heads, audio being the
first 257 columns and visual the remaining 2048.

The audio-only baseline drops the visual input and head and widens the
LSTM (hidden 800) so its parameter count lands within a fraction of a
percent of the avse model; the constructor asserts the two counts agree
within 10%.  Comparisons between the two are then about information, not
capacity.

The visual branch sees only what a deployed sensor would ship: latents
quantized to 4-bit codes and dequantized (one codec window per frame).
The visual head's training target is that same dequantized latent.

Loss: mse(audio_hat, clean_features) + mu * mse(visual_hat, visual_dequant)
with mu = 1e-3.  Training is one Adam step per utterance, manifest order,
validation on the last tenth of utterances, best-validation checkpoint.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from . import ae as ae_mod
from . import audio, corpus, eofp, nnet

AUDIO_DIM = audio.N_BINS          # 257
VISUAL_DIM = ae_mod.LATENT_DIM    # 2048
FUSION_WIDTH = 512
AVSE_HIDDEN = 256
AUDIO_ONLY_HIDDEN = 800
MU_DEFAULT = 1e-3


def param_count(mode: str) -> int:
    """Closed-form parameter count for either model variant."""
    def dense(i, o):
        return i * o + o
    a_net = dense(AUDIO_DIM, 512) + dense(512, AUDIO_DIM)
    if mode == "avse":
        d_in, hidden, d_out = AUDIO_DIM + VISUAL_DIM, AVSE_HIDDEN, AUDIO_DIM + VISUAL_DIM
    elif mode == "audio_only":
        d_in, hidden, d_out = AUDIO_DIM, AUDIO_ONLY_HIDDEN, AUDIO_DIM
    else:
        raise ValueError(f"unknown mode {mode!r}")
    lstm = 4 * hidden * (d_in + hidden + 1)
    return a_net + lstm + dense(hidden, FUSION_WIDTH) + dense(FUSION_WIDTH, d_out)


class SeNet:
    """The enhancement model; ``mode`` picks avse or the audio-only twin."""

    def __init__(self, mode: str = "avse", seed: int = 0):
        if mode not in ("avse", "audio_only"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.seed = seed
        self.hidden = AVSE_HIDDEN if mode == "avse" else AUDIO_ONLY_HIDDEN
        lstm_in = AUDIO_DIM + (VISUAL_DIM if mode == "avse" else 0)
        out_dim = AUDIO_DIM + (VISUAL_DIM if mode == "avse" else 0)

        parity = abs(param_count("audio_only") - param_count("avse")) / param_count("avse")
        if parity > 0.10:
            raise AssertionError(
                f"model variants differ by {parity:.1%} in parameter count")

        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        self.audio_net = nnet.Sequential(
            nnet.Dense(AUDIO_DIM, 512, rng), nnet.ReLU(),
            nnet.Dense(512, AUDIO_DIM, rng), nnet.ReLU(),
        )
        self.lstm = nnet.LSTM(lstm_in, self.hidden, rng)
        self.fc1 = nnet.Dense(self.hidden, FUSION_WIDTH, rng)
        self.relu = nnet.ReLU()
        self.fc2 = nnet.Dense(FUSION_WIDTH, out_dim, rng)

    def params(self) -> dict[str, np.ndarray]:
        out = self.audio_net.named_params("a.")
        for k, v in self.lstm.p.items():
            out[f"lstm.{k}"] = v
        for k, v in self.fc1.p.items():
            out[f"f1.{k}"] = v
        for k, v in self.fc2.p.items():
            out[f"f2.{k}"] = v
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = self.audio_net.named_grads("a.")
        for k, v in self.lstm.g.items():
            out[f"lstm.{k}"] = v
        for k, v in self.fc1.g.items():
            out[f"f1.{k}"] = v
        for k, v in self.fc2.g.items():
            out[f"f2.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for layer in (self.audio_net, self.lstm, self.fc1, self.relu, self.fc2):
            layer.zero_grad()

    def forward(self, noisy_feat: np.ndarray,
                visual: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
        """(T,257) noisy features, (T,2048) dequantized latents (avse) ->
        (audio_hat (T,257), visual_hat (T,2048) or None)."""
        x = np.asarray(noisy_feat, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != AUDIO_DIM:
            raise ValueError(f"expected (T,{AUDIO_DIM}) features, got {x.shape}")
        a = self.audio_net.forward(x)
        if self.mode == "avse":
            if visual is None:
                raise ValueError("avse mode requires visual features")
            v = np.asarray(visual, dtype=np.float64)
            if v.shape != (x.shape[0], VISUAL_DIM):
                raise ValueError(f"expected visual ({x.shape[0]},{VISUAL_DIM}), got {v.shape}")
            fused = np.concatenate([a, v], axis=1)
        else:
            fused = a
        h = self.lstm.forward(fused)
        y = self.fc2.forward(self.relu.forward(self.fc1.forward(h)))
        if self.mode == "avse":
            return y[:, :AUDIO_DIM], y[:, AUDIO_DIM:]
        return y, None

    def backward(self, d_audio: np.ndarray,
                 d_visual: np.ndarray | None = None) -> None:
        """Accumulates parameter gradients; input gradients are discarded
        (features and latents are data, not parameters)."""
        if self.mode == "avse":
            if d_visual is None:
                d_visual = np.zeros((d_audio.shape[0], VISUAL_DIM))
            dy = np.concatenate([np.asarray(d_audio, dtype=np.float64),
                                 np.asarray(d_visual, dtype=np.float64)], axis=1)
        else:
            dy = np.asarray(d_audio, dtype=np.float64)
        dh = self.fc1.backward(self.relu.backward(self.fc2.backward(dy)))
        dfused = self.lstm.backward(dh)
        self.audio_net.backward(dfused[:, :AUDIO_DIM])

    def save(self, path) -> None:
        nnet.save_checkpoint(path, self.params(), {
            "kind": "se", "mode": self.mode, "seed": self.seed,
            "hidden": self.hidden})

    @classmethod
    def load(cls, path) -> "SeNet":
        params, config = nnet.load_checkpoint(path)
        if config.get("kind") != "se":
            raise ValueError(f"{path}: not an enhancement checkpoint")
        model = cls(mode=config["mode"], seed=int(config.get("seed", 0)))
        nnet.set_params(model.params(), params)
        return model


def align_visual(latents: np.ndarray, t_audio: int,
                 fps_v: int = corpus.FPS_V, fs: int = audio.SAMPLE_RATE,
                 hop: int = audio.HOP) -> np.ndarray:
    """Assign each audio frame the nearest video frame's latent.

    Audio frame t sits at t*hop/fs seconds; the video index is
    floor(t_sec * fps_v + 0.5), clamped to the available range.
    """
    z = np.asarray(latents)
    if z.ndim != 2 or len(z) == 0:
        raise ValueError(f"expected nonempty (M, D) latents, got {z.shape}")
    t_sec = np.arange(t_audio) * (hop / fs)
    idx = np.floor(t_sec * fps_v + 0.5).astype(np.int64)
    return z[np.clip(idx, 0, len(z) - 1)]


def quantize_latents(latents: np.ndarray) -> np.ndarray:
    """Per-frame 4-bit round trip: one codec window per latent vector.

    An all-zero latent has no derivable window and passes through as
    zeros, which is also its exact quantization.
    """
    z = np.asarray(latents, dtype=np.float32)
    out = np.empty_like(z)
    for i in range(len(z)):
        if float(np.max(np.abs(z[i]))) == 0.0:
            out[i] = 0.0
        else:
            out[i] = eofp.roundtrip(z[i])
    return out


def combined_loss(audio_hat, clean_feat, visual_hat, visual_target,
                  mu: float = MU_DEFAULT):
    """Returns (total, loss_a, loss_v, d_audio, d_visual).

    total = mse(audio) + mu*mse(visual); gradients are wrt the two heads.
    Passing visual_hat=None yields the pure audio loss (loss_v = 0).
    """
    loss_a, d_audio = nnet.mse(audio_hat, clean_feat)
    if visual_hat is None:
        return loss_a, loss_a, 0.0, d_audio, None
    loss_v, d_visual = nnet.mse(visual_hat, visual_target)
    return loss_a + mu * loss_v, loss_a, loss_v, d_audio, mu * d_visual


def utterance_latents(ae_model: ae_mod.LipAutoencoder, lips_dir,
                      quantize: bool = True) -> np.ndarray:
    """Lip frames on disk -> (M, 2048) float32 latents, optionally taken
    through the 4-bit codec (the deployment path)."""
    frames = corpus.load_lips(lips_dir)
    lat = ae_model.encode_batch(frames).reshape(len(frames), VISUAL_DIM)
    lat = lat.astype(np.float32)
    return quantize_latents(lat) if quantize else lat


def _utt_split(records: list, val_fraction: float):
    """Split records by utterance: the last fraction of distinct
    utterances (manifest order) becomes validation."""
    utts: list[str] = []
    for r in records:
        if r.utt not in utts:
            utts.append(r.utt)
    n_val = max(1, int(round(val_fraction * len(utts)))) if len(utts) > 1 else 0
    val_utts = set(utts[len(utts) - n_val:]) if n_val else set()
    train = [r for r in records if r.utt not in val_utts]
    val = [r for r in records if r.utt in val_utts]
    return train, val


class _SeData:
    """Feature cache for one training run: float32 at rest, float64 in use."""

    def __init__(self, records, base_dir, ae_model, mode: str,
                 quantize_visual: bool, mu: float):
        self.mode = mode
        self.mu = mu
        base = Path(base_dir)
        self.records = list(records)
        clean_mag: dict[str, np.ndarray] = {}
        self.visual: dict[str, np.ndarray] = {}
        self.noisy_feat: dict[str, np.ndarray] = {}
        self.target_feat: dict[str, np.ndarray] = {}
        for r in self.records:
            if r.utt not in clean_mag:
                wave = corpus.load_wav(base / r.clean_path)
                clean_mag[r.utt] = np.abs(audio.stft(wave)).astype(np.float32)
                if mode == "avse":
                    lat = utterance_latents(ae_model, base / r.lips_dir,
                                            quantize_visual)
                    self.visual[r.utt] = align_visual(
                        lat, clean_mag[r.utt].shape[0]).astype(np.float32)
            noisy = corpus.load_wav(base / r.noisy_path)
            self.noisy_feat[r.id] = np.log1p(
                np.abs(audio.stft(noisy))).astype(np.float32)
            self.target_feat[r.id] = np.log1p(
                r.peak_scale * clean_mag[r.utt].astype(np.float64)).astype(np.float32)

    def example(self, r):
        x = self.noisy_feat[r.id].astype(np.float64)
        t = self.target_feat[r.id].astype(np.float64)
        v = self.visual[r.utt].astype(np.float64) if self.mode == "avse" else None
        return x, t, v

    def loss_of(self, model: SeNet, r) -> tuple[float, float, float]:
        x, t, v = self.example(r)
        audio_hat, visual_hat = model.forward(x, v)
        total, loss_a, loss_v, _, _ = combined_loss(audio_hat, t, visual_hat, v, self.mu)
        return total, loss_a, loss_v


def train_se(records, base_dir, ae_model, cfg: nnet.TrainConfig,
             mode: str = "avse", mu: float = MU_DEFAULT,
             quantize_visual: bool = True, log_path=None, state_path=None,
             ckpt_path=None, progress=None) -> tuple[SeNet, list[dict]]:
    """Train on the given manifest records (training split of a corpus).

    One Adam step per utterance record, in manifest order, no shuffling.
    Validation is the last tenth of distinct utterances.  Keeps the best
    validation parameters, stops early after ``cfg.patience`` stale
    epochs, and resumes from ``state_path`` if it exists.
    """
    if not records:
        raise ValueError("empty training manifest")
    if mode == "avse" and ae_model is None:
        raise ValueError("avse mode requires a trained autoencoder")
    train_recs, val_recs = _utt_split(records, cfg.val_fraction)
    data = _SeData(records, base_dir, ae_model, mode, quantize_visual, mu)

    model = SeNet(mode=mode, seed=cfg.seed)
    params = model.params()
    opt = nnet.Adam(params, lr=cfg.lr)
    start_epoch = 0
    best_val = float("inf")
    best_params = {k: v.copy() for k, v in params.items()}
    history: list[dict] = []

    if state_path is not None and Path(state_path).exists():
        saved, opt_state, meta = nnet.load_train_state(state_path)
        nnet.set_params(params, saved)
        opt.load_state(opt_state)
        start_epoch = int(meta["epoch"])
        best_val = float(meta["best_val"])
        history = list(meta["history"])
        best_params = {k: v.copy() for k, v in params.items()}
        if ckpt_path is not None and Path(ckpt_path).exists():
            saved_best, _ = nnet.load_checkpoint(ckpt_path)
            best_params = {k: np.asarray(v, dtype=np.float64)
                           for k, v in saved_best.items()}

    stale = _stale(history, best_val)
    for epoch in range(start_epoch, cfg.epochs):
        if stale >= cfg.patience:
            break
        total = 0.0
        for r in train_recs:
            x, t, v = data.example(r)
            model.zero_grad()
            audio_hat, visual_hat = model.forward(x, v)
            loss, _, _, d_a, d_v = combined_loss(audio_hat, t, visual_hat, v, mu)
            model.backward(d_a, d_v)
            opt.step(model.grads())
            total += loss
        train_loss = total / len(train_recs)
        vt = va = vv = 0.0
        for r in (val_recs or train_recs):
            lt, la, lv = data.loss_of(model, r)
            vt += lt; va += la; vv += lv
        n_val = len(val_recs or train_recs)
        val_loss, loss_a, loss_v = vt / n_val, va / n_val, vv / n_val
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "loss_a": loss_a, "loss_v": loss_v})
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
            stale = 0
            if ckpt_path is not None:
                nnet.save_checkpoint(ckpt_path, best_params, {
                    "kind": "se", "mode": mode, "seed": cfg.seed,
                    "hidden": model.hidden})
        else:
            stale += 1
        if state_path is not None:
            nnet.save_train_state(state_path, params, opt, {
                "epoch": epoch + 1, "best_val": best_val, "history": history})
        if log_path is not None:
            write_train_log(log_path, history)
        if progress is not None:
            progress(history[-1])

    nnet.set_params(params, best_params)
    return model, history


def _stale(history: list[dict], best_val: float) -> int:
    n = 0
    for row in reversed(history):
        if row["val_loss"] <= best_val:
            break
        n += 1
    return n


def write_train_log(path, history: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,train_loss,val_loss,loss_a,loss_v"]
    for h in history:
        lines.append(f"{h['epoch']},{h['train_loss']!r},{h['val_loss']!r},"
                     f"{h['loss_a']!r},{h['loss_v']!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def enhance_utterance(model: SeNet, ae_model, noisy_wave,
                      lip_frames=None, quantize_visual: bool = True,
                      latents=None) -> np.ndarray:
    """Full pipeline: features -> model -> waveform with the noisy phase.

    For avse mode, pass either raw ``lip_frames`` (N,3,64,64), which are
    encoded and quantized here, or precomputed dequantized ``latents``
    (M,2048), e.g. read back from codec containers.  Audio-only mode
    ignores both.  Output length equals input length.
    """
    x = np.asarray(noisy_wave, dtype=np.float64)
    feat, spec = audio.features(x)
    visual = None
    if model.mode == "avse":
        if latents is None:
            if lip_frames is None:
                raise ValueError("avse enhancement needs lip frames or latents")
            lat = ae_model.encode_batch(np.asarray(lip_frames)).reshape(-1, VISUAL_DIM)
            lat = lat.astype(np.float32)
            if quantize_visual:
                lat = quantize_latents(lat)
            latents = lat
        visual = align_visual(np.asarray(latents), feat.shape[0]).astype(np.float64)
    audio_hat, _ = model.forward(feat, visual)
    return audio.reconstruct(audio_hat, spec, n_samples=len(x))


def checkpoint_digest(path) -> str:
    """SHA-256 of a checkpoint file, for frozen-model assertions."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
