"""Lip-image autoencoder: 3x64x64 RGB down to a 32x8x8 latent and back.

The encoder is three stride-2 convolutions (channels 3 -> 8 -> 16 -> 32,
kernel 4, pad 1, ReLU after each), halving 64 -> 32 -> 16 -> 8.  The
decoder mirrors it with three transposed convolutions (32 -> 16 -> 8 -> 3),
ReLU twice and a final sigmoid so outputs stay in (0, 1).  The latent holds
2048 values, 1/6 of the 12288 input pixels; the final encoder ReLU keeps it
nonnegative, which the downstream 4-bit quantizer handles gracefully
(flush-to-zero instead of sign churn).

The autoencoder is trained alone on lip frames and then frozen; everything
downstream treats it as a fixed feature extractor.

Image files are binary PPM (P6, maxval 255).  Latent visualizations go out
as PGM grids, one 8x8 tile per channel, jointly normalized.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import nnet

IMG_SHAPE = (3, 64, 64)
LATENT_SHAPE = (32, 8, 8)
LATENT_DIM = 32 * 8 * 8


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, 8-bit) -> float64 image (3, H, W) in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    fields: list[int] = []
    pos = 2
    if buf[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {buf[:2]!r})")
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":  # comment runs to end of line
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval, then raw samples
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    n = width * height * 3
    raw = buf[pos:pos + n]
    if len(raw) != n:
        raise ValueError(f"{path}: expected {n} pixel bytes, got {len(raw)}")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, img) -> None:
    """Float image (3, H, W) in [0, 1] -> binary PPM (P6, 8-bit)."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {x.shape}")
    pix = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    h, w = x.shape[1], x.shape[2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pix.transpose(1, 2, 0).tobytes())


def write_latent_pgm(path, latent) -> None:
    """Latent (32, 8, 8) -> one PGM: 4x8 grid of 8x8 channel tiles,
    jointly normalized to the full gray range."""
    z = np.asarray(latent, dtype=np.float64)
    if z.shape != LATENT_SHAPE:
        raise ValueError(f"expected latent {LATENT_SHAPE}, got {z.shape}")
    lo, hi = float(z.min()), float(z.max())
    norm = (z - lo) / (hi - lo) if hi > lo else np.zeros_like(z)
    rows, cols, tile, gap = 4, 8, 8, 1
    grid = np.zeros((rows * tile + (rows - 1) * gap,
                     cols * tile + (cols - 1) * gap))
    for c in range(32):
        r, q = divmod(c, cols)
        grid[r * (tile + gap):r * (tile + gap) + tile,
             q * (tile + gap):q * (tile + gap) + tile] = norm[c]
    pix = np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        f.write(pix.tobytes())


def flatten_latent(z) -> np.ndarray:
    z = np.asarray(z)
    if z.shape != LATENT_SHAPE:
        raise ValueError(f"expected latent {LATENT_SHAPE}, got {z.shape}")
    return z.reshape(LATENT_DIM)


def unflatten_latent(v) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (LATENT_DIM,):
        raise ValueError(f"expected flat latent ({LATENT_DIM},), got {v.shape}")
    return v.reshape(LATENT_SHAPE)


class LipAutoencoder:
    """Encoder/decoder pair with deterministic seeded initialization."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        self.encoder = nnet.Sequential(
            nnet.Conv2d(3, 8, 4, 2, 1, rng), nnet.ReLU(),
            nnet.Conv2d(8, 16, 4, 2, 1, rng), nnet.ReLU(),
            nnet.Conv2d(16, 32, 4, 2, 1, rng), nnet.ReLU(),
        )
        self.decoder = nnet.Sequential(
            nnet.ConvTranspose2d(32, 16, 4, 2, 1, rng), nnet.ReLU(),
            nnet.ConvTranspose2d(16, 8, 4, 2, 1, rng), nnet.ReLU(),
            nnet.ConvTranspose2d(8, 3, 4, 2, 1, rng), nnet.Sigmoid(),
        )

    def params(self) -> dict[str, np.ndarray]:
        out = self.encoder.named_params("enc.")
        out.update(self.decoder.named_params("dec."))
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = self.encoder.named_grads("enc.")
        out.update(self.decoder.named_grads("dec."))
        return out

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.decoder.zero_grad()

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        return self.decoder.forward(self.encoder.forward(x))

    def backward_batch(self, dy: np.ndarray) -> np.ndarray:
        return self.encoder.backward(self.decoder.backward(dy))

    def encode(self, img) -> np.ndarray:
        """One image (3, 64, 64), values clamped to [0,1] -> latent (32, 8, 8)."""
        x = np.asarray(img, dtype=np.float64)
        if x.shape != IMG_SHAPE:
            raise ValueError(f"expected image {IMG_SHAPE}, got {x.shape}")
        x = np.clip(x, 0.0, 1.0)
        return self.encoder.forward(x[None])[0]

    def decode(self, latent) -> np.ndarray:
        """Latent (32, 8, 8) -> image (3, 64, 64) in (0, 1)."""
        z = np.asarray(latent, dtype=np.float64)
        if z.shape != LATENT_SHAPE:
            raise ValueError(f"expected latent {LATENT_SHAPE}, got {z.shape}")
        return self.decoder.forward(z[None])[0]

    def encode_batch(self, imgs: np.ndarray) -> np.ndarray:
        x = np.asarray(imgs, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != IMG_SHAPE:
            raise ValueError(f"expected (N, 3, 64, 64), got {x.shape}")
        return self.encoder.forward(np.clip(x, 0.0, 1.0))

    def save(self, path) -> None:
        nnet.save_checkpoint(path, self.params(),
                             {"kind": "lip_ae", "seed": self.seed})

    @classmethod
    def load(cls, path) -> "LipAutoencoder":
        params, config = nnet.load_checkpoint(path)
        if config.get("kind") != "lip_ae":
            raise ValueError(f"{path}: not an autoencoder checkpoint")
        model = cls(seed=int(config.get("seed", 0)))
        nnet.set_params(model.params(), params)
        return model


def _mean_recon_mse(model: LipAutoencoder, images: np.ndarray) -> float:
    total = 0.0
    for i in range(0, len(images), 64):
        chunk = images[i:i + 64]
        recon = model.forward_batch(chunk)
        total += float(np.sum((recon - chunk) ** 2))
    return total / images.size


def train_ae(images, cfg: nnet.TrainConfig, log_path=None, state_path=None,
             ckpt_path=None, val_images=None,
             progress=None) -> tuple[LipAutoencoder, list[dict]]:
    """Train the autoencoder on a stack of images (N, 3, 64, 64) in [0,1].

    One Adam step per image, dataset order, no shuffling.  When
    ``val_images`` is None the last ``cfg.val_fraction`` of ``images`` is
    held out.  Keeps the best-validation parameters; stops early after
    ``cfg.patience`` epochs without improvement.  If ``state_path`` exists,
    training resumes after the last completed epoch.

    Returns (model with best-validation parameters, per-epoch history).
    """
    data = np.asarray(images, dtype=np.float64)
    if data.ndim != 4 or data.shape[1:] != IMG_SHAPE:
        raise ValueError(f"expected (N, 3, 64, 64) images, got {data.shape}")
    if len(data) == 0:
        raise ValueError("empty training set")
    if val_images is None:
        n_val = max(1, int(round(cfg.val_fraction * len(data)))) if len(data) > 1 else 0
        train, val = (data[:-n_val], data[-n_val:]) if n_val else (data, data)
    else:
        train = data
        val = np.asarray(val_images, dtype=np.float64)

    model = LipAutoencoder(seed=cfg.seed)
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

    stale = _stale_epochs(history, best_val)
    for epoch in range(start_epoch, cfg.epochs):
        if stale >= cfg.patience:
            break
        total = 0.0
        for img in train:
            model.zero_grad()
            recon = model.forward_batch(img[None])
            loss, dloss = nnet.mse(recon, img[None])
            model.backward_batch(dloss)
            opt.step(model.grads())
            total += loss
        train_loss = total / len(train)
        val_loss = _mean_recon_mse(model, val)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
            stale = 0
            if ckpt_path is not None:
                nnet.save_checkpoint(ckpt_path, best_params,
                                     {"kind": "lip_ae", "seed": cfg.seed})
        else:
            stale += 1
        if state_path is not None:
            nnet.save_train_state(state_path, params, opt, {
                "epoch": epoch + 1, "best_val": best_val, "history": history})
        if log_path is not None:
            _write_log(log_path, history)
        if progress is not None:
            progress(history[-1])

    nnet.set_params(params, best_params)
    return model, history


def _stale_epochs(history: list[dict], best_val: float) -> int:
    n = 0
    for row in reversed(history):
        if row["val_loss"] <= best_val:
            break
        n += 1
    return n


def _write_log(path, history) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,train_loss,val_loss"]
    for row in history:
        lines.append(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r}")
    Path(path).write_text("\n".join(lines) + "\n")
