"""Acceptance gate: twelve numbered end-to-end criteria, one line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
PASS/FAIL lines as they happen.  The heavyweight artifacts (a full 40/12
corpus, a trained lip autoencoder, two trained enhancement models and their
evaluations) are built once per session and shared; later criteria reuse
them, and the determinism criterion rebuilds the whole chain a second time
and compares bytes.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from test_nnet import ALL_KINDS, check_layer_grads, layer_instances

from avse import ae as ae_mod
from avse import audio, cli, corpus, eofp, metrics, nnet

CORPUS_SEED = 11
MODEL_SEED = 0
AE_EPOCHS = 8
SE_EPOCHS = 1

GOLDEN = Path(__file__).parent / "golden"


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n:02d}] {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    assert ok, line


def ran(rc: int, step: str) -> None:
    assert rc == 0, f"{step} exited {rc}"


# ---------------------------------------------------------------- pipeline

@pytest.fixture(scope="session")
def clock():
    return {}


@pytest.fixture(scope="session")
def acc_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def build_pipeline(out: Path, clock: dict, tag: str) -> dict:
    """Corpus, autoencoder, both enhancement models, both evaluations.

    Everything goes through the CLI with fixed seeds; every artifact path
    is returned so criteria (and the determinism rerun) can inspect bytes.
    """
    out.mkdir(parents=True, exist_ok=True)
    base = out / "corpus"
    art = {"base": base, "manifest": base / "manifest.csv"}

    t0 = time.monotonic()
    ran(cli.main(["synth", "--out", str(base), "--seed", str(CORPUS_SEED)]),
        "synth")
    clock[f"{tag}:synth"] = time.monotonic() - t0

    art["ae"] = out / "lip_ae.nnck"
    art["ae_log"] = out / "ae_train.log"
    t0 = time.monotonic()
    ran(cli.main(["train-ae", "--corpus", str(base), "--out", str(art["ae"]),
                  "--epochs", str(AE_EPOCHS), "--seed", str(MODEL_SEED),
                  "--log", str(art["ae_log"])]), "train-ae")
    clock[f"{tag}:train_ae"] = time.monotonic() - t0

    for mode in ("avse", "audio_only"):
        ckpt = out / f"se_{mode}.nnck"
        log = out / f"se_{mode}.log"
        argv = ["train-se", "--corpus", str(base), "--out", str(ckpt),
                "--mode", mode, "--epochs", str(SE_EPOCHS),
                "--seed", str(MODEL_SEED), "--log", str(log)]
        if mode == "avse":
            argv += ["--ae", str(art["ae"])]
        t0 = time.monotonic()
        ran(cli.main(argv), f"train-se {mode}")
        clock[f"{tag}:train_{mode}"] = time.monotonic() - t0
        art[f"se_{mode}"] = ckpt
        art[f"se_{mode}_log"] = log

        rows = out / f"eval_{mode}_rows.csv"
        agg = out / f"eval_{mode}_agg.csv"
        argv = ["eval", "--model", str(ckpt), "--corpus", str(base),
                "--split", "test", "--out-rows", str(rows),
                "--out-agg", str(agg)]
        if mode == "avse":
            argv += ["--ae", str(art["ae"])]
        t0 = time.monotonic()
        ran(cli.main(argv), f"eval {mode}")
        clock[f"{tag}:eval_{mode}"] = time.monotonic() - t0
        art[f"rows_{mode}"] = rows
        art[f"agg_{mode}"] = agg
    return art


@pytest.fixture(scope="session")
def pipeline(acc_dir, clock):
    return build_pipeline(acc_dir / "run1", clock, "run1")


def overall(agg_path) -> dict:
    rows = metrics.read_aggregate_csv(agg_path)
    assert rows[-1]["snr_db"] == "all"
    return rows[-1]


# ------------------------------------------------------------- criteria 1-7

def test_criterion_01_codec_roundtrip_bound():
    rng = np.random.default_rng(2026)
    t0 = time.monotonic()
    n_checked = 0
    for scale in (1e-30, 1e-12, 1e-3, 1.0, 1e4, 1e18, 1e30):
        for _ in range(8):
            x = (rng.standard_normal(2500) * scale).astype(np.float32)
            x[rng.integers(0, x.size, 40)] = 0.0
            dec = eofp.roundtrip(x).astype(np.float64)
            base = eofp.choose_window(x).base
            v = x.astype(np.float64)
            zero = dec == 0.0
            below = np.abs(v) < 2.0 ** base
            bottom_octave = (v > 0) & (v < 2.0 ** (base + 1))
            ok_zero = below | bottom_octave | (v == 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.abs(v) / np.abs(dec)
            ok_nonzero = (np.sign(v) == np.sign(dec)) \
                & (ratio >= 1.0) & (ratio < 2.0)
            assert np.all(np.where(zero, ok_zero, ok_nonzero))
            assert np.all(dec[v == 0.0] == 0.0)
            n_checked += x.size
    elapsed = time.monotonic() - t0
    report(1, n_checked >= 100_000 and elapsed < 5.0,
           f"codec bound on {n_checked} values in {elapsed:.2f}s")


def test_criterion_02_compression_ratios(pipeline, capsys):
    records = corpus.read_manifest(pipeline["manifest"])
    lips_dir = pipeline["base"] / records[0].lips_dir
    out = pipeline["base"].parent / "compressed_frames"
    ran(cli.main(["compress", "--ae", str(pipeline["ae"]),
                  "--lips", str(lips_dir), "--out", str(out)]), "compress")
    fields = dict(kv.split("=")
                  for kv in capsys.readouterr().out.strip().split())
    ok = (float(fields["r_ae"]) == 6.0
          and float(fields["r_qua"]) == 8.0
          and float(fields["r_comp"]) == 48.0
          and int(fields["payload_bytes_per_frame"]) == 1024)
    report(2, ok, "r_ae=%s r_qua=%s r_comp=%s payload/frame=%s" % (
        fields["r_ae"], fields["r_qua"], fields["r_comp"],
        fields["payload_bytes_per_frame"]))


def test_criterion_03_golden_container():
    values = np.frombuffer((GOLDEN / "latent_input.f32").read_bytes(),
                           dtype="<f4").reshape(32, 8, 8).copy()
    golden = (GOLDEN / "latent.eofp").read_bytes()
    encoded = eofp.encode_to_bytes(values)
    decoded = eofp.decode_from_bytes(golden)
    reencoded = eofp.encode_to_bytes(decoded)
    ok = encoded == golden and reencoded == golden \
        and np.array_equal(decoded, eofp.roundtrip(values))
    report(3, ok, f"{len(golden)} byte container reproduced bit-exactly")


def test_criterion_04_gradient_suite():
    t0 = time.monotonic()
    per_kind = 20
    for kind in ALL_KINDS:
        rng = np.random.default_rng(7000 + ALL_KINDS.index(kind))
        for _ in range(per_kind):
            layer, x = layer_instances(kind, rng)
            check_layer_grads(layer, x, rng)   # rel err < 1e-4 inside
    elapsed = time.monotonic() - t0
    report(4, elapsed < 60.0,
           f"{per_kind} finite-difference instances x {len(ALL_KINDS)} "
           f"layer kinds in {elapsed:.1f}s")


def test_criterion_05_stft_roundtrip():
    rng = np.random.default_rng(50)
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(2048, 48001))
        x = rng.standard_normal(n) * float(rng.uniform(0.05, 2.0))
        y = audio.istft(audio.stft(x), n_samples=n)
        lo, hi = audio.N_FFT, n - audio.N_FFT
        err = float(np.max(np.abs(y[lo:hi] - x[lo:hi])))
        worst = max(worst, err / float(np.max(np.abs(x))))
    w = audio._WINDOW
    cover = np.zeros(audio.N_FFT * 6)
    for m in range((len(cover) - audio.N_FFT) // audio.HOP + 1):
        cover[m * audio.HOP:m * audio.HOP + audio.N_FFT] += w * w
    cola_dev = float(np.max(np.abs(
        cover[audio.N_FFT:-audio.N_FFT] - 1.0)))
    report(5, worst < 1e-5 and cola_dev < 1e-10,
           f"worst interior error {worst:.2e} of peak over 50 waves, "
           f"COLA deviation {cola_dev:.2e}")


def test_criterion_06_stoi_oracle():
    snrs = (12.0, 6.0, 0.0, -6.0, -12.0)
    worst_identity = 0.0
    all_monotone = True
    for s in range(10):
        clean = corpus.gen_clean(s, duration_s=2.0)
        worst_identity = max(worst_identity,
                             abs(metrics.stoi(clean, clean) - 1.0))
        noise = corpus.gen_noise("white", 100 + s, duration_s=2.0)
        scores = []
        for snr in snrs:
            noisy, info = corpus.mix_at_snr(clean, noise, snr)
            scores.append(metrics.stoi(info.peak_scale * clean, noisy))
        all_monotone &= all(a > b for a, b in zip(scores, scores[1:]))
    report(6, worst_identity <= 1e-6 and all_monotone,
           f"identity off by {worst_identity:.1e}, scores decreasing over "
           f"{snrs} dB on 10 utterances")


def test_criterion_07_sisdr_oracle():
    rng = np.random.default_rng(7)
    s = rng.standard_normal(16000)
    r = rng.standard_normal(16000)
    r -= (np.dot(r, s) / np.dot(s, s)) * s
    r *= np.linalg.norm(s) / np.linalg.norm(r)   # equal power
    got = metrics.si_sdr(s, s + 0.1 * r)         # 1% residual power
    base = metrics.si_sdr(s, s + 0.3 * r)
    inv_dev = max(abs(metrics.si_sdr(s, a * (s + 0.3 * r)) - base)
                  for a in (1e-3, 0.5, 2.0, 1e3))
    report(7, abs(got - 20.0) <= 0.01 and inv_dev <= 1e-9,
           f"orthogonal 1%-power case {got:.6f} dB, "
           f"scale dependence {inv_dev:.1e} dB")


# ----------------------------------------------------------- criteria 8-12

def test_criterion_08_corpus_snr_closure(pipeline):
    records = corpus.read_manifest(pipeline["manifest"])
    base = pipeline["base"]
    clean_cache = {}
    worst = 0.0
    for r in records:
        if r.utt not in clean_cache:
            clean_cache[r.utt] = corpus.load_wav(base / r.clean_path)
        noisy = corpus.load_wav(base / r.noisy_path)
        got = metrics.measure_snr(r.peak_scale * clean_cache[r.utt], noisy)
        worst = max(worst, abs(got - r.snr_db))
    report(8, worst <= 0.01,
           f"{len(records)} noisy files re-measure within {worst:.4f} dB")


def test_criterion_09_ae_training(pipeline, clock):
    hist = [ln.split(",") for ln in
            pipeline["ae_log"].read_text().splitlines()[1:]]
    vals = [float(row[2]) for row in hist]
    best = min(vals)
    epochs_used = len(vals)

    records = corpus.read_manifest(pipeline["manifest"])
    frames = corpus.load_lips(pipeline["base"] / records[0].lips_dir)[:1]
    t0 = time.monotonic()
    _, overfit_hist = ae_mod.train_ae(
        frames, nnet.TrainConfig(lr=1e-3, epochs=500, seed=0, patience=500),
        val_images=frames)
    overfit = min(h["val_loss"] for h in overfit_hist)
    t_overfit = time.monotonic() - t0

    t_total = clock["run1:train_ae"] + t_overfit
    report(9, best < 0.01 and epochs_used <= 30 and overfit < 1e-3
           and t_total < 900.0,
           f"held-out MSE {best:.5f} after {epochs_used} epochs, "
           f"single-image overfit {overfit:.2e}, {t_total:.0f}s total")


def test_criterion_10_avse_beats_audio_only(pipeline, clock):
    a = overall(pipeline["agg_avse"])
    b = overall(pipeline["agg_audio_only"])
    t_total = sum(v for k, v in clock.items() if k.startswith("run1:"))
    ok = (a["stoi_enh"] >= b["stoi_enh"] + 0.005
          and a["sisdr_enh"] >= b["sisdr_enh"]
          and a["stoi_enh"] > a["stoi_noisy"]
          and b["stoi_enh"] > b["stoi_noisy"]
          and t_total < 2700.0)
    report(10, ok,
           f"stoi avse {a['stoi_enh']:.4f} vs audio {b['stoi_enh']:.4f} "
           f"(noisy {a['stoi_noisy']:.4f}), sisdr avse {a['sisdr_enh']:.2f} "
           f"vs audio {b['sisdr_enh']:.2f} dB, pipeline {t_total:.0f}s")


def test_criterion_11_quantization_robustness(pipeline, acc_dir, clock):
    out = acc_dir / "unquantized"
    out.mkdir(exist_ok=True)
    ckpt = out / "se_avse_raw.nnck"
    t0 = time.monotonic()
    ran(cli.main(["train-se", "--corpus", str(pipeline["base"]),
                  "--out", str(ckpt), "--mode", "avse",
                  "--epochs", str(SE_EPOCHS), "--seed", str(MODEL_SEED),
                  "--ae", str(pipeline["ae"]), "--no-quantize-visual"]),
        "train-se raw")
    agg = out / "agg.csv"
    ran(cli.main(["eval", "--model", str(ckpt), "--ae", str(pipeline["ae"]),
                  "--corpus", str(pipeline["base"]), "--split", "test",
                  "--out-rows", str(out / "rows.csv"), "--out-agg", str(agg),
                  "--no-quantize-visual"]), "eval raw")
    clock["unquantized"] = time.monotonic() - t0
    quant = overall(pipeline["agg_avse"])["stoi_enh"]
    raw = overall(agg)["stoi_enh"]
    report(11, quant >= raw - 0.01,
           f"stoi 4-bit {quant:.4f} vs unquantized {raw:.4f}")


def test_criterion_12_determinism(pipeline, acc_dir, clock):
    rerun = build_pipeline(acc_dir / "run2", clock, "run2")
    compared = []
    same = True
    for key in ("manifest", "ae", "ae_log", "se_avse", "se_avse_log",
                "se_audio_only", "se_audio_only_log",
                "rows_avse", "agg_avse", "rows_audio_only",
                "agg_audio_only"):
        match = Path(pipeline[key]).read_bytes() == \
            Path(rerun[key]).read_bytes()
        compared.append((key, match))
        same &= match
    detail = f"{len(compared)} artifacts byte-identical across reruns"
    if not same:
        detail += " except " + ",".join(k for k, m in compared if not m)
    report(12, same, detail)
