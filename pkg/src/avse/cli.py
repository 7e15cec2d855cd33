"""Command-line front door.

Subcommands: synth, train-ae, train-se, compress, enhance, eval, chart.
Every option can also come from a flat key=value config file (# comments)
passed as --config; explicit flags override file values.  Progress and the
effective configuration go to stderr; machine-readable results go to files;
exit codes are 0 (success), 1 (runtime failure), 2 (usage error).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import ae as ae_mod
from . import audio, corpus, eofp, metrics, nnet
from . import model as model_mod


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _echo_config(cmd: str, args: argparse.Namespace) -> None:
    skip = {"func", "config"}
    pairs = " ".join(f"{k}={v}" for k, v in sorted(vars(args).items())
                     if k not in skip)
    _log(f"[{cmd}] {pairs}")


def read_config_file(path) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _inject_config(argv: list[str]) -> list[str]:
    """Turn config-file entries into flags placed before the explicit
    ones, so later (explicit) flags win under argparse's last-wins rule."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        return argv  # argparse will report the missing value
    entries = read_config_file(argv[i + 1])
    injected: list[str] = []
    for k, v in entries.items():
        flag = "--" + k.replace("_", "-")
        if v.lower() in ("true", "false"):
            if v.lower() == "true":
                injected.append(flag)
        else:
            injected.extend([flag, v])
    # insert right after the subcommand token
    head, tail = argv[:1], argv[1:]
    return head + injected + tail


def _csv_floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _csv_names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _train_cfg(args) -> nnet.TrainConfig:
    return nnet.TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed,
                            val_fraction=args.val_fraction,
                            patience=args.patience)


def _manifest(corpus_dir) -> list[corpus.ManifestRecord]:
    path = Path(corpus_dir)
    if path.is_dir():
        path = path / "manifest.csv"
    return corpus.read_manifest(path)


def _split_records(records, split: str):
    out = [r for r in records if r.split == split]
    if not out:
        raise ValueError(f"manifest has no '{split}' records")
    return out


def cmd_synth(args) -> int:
    cfg = corpus.CorpusConfig(
        n_train_utt=args.train_utts, n_test_utt=args.test_utts,
        duration_s=args.duration,
        train_snrs_db=_csv_floats(args.train_snrs),
        test_snrs_db=_csv_floats(args.test_snrs),
        train_noise_kinds=_csv_names(args.train_noises),
        test_noise_kinds=_csv_names(args.test_noises),
        fps_v=args.fps, master_seed=args.seed)
    records = corpus.build_corpus(cfg, args.out)
    corpus.check_manifest(records, args.out)
    _log(f"[synth] wrote {len(records)} noisy items under {args.out}")
    return 0


def _lips_by_utt(records, base: Path):
    """Ordered (utt id, stacked frames) pairs for distinct utterances."""
    seen: list[str] = []
    dirs: dict[str, str] = {}
    for r in records:
        if r.utt not in dirs:
            seen.append(r.utt)
            dirs[r.utt] = r.lips_dir
    return [(u, corpus.load_lips(base / dirs[u])) for u in seen]


def cmd_train_ae(args) -> int:
    base = Path(args.corpus)
    records = _split_records(_manifest(base), "train")
    per_utt = _lips_by_utt(records, base)
    n_val = max(1, int(round(args.val_fraction * len(per_utt)))) if len(per_utt) > 1 else 0
    train_imgs = np.concatenate([f for _, f in per_utt[:len(per_utt) - n_val]]) \
        if n_val else np.concatenate([f for _, f in per_utt])
    val_imgs = np.concatenate([f for _, f in per_utt[len(per_utt) - n_val:]]) \
        if n_val else train_imgs
    cfg = _train_cfg(args)
    _, history = ae_mod.train_ae(
        train_imgs, cfg, val_images=val_imgs,
        log_path=args.log, state_path=args.state, ckpt_path=args.out,
        progress=lambda h: _log(
            f"[train-ae] epoch {h['epoch']} train {h['train_loss']:.6f} "
            f"val {h['val_loss']:.6f}"))
    if not Path(args.out).exists():
        raise RuntimeError("training produced no checkpoint")
    _log(f"[train-ae] done after {len(history)} epochs, best checkpoint {args.out}")
    return 0


def cmd_train_se(args) -> int:
    base = Path(args.corpus)
    records = _split_records(_manifest(base), "train")
    ae_model = None
    if args.mode == "avse":
        if not args.ae:
            raise ValueError("avse mode requires --ae (trained autoencoder)")
        ae_model = ae_mod.LipAutoencoder.load(args.ae)
    cfg = _train_cfg(args)
    _, history = model_mod.train_se(
        records, base, ae_model, cfg, mode=args.mode, mu=args.mu,
        quantize_visual=not args.no_quantize_visual,
        log_path=args.log, state_path=args.state, ckpt_path=args.out,
        progress=lambda h: _log(
            f"[train-se] epoch {h['epoch']} train {h['train_loss']:.6f} "
            f"val {h['val_loss']:.6f}"))
    if not Path(args.out).exists():
        raise RuntimeError("training produced no checkpoint")
    _log(f"[train-se] done after {len(history)} epochs, best checkpoint {args.out}")
    return 0


def cmd_compress(args) -> int:
    ae_model = ae_mod.LipAutoencoder.load(args.ae)
    paths = sorted(Path(args.lips).glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no PPM frames under {args.lips}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload_total = 0
    file_total = 0
    for p in paths:
        img = ae_mod.read_ppm(p)
        z = ae_mod.flatten_latent(ae_model.encode(img)).astype(np.float32)
        blob = eofp.encode_to_bytes(z)
        (out_dir / (p.stem + ".eofp")).write_bytes(blob)
        payload_total += len(blob) - eofp.header_size(1)
        file_total += len(blob)
    n = len(paths)
    report = eofp.compression_report(3 * 64 * 64 * 4, ae_mod.LATENT_DIM)
    print(f"frames={n} r_ae={report.r_ae} r_qua={report.r_qua} "
          f"r_comp={report.r_comp} input_bytes_per_frame={report.input_bytes} "
          f"payload_bytes_per_frame={payload_total // n} "
          f"payload_bytes_total={payload_total} file_bytes_total={file_total}")
    return 0


def _load_latents_dir(path) -> np.ndarray:
    files = sorted(Path(path).glob("*.eofp"))
    if not files:
        raise FileNotFoundError(f"no .eofp containers under {path}")
    return np.stack([eofp.decode_from_bytes(f.read_bytes()) for f in files])


def cmd_enhance(args) -> int:
    se_model = model_mod.SeNet.load(args.model)
    ae_model = ae_mod.LipAutoencoder.load(args.ae) if args.ae else None
    if se_model.mode == "avse" and ae_model is None and not args.latents:
        raise ValueError("avse model needs --ae (or --latents) to enhance")
    if args.wav:
        noisy = audio.read_wav(args.wav)
        lips = corpus.load_lips(args.lips) if args.lips else None
        latents = _load_latents_dir(args.latents) if args.latents else None
        out = args.out or str(Path(args.wav).with_suffix("")) + ".enhanced.wav"
        wave = model_mod.enhance_utterance(
            se_model, ae_model, noisy, lip_frames=lips,
            quantize_visual=not args.no_quantize_visual, latents=latents)
        audio.write_wav(out, wave)
        _log(f"[enhance] wrote {out}")
        return 0
    if not args.corpus:
        raise ValueError("pass either --wav or --corpus")
    base = Path(args.corpus)
    records = _split_records(_manifest(base), args.split)
    out_dir = Path(args.out_dir) if args.out_dir else \
        base / args.split / f"enhanced_{se_model.mode}"
    for r in records:
        noisy = corpus.load_wav(base / r.noisy_path)
        lips = corpus.load_lips(base / r.lips_dir) if se_model.mode == "avse" else None
        wave = model_mod.enhance_utterance(
            se_model, ae_model, noisy, lip_frames=lips,
            quantize_visual=not args.no_quantize_visual)
        audio.write_wav(out_dir / Path(r.noisy_path).name, wave)
    _log(f"[enhance] wrote {len(records)} files under {out_dir}")
    return 0


def cmd_eval(args) -> int:
    se_model = model_mod.SeNet.load(args.model)
    ae_model = ae_mod.LipAutoencoder.load(args.ae) if args.ae else None
    if se_model.mode == "avse" and ae_model is None:
        raise ValueError("avse model needs --ae to evaluate")
    base = Path(args.corpus)
    records = _split_records(_manifest(base), args.split)
    rows_path = args.out_rows or base / f"eval_{se_model.mode}_rows.csv"
    agg_path = args.out_agg or base / f"eval_{se_model.mode}_agg.csv"
    report = metrics.evaluate(
        records, base, se_model, ae_model,
        quantize_visual=not args.no_quantize_visual,
        rows_path=rows_path, agg_path=agg_path,
        progress=lambda row: _log(
            f"[eval] {row.id} stoi {row.stoi_noisy:.4f}->{row.stoi_enh:.4f}"))
    overall = report.aggregate[-1]
    _log(f"[eval] overall stoi {overall['stoi_noisy']:.4f}->{overall['stoi_enh']:.4f} "
         f"sisdr {overall['sisdr_noisy']:.2f}->{overall['sisdr_enh']:.2f} "
         f"rows {rows_path} agg {agg_path}")
    return 0


def _svg_bar_chart(agg: list[dict], metric: str, title: str) -> str:
    rows = [a for a in agg if a["snr_db"] != "all"]
    pairs = [(a["snr_db"], a[f"{metric}_noisy"], a[f"{metric}_enh"]) for a in rows]
    lo = min(0.0, min(min(p[1], p[2]) for p in pairs))
    hi = max(max(p[1], p[2]) for p in pairs)
    if metric == "stoi":
        lo, hi = 0.0, 1.0
    span = (hi - lo) or 1.0
    width, height, margin = 640, 360, 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    group_w = plot_w / len(pairs)
    bar_w = group_w * 0.3
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{margin}" y1="{height-margin}" x2="{width-margin}" '
        f'y2="{height-margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height-margin}" stroke="black"/>',
    ]
    for i, (snr, nv, ev) in enumerate(pairs):
        cx = margin + (i + 0.5) * group_w
        for j, (val, color, label) in enumerate(
                ((nv, "#888888", "noisy"), (ev, "#2266cc", "enhanced"))):
            h = max(0.0, (val - lo) / span) * plot_h
            x = cx - bar_w + j * bar_w
            y = height - margin - h
            parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
                         f'height="{h:.1f}" fill="{color}"/>')
            parts.append(f'<text x="{x + bar_w/2:.1f}" y="{y - 4:.1f}" '
                         f'text-anchor="middle" font-size="9">{val:.3f}</text>')
        parts.append(f'<text x="{cx:.1f}" y="{height - margin + 16}" '
                     f'text-anchor="middle" font-size="12">{snr:g} dB</text>')
    parts.append(f'<rect x="{width-170}" y="{margin}" width="12" height="12" fill="#888888"/>')
    parts.append(f'<text x="{width-152}" y="{margin+11}" font-size="12">noisy</text>')
    parts.append(f'<rect x="{width-170}" y="{margin+18}" width="12" height="12" fill="#2266cc"/>')
    parts.append(f'<text x="{width-152}" y="{margin+29}" font-size="12">enhanced</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_chart(args) -> int:
    agg = metrics.read_aggregate_csv(args.agg)
    title = f"{args.metric.upper()} by SNR"
    svg = _svg_bar_chart(agg, args.metric, title)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(svg)
    _log(f"[chart] wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avse",
        description="Audio-visual speech enhancement with compressed lip features")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file; flags override it")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    add_common(p)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-utts", type=int, default=40)
    p.add_argument("--test-utts", type=int, default=12)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--fps", type=int, default=corpus.FPS_V)
    p.add_argument("--train-snrs", default="-12,-6,0,6,12")
    p.add_argument("--test-snrs", default="-1,-4,-7,-10")
    p.add_argument("--train-noises", default="white,babble,engine")
    p.add_argument("--test-noises", default="pink,street,music")
    p.set_defaults(func=cmd_synth)

    def add_train_opts(p):
        p.add_argument("--corpus", required=True, help="corpus directory or manifest")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--log", help="per-epoch CSV log path")
        p.add_argument("--state", help="resumable training state path")
        p.add_argument("--lr", type=float, default=nnet.ADAM_LR)
        p.add_argument("--epochs", type=int, default=60)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--val-fraction", type=float, default=0.1)
        p.add_argument("--patience", type=int, default=10)

    p = sub.add_parser("train-ae", help="train the lip autoencoder")
    add_common(p)
    add_train_opts(p)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-se", help="train an enhancement model")
    add_common(p)
    add_train_opts(p)
    p.add_argument("--mode", choices=("avse", "audio_only"), default="avse")
    p.add_argument("--ae", help="autoencoder checkpoint (avse mode)")
    p.add_argument("--mu", type=float, default=model_mod.MU_DEFAULT)
    p.add_argument("--no-quantize-visual", action="store_true",
                   help="feed raw latents instead of 4-bit round-tripped ones")
    p.set_defaults(func=cmd_train_se)

    p = sub.add_parser("compress", help="encode lip frames to 4-bit containers")
    add_common(p)
    p.add_argument("--ae", required=True)
    p.add_argument("--lips", required=True, help="directory of PPM frames")
    p.add_argument("--out", required=True, help="output directory for .eofp files")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("enhance", help="enhance noisy audio")
    add_common(p)
    p.add_argument("--model", required=True, help="enhancement checkpoint")
    p.add_argument("--ae", help="autoencoder checkpoint (avse mode)")
    p.add_argument("--wav", help="single noisy wav to enhance")
    p.add_argument("--lips", help="lip-frame directory for --wav")
    p.add_argument("--latents", help="directory of .eofp latents for --wav")
    p.add_argument("--out", help="output wav path for --wav")
    p.add_argument("--corpus", help="corpus directory (batch mode)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out-dir", help="output directory (batch mode)")
    p.add_argument("--no-quantize-visual", action="store_true")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="score noisy vs enhanced on a corpus split")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--ae")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out-rows", help="per-utterance CSV path")
    p.add_argument("--out-agg", help="per-SNR aggregate CSV path")
    p.add_argument("--no-quantize-visual", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("chart", help="render an SVG bar chart from an aggregate CSV")
    add_common(p)
    p.add_argument("--agg", required=True, help="aggregate CSV from eval")
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("--metric", choices=("stoi", "sisdr"), default="stoi")
    p.set_defaults(func=cmd_chart)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith("-"):
        argv = _inject_config(argv)
    args = parser.parse_args(argv)
    _echo_config(args.cmd, args)
    try:
        return args.func(args)
    except Exception as exc:  # uniform runtime-failure contract
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
