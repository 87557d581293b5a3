"""Command-line entry point: ``pwavec <command> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .imageio import read_luma, read_video, to_uint8, to_unit, write_pgm, write_video
from .model import LAMBDAS, ModelConfig, PWaveModel

log = logging.getLogger("pwave")

_MODEL_FLAGS = {
    "context": dict(choices=["four-step", "ar"]),
    "ll_context": dict(choices=["ar", "four-step"]),
    "base_wavelet": dict(choices=["haar", "cdf53"]),
    "integer_lifting": dict(action="store_true", default=None),
    "context_width": dict(type=int),
    "long_context_width": dict(type=int),
    "lifting_width": dict(type=int),
    "post_width": dict(type=int),
    "precision": dict(choices=["float64", "float32"]),
    "seed": dict(type=int),
}


def _add_model_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model configuration (used when no model file is given)")
    for name, kw in _MODEL_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, **kw)


def _model_config(args) -> ModelConfig:
    given = {k: getattr(args, k) for k in _MODEL_FLAGS if getattr(args, k, None) is not None}
    return ModelConfig(**given)


def _load_model(args, path=None) -> PWaveModel:
    path = path if path is not None else getattr(args, "model", None)
    if path is None:
        return PWaveModel(_model_config(args))
    model = PWaveModel.load(path)
    for key in ("context", "ll_context"):
        want = getattr(args, key, None)
        if want is not None and want != getattr(model.config, key):
            raise ValueError(f"--{key.replace('_', '-')} {want} conflicts with model file ({getattr(model.config, key)})")
    return model


def _read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use flag names."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        v = v.strip('"').strip("'")
        if v.lower() in ("true", "false"):
            v = v.lower() == "true"
        out[k.replace("-", "_")] = v
    return out


# ---------------------------------------------------------------- commands

def cmd_init_model(args):
    model = PWaveModel(_model_config(args))
    model.save(args.out)
    print(f"wrote {args.out} (context id {model.config.context_id})")


def cmd_encode(args):
    from .codec import encode_plane, psnr

    model = _load_model(args)
    plane = to_unit(read_luma(args.input))
    coded = encode_plane(plane, model, args.lambda_id)
    Path(args.output).write_bytes(coded.bitstream)
    if args.recon:
        write_pgm(args.recon, to_uint8(coded.reconstruction))
    print(f"{args.output}: {len(coded.bitstream)} bytes, {coded.bpp:.4f} bpp, "
          f"PSNR {psnr(plane, coded.reconstruction):.2f} dB, {coded.invocations} network calls")


def cmd_decode(args):
    from .codec import decode_plane

    model = _load_model(args)
    dec = decode_plane(Path(args.input).read_bytes(), model)
    write_pgm(args.output, to_uint8(dec.plane))
    if args.raw:
        np.save(args.raw, dec.plane)
    print(f"{args.output}: {dec.plane.shape[1]}x{dec.plane.shape[0]}, {dec.invocations} network calls")


def cmd_encode_video(args):
    from .codec import psnr
    from .mctf import encode_video

    ml, mh = _load_model(args, args.model_l), _load_model(args, args.model_h)
    frames = read_video(args.input)
    coded = encode_video(frames, ml, mh, args.lambda_id)
    Path(args.output).write_bytes(coded.bitstream)
    if args.recon:
        write_video(args.recon, coded.reconstruction)
    p = np.mean([psnr(a / 255.0, b / 255.0) for a, b in zip(frames, coded.reconstruction)])
    print(f"{args.output}: {len(frames)} frames, {coded.bpp:.4f} bpp, PSNR {p:.2f} dB")


def cmd_decode_video(args):
    from .mctf import decode_video

    ml, mh = _load_model(args, args.model_l), _load_model(args, args.model_h)
    frames = decode_video(Path(args.input).read_bytes(), ml, mh)
    write_video(args.output, frames)
    print(f"{args.output}: {len(frames)} frames")


def cmd_train(args):
    from .train import TrainConfig, export_model, finetune_from, ingest_dataset, train

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lams = [float(x) for x in str(args.lam).split(",")] if args.lam is not None else list(LAMBDAS)
    base = dict(patch_size=args.patch_size, batch_size=args.batch_size, epochs=args.epochs,
                lr=args.lr, seed=args.seed or 0)
    data = ingest_dataset(args.data, args.patch_size, base["seed"])
    source = args.finetune
    if source is None and len(lams) > 1 and 0.08 in lams:
        # the high-rate model is trained first; the others start from it
        lams = [0.08] + [x for x in lams if x != 0.08]
    for lam in lams:
        cfg = TrainConfig(lam=lam, **base)
        csv_path = out / f"metrics_lambda{lam:g}.csv"
        ck_dir = out / "checkpoints"
        if source is not None:
            ckpt = finetune_from(source, lam, data, cfg.epochs, cfg, ckpt_dir=ck_dir, metrics_csv=csv_path)
        else:
            ckpt = train(data, cfg, PWaveModel(_model_config(args)), ck_dir, csv_path)
            if lam == 0.08 and len(lams) > 1:
                source = ck_dir / f"lambda{lam:g}_epoch{ckpt.epoch}.ckpt"
        model_path = out / f"model_lambda{lam:g}.pwnn"
        export_model(ckpt, model_path)
        print(f"lambda {lam:g}: {model_path}")


def cmd_bench(args):
    from .bench import desk_models, run_bench, summarize, write_report

    if args.model:
        models = {}
        for spec in args.model:
            name, _, path = spec.partition("=")
            models[name] = PWaveModel.load(path)
    else:
        models = desk_models(tuple(args.desk_models.split(",")))
    rows = run_bench(args.corpus, models, args.repetitions)
    if not rows:
        raise ValueError(f"no images in {args.corpus}")
    write_report(args.out, rows)
    for r in rows:
        print(f"{r.image} {r.model} rep{r.repetition}: enc {r.encode_seconds:.3f}s "
              f"dec {r.decode_seconds:.3f}s calls {r.decoder_invocations} bpp {r.bpp:.3f}")
    for model, s in summarize(rows, args.baseline).items():
        ref = f" (published: {s['reference_speedup']:g}x)" if s["reference_speedup"] else ""
        print(f"{model}: decode speedup min {s['min_decode_speedup']:.1f}x "
              f"median {s['median_decode_speedup']:.1f}x over {args.baseline}{ref}")


def cmd_impulse(args):
    from .codec import subband_impulse_response

    model = _load_model(args)
    resp = subband_impulse_response(model, to_unit(read_luma(args.image)))
    peak = max(float(np.abs(r).max()) for r in resp.values()) or 1.0
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for label, r in resp.items():
        img = np.clip(np.floor(128 + 127 * r / peak + 0.5), 0, 255).astype(np.uint8)
        write_pgm(out / f"impulse_{label}.pgm", img)
    print(f"wrote {len(resp)} responses to {out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwavec", description="Learned wavelet image and video codec.")
    p.add_argument("--config", help="key = value file providing defaults for flags")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-model", help="write an untrained model file")
    _add_model_flags(s)
    s.add_argument("out")
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("encode", help="encode an image (luma)")
    s.add_argument("--model")
    s.add_argument("--lambda-id", type=int, default=0)
    s.add_argument("--recon", help="also write the reconstruction as PGM")
    _add_model_flags(s)
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="decode a PWVC bitstream to PGM")
    s.add_argument("--model")
    s.add_argument("--raw", help="also save the unquantised reconstruction (.npy)")
    _add_model_flags(s)
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_decode)

    for name, func in (("encode-video", cmd_encode_video), ("decode-video", cmd_decode_video)):
        s = sub.add_parser(name, help=f"{name.split('-')[0]} a Y4M file or PGM-frame directory")
        s.add_argument("--model-l", help="model for temporal lowpass frames")
        s.add_argument("--model-h", help="model for temporal highpass frames")
        if name == "encode-video":
            s.add_argument("--lambda-id", type=int, default=0)
            s.add_argument("--recon")
        _add_model_flags(s)
        s.add_argument("input")
        s.add_argument("output")
        s.set_defaults(func=func)

    s = sub.add_parser("train", help="rate-distortion training on an image folder")
    s.add_argument("--data", required=True)
    s.add_argument("--lambda", dest="lam", help="value or comma list (default: the five reference values)")
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--patch-size", type=int, default=64)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--finetune", help="checkpoint to finetune from (normally the lambda 0.08 one)")
    s.add_argument("--out-dir", default="runs")
    _add_model_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("bench", help="compare encode/decode times of context models")
    s.add_argument("--corpus", required=True)
    s.add_argument("--model", action="append", help="name=path; default: desk-scale untrained models")
    s.add_argument("--desk-models", default="ar,four-step")
    s.add_argument("--baseline", default="ar")
    s.add_argument("--repetitions", type=int, default=1)
    s.add_argument("--out", default="bench.csv")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("impulse", help="write the 13 subband impulse responses as PGM")
    s.add_argument("--model")
    _add_model_flags(s)
    s.add_argument("image")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_impulse)
    return p


def _apply_config_file(parser: argparse.ArgumentParser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = _read_config_file(known.config)
    parser.set_defaults(**values)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest: a for a in sp._actions}
            sp.set_defaults(**{k: _coerce(dests[k], v) for k, v in values.items() if k in dests})


def _coerce(action, value):
    if action.type is not None and isinstance(value, str):
        return action.type(value)
    return value


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = os.environ.get("PWAVEC_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
