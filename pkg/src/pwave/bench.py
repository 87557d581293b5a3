"""Encode/decode timing harness comparing context models on a corpus of images."""

from __future__ import annotations

import csv
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codec import decode_plane, encode_plane, pad_plane, psnr
from .imageio import list_images, read_luma, to_unit
from .model import ModelConfig, PWaveModel, analytic_invocations

# published decode speedups of the four-step model over the autoregressive one
REFERENCE_SPEEDUP = {"four-step": 354.0, "four-step-ll": 244.0}

TIMING_NOTE = ("timed region: transform, entropy-parameter estimation and range coding; "
               "file I/O and model loading excluded")


def desk_config(name: str, seed: int = 0) -> ModelConfig:
    """Small float32 configurations used for wall-clock comparisons."""
    context, ll = {"ar": ("ar", "ar"), "four-step": ("four-step", "ar"),
                   "four-step-ll": ("four-step", "four-step")}[name]
    return ModelConfig(context=context, ll_context=ll, context_width=16, long_context_width=8,
                       lifting_width=8, post_width=8, seed=seed, precision="float32")


def desk_models(names=("ar", "four-step")) -> dict[str, PWaveModel]:
    return {n: PWaveModel(desk_config(n)) for n in names}


@dataclass
class BenchRow:
    image: str
    model: str
    repetition: int
    context_id: int
    height: int
    width: int
    encode_seconds: float
    decode_seconds: float
    encoder_invocations: int
    decoder_invocations: int
    analytic_invocations: int
    bpp: float
    psnr: float
    exact: bool


def bench_image(name: str, plane01: np.ndarray, models: dict[str, PWaveModel],
                repetitions: int = 1) -> list[BenchRow]:
    rows = []
    ph, pw = pad_plane(plane01).shape
    for mname, model in models.items():
        for rep in range(repetitions):
            coded = encode_plane(plane01, model)
            dec = decode_plane(coded.bitstream, model)
            rows.append(BenchRow(
                name, mname, rep, model.config.context_id, *plane01.shape,
                coded.seconds, dec.seconds, coded.invocations, dec.invocations,
                analytic_invocations(model.config, ph, pw), coded.bpp,
                psnr(plane01, dec.plane), bool(np.array_equal(dec.plane, coded.reconstruction)),
            ))
    return rows


def run_bench(corpus, models: dict[str, PWaveModel], repetitions: int = 1) -> list[BenchRow]:
    rows = []
    for path in list_images(corpus):
        rows.extend(bench_image(path.name, to_unit(read_luma(path)), models, repetitions))
    return rows


def summarize(rows: list[BenchRow], baseline: str = "ar") -> dict[str, dict]:
    """Median times per (image, model) and decode/encode speedups over ``baseline``."""
    med = {}
    for r in rows:
        med.setdefault((r.image, r.model), []).append(r)
    stats = {k: {"encode": statistics.median(x.encode_seconds for x in v),
                 "decode": statistics.median(x.decode_seconds for x in v)} for k, v in med.items()}
    out = {}
    for (image, model), s in stats.items():
        base = stats.get((image, baseline))
        if base is None or model == baseline:
            continue
        d = out.setdefault(model, {"decode_speedup": [], "encode_speedup": []})
        d["decode_speedup"].append(base["decode"] / s["decode"])
        d["encode_speedup"].append(base["encode"] / s["encode"])
    for model, d in out.items():
        d["min_decode_speedup"] = min(d["decode_speedup"])
        d["median_decode_speedup"] = statistics.median(d["decode_speedup"])
        d["reference_speedup"] = REFERENCE_SPEEDUP.get(model)
    return out


def write_report(path, rows: list[BenchRow]):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {TIMING_NOTE}\n")
        w = csv.DictWriter(fh, fieldnames=list(asdict(rows[0]).keys()) if rows else ["image"])
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
