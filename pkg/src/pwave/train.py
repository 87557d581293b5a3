"""Rate-distortion training, checkpoints and finetuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .entropy import rate_bits_torch
from .imageio import ImageFormatError, list_images, read_luma, read_video
from .model import LAMBDAS, PIXEL_SCALE, ModelConfig, PWaveModel
from .nn import AdamW, AdamWHyper, load_weights, save_weights

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.08
    patch_size: int = 64
    batch_size: int = 8
    epochs: int = 1
    lr: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.patch_size % 16 or self.batch_size < 1:
            raise ValueError(f"invalid training configuration {self}")

    @property
    def lambda_id(self) -> int:
        """Index into the reference lambda set, or 255 for any other value."""
        for i, v in enumerate(LAMBDAS):
            if math.isclose(v, self.lam):
                return i
        return 255

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- data

class PatchStream:
    """Deterministic random crops from a list of uint8 luma planes.

    Patches for a given (seed, epoch) are always the same; planes smaller
    than the patch are replicate-padded first.
    """

    def __init__(self, planes: list[np.ndarray], patch_size: int, seed: int = 0):
        if not planes:
            raise ValueError("empty dataset")
        self.patch_size = patch_size
        self.seed = seed
        self.planes = [self._fit(np.asarray(p)) for p in planes]

    def _fit(self, p: np.ndarray) -> np.ndarray:
        ph, pw = max(0, self.patch_size - p.shape[0]), max(0, self.patch_size - p.shape[1])
        return np.pad(p, ((0, ph), (0, pw)), mode="edge") if ph or pw else p

    def __len__(self):
        return len(self.planes)

    def epoch(self, index: int = 0) -> np.ndarray:
        """All planes once, shuffled, as a (N, 1, P, P) float64 array in [0, 1]."""
        rng = np.random.default_rng([self.seed, index])
        order = rng.permutation(len(self.planes))
        s = self.patch_size
        out = np.empty((len(order), 1, s, s))
        for i, j in enumerate(order):
            p = self.planes[j]
            y = rng.integers(0, p.shape[0] - s + 1)
            x = rng.integers(0, p.shape[1] - s + 1)
            out[i, 0] = p[y:y + s, x:x + s] / 255.0
        return out


def ingest_dataset(directory, patch_size: int = 64, seed: int = 0) -> PatchStream:
    planes = []
    for path in list_images(directory):
        try:
            planes.append(read_luma(path))
        except (OSError, ImageFormatError, ValueError) as e:
            log.warning("skipping %s: %s", path, e)
    if not planes:
        raise ValueError(f"no decodable images in {directory}")
    return PatchStream(planes, patch_size, seed)


# ---------------------------------------------------------------- loss

def rd_loss(x, x_hat, symbols: dict, params: dict, lam: float) -> dict:
    """R + lam * D with R in bits per pixel and D the MSE on the 8-bit scale."""
    pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    rate = sum(rate_bits_torch(symbols[k], *params[k]) for k in symbols)
    bpp = rate / pixels
    mse = torch.mean(((x - x_hat) * PIXEL_SCALE) ** 2)
    loss = bpp + lam * mse
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss (bpp={bpp.item()}, mse={mse.item()}, batch={tuple(x.shape)}, "
            f"input range=[{x.min().item():.3g}, {x.max().item():.3g}])"
        )
    return {"loss": loss, "bpp": bpp, "mse": mse}


def _psnr(mse: float) -> float:
    return float("inf") if mse <= 0 else 10 * math.log10(255.0 ** 2 / mse)


def evaluate(model: PWaveModel, patches: np.ndarray, lam: float, batch_size: int = 8) -> dict:
    """Mean loss/bpp/MSE without updates (teacher-forced rate)."""
    tot = {"loss": 0.0, "bpp": 0.0, "mse": 0.0}
    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            x = torch.as_tensor(patches[i:i + batch_size], dtype=model.dtype)
            out = model(x)
            m = rd_loss(x, out["x_hat"], out["symbols"], out["params"], lam)
            for k in tot:
                tot[k] += m[k].item() * len(x)
    res = {k: v / len(patches) for k, v in tot.items()}
    res["psnr"] = _psnr(res["mse"])
    return res


def make_optimizer(model: PWaveModel, config: TrainConfig) -> AdamW:
    return AdamW(model.named_parameters(), AdamWHyper(lr=config.lr, weight_decay=config.weight_decay))


def train_step(model: PWaveModel, x: torch.Tensor, optimizer: AdamW, lam: float) -> dict:
    optimizer.zero_grad()
    out = model(x)
    m = rd_loss(x, out["x_hat"], out["symbols"], out["params"], lam)
    m["loss"].backward()
    skipped = optimizer.step()
    if skipped:
        log.warning("skipped non-finite gradients for %s", skipped)
    return {k: v.item() for k, v in m.items()}


def train_epoch(data, model: PWaveModel, config: TrainConfig, optimizer: AdamW | None,
                epoch: int = 0) -> dict:
    """One pass over ``data`` (PatchStream or (N, 1, P, P) array); returns mean metrics.

    ``optimizer=None`` evaluates without updating (frozen weights).
    """
    patches = data.epoch(epoch) if isinstance(data, PatchStream) else np.asarray(data)
    if len(patches) == 0:
        raise ValueError("empty dataset")
    if optimizer is None:
        return evaluate(model, patches, config.lam, config.batch_size)
    tot = {"loss": 0.0, "bpp": 0.0, "mse": 0.0}
    n = 0
    for i in range(0, len(patches), config.batch_size):
        x = torch.as_tensor(patches[i:i + config.batch_size], dtype=model.dtype)
        m = train_step(model, x, optimizer, config.lam)
        for k in tot:
            tot[k] += m[k] * len(x)
        n += len(x)
    res = {k: v / n for k, v in tot.items()}
    res["psnr"] = _psnr(res["mse"])
    return res


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: PWaveModel
    optimizer: AdamW
    config: TrainConfig
    epoch: int = 0


def save_checkpoint(path, ckpt: Checkpoint):
    tensors = {f"model.{k}": v for k, v in ckpt.model.state_dict().items() if not k.endswith(".mask")}
    tensors.update(ckpt.optimizer.state_tensors())
    meta = {
        "config": asdict(ckpt.model.config),
        "train": asdict(ckpt.config),
        "epoch": ckpt.epoch,
        "steps": dict(ckpt.optimizer.state.steps),
        "lambda_id": ckpt.config.lambda_id,
    }
    save_weights(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = load_weights(path)
    if "train" not in meta:
        raise ValueError(f"{path} is a model file, not a training checkpoint")
    model = PWaveModel(ModelConfig.from_dict(meta["config"]))
    model.load_tensors({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    config = TrainConfig.from_dict(meta["train"])
    opt = make_optimizer(model, config)
    opt.load_state_tensors(tensors, meta.get("steps", {}))
    return Checkpoint(model, opt, config, int(meta["epoch"]))


def export_model(ckpt: Checkpoint, path):
    """Standalone model file for the codec (records the lambda id)."""
    ckpt.model.save(path, {"lambda": ckpt.config.lam, "lambda_id": ckpt.config.lambda_id})


# ---------------------------------------------------------------- drivers

def train(data, config: TrainConfig, model: PWaveModel | None = None, ckpt_dir=None,
          metrics_csv=None, start: Checkpoint | None = None) -> Checkpoint:
    """Train for ``config.epochs`` epochs, optionally checkpointing and logging each epoch."""
    if start is not None:
        ckpt = start
    else:
        model = model or PWaveModel()
        ckpt = Checkpoint(model, make_optimizer(model, config), config, 0)
    writer = None
    if metrics_csv is not None:
        fh = open(metrics_csv, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["epoch", "loss", "bpp", "mse", "psnr"])
    try:
        for _ in range(config.epochs):
            torch.manual_seed(config.seed * 1000003 + ckpt.epoch)
            m = train_epoch(data, ckpt.model, config, ckpt.optimizer, ckpt.epoch)
            ckpt.epoch += 1
            log.info("epoch %d: loss %.4f bpp %.4f mse %.3f psnr %.2f",
                     ckpt.epoch, m["loss"], m["bpp"], m["mse"], m["psnr"])
            if writer is not None:
                writer.writerow([ckpt.epoch, m["loss"], m["bpp"], m["mse"], m["psnr"]])
                fh.flush()
            if ckpt_dir is not None:
                Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(ckpt_dir) / f"lambda{config.lam:g}_epoch{ckpt.epoch}.ckpt", ckpt)
    finally:
        if writer is not None:
            fh.close()
    return ckpt


def finetune_from(source: Checkpoint | str | Path, lam: float, data, epochs: int = 1,
                  config: TrainConfig | None = None, **kwargs) -> Checkpoint:
    """Continue training a checkpoint at a new lambda with fresh optimizer state."""
    src = load_checkpoint(source) if isinstance(source, (str, Path)) else source
    base = config or src.config
    cfg = TrainConfig(**{**asdict(base), "lam": lam, "epochs": epochs})
    model = PWaveModel(src.model.config)
    model.load_tensors(src.model.state_dict())
    start = Checkpoint(model, make_optimizer(model, cfg), cfg, 0)
    return train(data, cfg, start=start, **kwargs)


# ---------------------------------------------------------------- video

def gop_patches(video_paths, patch_size: int = 64, seed: int = 0, per_video: int = 4):
    """Temporal subbands of random GOP crops: (lowpass, highpass) arrays in [0, 1] units.

    Subband values are signed; they are scaled by 1/255 like pixels so the
    same models apply.
    """
    from .mctf import GOP_SIZE, mctf_forward

    rng = np.random.default_rng(seed)
    lows, highs = [], []
    for path in video_paths:
        frames = read_video(path)
        for _ in range(per_video):
            if len(frames) < GOP_SIZE:
                break
            t = rng.integers(0, len(frames) - GOP_SIZE + 1)
            h, w = frames[0].shape
            y = rng.integers(0, max(1, h - patch_size + 1))
            x = rng.integers(0, max(1, w - patch_size + 1))
            gop = [PatchStream([f[y:y + patch_size, x:x + patch_size]], patch_size).planes[0]
                   for f in frames[t:t + GOP_SIZE]]
            sub = mctf_forward(gop)
            frames_ = sub.frames()
            lows.append(frames_[0] / 255.0)
            highs.extend(f / 255.0 for f in frames_[1:])
    if not lows:
        raise ValueError("no GOP of 8 frames found in the video set")
    return np.stack(lows)[:, None], np.stack(highs)[:, None]


def train_video(video_paths, config: TrainConfig, image_ckpt: Checkpoint | None = None,
                per_video: int = 4) -> tuple[Checkpoint, Checkpoint]:
    """Two-stage schedule: start both subband models from an image model, then
    finetune one on temporal lowpass and one on highpass subbands."""
    low, high = gop_patches(video_paths, config.patch_size, config.seed, per_video)
    base = image_ckpt or train(low, config)
    ck_l = finetune_from(base, config.lam, low, config.epochs, config)
    ck_h = finetune_from(base, config.lam, high, config.epochs, config)
    return ck_l, ck_h
