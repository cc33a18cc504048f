"""Three-phase adversarial training, optimization, checkpoints, eval.

Per batch the step runs, in order:

1. update generator (+ first registration net) on the mode's objective;
2. (dgr only) update the second registration net on the
   position-consistency objective;
3. update the discriminator.

Each phase clears all gradients, runs its own backward, and its Adam
update touches only that phase's parameters. The phase-1 generated
image and registration field are reused detached by phases 2 and 3
(standard GAN batch protocol: later phases see the pre-update values).

A NaN in any loss aborts training with a diagnostic dump; steps are
never silently skipped.
"""

from __future__ import annotations

import csv
import struct
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .losses import (LossWeights, LossBreakdown, adv_discriminator, check_breakdown,
                     objective_g_r1, objective_r2)
from .metrics import MetricsReport, mae_heatmap, psnr, ssim
from .nets import ModelBundle, ParamBlock, discriminator_forward, generator_forward, init_models, regnet_forward
from .synthdata import load_image, load_manifest
from .warp import field_stats

__all__ = [
    "TrainConfig",
    "StepRecord",
    "TrainingAborted",
    "CheckpointError",
    "load_config",
    "adam_update",
    "train_step",
    "run_training",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "PairDataset",
    "CSV_FIELDS",
]

CKPT_MAGIC = b"DGRCKPT1"

CSV_FIELDS = ["step", "epoch", "mode", "l1", "ssim", "smooth_r1", "adv",
              "t1", "t2", "t1r", "t2r", "total_g_r1", "total_r2", "total_d"]


class TrainingAborted(RuntimeError):
    """Raised when a loss goes non-finite; carries the diagnostic text."""

    def __init__(self, message: str, diagnostics: str = ""):
        super().__init__(message)
        self.diagnostics = diagnostics


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "dgr"
    weights: LossWeights = field(default_factory=LossWeights)
    lr_g: float = 5e-5
    lr_d: float = 1e-5
    lr_r1: float = 1e-5
    lr_r2: float = 1e-5
    epochs: int = 30          # desk-scale default; reference setting is 200
    batch: int = 4
    seed: int = 0
    crop: int = 64
    adam_betas: tuple[float, float] = (0.5, 0.999)
    t1_detach_field: bool = False
    checkpoint_every: int = 10

    def __post_init__(self):
        # lr 0 is allowed: it freezes a network in place (used by tests)
        for lr in (self.lr_g, self.lr_d, self.lr_r1, self.lr_r2):
            if lr < 0:
                raise ValueError("learning rates must be non-negative")
        if self.mode not in ("baseline", "rnr", "dgr"):
            raise ValueError(f"unknown mode {self.mode!r}")


def load_config(path) -> TrainConfig:
    """TOML config; keys match TrainConfig field names, loss weights go
    in a [weights] table. `mode` is required; unknown keys are errors."""
    try:
        import tomllib  # py >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib

    with open(path, "rb") as fh:
        raw = tomllib.load(fh)

    if "mode" not in raw:
        raise KeyError("config missing required key: mode")
    wraw = raw.pop("weights", {})
    wnames = {f.name for f in fields(LossWeights)}
    for key in wraw:
        if key not in wnames:
            raise KeyError(f"unknown [weights] config key: {key}")
    cnames = {f.name for f in fields(TrainConfig)} - {"weights"}
    for key in raw:
        if key not in cnames:
            raise KeyError(f"unknown config key: {key}")
    if "adam_betas" in raw:
        raw["adam_betas"] = tuple(raw["adam_betas"])
    return TrainConfig(weights=LossWeights(**wraw), **raw)


@dataclass
class StepRecord:
    step: int
    epoch: int
    mode: str
    l1: float = 0.0
    ssim: float = 0.0
    smooth_r1: float = 0.0
    adv: float = 0.0
    t1: float = 0.0
    t2: float = 0.0
    t1r: float = 0.0
    t2r: float = 0.0
    total_g_r1: float = 0.0
    total_r2: float = 0.0
    total_d: float = 0.0

    def row(self) -> list:
        return [getattr(self, k) for k in CSV_FIELDS]


def adam_update(params: np.ndarray, grads: np.ndarray, m: np.ndarray, v: np.ndarray,
                lr: float, betas: tuple[float, float] = (0.5, 0.999),
                eps: float = 1e-8, step: int = 1) -> None:
    """Bias-corrected Adam, in place; runs in the buffers' dtype."""
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * grads * grads
    mhat = m / (1.0 - b1 ** step)
    vhat = v / (1.0 - b2 ** step)
    params -= lr * mhat / (np.sqrt(vhat) + eps)


def _adam_step(block: ParamBlock, lr: float, cfg: TrainConfig) -> None:
    block.step_count += 1
    adam_update(block.flat, block.flat_grad, block.m, block.v,
                lr, cfg.adam_betas, step=block.step_count)


def _freeze_all(bundle: ModelBundle) -> None:
    for blk in bundle.blocks().values():
        blk.set_requires_grad(False)
        blk.zero_grad()


def _tensor_stats(name: str, arr: np.ndarray) -> str:
    return (f"{name}: shape={arr.shape} min={np.nanmin(arr):.6g} "
            f"max={np.nanmax(arr):.6g} mean={np.nanmean(arr):.6g} "
            f"nan={int(np.isnan(arr).sum())} inf={int(np.isinf(arr).sum())}")


def _abort(bundle: ModelBundle, x: Tensor, y: Tensor, phase: str,
           err: Exception, extra: dict) -> TrainingAborted:
    lines = [f"non-finite loss in {phase}: {err}",
             _tensor_stats("x", x.data), _tensor_stats("y", y.data)]
    for name, arr in extra.items():
        lines.append(_tensor_stats(name, arr))
    for bname, blk in bundle.blocks().items():
        lines.append(_tensor_stats(f"params.{bname}", blk.flat))
    return TrainingAborted(str(err), "\n".join(lines))


def phase_g_r1(bundle: ModelBundle, x: Tensor, y: Tensor, cfg: TrainConfig,
               rec: StepRecord):
    """Phase 1: update generator (and r1 when present); returns the
    generated image and r1 field, detached, for the later phases."""
    _freeze_all(bundle)
    bundle.generator.set_requires_grad(True)
    if cfg.mode in ("rnr", "dgr"):
        bundle.r1.set_requires_grad(True)
    total, bd, gx, r1_field = objective_g_r1(x, y, bundle, cfg.weights, mode=cfg.mode,
                                             t1_detach_field=cfg.t1_detach_field)
    try:
        check_breakdown(bd, "phase1")
    except FloatingPointError as err:
        raise _abort(bundle, x, y, "phase 1", err, {"gx": gx.data}) from err
    T.backward(total)
    _adam_step(bundle.generator, cfg.lr_g, cfg)
    if cfg.mode in ("rnr", "dgr"):
        _adam_step(bundle.r1, cfg.lr_r1, cfg)
    rec.l1, rec.ssim, rec.smooth_r1 = bd.l1, bd.ssim, bd.smooth_r1
    rec.adv, rec.t1, rec.total_g_r1 = bd.adv, bd.t1, bd.total
    return T.detach(gx), (None if r1_field is None else r1_field.detached())


def phase_r2(bundle: ModelBundle, x: Tensor, y: Tensor, cfg: TrainConfig,
             rec: StepRecord, gx_d: Tensor, r1_field_d=None) -> None:
    """Phase 2 (dgr only): update the second registration net against
    the batch's pre-update generator output and r1 field."""
    _freeze_all(bundle)
    bundle.r2.set_requires_grad(True)
    total, bd = objective_r2(x, y, bundle, cfg.weights, gx=gx_d, r1_field=r1_field_d)
    try:
        check_breakdown(bd, "phase2")
    except FloatingPointError as err:
        raise _abort(bundle, x, y, "phase 2", err, {"gx": gx_d.data}) from err
    T.backward(total)
    _adam_step(bundle.r2, cfg.lr_r2, cfg)
    rec.t1, rec.t2, rec.t1r, rec.t2r = bd.t1, bd.t2, bd.t1r, bd.t2r
    rec.total_r2 = bd.total


def phase_d(bundle: ModelBundle, x: Tensor, y: Tensor, cfg: TrainConfig,
            rec: StepRecord, gx_d: Tensor) -> None:
    """Phase 3: update the discriminator on detached fakes."""
    _freeze_all(bundle)
    bundle.discriminator.set_requires_grad(True)
    d_fake = discriminator_forward(bundle.discriminator, gx_d)
    d_real = discriminator_forward(bundle.discriminator, y)
    total = adv_discriminator(d_fake, d_real)
    rec.total_d = total.item()
    if not np.isfinite(rec.total_d):
        raise _abort(bundle, x, y, "phase 3",
                     FloatingPointError(f"total_d={rec.total_d}"),
                     {"gx": gx_d.data, "d_fake": d_fake.data, "d_real": d_real.data})
    T.backward(total)
    _adam_step(bundle.discriminator, cfg.lr_d, cfg)


def train_step(bundle: ModelBundle, x: Tensor, y: Tensor, cfg: TrainConfig,
               step: int = 0, epoch: int = 0) -> StepRecord:
    """One optimization step over all phases; returns the loss record."""
    rec = StepRecord(step=step, epoch=epoch, mode=cfg.mode)
    gx_d, r1_field_d = phase_g_r1(bundle, x, y, cfg, rec)
    if cfg.mode == "dgr":
        phase_r2(bundle, x, y, cfg, rec, gx_d, r1_field_d)
    phase_d(bundle, x, y, cfg, rec, gx_d)
    _freeze_all(bundle)
    return rec


class PairDataset:
    """RAM-cached dataset split; images stored uint8, batched as f32."""

    def __init__(self, manifest_path, split: str):
        self.root = Path(manifest_path).parent
        self.records = [r for r in load_manifest(manifest_path) if r["split"] == split]
        if not self.records:
            raise FileNotFoundError(f"no {split!r} records in {manifest_path}")
        self.split = split
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def _load(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            img = load_image(self.root / rel)
            self._cache[rel] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        return self._cache[rel]

    def image(self, idx: int, key: str) -> np.ndarray:
        return self._load(self.records[idx]["files"][key]).astype(np.float32) / np.float32(255.0)

    def batch(self, indices, keys=("x", "y")) -> list[Tensor]:
        out = []
        for key in keys:
            arr = np.stack([self.image(i, key) for i in indices])
            out.append(Tensor(arr))
        return out


def run_training(cfg: TrainConfig, dataset_manifest, out_dir,
                 resume_from=None, log_every: int = 0) -> tuple[Path, Path]:
    """Full training run; returns (final checkpoint path, CSV path).

    Shuffling is a deterministic function of (seed, epoch), so two runs
    with one config are bitwise identical and a resumed run continues
    exactly where the checkpoint left off.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = PairDataset(dataset_manifest, "train")
    bundle = init_models(cfg.seed, image_channels=3, mode=cfg.mode)

    start_epoch = 0
    global_step = 0
    csv_path = out / "training_log.csv"
    if resume_from is not None:
        meta = load_checkpoint(resume_from, bundle)
        start_epoch = int(meta["epoch"])
        global_step = int(meta["step"])
        csv_fh = open(csv_path, "a", newline="")
        writer = csv.writer(csv_fh)
    else:
        csv_fh = open(csv_path, "w", newline="")
        writer = csv.writer(csv_fh)
        writer.writerow(CSV_FIELDS)

    n = len(data)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            rec = None
            for bstart in range(0, n, cfg.batch):
                idx = order[bstart:bstart + cfg.batch]
                x, y = data.batch(idx)
                try:
                    rec = train_step(bundle, x, y, cfg, step=global_step, epoch=epoch)
                except TrainingAborted as err:
                    (out / "nan_dump.txt").write_text(err.diagnostics)
                    raise
                writer.writerow(rec.row())
                global_step += 1
            if log_every and rec is not None and (epoch + 1) % log_every == 0:
                print(f"[{cfg.mode}] epoch {epoch + 1}/{cfg.epochs} "
                      f"l1={rec.l1:.4f} total={rec.total_g_r1:.4f}", file=sys.stderr)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                    and (epoch + 1) < cfg.epochs:
                save_checkpoint(out / f"ckpt_epoch{epoch + 1:04d}.dgrckpt", bundle,
                                epoch=epoch + 1, step=global_step)
    finally:
        csv_fh.close()

    final = out / "ckpt_final.dgrckpt"
    save_checkpoint(final, bundle, epoch=cfg.epochs, step=global_step)
    return final, csv_path


def evaluate(bundle: ModelBundle, dataset_manifest, cfg: TrainConfig,
             heatmap_dir=None, heatmap_count: int = 8,
             _gen_fn=generator_forward) -> MetricsReport:
    """Score the generator on the aligned test variant against the ideal
    target; probe the second registration net on the misaligned variant
    when present. `_gen_fn` is a test seam (e.g. an identity passthrough)."""
    data = PairDataset(dataset_manifest, "test")
    _freeze_all(bundle)
    report = MetricsReport()
    heat_written = 0
    if heatmap_dir is not None:
        Path(heatmap_dir).mkdir(parents=True, exist_ok=True)

    self_mag_sum = 0.0
    cross_mag_sum = 0.0
    n_probe = 0
    for bstart in range(0, len(data), cfg.batch):
        idx = list(range(bstart, min(bstart + cfg.batch, len(data))))
        (xa,) = data.batch(idx, keys=("x_aligned",))
        gx = _gen_fn(bundle.generator, xa)
        for k, i in enumerate(idx):
            pred = gx.data[k]
            target = data.image(i, "y_ideal")
            heat, mae = mae_heatmap(pred, target)
            report.rows.append({
                "id": data.records[i]["id"],
                "psnr": psnr(pred, target),
                "ssim": ssim(pred, target),
                "mae": mae,
            })
            if heatmap_dir is not None and heat_written < heatmap_count:
                from PIL import Image

                Image.fromarray(heat).save(Path(heatmap_dir) / f"{data.records[i]['id']}_mae.png")
                heat_written += 1
        if bundle.r2 is not None:
            xm, ym = data.batch(idx, keys=("x", "y"))
            gxm = _gen_fn(bundle.generator, xm)
            f_self = regnet_forward(bundle.r2, xm, gxm)
            f_cross = regnet_forward(bundle.r2, xm, ym)
            self_mag_sum += field_stats(f_self).mean_px * len(idx)
            cross_mag_sum += field_stats(f_cross).mean_px * len(idx)
            n_probe += len(idx)

    if n_probe:
        report.r2_self_px = self_mag_sum / n_probe
        report.r2_cross_px = cross_mag_sum / n_probe
    return report.finalize()


# ---------------------------------------------------------------------------
# checkpoint format: little-endian, magic + count + named f32 tensors
# ---------------------------------------------------------------------------

def _ckpt_entries(bundle: ModelBundle, epoch: int, step: int):
    for bname, blk in bundle.blocks().items():
        for pname, t in blk.tensors.items():
            yield f"{bname}.{pname}", t.data
        yield f"adam.{bname}.m", blk.m
        yield f"adam.{bname}.v", blk.v
        yield f"adam.{bname}.t", np.array([blk.step_count], dtype=np.float32)
    yield "meta.epoch", np.array([epoch], dtype=np.float32)
    yield "meta.step", np.array([step], dtype=np.float32)


def save_checkpoint(path, bundle: ModelBundle, epoch: int = 0, step: int = 0) -> None:
    entries = list(_ckpt_entries(bundle, epoch, step))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_bundle_auto(path, seed: int = 0):
    """Build a bundle matching the networks present in a checkpoint and
    load it. Returns (bundle, meta, mode)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    # cheap name scan to infer which registration nets were trained
    names = set()
    with open(path, "rb") as fh:
        fh.read(8)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            names.add(_read_exact(fh, nlen, "name").decode("utf-8"))
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            fh.seek(4 * (int(np.prod(shape)) if rank else 1), 1)
    if any(n.startswith("r2.") for n in names):
        mode = "dgr"
    elif any(n.startswith("r1.") for n in names):
        mode = "rnr"
    else:
        mode = "baseline"
    bundle = init_models(seed, mode=mode)
    meta = load_checkpoint(path, bundle)
    return bundle, meta, mode


def load_checkpoint(path, bundle: ModelBundle) -> dict:
    """Restore `bundle` in place; returns {'epoch': int, 'step': int}.

    The file is parsed fully before anything is written into the bundle,
    so a corrupt file never leaves a partial load behind."""
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            size = int(np.prod(shape)) if rank else 1
            payload = _read_exact(fh, 4 * size, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

    for bname, blk in bundle.blocks().items():
        for pname, t in blk.tensors.items():
            key = f"{bname}.{pname}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            if tensors[key].shape != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {key}: file {tensors[key].shape} vs model {t.data.shape}")
        for pname, t in blk.tensors.items():
            t.data[...] = tensors[f"{bname}.{pname}"]
        blk.m[...] = tensors[f"adam.{bname}.m"]
        blk.v[...] = tensors[f"adam.{bname}.v"]
        blk.step_count = int(tensors[f"adam.{bname}.t"][0])
    return {"epoch": int(tensors["meta.epoch"][0]), "step": int(tensors["meta.step"][0])}
