"""cMSE loss, the training loop with early stopping, checkpoints and split evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .degradation import Dataset, hr_patch_of
from .metrics import MetricsReport, score_patch
from .network import DeepSent, NetworkConfig, forward_all_bands, model_meta, model_from_container
from .paramfile import ParameterFileError, read_container, write_container
from .scene import BandStatistics, SceneStack, temporal_mean_bicubic
from .bands import group_of, sort_bands

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Raised when a batch produces a non-finite loss."""


def cmse_loss(sr: torch.Tensor, hr: torch.Tensor, d: int = 3, reduce: bool = True) -> torch.Tensor:
    """Bias-compensated MSE, minimized over integer offsets in ``[0, 2d]^2``.

    ``sr`` and ``hr`` are (H, W) or (B, H, W); with ``reduce`` the per-sample
    minima are averaged.
    """
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch {tuple(sr.shape)} vs {tuple(hr.shape)}")
    squeeze = sr.ndim == 2
    if squeeze:
        sr, hr = sr[None], hr[None]
    h, w = hr.shape[-2:]
    if min(h, w) <= 2 * d:
        raise ValueError(f"{h}x{w} is too small for border d={d}")
    hc, wc = h - 2 * d, w - 2 * d
    ref = hr[:, d:d + hc, d:d + wc]
    per_shift = []
    for u in range(2 * d + 1):
        for v in range(2 * d + 1):
            diff = ref - sr[:, u:u + hc, v:v + wc]
            diff = diff - diff.mean(dim=(-2, -1), keepdim=True)
            per_shift.append(diff.square().mean(dim=(-2, -1)))
    loss = torch.stack(per_shift, dim=-1).min(dim=-1).values
    if reduce:
        return loss.mean()
    return loss[0] if squeeze else loss


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    max_epochs: int = 200
    patience: int = 15
    crop_border: int = 3
    seed: int = 0
    device: str = "cpu"
    # target bands scored per patch and step; 0 scores every present band
    targets_per_patch: int = 1
    # temporal subsampling range per step (None: use every image)
    n_images_min: int | None = None
    n_images_max: int | None = None
    max_steps: int | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_border < 0:
            raise ValueError("crop_border must be >= 0")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("patience must be in [0, max_epochs)")
        if self.targets_per_patch < 0:
            raise ValueError("targets_per_patch must be >= 0")
        if (self.n_images_min is None) != (self.n_images_max is None):
            raise ValueError("set both n_images_min and n_images_max, or neither")
        if self.n_images_min is not None and not 1 <= self.n_images_min <= self.n_images_max:
            raise ValueError("need 1 <= n_images_min <= n_images_max")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    step: int = 0  # optimizer steps taken
    step_in_epoch: int = 0
    epoch_loss_sum: float = 0.0
    best_val: float | None = None
    best_epoch: int | None = None
    bad_epochs: int = 0
    stopped: str | None = None


@dataclass
class Checkpoint:
    model: DeepSent
    train_config: TrainConfig
    state: TrainState = field(default_factory=TrainState)
    optimizer_state: dict | None = None
    best_state: dict | None = None
    log: list[dict] = field(default_factory=list)

    def best_model(self) -> DeepSent:
        if self.best_state is None:
            return self.model
        m = DeepSent(self.model.config, self.model.stats)
        m.load_state_dict(self.best_state)
        return m

    def save(self, path) -> None:
        meta = model_meta(self.model)
        meta["train_config"] = asdict(self.train_config)
        meta["train_state"] = asdict(self.state)
        meta["log"] = self.log
        tensors = {"params/" + k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        if self.best_state is not None:
            tensors.update({"best/" + k: v.detach().cpu().numpy() for k, v in self.best_state.items()})
        if self.optimizer_state is not None:
            steps = {}
            for idx, st in self.optimizer_state["state"].items():
                steps[str(idx)] = float(st["step"])
                tensors[f"optim/{idx}/exp_avg"] = st["exp_avg"].cpu().numpy()
                tensors[f"optim/{idx}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
            meta["optim_steps"] = steps
        write_container(path, meta, tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, tensors = read_container(path)
        if "train_state" not in meta:
            raise ParameterFileError(f"{path}: not a training checkpoint")
        model = model_from_container(meta, tensors)
        cfg = TrainConfig(**meta["train_config"])
        best = {k[5:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("best/")} or None
        opt = None
        if "optim_steps" in meta:
            opt = {"state": {int(i): {"step": torch.tensor(s, dtype=torch.float32),
                                      "exp_avg": torch.from_numpy(tensors[f"optim/{i}/exp_avg"]),
                                      "exp_avg_sq": torch.from_numpy(tensors[f"optim/{i}/exp_avg_sq"])}
                             for i, s in meta["optim_steps"].items()}}
        return cls(model, cfg, TrainState(**meta["train_state"]), opt, best, meta.get("log", []))


def load_any_model(path) -> DeepSent:
    """Best-validation weights of a checkpoint, or the weights of a plain parameter file."""
    meta, tensors = read_container(path)
    if any(k.startswith("best/") for k in tensors):
        return model_from_container(meta, tensors, prefix="best/")
    return model_from_container(meta, tensors)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _make_optimizer(model: DeepSent, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas,
                            eps=cfg.adam_eps, foreach=False)


@dataclass
class Sample:
    patch_id: str
    lr: SceneStack
    hr: dict[str, np.ndarray]


def load_split(dataset: Dataset, split: str) -> list[Sample]:
    return [Sample(e.patch_id, lr, hr_patch_of(hr)) for e, lr, hr in dataset.iter_split(split)]


def _batch_inputs(samples: list[Sample], idx) -> dict[str, torch.Tensor]:
    bands = samples[0].lr.bands
    out = {}
    for b in bands:
        arr = np.stack([s.lr.series[b].images if idx is None else s.lr.series[b].images[idx]
                        for s in samples])
        out[b] = torch.from_numpy(arr)
    return out


def batch_loss(model: DeepSent, samples: list[Sample], targets: list[list[str]], d: int,
               idx=None) -> torch.Tensor:
    """Mean cMSE in reflectance space over (patch, target band) pairs."""
    dtype = next(model.parameters()).dtype
    inputs = {b: x.to(dtype) for b, x in _batch_inputs(samples, idx).items()}
    latent = model.encode(inputs)
    terms = []
    for b in sort_bands({t for ts in targets for t in ts}):
        rows = [i for i, ts in enumerate(targets) if b in ts]
        sel = torch.tensor(rows, dtype=torch.long)
        sr = model.denormalize(model.head(latent[sel], b, inputs[b][sel])[:, 0], b)
        hr = torch.from_numpy(np.stack([samples[i].hr[b] for i in rows])).to(dtype)
        terms.append(cmse_loss(sr, hr, d, reduce=False))
    return torch.cat(terms).mean()


def validation_loss(model: DeepSent, samples: list[Sample], d: int) -> float:
    if not samples:
        raise TrainingError("validation split is empty")
    with torch.no_grad():
        vals = [float(batch_loss(model, [s], [s.lr.bands], d)) for s in samples]
    return float(np.mean(vals))


def train(dataset, cfg: TrainConfig | None = None, network: NetworkConfig | None = None,
          init: Checkpoint | None = None, log_path=None, loss_log_path=None,
          on_epoch: Callable[[dict, "Checkpoint"], None] | None = None,
          on_step: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Train on the ``train`` split with early stopping on the ``val`` split.

    ``dataset`` is a :class:`Dataset`, a path to one, or a ``(train, val)`` pair
    of sample lists. Returns the latest checkpoint; its ``best_state`` holds the
    best-validation weights. Resuming from ``init`` continues bit-exactly.
    ``on_epoch(entry, checkpoint)`` runs after every validation pass and
    ``on_step(step, loss)`` after every optimizer step.
    """
    if isinstance(dataset, tuple):
        train_set, val_set = dataset
    else:
        ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
        train_set, val_set = load_split(ds, "train"), load_split(ds, "val")
    if not train_set or not val_set:
        raise TrainingError("training needs nonempty train and val splits")
    band_sets = {tuple(s.lr.bands) for s in train_set + val_set}
    if len(band_sets) != 1:
        raise TrainingError(f"all patches must share one band set, got {band_sets}")
    bands = list(band_sets.pop())
    n_avail = min(s.lr.series[b].n_images for s in train_set for b in bands)

    torch.use_deterministic_algorithms(True)
    if init is None:
        cfg = cfg or TrainConfig()
        stats = BandStatistics.from_stacks(s.lr for s in train_set)
        model = DeepSent(network or NetworkConfig(seed=cfg.seed), stats)
        ckpt = Checkpoint(model, cfg)
    else:
        ckpt = init
        if cfg is not None:
            ckpt.train_config = cfg
        cfg, model = ckpt.train_config, ckpt.model
    st = ckpt.state
    if st.stopped == "max_epochs" and st.epoch < cfg.max_epochs:
        st.stopped = None
    if cfg.n_images_max is not None and cfg.n_images_max > n_avail:
        raise TrainingError(f"n_images_max={cfg.n_images_max} but patches hold {n_avail} images")

    opt = _make_optimizer(model, cfg)
    if ckpt.optimizer_state is not None:
        sd = opt.state_dict()
        sd["state"] = ckpt.optimizer_state["state"]
        opt.load_state_dict(sd)
    n_batches = math.ceil(len(train_set) / cfg.batch_size)
    model.train()

    while st.epoch < cfg.max_epochs and st.stopped is None:
        order = _rng(cfg.seed, 1, st.epoch).permutation(len(train_set))
        while st.step_in_epoch < n_batches:
            if cfg.max_steps is not None and st.step >= cfg.max_steps:
                ckpt.optimizer_state = opt.state_dict()
                return ckpt
            k = st.step_in_epoch
            batch = [train_set[i] for i in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            rng = _rng(cfg.seed, 2, st.epoch, k)
            idx = None
            if cfg.n_images_min is not None:
                n = int(rng.integers(cfg.n_images_min, cfg.n_images_max + 1))
                idx = np.sort(rng.choice(n_avail, size=n, replace=False))
            if cfg.targets_per_patch == 0:
                targets = [bands for _ in batch]
            else:
                m = min(cfg.targets_per_patch, len(bands))
                targets = [sort_bands(rng.choice(bands, size=m, replace=False)) for _ in batch]
            opt.zero_grad(set_to_none=True)
            loss = batch_loss(model, batch, targets, cfg.crop_border, idx)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {st.epoch + 1} batch {k + 1} (patches {[s.patch_id for s in batch]})")
            loss.backward()
            opt.step()
            st.epoch_loss_sum += loss.item()
            st.step += 1
            st.step_in_epoch += 1
            if on_step is not None:
                on_step(st.step, loss.item())

        model.eval()
        val = validation_loss(model, val_set, cfg.crop_border)
        model.train()
        entry = {"epoch": st.epoch + 1, "step": st.step,
                 "train_loss": st.epoch_loss_sum / n_batches, "val_loss": val}
        if st.best_val is None or val < st.best_val:
            st.best_val, st.best_epoch, st.bad_epochs = val, st.epoch + 1, 0
            ckpt.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            st.bad_epochs += 1
        st.epoch += 1
        st.step_in_epoch = 0
        st.epoch_loss_sum = 0.0
        if st.bad_epochs >= cfg.patience:
            st.stopped = "early_stopping"
        elif st.epoch >= cfg.max_epochs:
            st.stopped = "max_epochs"
        ckpt.log.append(dict(entry, timestamp=time.time()))
        _append_jsonl(loss_log_path, entry)
        _append_jsonl(log_path, ckpt.log[-1])
        if on_epoch is not None:
            ckpt.optimizer_state = opt.state_dict()
            on_epoch(entry, ckpt)
        log.info("epoch %d: train %.6g val %.6g", entry["epoch"], entry["train_loss"], val)

    ckpt.optimizer_state = opt.state_dict()
    return ckpt


def _append_jsonl(path, entry: dict) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# evaluation

Predictor = Callable[[SceneStack], Mapping[str, np.ndarray]]


def bicubic_baseline(stack: SceneStack) -> dict[str, np.ndarray]:
    """Temporal mean of every band, bicubically upsampled to the output grid."""
    return {b: temporal_mean_bicubic(s, group_of(b).upscale_to_output) for b, s in stack.series.items()}


def model_predictor(model: DeepSent, targets=None) -> Predictor:
    def predict(stack: SceneStack):
        want = stack.bands if targets is None else [b for b in sort_bands(targets) if b in stack.series]
        return forward_all_bands(stack, model, want)
    return predict


def evaluate_split(model, dataset, split: str = "test", d: int = 3, dynamic_range: float = 1.0,
                   n_images: int | None = None, bands=None, targets=None,
                   with_ssim: bool = True, consistency: bool = False) -> MetricsReport:
    """Score a model (or any predictor callable) on one split of a dataset.

    ``bands``/``n_images`` restrict the network input; ``targets`` restricts the
    scored bands (they must be among the inputs).
    """
    ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    entries = ds.split(split)
    if not entries:
        raise TrainingError(f"split {split!r} is empty")
    if isinstance(model, Checkpoint):
        model = model.best_model()
    predict = model_predictor(model, targets) if isinstance(model, DeepSent) else model
    report = MetricsReport(settings={"split": split, "d": d, "dynamic_range": dynamic_range,
                                     "n_images": n_images, "bands": bands, "targets": targets})
    for e in entries:
        lr, hr = ds.load(e)
        lr_in = lr.subset(bands, n_images)
        sr = dict(predict(lr_in))
        if targets is not None:
            sr = {b: sr[b] for b in sort_bands(targets)}
        rows, patch = score_patch(e.patch_id, sr, hr_patch_of(hr), d, dynamic_range,
                                  lr_in if consistency else None, with_ssim)
        report.scores.extend(rows)
        report.patches.append(patch)
    return report
