"""End-to-end autoencoder training with Adam, rotation augmentation, and a
point-cloud completion mode.

Four named regimes cross embedding size with rotation augmentation:
r1 = 256 without, r2 = 512 without, r3 = 256 with, r4 = 512 with. A regime is
optional; desk-scale configs may instead set `augment` directly with any
embedding size. All randomness (shuffling, rotation angles, crop planes)
derives from the config seed through named sub-streams, and gradients are
accumulated in batch-index order, so identical configs give bit-identical
checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, GeometryError, NumericError, ShapeError
from .meshio import PointCloud
from .metrics import chamfer, chamfer_loss
from .model import (Checkpoint, TreeAutoencoder, decode_tensor, encode_tensor,
                    save_checkpoint)
from .rng import derive_seed, substream
from .tensor import Tape, Tensor

REGIMES = {
    "r1": (256, False),
    "r2": (512, False),
    "r3": (256, True),
    "r4": (512, True),
}

MODES = ("autoencode", "complete")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    mode: str = "autoencode"
    regime: str | None = None
    augment: bool | None = None  # None: follow the regime, else off
    log_interval: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.log_interval < 1:
            raise ConfigError("batch_size, epochs, and log_interval must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.regime is not None:
            if self.regime not in REGIMES:
                raise ConfigError(f"regime must be one of {sorted(REGIMES)}, got {self.regime!r}")
            regime_augment = REGIMES[self.regime][1]
            if self.augment is not None and self.augment != regime_augment:
                raise ConfigError(f"regime {self.regime} implies augment={regime_augment}")

    @property
    def augment_enabled(self) -> bool:
        if self.augment is not None:
            return self.augment
        return REGIMES[self.regime][1] if self.regime is not None else False

    def check_model(self, model: TreeAutoencoder) -> None:
        if self.regime is not None:
            psi = REGIMES[self.regime][0]
            if model.config.embedding_dim != psi:
                raise ConfigError(f"regime {self.regime} requires embedding_dim {psi}, "
                                  f"model has {model.config.embedding_dim}")


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, parameters: dict[str, Tensor]) -> "OptimizerState":
        return cls(m={n: np.zeros(t.data.shape) for n, t in parameters.items()},
                   v={n: np.zeros(t.data.shape) for n, t in parameters.items()},
                   step=0)


def adam_step(parameters: dict[str, Tensor], gradients: dict[str, np.ndarray],
              state: OptimizerState, config: TrainConfig,
              ) -> tuple[dict[str, Tensor], OptimizerState]:
    """One bias-corrected adaptive-moment update; purely functional.

    Returns fresh parameter tensors and a fresh state; inputs are untouched.
    """
    step = state.step + 1
    correct1 = 1.0 - config.beta1 ** step
    correct2 = 1.0 - config.beta2 ** step
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, tensor in parameters.items():
        if name not in gradients:
            raise ContractError(f"missing gradient for parameter {name}")
        grad = np.asarray(gradients[name], dtype=np.float64)
        if grad.shape != tensor.data.shape:
            raise ContractError(f"gradient shape {grad.shape} does not match "
                                f"parameter {name} shape {tensor.data.shape}")
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * grad
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * grad * grad
        update = config.learning_rate * (m / correct1) / (np.sqrt(v / correct2) + config.epsilon)
        new_params[name] = Tensor(tensor.data - update, requires_grad=True)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(m=new_m, v=new_v, step=step)


# ---------------------------------------------------------------- transforms


def rotation_augment(cloud: PointCloud, seed: int) -> PointCloud:
    """Rotate all points by a uniform random angle about the up (y) axis."""
    angle = float(substream(seed, "rotation").uniform(0.0, 2.0 * np.pi))
    c, s = np.cos(angle), np.sin(angle)
    pts = cloud.points
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] + s * pts[:, 2]
    out[:, 2] = -s * pts[:, 0] + c * pts[:, 2]
    return PointCloud(out, label=cloud.label)


def make_partial(cloud: PointCloud, seed: int, max_tries: int = 16) -> PointCloud:
    """Crop 25-50% of the points with a random plane through the origin, then
    resample the survivors with replacement back to the original count.

    Planes whose crop would fall outside that band (or leave under 10% of the
    points) are redrawn; after `max_tries` failures this is a geometry error.
    """
    rng = substream(seed, "partial")
    pts = cloud.points
    n = len(pts)
    for _ in range(max_tries):
        normal = rng.normal(size=3)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        side = pts @ (normal / norm)
        positive = float(np.mean(side > 0.0))
        if 0.25 <= positive <= 0.5:
            kept = pts[side <= 0.0]
        elif 0.5 < positive <= 0.75:
            kept = pts[side > 0.0]
        else:
            continue
        if len(kept) < max(1, n // 10):
            continue
        resampled = kept[rng.integers(0, len(kept), size=n)]
        return PointCloud(resampled, label=cloud.label)
    raise GeometryError(f"no valid crop plane found in {max_tries} tries")


def make_training_pair(cloud: PointCloud, mode: str, seed: int,
                       augment: bool) -> tuple[np.ndarray, np.ndarray]:
    """(model input, reconstruction target) for one sample.

    Augmentation rotates the sample once, before the pair is formed, so input
    and target see the identical rotation. In completion mode the input is a
    synthetic crop of the sample; the forward pass never reads the target.
    """
    base = rotation_augment(cloud, derive_seed(seed, "augment")) if augment else cloud
    if mode == "autoencode":
        return base.points, base.points
    partial = make_partial(base, derive_seed(seed, "crop"))
    return partial.points, base.points


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    checkpoint: Checkpoint              # best-epoch parameters
    last_checkpoint: Checkpoint         # final epoch, with optimizer state
    history: list[tuple[int, int, float]] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    best_epoch: int = 0
    final_recon_cd: float = 0.0


def _write_history(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "step", "chamfer"])
        for epoch, step, value in rows:
            writer.writerow([epoch, step, repr(value)])


def _parameter_norms(parameters: dict[str, Tensor]) -> str:
    norms = {name: float(np.linalg.norm(t.data)) for name, t in parameters.items()}
    worst = sorted(norms, key=norms.get, reverse=True)[:3]
    total = float(np.sqrt(sum(v * v for v in norms.values())))
    detail = ", ".join(f"{name}={norms[name]:.3e}" for name in worst)
    return f"total parameter norm {total:.3e}; largest: {detail}"


def train(dataset, model: TreeAutoencoder, config: TrainConfig,
          out_dir=None, optimizer_state: OptimizerState | None = None) -> TrainResult:
    """Minimize chamfer reconstruction loss over the dataset.

    autoencode mode feeds each cloud to itself; complete mode feeds a random
    half-space crop and targets the full cloud. The epoch with the lowest
    mean chamfer is retained as the result checkpoint. With `out_dir` set,
    every epoch writes a resumable checkpoint plus loss.csv / final.csv, and
    `final_recon_cd` is the mean plain-reconstruction chamfer of the best
    parameters over the unaugmented dataset.
    """
    clouds = [c if isinstance(c, PointCloud) else PointCloud(c) for c in dataset]
    if not clouds:
        raise ContractError("training needs a non-empty dataset")
    n_points = model.config.point_count
    for i, cloud in enumerate(clouds):
        if len(cloud) != n_points:
            raise ShapeError(f"dataset cloud {i} has {len(cloud)} points, "
                             f"model expects {n_points}")
    config.check_model(model)
    augment = config.augment_enabled

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    state = optimizer_state or OptimizerState.zeros(model.parameters)
    history: list[tuple[int, int, float]] = []
    epoch_means: list[float] = []
    best_epoch = -1
    best_mean = np.inf
    best_params = model.snapshot()
    global_step = 0

    for epoch in range(config.epochs):
        order = substream(config.seed, f"shuffle/{epoch}").permutation(len(clouds))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            tape = Tape()
            params = model.parameters
            item_losses = []
            for idx in batch:
                pair_seed = derive_seed(config.seed, f"pair/{epoch}/{int(idx)}")
                inputs, target = make_training_pair(clouds[int(idx)], config.mode,
                                                    pair_seed, augment)
                z = encode_tensor(tape, params, model.config, Tensor(inputs))
                recon = decode_tensor(tape, params, model.config, z)
                item_losses.append(chamfer_loss(tape, recon, Tensor(target)))
            total = item_losses[0]
            for extra in item_losses[1:]:
                total = tape.add(total, extra)
            batch_loss = tape.scale(total, 1.0 / len(batch))
            value = float(batch_loss.data)
            global_step += 1
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {start}, "
                    f"step {global_step}; {_parameter_norms(params)}")
            tape.backward(batch_loss)
            gradients = {name: (t.grad if t.grad is not None else np.zeros(t.data.shape))
                         for name, t in params.items()}
            new_params, state = adam_step(params, gradients, state, config)
            model.set_parameters(new_params)
            loss_sum += value * len(batch)
            if global_step % config.log_interval == 0:
                history.append((epoch, global_step, value))

        epoch_mean = loss_sum / len(clouds)
        epoch_means.append(epoch_mean)
        if epoch_mean < best_mean:
            best_mean = epoch_mean
            best_epoch = epoch
            best_params = model.snapshot()
        if out_path is not None:
            save_checkpoint(out_path / f"epoch_{epoch:04d}.tged",
                            model.checkpoint(optimizer_state=state))

    best_model = TreeAutoencoder.from_checkpoint(
        Checkpoint(config=model.config, parameters=best_params))
    recon_cds = [chamfer(best_model.reconstruct(c.points), c.points) for c in clouds]
    final_recon_cd = float(np.mean(recon_cds))

    result = TrainResult(checkpoint=best_model.checkpoint(),
                         last_checkpoint=model.checkpoint(optimizer_state=state),
                         history=history, epoch_means=epoch_means,
                         best_epoch=best_epoch, final_recon_cd=final_recon_cd)

    if out_path is not None:
        save_checkpoint(out_path / "best.tged", result.checkpoint)
        _write_history(history, out_path / "loss.csv")
        with open(out_path / "final.csv", "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["name", "value"])
            writer.writerow(["best_epoch", best_epoch])
            writer.writerow(["best_epoch_mean_chamfer", repr(best_mean)])
            writer.writerow(["final_recon_cd", repr(final_recon_cd)])
    return result
