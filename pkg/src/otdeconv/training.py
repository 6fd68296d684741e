"""Losses and training loops for the cycle-consistent deconvolution models.

Modes
-----
``blind``         deep generator G, learnable linear kernel h, discriminators on X and Y
``nonblind``      G with a fixed kernel, X-side discriminator only
``conventional``  G plus a second U-Net in place of h, discriminators on X and Y
``supervised_mse`` / ``supervised_gan``  paired regression, optionally with an X-side GAN term
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalError
from .models import (BlurKernel, DiscriminatorBank, DiscriminatorConfig, GeneratorConfig, Module,
                     UNet3D, set_requires_grad)
from .optim import Adam
from .simulate import Dataset, Patch, apply_augmentation, crop_patches, draw_augmentation, merge_patches
from .tensor import Tensor
from .volume import Volume, write_checkpoint, write_volume

MODES = ("blind", "nonblind", "conventional", "supervised_mse", "supervised_gan")
LOSS_COLUMNS = ("step", "cycle_x", "cycle_y", "d_x", "d_y", "g_adv_x", "g_adv_y", "q_h", "transport_cost")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "blind"
    gamma: float = 10.0
    eta: float = 0.5
    lr: float = 1e-4
    kernel_lr: float | None = None
    betas: tuple[float, float] = (0.5, 0.999)
    iterations: int = 1000
    batch_size: int = 1
    patch: int = 32
    replay_capacity: int = 50
    kernel_extent: tuple[int, int, int] = (9, 9, 9)
    kernel_penalty: str = "none"
    kernel_penalty_weight: float = 1e-4
    kernel_constraint: str = "none"
    cycle_norm: str = "l1"
    loss_margin: int = 0
    augment: bool = True
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.eta != 0.5:
            raise ConfigError("only the least-squares form (eta = 1/2) is implemented")
        if not self.lr > 0 or (self.kernel_lr is not None and not self.kernel_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.replay_capacity < 0:
            raise ConfigError("replay_capacity must be >= 0")
        if self.kernel_penalty not in ("none", "l1"):
            raise ConfigError("kernel_penalty must be 'none' or 'l1'")
        if self.kernel_constraint not in ("none", "nonneg", "unit_sum", "both"):
            raise ConfigError("kernel_constraint must be none|nonneg|unit_sum|both")
        if self.cycle_norm not in ("l1", "l2"):
            raise ConfigError("cycle_norm must be 'l1' or 'l2'")
        if self.patch % self.generator.divisor or self.patch % self.discriminator.divisor:
            raise ConfigError(f"patch {self.patch} not divisible by the network down-sampling factors")
        if 2 * self.loss_margin >= self.patch:
            raise ConfigError("loss_margin too large for the patch size")

    @property
    def paired(self) -> bool:
        return self.mode.startswith("supervised")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["generator"] = GeneratorConfig(**d.get("generator", {}))
        disc = dict(d.get("discriminator", {}))
        if "strides" in disc:
            disc["strides"] = tuple(disc["strides"])
        d["discriminator"] = DiscriminatorConfig(**disc)
        for key in ("betas", "kernel_extent"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ------------------------------------------------------------------ losses

def _dist(a: Tensor, b: Tensor, norm: str = "l1", margin: int = 0) -> Tensor:
    if margin:
        a, b = T.crop(a, margin), T.crop(b, margin)
    return T.l1_mean(a, b) if norm == "l1" else T.mse(a, b)


def cycle_terms(G: Callable, h: Callable, x: Tensor, y: Tensor, norm: str = "l1",
                margin: int = 0) -> tuple[Tensor, Tensor]:
    """``(mean |x - G(h*x)|, mean |y - h*G(y)|)``."""
    cx = _dist(x, G(h(x)), norm, margin)
    cy = _dist(y, h(G(y)), norm, margin)
    return cx, cy


def cycle_loss(G: Callable, h: Callable, x: Tensor, y: Tensor, norm: str = "l1") -> Tensor:
    cx, cy = cycle_terms(G, h, x, y, norm)
    return cx + cy


def lsgan_d_from_scores(real: Sequence[Tensor], fake: Sequence[Tensor]) -> Tensor:
    """``1/2 mean (s_real - 1)^2 + 1/2 mean (s_fake + 1)^2``, averaged over score maps."""
    terms = [T.scale(T.mse(r, 1.0) + T.mse(f, -1.0), 0.5) for r, f in zip(real, fake)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, 1.0 / len(terms))


def lsgan_g_from_scores(fake: Sequence[Tensor]) -> Tensor:
    """``1/2 mean (s_fake - 1)^2`` averaged over score maps."""
    total = T.scale(T.mse(fake[0], 1.0), 0.5)
    for f in fake[1:]:
        total = total + T.scale(T.mse(f, 1.0), 0.5)
    return T.scale(total, 1.0 / len(fake))


def lsgan_discriminator_loss(D: Callable, real: Tensor, fake: Tensor) -> Tensor:
    return lsgan_d_from_scores(D(real), D(fake.detach()))


def lsgan_generator_loss(D: Callable, fake: Tensor) -> Tensor:
    return lsgan_g_from_scores(D(fake))


def kernel_penalty(h: Tensor, kind: str = "none", weight: float = 1e-4) -> Tensor | None:
    if kind == "none":
        return None
    return T.scale(T.sum(T.absolute(h)), weight)


def transport_cost(G: Callable, h: Callable, x: Tensor, y: Tensor) -> float:
    """Diagnostic primal cost ``mean |y - h*x| + mean |G(y) - x|`` on paired samples."""
    with T.no_grad():
        return float(T.l1_mean(y, h(x)).data) + float(T.l1_mean(G(y), x).data)


class ReplayBuffer:
    """History pool of generated samples (one per direction)."""

    def __init__(self, capacity: int = 50, rng: np.random.Generator | None = None):
        self.capacity = capacity
        self.items: list[np.ndarray] = []
        self.rng = rng or np.random.default_rng(0)

    def __len__(self):
        return len(self.items)

    def query(self, batch: np.ndarray) -> np.ndarray:
        if self.capacity == 0:
            return batch.copy()
        out = []
        for sample in batch:
            sample = sample.copy()
            if len(self.items) < self.capacity:
                self.items.append(sample)
                out.append(sample)
            elif self.rng.random() < 0.5:
                i = int(self.rng.integers(self.capacity))
                out.append(self.items[i])
                self.items[i] = sample
            else:
                out.append(sample)
        return np.stack(out)


# ------------------------------------------------------------------ state

@dataclass
class LossRecord:
    step: int
    cycle_x: float = 0.0
    cycle_y: float = 0.0
    d_x: float = 0.0
    d_y: float = 0.0
    g_adv_x: float = 0.0
    g_adv_y: float = 0.0
    q_h: float = 0.0
    transport_cost: float = math.nan
    objective: float = 0.0

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, c))) for c in LOSS_COLUMNS[1:]]


def _streams(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [ord(c) for c in name]))


class TrainState:
    """Everything a training loop owns: networks, optimizers, buffers, data RNG."""

    def __init__(self, config: TrainConfig, dataset: Dataset, kernel: np.ndarray | None = None):
        if config.paired and not dataset.paired:
            raise ConfigError(f"mode {config.mode} needs a paired dataset")
        if not config.paired and dataset.paired:
            raise ConfigError(f"mode {config.mode} trains on unpaired data; pass an unpaired dataset")
        if config.mode == "nonblind" and kernel is None:
            raise ConfigError("nonblind mode needs a fixed PSF kernel")
        self.config = config
        self.dataset = dataset
        self.step = 0
        s = config.seed
        self.G = UNet3D(config.generator, _streams(s, "generator"))
        self.blur: Module | None = None
        if config.mode == "blind":
            self.blur = BlurKernel(config.kernel_extent, _streams(s, "kernel"), init=kernel)
        elif config.mode == "nonblind":
            self.blur = BlurKernel(np.shape(kernel), init=kernel, trainable=False)
        elif config.mode == "conventional":
            self.blur = UNet3D(config.generator, _streams(s, "blur-generator"))
        self.D_x = None
        self.D_y = None
        if config.mode != "supervised_mse":
            self.D_x = DiscriminatorBank(config.discriminator, _streams(s, "disc-x"))
        if config.mode in ("blind", "conventional"):
            self.D_y = DiscriminatorBank(config.discriminator, _streams(s, "disc-y"))

        self.opt_G = Adam(self.G.parameters(), config.lr, config.betas)
        self.opt_blur = None
        if self.blur is not None and self.blur.trainable_parameters():
            blr = config.kernel_lr if (config.kernel_lr and config.mode == "blind") else config.lr
            self.opt_blur = Adam(self.blur.trainable_parameters(), blr, config.betas)
        disc = [d for d in (self.D_x, self.D_y) if d is not None]
        self.opt_D = Adam([p for d in disc for p in d.parameters()], config.lr, config.betas) if disc else None
        self.buffer_x = ReplayBuffer(config.replay_capacity, _streams(s, "buffer-x"))
        self.buffer_y = ReplayBuffer(config.replay_capacity, _streams(s, "buffer-y"))
        self.rng = _streams(s, "data")

    # -- data
    def sample_batch(self) -> tuple[Tensor, Tensor]:
        cfg = self.config
        p = cfg.patch
        xs, ys = [], []
        for _ in range(cfg.batch_size):
            ix = int(self.rng.integers(len(self.dataset.sharp)))
            vx = self.dataset.sharp[ix].data
            ox = tuple(int(self.rng.integers(n - p + 1)) for n in vx.shape)
            ax = draw_augmentation(self.rng) if cfg.augment else None
            if cfg.paired:
                iy, vy, oy, ay = ix, self.dataset.blurred[ix].data, ox, ax
            else:
                iy = int(self.rng.integers(len(self.dataset.blurred)))
                vy = self.dataset.blurred[iy].data
                oy = tuple(int(self.rng.integers(n - p + 1)) for n in vy.shape)
                ay = draw_augmentation(self.rng) if cfg.augment else None
            bx = vx[tuple(slice(o, o + p) for o in ox)]
            by = vy[tuple(slice(o, o + p) for o in oy)]
            xs.append(apply_augmentation(bx, ax) if ax is not None else bx.copy())
            ys.append(apply_augmentation(by, ay) if ay is not None else by.copy())
        return Tensor(np.stack(xs)[:, None]), Tensor(np.stack(ys)[:, None])

    # -- parameters
    def all_modules(self) -> dict[str, Module]:
        mods = {"G": self.G}
        if self.blur is not None:
            mods["B"] = self.blur
        if self.D_x is not None:
            mods["Dx"] = self.D_x
        if self.D_y is not None:
            mods["Dy"] = self.D_y
        return mods

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.all_modules().items():
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for prefix, mod in self.all_modules().items():
            sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(sub)

    def kernel(self) -> np.ndarray | None:
        return self.blur.h.data.copy() if isinstance(self.blur, BlurKernel) else None


def _finite_or_raise(value: float, what: str, state: TrainState, snapshot: Path | None) -> None:
    if math.isfinite(value):
        return
    if snapshot is not None:
        write_checkpoint(snapshot / f"diverged_{state.step}.otdv", state.state_tensors(),
                         {"step": state.step, "reason": what})
    raise NumericalError(f"non-finite {what} at step {state.step}")


def _discriminator_update(state: TrainState, x: Tensor, y: Tensor, fake_x: Tensor,
                          fake_y: Tensor | None, rec: LossRecord) -> None:
    discs = [d for d in (state.D_x, state.D_y) if d is not None]
    for d in discs:
        set_requires_grad(d, True)
    total = None
    if state.D_x is not None:
        hist = Tensor(state.buffer_x.query(fake_x.data))
        d_x = lsgan_discriminator_loss(state.D_x, x, hist)
        rec.d_x = float(d_x.data)
        total = d_x
    if state.D_y is not None and fake_y is not None:
        hist = Tensor(state.buffer_y.query(fake_y.data))
        d_y = lsgan_discriminator_loss(state.D_y, y, hist)
        rec.d_y = float(d_y.data)
        total = d_y if total is None else total + d_y
    if total is None:
        return
    _finite_or_raise(float(total.data), "discriminator loss", state, getattr(state, "snapshot_dir", None))
    state.opt_D.zero_grad()
    T.backward(total)
    state.opt_D.step()
    for d in discs:
        set_requires_grad(d, False)


def _generator_update(state: TrainState, objective: Tensor) -> None:
    _finite_or_raise(float(objective.data), "generator objective", state, getattr(state, "snapshot_dir", None))
    state.opt_G.zero_grad()
    if state.opt_blur is not None:
        state.opt_blur.zero_grad()
    T.backward(objective)
    state.opt_G.step()
    if state.opt_blur is not None:
        state.opt_blur.step()
        c = state.config.kernel_constraint
        if c != "none" and isinstance(state.blur, BlurKernel):
            state.blur.project(nonneg=c in ("nonneg", "both"), unit_sum=c in ("unit_sum", "both"))


def _cycle_step(state: TrainState, batch, adversarial_y: bool) -> LossRecord:
    cfg = state.config
    x, y = batch if batch is not None else state.sample_batch()
    rec = LossRecord(step=state.step + 1)
    G, B = state.G, state.blur
    fake_x = G(y)
    fake_y = B(x)
    _discriminator_update(state, x, y, fake_x, fake_y if adversarial_y else None, rec)
    m = cfg.loss_margin
    cx = _dist(x, G(fake_y), cfg.cycle_norm)
    cy = _dist(y, B(fake_x), cfg.cycle_norm, m)
    rec.cycle_x, rec.cycle_y = float(cx.data), float(cy.data)
    objective = T.scale(cx + cy, cfg.gamma)
    g_x = lsgan_generator_loss(state.D_x, fake_x)
    rec.g_adv_x = float(g_x.data)
    objective = objective + g_x
    if adversarial_y:
        fy = T.crop(fake_y, m) if m else fake_y
        g_y = lsgan_g_from_scores(state.D_y(fy)) if m else lsgan_generator_loss(state.D_y, fake_y)
        rec.g_adv_y = float(g_y.data)
        objective = objective + g_y
    if isinstance(B, BlurKernel) and B.trainable:
        q = kernel_penalty(B.h, cfg.kernel_penalty, cfg.kernel_penalty_weight)
        if q is not None:
            rec.q_h = float(q.data)
            objective = objective + q
    rec.objective = float(objective.data)
    _generator_update(state, objective)
    state.step += 1
    return rec


def train_step_blind(state: TrainState, batch=None) -> LossRecord:
    if state.config.mode != "blind":
        raise ConfigError("train_step_blind needs mode='blind'")
    return _cycle_step(state, batch, adversarial_y=True)


def train_step_nonblind(state: TrainState, batch=None) -> LossRecord:
    if state.config.mode != "nonblind":
        raise ConfigError("train_step_nonblind needs mode='nonblind'")
    return _cycle_step(state, batch, adversarial_y=False)


def train_step_conventional(state: TrainState, batch=None) -> LossRecord:
    if state.config.mode != "conventional":
        raise ConfigError("train_step_conventional needs mode='conventional'")
    return _cycle_step(state, batch, adversarial_y=True)


def train_step_supervised(state: TrainState, batch=None) -> LossRecord:
    cfg = state.config
    if not cfg.paired:
        raise ConfigError("train_step_supervised needs a supervised mode")
    x, y = batch if batch is not None else state.sample_batch()
    rec = LossRecord(step=state.step + 1)
    fake_x = state.G(y)
    if state.D_x is not None:
        _discriminator_update(state, x, y, fake_x, None, rec)
    err = T.mse(fake_x, x)
    rec.cycle_x = float(err.data)
    objective = err
    if state.D_x is not None:
        g_x = lsgan_generator_loss(state.D_x, fake_x)
        rec.g_adv_x = float(g_x.data)
        objective = T.scale(err, cfg.gamma) + g_x
    rec.objective = float(objective.data)
    _generator_update(state, objective)
    state.step += 1
    return rec


STEP_FUNCTIONS = {
    "blind": train_step_blind,
    "nonblind": train_step_nonblind,
    "conventional": train_step_conventional,
    "supervised_mse": train_step_supervised,
    "supervised_gan": train_step_supervised,
}


# ------------------------------------------------------------------ inference & loop

def _as_generator_fn(G) -> Callable[[np.ndarray], np.ndarray]:
    def run(block: np.ndarray) -> np.ndarray:
        with T.no_grad():
            out = G(Tensor(block[None, None]))
        return np.asarray(getattr(out, "data", out))[0, 0]
    return run


def infer(G, y: Volume, patch: int = 32, overlap: int = 8) -> Volume:
    """Apply ``G`` patch-wise and blend the outputs back together.

    ``G`` is a model (Tensor in, Tensor out) or any callable on 5-D arrays.
    """
    patch_shape = tuple(min(patch, n) for n in y.shape)
    stride = tuple(max(1, p - overlap) for p in patch_shape)
    run = _as_generator_fn(G)
    outs = [Patch(p.origin, run(p.data)) for p in crop_patches(y, patch_shape, stride)]
    merged = merge_patches(outs, y.shape, overlap)
    return Volume(merged.data, voxel_size=y.voxel_size)


def write_loss_trace(path, records: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_loss_trace(path) -> list[LossRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(step=int(r["step"]), **{c: float(r[c]) for c in LOSS_COLUMNS[1:]}) for r in rows]


def train(config: TrainConfig, dataset: Dataset, kernel: np.ndarray | None = None, run_dir=None,
          eval_pairs: Sequence[tuple[Volume, Volume]] = (), callback=None) -> tuple[TrainState, list[LossRecord]]:
    """Run ``config.iterations`` steps; optionally persist a run directory.

    ``eval_pairs`` are ``(sharp, blurred)`` volumes for the transport-cost
    diagnostic, evaluated every ``config.eval_every`` steps.
    """
    state = TrainState(config, dataset, kernel)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        state.snapshot_dir = run_dir
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    step_fn = STEP_FUNCTIONS[config.mode]
    records = []
    for _ in range(config.iterations):
        rec = step_fn(state)
        if config.eval_every and eval_pairs and state.step % config.eval_every == 0:
            rec.transport_cost = evaluate_transport_cost(state, eval_pairs)
        records.append(rec)
        if callback is not None:
            callback(state, rec)
        if run_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_run_checkpoint(state, run_dir)
    if run_dir is not None:
        save_run_checkpoint(state, run_dir)
        write_loss_trace(run_dir / "loss.csv", records)
    return state, records


def evaluate_transport_cost(state: TrainState, pairs) -> float:
    if state.blur is None:
        return math.nan
    costs = []
    for x, y in pairs:
        xt, yt = Tensor(x.data[None, None]), Tensor(y.data[None, None])
        costs.append(transport_cost(state.G, state.blur, xt, yt))
    return float(np.mean(costs))


def save_run_checkpoint(state: TrainState, run_dir: Path) -> None:
    meta = {"step": state.step, "config": state.config.to_dict()}
    write_checkpoint(run_dir / f"ckpt_{state.step}.otdv", state.state_tensors(), meta)
    k = state.kernel()
    if k is not None and state.config.mode == "blind":
        write_volume(run_dir / f"kernel_{state.step}.otdv", Volume(k))


def load_generator(path) -> UNet3D:
    from .volume import read_checkpoint

    tensors, meta = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    G = UNet3D(cfg.generator, np.random.default_rng(0))
    G.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("G.")})
    set_requires_grad(G, False)
    return G
