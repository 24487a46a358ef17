"""Training loop: Adam with decoupled weight decay, warmup + cosine
schedule, gradient accumulation over field batches, early stopping, and a
small hyperparameter search driver.

Batch semantics: one sample is one whole field.  `physical_batch` fields
are forwarded per backward call (a memory knob); gradients accumulate
until `effective_batch` fields contributed, scaled so the update sees the
mean per-field loss.  Locations are the voxel centers, optionally
jittered uniformly within each voxel so the point samples cover the cell
the grid value represents.

Per-field targets are the joined (beam + scatter) fluence normalized by a
fresh per-field fit of the model's configured normalizer, plus the joined
per-voxel spectra.  Validation uses the same loss at exact voxel centers.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import (DivergedLoss, EmptySpace, EmptySplit, InvalidConfig,
                     ShapeMismatch, StepOutOfRange)
from .evalkit import (CRITERIA_DEFAULT, MetricReport, aggregate_reports,
                      compare_fields, loss_fluence, loss_spectrum)
from .field import KermaCoefficients, RadiationField, voxel_centers_unit
from .nn import Model, ModelConfig, infer_field, save_checkpoint
from .nn import autograd as ag
from .nn.autograd import Tensor
from .normalize import Normalizer


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    warmup_steps: int = 1000
    eta_min: float = 1e-6
    max_epochs: int = 200
    patience: int = 10
    improvement_delta: float = 1e-6
    physical_batch: int = 4
    effective_batch: int = 64
    jitter: bool = True
    fluence_weight: float = 1.0
    spectrum_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0 or self.eta_min < 0.0:
            raise InvalidConfig("learning rate must be positive")
        if self.weight_decay < 0.0:
            raise InvalidConfig("weight decay must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidConfig("betas must lie in [0, 1)")
        if self.warmup_steps < 0:
            raise InvalidConfig("warmup_steps must be non-negative")
        if self.max_epochs < 1 or self.patience < 1:
            raise InvalidConfig("max_epochs and patience must be >= 1")
        if self.patience >= self.max_epochs:
            raise InvalidConfig("patience must be smaller than max_epochs")
        if self.physical_batch < 1 or self.effective_batch < 1:
            raise InvalidConfig("batch sizes must be >= 1")
        if self.effective_batch % self.physical_batch != 0:
            raise InvalidConfig("effective_batch must be a multiple of "
                                "physical_batch")


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate for 0-based update `step`: linear warmup to the base
    rate, then cosine decay to `eta_min` over the remaining updates."""
    if total_steps < 1:
        raise InvalidConfig("total_steps must be >= 1")
    if step < 0 or step >= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps})")
    base = config.learning_rate
    warm = config.warmup_steps
    if step < warm:
        return base * (step + 1) / warm
    span = total_steps - warm
    if span <= 0:
        return base
    progress = (step - warm) / span
    return config.eta_min + 0.5 * (base - config.eta_min) * (
        1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def for_model(model: Model) -> "AdamState":
        params = model.parameters()
        return AdamState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(model: Model, state: AdamState, lr: float, config: TrainConfig):
    """One Adam update with decoupled weight decay (biases and gains are
    decayed too; the model is small enough not to special-case them)."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in model.parameters().items():
        if state.m[name].shape != p.data.shape:
            raise ShapeMismatch(
                f"optimizer state for {name} has shape {state.m[name].shape}, "
                f"parameter has {p.data.shape}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + config.eps)
                                + config.weight_decay * p.data)


# --- data preparation ------------------------------------------------------


@dataclass
class FieldSample:
    """A field reduced to training arrays: unit-cube centers, the
    normalized joined fluence grid, and per-voxel joined spectra."""
    beam: object
    dims: tuple
    centers: np.ndarray
    target_norm: np.ndarray
    target_spec: np.ndarray
    normalizer: Normalizer


def prepare_sample(field: RadiationField, norm: Normalizer) -> FieldSample:
    flu, spec = field.joined()
    fitted = norm.fit(flu)
    return FieldSample(
        beam=field.meta,
        dims=field.dims,
        centers=voxel_centers_unit(field.dims),
        target_norm=fitted.normalize(flu),
        target_spec=spec.reshape(-1, spec.shape[-1]),
        normalizer=fitted)


def jittered_locations(sample: FieldSample, rng: np.random.Generator) -> np.ndarray:
    offsets = rng.uniform(-0.5, 0.5, size=sample.centers.shape)
    offsets /= np.asarray(sample.dims, dtype=np.float64)
    return np.clip(sample.centers + offsets, 0.0, 1.0)


def _field_loss(model: Model, sample: FieldSample, config: TrainConfig,
                locations: np.ndarray) -> Tensor:
    flu, spec = model.forward(locations, [sample.beam])
    pred_grid = ag.reshape(flu, sample.dims)
    lf = loss_fluence(sample.target_norm, pred_grid)
    ls = loss_spectrum(sample.target_spec, spec)
    return ag.mul(lf, config.fluence_weight) + ag.mul(ls, config.spectrum_weight)


def _chunks(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


# --- the training loop ------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    history: tuple            # rows: {"epoch", "train_loss", "val_loss", "lr"}
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    updates_run: int
    wall_time_s: float

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        lines += [f"{r['epoch']},{r['train_loss']:.8e},{r['val_loss']:.8e},"
                  f"{r['lr']:.8e}" for r in self.history]
        return "\n".join(lines) + "\n"


def train(model: Model, train_fields: list[RadiationField],
          val_fields: list[RadiationField], config: TrainConfig,
          checkpoint_path=None, log=None) -> TrainResult:
    """Fit `model` in place; returns the history and restores the best
    (lowest validation loss) parameters before returning.

    Raises DivergedLoss with a state snapshot if a non-finite loss shows
    up; the model keeps the last finite parameters in that case.
    """
    if not train_fields:
        raise EmptySplit("no training fields")
    if not val_fields:
        raise EmptySplit("no validation fields")
    base_norm = Normalizer(model.config.normalizer, alpha=model.config.alpha)
    samples = [prepare_sample(f, base_norm) for f in train_fields]
    val_samples = [prepare_sample(f, base_norm) for f in val_fields]

    n = len(samples)
    eff = min(config.effective_batch, n)
    updates_per_epoch = math.ceil(n / eff)
    total_updates = config.max_epochs * updates_per_epoch
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_model(model)

    best_val = math.inf
    best_epoch = -1
    best_params = None
    bad_epochs = 0
    history = []
    step = 0
    lr = config.learning_rate
    t0 = time.perf_counter()

    def diverge(epoch, loss_value):
        raise DivergedLoss(
            f"non-finite loss at epoch {epoch}",
            {"epoch": epoch, "step": step, "loss": loss_value,
             "best_val_loss": best_val, "best_epoch": best_epoch})

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_idx in _chunks(order, eff):
            model.zero_grad()
            scale = 1.0 / len(batch_idx)
            for micro in _chunks(batch_idx, config.physical_batch):
                losses = []
                for i in micro:
                    s = samples[i]
                    locs = (jittered_locations(s, rng) if config.jitter
                            else s.centers)
                    losses.append(_field_loss(model, s, config, locs))
                micro_sum = losses[0]
                for extra in losses[1:]:
                    micro_sum = micro_sum + extra
                value = micro_sum.item()
                if not math.isfinite(value):
                    diverge(epoch, value)
                epoch_loss += value
                ag.mul(micro_sum, scale).backward()
            lr = lr_schedule(step, total_steps=total_updates, config=config)
            adam_step(model, state, lr, config)
            step += 1
        train_loss = epoch_loss / n

        with ag.no_grad():
            val_loss = float(np.mean(
                [_field_loss(model, s, config, s.centers).item()
                 for s in val_samples]))
        if not math.isfinite(val_loss):
            diverge(epoch, val_loss)

        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": lr})
        if log is not None:
            log(f"epoch {epoch:4d}  train {train_loss:.6f}  "
                f"val {val_loss:.6f}  lr {lr:.2e}")

        if val_loss < best_val - config.improvement_delta:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: p.data.copy()
                           for k, p in model.parameters().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    if best_params is not None:
        model.set_parameters(best_params)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(
        history=tuple(history),
        best_val_loss=best_val,
        best_epoch=best_epoch,
        epochs_run=len(history),
        updates_run=step,
        wall_time_s=time.perf_counter() - t0)


# --- evaluation -------------------------------------------------------------


def evaluate(model: Model, fields: list[RadiationField],
             coeffs: KermaCoefficients | None = None,
             criteria=CRITERIA_DEFAULT, batch: int = 8192) -> MetricReport:
    """Full metric suite over held-out fields.

    Fluence is denormalized with the model's normalizer kind fit to each
    field's ground truth, so metrics grade the predicted topology and
    spectra at the true field scale.  Kerma grids on the prediction side
    use the predicted spectra.
    """
    if not fields:
        raise EmptySplit("no fields to evaluate")
    if coeffs is None:
        coeffs = KermaCoefficients.bundled_air()
    rows = []
    for i, fld in enumerate(fields):
        flu, _ = fld.joined()
        norm = Normalizer(model.config.normalizer,
                          alpha=model.config.alpha).fit(flu)
        result = infer_field(model, fld.meta, fld.dims, batch=batch,
                             normalizer=norm)
        metrics = compare_fields(fld, result.fluence, result.spectra, coeffs,
                                 criteria)
        rows.append({"field": i, **metrics})
    return aggregate_reports(rows)


# --- hyperparameter search --------------------------------------------------

MODEL_AXES = set(ModelConfig.__dataclass_fields__)
TRAIN_AXES = set(TrainConfig.__dataclass_fields__)


@dataclass(frozen=True)
class SearchSpace:
    """Named axes with candidate values; axis names must be ModelConfig
    or TrainConfig fields."""
    axes: dict

    def __post_init__(self):
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            raise EmptySpace("search space has no candidates")
        for name in self.axes:
            if name not in MODEL_AXES and name not in TRAIN_AXES:
                raise InvalidConfig(f"unknown search axis {name!r}")

    @staticmethod
    def default() -> "SearchSpace":
        return SearchSpace({
            "width": (128, 192, 256),
            "L": (6, 10),
            "fusion": ("concat", "film", "resfilm", "gmu"),
            "learning_rate": (3e-4, 1e-3),
        })

    def grid(self):
        names = list(self.axes)
        for combo in itertools.product(*(self.axes[n] for n in names)):
            yield dict(zip(names, combo))

    def sample(self, rng: np.random.Generator) -> dict:
        return {n: values[rng.integers(len(values))]
                for n, values in self.axes.items()}


@dataclass(frozen=True)
class TrialResult:
    params: dict
    val_loss: float
    epochs_run: int
    diverged: bool = False

    def to_json(self) -> dict:
        return {"params": dict(self.params), "val_loss": self.val_loss,
                "epochs_run": self.epochs_run, "diverged": self.diverged}


@dataclass(frozen=True)
class SearchResult:
    trials: tuple                 # sorted, best first
    best: TrialResult
    best_model_config: ModelConfig
    best_train_config: TrainConfig

    def to_json(self) -> dict:
        return {"trials": [t.to_json() for t in self.trials],
                "best": self.best.to_json(),
                "best_model_config": self.best_model_config.to_json()}


def _split_overrides(combo: dict) -> tuple[dict, dict]:
    model_kw = {k: v for k, v in combo.items() if k in MODEL_AXES}
    train_kw = {k: v for k, v in combo.items() if k in TRAIN_AXES}
    return model_kw, train_kw


def hyper_search(base_model: ModelConfig, base_train: TrainConfig,
                 train_fields, val_fields, space: SearchSpace | None = None,
                 strategy: str = "grid", n_trials: int | None = None,
                 trial_epochs: int | None = None, seed: int = 0,
                 log=None) -> SearchResult:
    """Grid or random search ranked by best validation loss.

    Grid order follows the axis declaration order; random search draws
    `n_trials` combinations with a seeded generator.  Trials that diverge
    are kept with an infinite loss.
    """
    if space is None:
        space = SearchSpace.default()
    if strategy == "grid":
        combos = list(space.grid())
    elif strategy == "random":
        if not n_trials or n_trials < 1:
            raise InvalidConfig("random search needs n_trials >= 1")
        rng = np.random.default_rng(seed)
        combos = [space.sample(rng) for _ in range(n_trials)]
    else:
        raise InvalidConfig(f"unknown search strategy {strategy!r}")

    trials = []
    best_confs = None
    for k, combo in enumerate(combos):
        model_kw, train_kw = _split_overrides(combo)
        if trial_epochs is not None:
            train_kw["max_epochs"] = trial_epochs
        mcfg = replace(base_model, **model_kw)
        tcfg = replace(base_train, **train_kw)
        model = Model(mcfg, seed=seed + k)
        try:
            result = train(model, train_fields, val_fields, tcfg)
            trial = TrialResult(params=dict(combo),
                                val_loss=result.best_val_loss,
                                epochs_run=result.epochs_run)
        except DivergedLoss:
            trial = TrialResult(params=dict(combo), val_loss=math.inf,
                                epochs_run=0, diverged=True)
        trials.append((trial, mcfg, tcfg))
        if log is not None:
            log(f"trial {k + 1}/{len(combos)}  {combo}  "
                f"val {trial.val_loss:.6f}")

    trials.sort(key=lambda item: item[0].val_loss)
    ranked = tuple(t for t, _, _ in trials)
    _, best_m, best_t = trials[0]
    return SearchResult(trials=ranked, best=ranked[0],
                        best_model_config=best_m, best_train_config=best_t)
