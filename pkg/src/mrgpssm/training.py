"""Backfitting trainer: per-component inner optimization at the component's
own resolution, full-resolution latent caching between updates, Adam with a
decaying learning rate that resets every cycle.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from .elbo import draw_noise, make_objective, model_with_blocks
from .errors import NumericError, WindowTooLong
from .model import Dataset, Model
from .rng import RngStream
from .sampling import sample_dilated, sample_seq_fullmc


@dataclass
class TrainConfig:
    cycles: int = 1
    iters_per_component: int = 50
    batch: int = 50
    buffer: int = 10
    samples: int = 20
    minibatches_per_iter: int = 20
    lr0: float = 0.05
    lr_decay_factor: float = 0.99
    lr_decay_every: int = 10
    resolutions: list[int] | None = None  # overrides the model's per-component R
    seed: int = 0
    cache_samples: int | None = None  # defaults to `samples`
    update_order: str = "fast-first"  # or "slow-first" / "index"
    route: str = "sde"
    residual_mode: str = "mean"  # "sampled" draws one cached path (ablation)

    def __post_init__(self):
        for name in ("batch", "samples", "minibatches_per_iter",
                     "lr_decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        # zero cycles/iterations (no-op training) and lr 0 are allowed so the
        # degenerate contracts are expressible
        if self.cycles < 0 or self.iters_per_component < 0 or self.buffer < 0:
            raise ValueError("cycles, iters and buffer must be >= 0")
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if self.resolutions is not None and any(r < 1 for r in self.resolutions):
            raise ValueError("resolutions must be >= 1")


@dataclass
class CachedLatents:
    """Across-sample mean latent path per component at full resolution.

    ``samples`` additionally retains the individual sample paths when the
    trainer runs in sampled-residual ablation mode.
    """

    paths: dict[int, np.ndarray]
    n_components: int
    sample_count: int
    samples: dict[int, np.ndarray] | None = None

    def __post_init__(self):
        for l, p in self.paths.items():
            if not np.all(np.isfinite(p)):
                raise NumericError(f"cached latents for component {l} are non-finite")


@dataclass
class TrainRecord:
    cycle: int
    component: int
    iteration: int
    elbo: float
    lr: float
    wall_ms: float
    skipped: bool = False


@dataclass
class AdamState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, theta: np.ndarray) -> "AdamState":
        return cls(theta=theta.copy(), m=np.zeros_like(theta),
                   v=np.zeros_like(theta), t=0)


def adam_step(state: AdamState, grads: np.ndarray, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One descent step on the gradient of the loss (pass -grad to ascend)."""
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    theta = state.theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(theta=theta, m=m, v=v, t=t)


def lr_schedule(step: int, lr0: float, cfg: TrainConfig) -> float:
    return lr0 * cfg.lr_decay_factor ** (step // cfg.lr_decay_every)


def simulate_latents(model: Model, data: Dataset, l: int, S: int,
                     rng: RngStream) -> np.ndarray:
    """Full-resolution sample paths (S, T, D_l) of component l from q(x_0)."""
    c = model.components[l]
    T = data.T
    u_window = data.u[np.clip(np.arange(T) - 1, 0, T - 1)]
    path = sample_seq_fullmc(c, u_window, step=model.dt, B=T, B0=0, S=S,
                             rng=rng, dt=model.dt)
    return path.samples


def refresh_cache(model: Model, data: Dataset, l: int, S: int,
                  rng: RngStream) -> np.ndarray:
    """Full-resolution mean latent path of component l over the whole sequence.

    Simulates at stride 1 (Euler step dt) from q(x_0) with S sample paths and
    returns the across-sample mean, length exactly T.
    """
    return simulate_latents(model, data, l, S, rng).mean(axis=0)


def update_component(
    model: Model,
    data: Dataset,
    cached: CachedLatents | None,
    l: int,
    cfg: TrainConfig,
    rng: RngStream,
    cycle: int = 0,
) -> tuple[Model, list[TrainRecord]]:
    """Inner Adam loop over the parameters of component l (plus the shared
    observation noise). All other components stay bitwise unchanged."""
    R = model.components[l].resolution
    if data.T < R * cfg.batch:
        raise WindowTooLong(
            f"T = {data.T} < R*B = {R * cfg.batch} for component {l}; "
            f"need at least {R * cfg.batch} rows"
        )
    residual_sample = None
    if (cfg.residual_mode == "sampled" and model.n_components > 1
            and cached is not None):
        residual_sample = int(rng.child(10_000_000).integers(
            0, cached.sample_count))
    pvec, theta0, objective = make_objective(
        model, data, l, cached, R, cfg.batch, cfg.buffer, cfg.samples,
        route=cfg.route, residual_sample=residual_sample,
    )
    state = AdamState.init(theta0)
    records: list[TrainRecord] = []
    lr_scale = 1.0
    n_rows = cfg.minibatches_per_iter * cfg.samples
    n_steps = cfg.buffer + cfg.batch
    for it in range(cfg.iters_per_component):
        t0 = time.perf_counter()
        lr = lr_schedule(it, cfg.lr0, cfg) * lr_scale
        it_rng = rng.child(it)
        starts = [
            sample_dilated(data.y, R, cfg.batch, it_rng)[0]
            for _ in range(cfg.minibatches_per_iter)
        ]
        noise = draw_noise(model, [l], n_steps, n_rows, it_rng)
        est, grad = objective(state.theta, starts, noise)
        wall = 1e3 * (time.perf_counter() - t0)
        if not (np.isfinite(est.value) and np.all(np.isfinite(grad))):
            # skip the step and halve the rate for the rest of this inner loop
            lr_scale *= 0.5
            records.append(TrainRecord(cycle, l, it, float("nan"), lr, wall,
                                       skipped=True))
            continue
        state = adam_step(state, -grad, lr)
        records.append(TrainRecord(cycle, l, it, est.value, lr, wall))
    if not np.all(np.isfinite(state.theta)):
        raise NumericError(
            f"component {l} diverged: non-finite parameters after inner loop"
        )
    new_model = model_with_blocks(model, pvec.constrain(state.theta))
    return new_model, records


def component_order(model: Model, cfg: TrainConfig) -> list[int]:
    """Update order within a cycle.

    Fastest (smallest R) first is the default: the high-resolution component
    then claims the sub-stride structure before any dilated component sees
    its residual. Training the dilated component on raw observations first
    feeds it aliased fast content, which empirically inflates the shared
    observation noise and destabilizes the whole run.
    """
    if cfg.update_order == "index":
        return list(range(model.n_components))
    if cfg.update_order == "slow-first":
        return sorted(range(model.n_components),
                      key=lambda l: -model.components[l].resolution)
    if cfg.update_order == "fast-first":
        return sorted(range(model.n_components),
                      key=lambda l: model.components[l].resolution)
    raise ValueError(f"unknown update_order {cfg.update_order!r}")


def backfit(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    rng: RngStream,
    log_path=None,
) -> tuple[Model, list[TrainRecord]]:
    """Cycle through the components, updating each at its own resolution and
    refreshing its full-resolution latent cache afterwards.

    The trainer is the single writer of model parameters; input models are
    never mutated, each update returns a new value.
    """
    if cfg.resolutions is not None:
        if len(cfg.resolutions) != model.n_components:
            raise ValueError("resolutions override does not match component count")
        comps = [replace(c, resolution=int(r))
                 for c, r in zip(model.components, cfg.resolutions)]
        model = Model(components=comps, emission=model.emission, dt=model.dt,
                      prior_x0=model.prior_x0, normalization=model.normalization)
    s_cache = cfg.cache_samples or cfg.samples
    keep_samples = cfg.residual_mode == "sampled"
    cache = CachedLatents(paths={}, n_components=model.n_components,
                          sample_count=s_cache,
                          samples={} if keep_samples else None)

    def fill_cache(l: int, stream: RngStream):
        paths = simulate_latents(model, data, l, s_cache, stream)
        cache.paths[l] = paths.mean(axis=0)
        if keep_samples:
            cache.samples[l] = paths

    for l in range(model.n_components):
        fill_cache(l, rng.child(0, 0, l))
    records: list[TrainRecord] = []
    order = component_order(model, cfg)
    for cycle in range(cfg.cycles):
        for l in order:
            model, recs = update_component(
                model, data, cache, l, cfg, rng.child(1, cycle, l), cycle=cycle
            )
            records.extend(recs)
            fill_cache(l, rng.child(2, cycle, l))
    if log_path is not None:
        write_train_log(records, log_path)
    return model, records


def write_train_log(records: list[TrainRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "component", "iter", "elbo", "lr", "wall_ms"])
        for r in records:
            w.writerow([
                r.cycle, r.component, r.iteration,
                format(r.elbo, ".17g"), format(r.lr, ".17g"),
                format(r.wall_ms, ".3f"),
            ])
