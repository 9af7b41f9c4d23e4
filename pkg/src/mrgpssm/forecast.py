"""Free-run prediction and the RMSE / negative-log-likelihood metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .gauss import LOG_2PI
from .model import Dataset, Model
from .rng import RngStream
from .sampling import sample_seq_fullmc


@dataclass
class Prediction:
    """Moment-matched predictive output per time point (normalized units)."""

    mean: np.ndarray  # (T, D_y)
    var: np.ndarray  # (T, D_y)

    def to_raw(self, norm: dict | None) -> "Prediction":
        if norm is None:
            return self
        y_std = np.asarray(norm["y_std"])
        y_mean = np.asarray(norm["y_mean"])
        return Prediction(mean=self.mean * y_std + y_mean,
                          var=self.var * y_std**2)


def predict(model: Model, data: Dataset, S: int, rng: RngStream) -> Prediction:
    """Free-run simulation on the test inputs from q(x_0).

    Every component is simulated at stride 1 with S full Monte Carlo paths;
    predictive moments are matched across the summed emission samples and
    the observation noise is added to the variance.
    """
    if data.input_dim != model.input_dim:
        raise DimensionMismatch(
            f"dataset has {data.input_dim} inputs, model expects {model.input_dim}"
        )
    T = data.T
    d_y = model.emission.out_dim
    u_window = data.u[np.clip(np.arange(T) - 1, 0, T - 1)]
    emitted = np.zeros((S, T, d_y))
    for l, c in enumerate(model.components):
        path = sample_seq_fullmc(c, u_window, step=model.dt, B=T, B0=0, S=S,
                                 rng=rng.child(l), dt=model.dt)
        emitted += path.samples[:, :, :d_y]
    mean = emitted.mean(axis=0)
    var = emitted.var(axis=0) + model.emission.obs_noise_diag
    return Prediction(mean=mean, var=var)


def rmse(pred_mean: np.ndarray, y: np.ndarray) -> float:
    pred_mean = np.atleast_2d(pred_mean)
    y = np.atleast_2d(y)
    if pred_mean.shape != y.shape:
        raise DimensionMismatch(f"shapes {pred_mean.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((pred_mean - y) ** 2)))


def nll(pred_mean: np.ndarray, pred_var: np.ndarray, y: np.ndarray) -> float:
    """Mean over time points of the negative predictive log density
    (outputs summed within a point)."""
    pred_mean = np.atleast_2d(pred_mean)
    pred_var = np.atleast_2d(pred_var)
    y = np.atleast_2d(y)
    if not (pred_mean.shape == pred_var.shape == y.shape):
        raise DimensionMismatch("prediction/target shapes disagree")
    per_point = 0.5 * np.sum(
        LOG_2PI + np.log(pred_var) + (y - pred_mean) ** 2 / pred_var, axis=1
    )
    return float(np.mean(per_point))


def metrics(pred: Prediction, y: np.ndarray) -> dict:
    return {"rmse": rmse(pred.mean, y), "nll": nll(pred.mean, pred.var, y)}
