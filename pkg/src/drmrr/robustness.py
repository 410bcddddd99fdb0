"""Noise and attack protocols for stress-testing trained rankers.

Four perturbations are supported: Gaussian feature noise, FGSM driven by a
linear adversary trained on clean data ("universal"), FGSM driven by a
neural substitute imitating one victim ("black-box"), and stochastic label
flips of the training set. Every attack is a pure function of its inputs
and the seed in its ``AttackSpec``; randomness is drawn from per-query
substreams so results do not depend on processing order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import Query, RankingDataset
from .ranker import fit_pointwise_linear

ATTACK_KINDS = ("gaussian", "universal_fgsm", "blackbox_fgsm", "label_poison")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    fraction: float = 0.75
    mu: float = 0.0
    sigma: float = 0.001
    eta: float = 0.0
    e: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if self.sigma < 0 or self.eta < 0:
            raise ValueError("sigma and eta must be nonnegative")
        if not 0.0 <= self.e <= 1.0:
            raise ValueError("e must lie in [0, 1]")

    @property
    def level(self) -> float:
        """The swept parameter of this attack kind."""
        return {"gaussian": self.mu, "universal_fgsm": self.eta,
                "blackbox_fgsm": self.eta, "label_poison": self.e}[self.kind]

    @property
    def attack_id(self) -> str:
        return f"{self.kind}:{self.level:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttackSpec":
        return cls(**dict(data))


def _substream(seed: int, index: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, salt, index])


def perturbed_query_indices(n_queries: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of the ceil(fraction * T) queries an attack touches."""
    count = math.ceil(round(fraction * n_queries, 9))
    rng = np.random.default_rng([seed, 0x5E1EC7])
    return np.sort(rng.choice(n_queries, size=count, replace=False))


def _perturb_queries(dataset: RankingDataset, spec: AttackSpec, fn: Callable[[int, Query], np.ndarray]):
    chosen = set(perturbed_query_indices(len(dataset), spec.fraction, spec.seed).tolist())
    queries = [
        q.with_features(fn(i, q)) if i in chosen else q
        for i, q in enumerate(dataset.queries)
    ]
    return dataset.with_queries(queries)


def gaussian_attack(dataset: RankingDataset, spec: AttackSpec) -> RankingDataset:
    """Add i.i.d. N(mu, sigma^2) noise to every feature of the chosen queries."""

    def noisy(i: int, q: Query) -> np.ndarray:
        rng = _substream(spec.seed, i, salt=1)
        return q.features + rng.normal(spec.mu, spec.sigma, size=q.features.shape)

    return _perturb_queries(dataset, spec, noisy)


def fgsm_perturb(x, y, gradient_fn: Callable, eta: float) -> np.ndarray:
    """One signed-gradient step of size eta on the input(s) ``x``."""
    x = np.asarray(x, dtype=float)
    return x + eta * np.sign(gradient_fn(x, y))


def squared_error_gradient(w) -> Callable:
    """Input gradient of (w'x - y)^2, i.e. 2 (w'x - y) w, for one row or a batch."""
    w = np.asarray(w, dtype=float)

    def grad(x, y):
        x = np.asarray(x, dtype=float)
        residual = x @ w - np.asarray(y, dtype=float)
        return 2.0 * np.multiply.outer(residual, w)

    return grad


def train_linear_adversary(dataset: RankingDataset) -> np.ndarray:
    """Pointwise least-squares scorer fitted to raw grades."""
    X, y = dataset.stacked()
    return fit_pointwise_linear(X, y)


def universal_fgsm_attack(dataset: RankingDataset, w, spec: AttackSpec) -> RankingDataset:
    grad = squared_error_gradient(w)

    def attacked(i: int, q: Query) -> np.ndarray:
        return fgsm_perturb(q.features, q.labels, grad, spec.eta)

    return _perturb_queries(dataset, spec, attacked)


# --- neural substitute -------------------------------------------------------

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda a: 0.5 * (1.0 + np.tanh(0.5 * a))),
    "identity": (lambda a: a, lambda a: np.ones_like(a)),
}


@dataclass
class MLPConfig:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 20
    min_rel_improvement: float = 1e-3
    lr_drops: int = 3
    seed: int = 0


@dataclass
class SubstituteModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def layer_widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def _forward(self, X):
        act, _ = _ACTIVATIONS[self.activation]
        pre, outs = [], [X]
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = h @ W + b
            h = act(a)
            pre.append(a)
            outs.append(h)
        return h @ self.weights[-1] + self.biases[-1], pre, outs

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._forward(X)[0][:, 0]


def _init_layers(widths: Sequence[int], rng: np.random.Generator):
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _param_grads(model: SubstituteModel, X, y):
    out, pre, outs = model._forward(X)
    _, dact = _ACTIVATIONS[model.activation]
    delta = 2.0 * (out - y[:, None]) / X.shape[0]
    gW, gb = [], []
    for layer in range(len(model.weights) - 1, -1, -1):
        gW.append(outs[layer].T @ delta)
        gb.append(delta.sum(axis=0))
        if layer > 0:
            delta = (delta @ model.weights[layer].T) * dact(pre[layer - 1])
    return gW[::-1], gb[::-1]


def train_substitute_mlp(X, victim_scores, config: MLPConfig | None = None) -> SubstituteModel:
    """Fit a feed-forward net to imitate a victim's scalar scores.

    Mini-batch Adam on squared error with targets standardized internally;
    the standardization is folded back into the output layer. When the
    full-batch MSE has not improved by ``min_rel_improvement`` (relative) for
    ``patience`` epochs the learning rate halves; after ``lr_drops`` halvings
    the next plateau ends training, as does ``max_epochs``.
    """
    config = config or MLPConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(victim_scores, dtype=float)
    if y.shape != (X.shape[0],):
        raise ValueError("one victim score per training row required")
    if config.activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {config.activation!r}")
    mean = float(y.mean())
    scale = float(y.std())
    # constant targets: train on zeros, the zero scale folds to an exact constant
    z = (y - mean) / (scale or 1.0)

    rng = np.random.default_rng(config.seed)
    weights, biases = _init_layers([X.shape[1], *config.hidden, 1], rng)
    model = SubstituteModel(weights, biases, config.activation)
    params = model.weights + model.biases
    m = [np.zeros_like(P) for P in params]
    v = [np.zeros_like(P) for P in params]
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    step = 0
    lr = config.learning_rate
    drops = 0

    def mse():
        return float(np.mean((model.predict(X) - z) ** 2))

    best = mse()
    best_params = [P.copy() for P in params]
    since_best = 0
    history = [best]
    n = X.shape[0]
    for _ in range(config.max_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            gW, gb = _param_grads(model, X[idx], z[idx])
            step += 1
            for P, G, mi, vi in zip(params, gW + gb, m, v):
                mi *= b1
                mi += (1 - b1) * G
                vi *= b2
                vi += (1 - b2) * G * G
                P -= lr * (mi / (1 - b1 ** step)) / (np.sqrt(vi / (1 - b2 ** step)) + eps_adam)
        loss = mse()
        if not math.isfinite(loss):
            raise FloatingPointError("substitute training diverged; lower learning_rate")
        history.append(loss)
        if loss < best * (1.0 - config.min_rel_improvement):
            since_best = 0
        else:
            since_best += 1
        if loss < best:
            best = loss
            best_params = [P.copy() for P in params]
        if best == 0.0:
            break
        if since_best >= config.patience:
            if drops >= config.lr_drops:
                break
            drops += 1
            lr *= 0.5
            since_best = 0

    k = len(model.weights)
    weights = [P.copy() for P in best_params[:k]]
    biases = [P.copy() for P in best_params[k:]]
    weights[-1] *= scale
    biases[-1] = biases[-1] * scale + mean
    return SubstituteModel(weights, biases, config.activation, [h * scale * scale for h in history])


def mlp_input_gradient(model: SubstituteModel, x, y) -> np.ndarray:
    """Gradient of (f(x) - y)^2 with respect to the input, by backprop.

    ``x`` may be one row or an n x p batch (with ``y`` of length n).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    out, pre, _ = model._forward(X)
    _, dact = _ACTIVATIONS[model.activation]
    delta = 2.0 * (out[:, 0] - np.asarray(y, dtype=float).reshape(-1))[:, None]
    for layer in range(len(model.weights) - 1, -1, -1):
        delta = delta @ model.weights[layer].T
        if layer > 0:
            delta = delta * dact(pre[layer - 1])
    return delta[0] if single else delta


def blackbox_fgsm_attack(dataset: RankingDataset, model: SubstituteModel, targets: Mapping[str, np.ndarray],
                         spec: AttackSpec) -> RankingDataset:
    """FGSM through a substitute model's input gradient.

    ``targets`` maps qid to the per-document y of the substitute's cost,
    on the same scale as the imitated victim score.
    """

    def grad(x, y):
        return mlp_input_gradient(model, x, y)

    def attacked(i: int, q: Query) -> np.ndarray:
        return fgsm_perturb(q.features, targets[q.qid], grad, spec.eta)

    return _perturb_queries(dataset, spec, attacked)


# --- label poisoning ---------------------------------------------------------

def error_probability_table(e: float) -> np.ndarray:
    """Row g gives the probabilities that a grade-g label becomes 0, 1, 2."""
    if not 0.0 <= e <= 1.0:
        raise ValueError("e must lie in [0, 1]")
    f = 1.0 - e
    table = np.array([
        [e, 2 * f / 3, f / 3],
        [f / 2, e, f / 2],
        [f / 3, 2 * f / 3, e],
    ])
    assert np.allclose(table.sum(axis=1), 1.0)
    return table


def resample_labels(labels, e: float, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if labels.size and (labels.min() < 0 or labels.max() > 2):
        raise ValueError("label poisoning is defined for grades 0, 1, 2 only")
    cdf = np.cumsum(error_probability_table(e), axis=1)
    u = rng.random(labels.size)
    return (u[:, None] >= cdf[labels, :2]).sum(axis=1)


def poison_labels(dataset: RankingDataset, e: float, seed: int) -> RankingDataset:
    """Independently resample every training label from its table row."""
    if dataset.y_max != 2:
        raise ValueError("label poisoning is defined for grades 0, 1, 2 only")
    queries = [
        q.with_labels(resample_labels(q.labels, e, _substream(seed, i, salt=2)))
        for i, q in enumerate(dataset.queries)
    ]
    return dataset.with_queries(queries)
