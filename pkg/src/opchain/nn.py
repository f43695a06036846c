"""Feed-forward sigmoid networks with hand-written reverse-mode gradients.

A :class:`Pipeline` is a linear chain of stages. Each stage is either a fixed
:class:`OperatorNode` (forward map plus the transposed Jacobian applied to an
upstream gradient) or the single trainable :class:`MlpModel`. Everything is
computed in float64 on batches shaped ``(n_samples, dim)``; 1-D inputs are
treated as a single sample.

Random state: weight initialisation and minibatch shuffling both use
``numpy.random.default_rng(seed)`` (PCG64), so a seed fully determines a run.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, Divergence, NonFiniteGradient

SIGMOID_LIPSCHITZ = 0.25
ACTIVATIONS = ("sigmoid", "identity")


def sigmoid(x):
    """Logistic function ``1 / (1 + exp(-x))``; saturates without overflow."""
    out = expit(np.asarray(x, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionMismatch(f"expected inputs of dimension {dim}, got shape {x.shape}")
    return x, single


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "sigmoid"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise DimensionMismatch(
                f"bias length {self.bias.shape[0]} does not match {self.weights.shape[0]} outputs"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.weights.T + self.bias
        return expit(z) if self.activation == "sigmoid" else z


class MlpModel:
    """Stack of dense layers. The only trainable stage type."""

    trainable = True

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ValueError("an MlpModel needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise DimensionMismatch(
                    f"layer {k} outputs {layers[k].out_dim} values but layer {k + 1} expects {layers[k + 1].in_dim}"
                )
        self.layers = layers

    @classmethod
    def initialize(cls, dims: Sequence[int], seed: int = 0,
                   hidden_activation: str = "sigmoid",
                   output_activation: str = "identity") -> "MlpModel":
        """Glorot-uniform weights, zero biases.

        ``dims`` lists every width from input to output, e.g. ``(3, 16, 16, 1)``.
        """
        if len(dims) < 2 or any(int(d) <= 0 for d in dims):
            raise ValueError(f"invalid layer widths {dims}")
        rng = np.random.default_rng(seed)
        layers = []
        for k, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            act = output_activation if k == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer(w, np.zeros(n_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    # Stage protocol shared with OperatorNode
    in_dim = input_dim
    out_dim = output_dim

    def parameters(self) -> list[np.ndarray]:
        """Weights and biases in layer order: ``[W0, b0, W1, b1, ...]``."""
        params = []
        for layer in self.layers:
            params.extend((layer.weights, layer.bias))
        return params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward_cached(self, x: np.ndarray) -> list[np.ndarray]:
        """Return the activations of every layer, input first."""
        acts = [x]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1]))
        return acts

    def backward(self, acts: list[np.ndarray], upstream: np.ndarray):
        """Back-propagate ``upstream`` (dL/d output) through cached activations.

        Returns ``(grads, dx)`` where ``grads`` is ordered like :meth:`parameters`.
        """
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        delta = upstream
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if layer.activation == "sigmoid":
                out = acts[k + 1]
                delta = delta * out * (1.0 - out)
            grads[2 * k] = delta.T @ acts[k]
            grads[2 * k + 1] = delta.sum(axis=0)
            delta = delta @ layer.weights
        return grads, delta

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def __repr__(self):
        dims = [self.input_dim] + [layer.out_dim for layer in self.layers]
        return f"MlpModel(dims={dims})"


class OperatorNode:
    """A fixed, differentiable map with no trainable parameters.

    Subclasses override :meth:`forward` and :meth:`jvp`; ad-hoc nodes can be
    built by passing the two callables directly. ``jvp(x, upstream)`` maps the
    gradient with respect to the output back to the gradient with respect to
    the input (the transposed Jacobian at ``x`` applied to ``upstream``).
    """

    trainable = False

    def __init__(self, in_dim: int, out_dim: int,
                 forward: Callable | None = None,
                 jvp: Callable | None = None,
                 name: str | None = None):
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError("operator dimensions must be positive")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self._forward = forward
        self._jvp = jvp
        self.name = name or type(self).__name__

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._forward(x)

    def jvp(self, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        return self._jvp(x, upstream)

    def __call__(self, x):
        batch, single = _as_batch(x, self.in_dim)
        out = self.forward(batch)
        return out[0] if single else out

    def __repr__(self):
        return f"{self.name}({self.in_dim}->{self.out_dim})"


def identity_node(dim: int) -> OperatorNode:
    return OperatorNode(dim, dim, forward=lambda x: x, jvp=lambda x, g: g, name="Identity")


@dataclass
class Gradients:
    """MSE loss value plus gradients for the trainable stage and the input."""

    loss: float
    params: list[np.ndarray] = field(default_factory=list)
    input: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.params])


class Pipeline:
    """Linear chain of operator nodes around (at most) one trainable MLP."""

    def __init__(self, stages: Sequence, loss: str = "mse"):
        stages = list(stages)
        if not stages:
            raise ValueError("a pipeline needs at least one stage")
        if loss != "mse":
            raise ValueError(f"unsupported loss {loss!r}")
        for k in range(len(stages) - 1):
            if stages[k].out_dim != stages[k + 1].in_dim:
                raise DimensionMismatch(
                    f"stage {k} ({stages[k]!r}) outputs {stages[k].out_dim} values, "
                    f"stage {k + 1} ({stages[k + 1]!r}) expects {stages[k + 1].in_dim}"
                )
        trainable = [k for k, s in enumerate(stages) if s.trainable]
        if len(trainable) > 1:
            raise ValueError("a pipeline may contain only one trainable stage")
        self.stages = stages
        self.loss = loss
        self.mlp_index = trainable[0] if trainable else None

    @property
    def input_dim(self) -> int:
        return self.stages[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.stages[-1].out_dim

    @property
    def mlp(self) -> MlpModel | None:
        return None if self.mlp_index is None else self.stages[self.mlp_index]

    def split(self):
        """``(prefix, mlp, suffix)``: the fixed stages before and after the MLP."""
        if self.mlp_index is None:
            return self.stages, None, []
        k = self.mlp_index
        return self.stages[:k], self.stages[k], self.stages[k + 1:]

    def forward(self, x):
        batch, single = _as_batch(x, self.input_dim)
        for stage in self.stages:
            batch = stage.forward(batch)
        return batch[0] if single else batch

    __call__ = forward

    def loss_value(self, x, target) -> float:
        y = np.atleast_2d(self.forward(x))
        t = np.asarray(target, dtype=np.float64).reshape(y.shape)
        return float(np.mean((y - t) ** 2))

    def backward(self, x, target) -> Gradients:
        batch, _ = _as_batch(x, self.input_dim)
        t = np.asarray(target, dtype=np.float64)
        if t.ndim == 1:
            t = t.reshape(batch.shape[0], -1) if batch.shape[0] > 1 else t[None, :]
        if t.shape != (batch.shape[0], self.output_dim):
            raise DimensionMismatch(f"target shape {t.shape} does not match output "
                                    f"({batch.shape[0]}, {self.output_dim})")
        inputs = []
        mlp_acts = None
        h = batch
        for k, stage in enumerate(self.stages):
            inputs.append(h)
            if k == self.mlp_index:
                mlp_acts = stage.forward_cached(h)
                h = mlp_acts[-1]
            else:
                h = stage.forward(h)
        resid = h - t
        loss = float(np.mean(resid ** 2))
        g = 2.0 * resid / resid.size
        params: list[np.ndarray] = []
        for k in range(len(self.stages) - 1, -1, -1):
            stage = self.stages[k]
            if k == self.mlp_index:
                params, g = stage.backward(mlp_acts, g)
            else:
                g = stage.jvp(inputs[k], g)
        grads = Gradients(loss=loss, params=params, input=g)
        if not (np.isfinite(grads.flat()).all() and np.isfinite(g).all()):
            raise NonFiniteGradient("non-finite gradient encountered during back-propagation")
        return grads

    def copy(self) -> "Pipeline":
        return copy.deepcopy(self)

    def __repr__(self):
        return "Pipeline(" + " -> ".join(repr(s) for s in self.stages) + ")"


def pipeline_forward(p: Pipeline, x):
    return p.forward(x)


def pipeline_backward(p: Pipeline, x, target) -> Gradients:
    return p.backward(x, target)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

# Components whose analytic and numeric gradients are both below this are
# compared in absolute terms; central differences cannot resolve them relatively.
GRADCHECK_FLOOR = 1e-6


@dataclass
class GradientCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    passed: bool


def _relative_error(analytic, numeric, floor=GRADCHECK_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(p: Pipeline, x, target, h: float = 1e-5, tol: float = 1e-4,
                   check_input: bool = True) -> GradientCheckReport:
    """Compare back-propagated gradients with central differences.

    Every trainable parameter is checked and, with ``check_input``, every input
    component too, which exercises the ``jvp`` of operators placed before the MLP.
    """
    if h <= 0 or tol <= 0:
        raise ValueError("h and tol must be positive")
    x = np.array(x, dtype=np.float64)
    grads = p.backward(x, target)
    errors = []

    def central(set_value, base):
        set_value(base + h)
        up = p.loss_value(x, target)
        set_value(base - h)
        down = p.loss_value(x, target)
        set_value(base)
        return (up - down) / (2.0 * h)

    if p.mlp is not None:
        for param, analytic in zip(p.mlp.parameters(), grads.params):
            numeric = np.empty_like(param)
            for idx in np.ndindex(param.shape):
                base = param[idx]

                def setter(v, idx=idx, param=param):
                    param[idx] = v

                numeric[idx] = central(setter, base)
            errors.append(_relative_error(analytic, numeric).ravel())

    if check_input:
        numeric = np.empty_like(x)
        for idx in np.ndindex(x.shape):
            base = x[idx]

            def setter(v, idx=idx):
                x[idx] = v

            numeric[idx] = central(setter, base)
        errors.append(_relative_error(grads.input.reshape(x.shape), numeric).ravel())

    errs = np.concatenate(errors) if errors else np.zeros(0)
    worst = float(errs.max()) if errs.size else 0.0
    return GradientCheckReport(max_rel_error=worst, n_checked=int(errs.size),
                               tol=tol, passed=worst < tol)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 64
    decay_factor: float = 0.5
    decay_every: int | None = None  # epochs; defaults to a third of the run
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.decay_every is not None and self.decay_every <= 0:
            raise ValueError("decay_every must be positive")

    @property
    def decay_period(self) -> int:
        return self.decay_every or max(1, self.epochs // 3)


@dataclass
class TrainResult:
    pipeline: Pipeline
    history: list[float]


def train(p: Pipeline, inputs, targets, cfg: TrainConfig | None = None) -> TrainResult:
    """Minibatch SGD with classical momentum on the MSE loss.

    The input pipeline is left untouched; the trained copy is returned together
    with the per-epoch mean training loss. Fixed stages ahead of the MLP are
    evaluated once up front since they have no parameters.
    """
    cfg = cfg or TrainConfig()
    if p.mlp is None:
        raise ValueError("pipeline has no trainable stage")
    x, _ = _as_batch(inputs, p.input_dim)
    y = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], -1)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if y.shape[1] != p.output_dim:
        raise DimensionMismatch(f"targets have {y.shape[1]} columns, pipeline outputs {p.output_dim}")

    trained = p.copy()
    prefix, mlp, suffix = trained.split()
    for stage in prefix:
        x = stage.forward(x)

    params = mlp.parameters()
    velocity = [np.zeros_like(q) for q in params]
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    history: list[float] = []
    lr = cfg.learning_rate

    # Overflow on the way to divergence is expected; it is caught below.
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            if epoch > 0 and epoch % cfg.decay_period == 0:
                lr *= cfg.decay_factor
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb, yb = x[idx], y[idx]
                acts = mlp.forward_cached(xb)
                h = acts[-1]
                suffix_inputs = []
                for stage in suffix:
                    suffix_inputs.append(h)
                    h = stage.forward(h)
                resid = h - yb
                total += float(np.sum(resid ** 2)) / y.shape[1]
                g = 2.0 * resid / resid.size
                for stage, inp in zip(reversed(suffix), reversed(suffix_inputs)):
                    g = stage.jvp(inp, g)
                grads, _ = mlp.backward(acts, g)
                for q, v, dq in zip(params, velocity, grads):
                    v *= cfg.momentum
                    v -= lr * dq
                    q += v
            epoch_loss = total / n
            history.append(epoch_loss)
            if not math.isfinite(epoch_loss) or not mlp.all_finite():
                raise Divergence(f"loss became non-finite at epoch {epoch}", history)
    return TrainResult(trained, history)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def save_model(path, model: MlpModel, **meta) -> Path:
    """Write a JSON header line followed by little-endian float64 blocks.

    Blocks follow layer order, weights (row-major) then bias for each layer.
    Extra keyword arguments are stored in the header under ``"meta"``.
    """
    path = Path(path)
    header = {
        "format": "opchain-mlp",
        "dtype": "f64le",
        "layers": [
            {"in_dim": layer.in_dim, "out_dim": layer.out_dim, "activation": layer.activation}
            for layer in model.layers
        ],
        "meta": meta,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for q in model.parameters():
            fh.write(np.ascontiguousarray(q, dtype="<f8").tobytes())
    return path


def load_model(path) -> tuple[MlpModel, dict]:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut].decode("utf-8"))
    data = np.frombuffer(raw[cut + 1:], dtype="<f8")
    layers = []
    pos = 0
    for spec in header["layers"]:
        n_in, n_out = spec["in_dim"], spec["out_dim"]
        w = data[pos:pos + n_in * n_out].reshape(n_out, n_in)
        pos += n_in * n_out
        b = data[pos:pos + n_out]
        pos += n_out
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), spec["activation"]))
    if pos != data.size:
        raise ValueError(f"{path}: {data.size - pos} trailing float64 values after the last layer")
    return MlpModel(layers), header
