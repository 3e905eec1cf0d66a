"""Fully connected ReLU networks trained with softmax cross-entropy.

A ``linear`` model is the zero-hidden-layer case (multinomial logistic regression).
"""
import numpy as np

from ..errors import DivergenceError, InvalidArguments
from .base import ClassifierModel, argmax_lowest

# float64 rarely overflows outright; a loss this many times the starting loss means the run blew up
DIVERGENCE_FACTOR = 1e3


class DenseNetwork(ClassifierModel):
    """Feed-forward network; ``weights[l]`` has shape ``(fan_out, fan_in)``."""

    differentiable = True

    def __init__(self, weights, biases, train_seed=0, kind=None):
        weights = [np.array(w, dtype=np.float64) for w in weights]
        biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        if not weights or len(weights) != len(biases):
            raise InvalidArguments("need one bias vector per weight matrix")
        for l, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise InvalidArguments(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l and w.shape[1] != weights[l - 1].shape[0]:
                raise InvalidArguments(f"layer {l}: fan_in {w.shape[1]} != previous fan_out")
        super().__init__(weights[-1].shape[0], weights[0].shape[1], train_seed)
        self.weights = weights
        self.biases = biases
        self.kind = kind or ("linear" if len(weights) == 1 else "mlp")
        self.history = []

    @classmethod
    def linear(cls, weight_rows, bias=None, train_seed=0):
        """Linear model whose logit for class ``c`` is ``weight_rows[c] @ x + bias[c]``."""
        w = np.atleast_2d(np.asarray(weight_rows, dtype=np.float64))
        b = np.zeros(w.shape[0]) if bias is None else bias
        return cls([w], [b], train_seed, kind="linear")

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def _forward(self, X):
        """Return pre-activations of every layer for a batch ``X``."""
        pre = []
        a = X
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pre.append(z)
            a = z if l == last else np.maximum(z, 0.0)
        return pre

    def _labels(self, X):
        return argmax_lowest(self._forward(X)[-1], axis=1)

    def predict_logits(self, x):
        x = self._check_input(x)
        out = self._forward(np.atleast_2d(x))[-1]
        return out[0] if x.ndim == 1 else out

    def boundary_gradient(self, x, class_a, class_b):
        """Gradient of ``logit_a - logit_b`` with respect to the input, by backpropagation.

        ReLU derivative is taken as 0 at the kink.
        """
        class_a, class_b = int(class_a), int(class_b)
        if class_a == class_b:
            raise InvalidArguments("class_a and class_b must differ")
        for c in (class_a, class_b):
            if not 0 <= c < self.class_count:
                raise InvalidArguments(f"class index {c} out of range")
        x = self._check_input(x)
        if x.ndim != 1:
            raise InvalidArguments("boundary_gradient takes a single input vector")
        pre = self._forward(x[None, :])
        v = np.zeros(self.class_count)
        v[class_a] = 1.0
        v[class_b] = -1.0
        for l in range(len(self.weights) - 1, -1, -1):
            v = self.weights[l].T @ v
            if l:
                v = v * (pre[l - 1][0] > 0.0)
        return v

    def parameters_equal(self, other):
        return (
            isinstance(other, DenseNetwork)
            and len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


def glorot_uniform(fan_in, fan_out, gen):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=(fan_out, fan_in))


def _cross_entropy(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logsum - z[np.arange(y.size), y]))


def train_network(ds, spec, rng):
    """Plain mini-batch gradient descent on softmax cross-entropy."""
    gen = rng.gen
    sizes = [ds.feature_dim, *spec.hidden_layers, ds.class_count]
    weights = [glorot_uniform(sizes[i], sizes[i + 1], gen) for i in range(len(sizes) - 1)]
    biases = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
    model = DenseNetwork(weights, biases, train_seed=rng.seed64, kind=spec.kind)
    weights, biases = model.weights, model.biases

    X, y = ds.features, ds.labels
    n = len(ds)
    onehot = np.eye(ds.class_count)[y]
    last = len(weights) - 1

    with np.errstate(over="ignore", invalid="ignore"):
        model.history.append(_cross_entropy(model._forward(X)[-1], y))
        for epoch in range(spec.epochs):
            order = gen.permutation(n)
            for start in range(0, n, spec.batch_size):
                idx = order[start:start + spec.batch_size]
                xb = X[idx]
                pre = model._forward(xb)
                logits = pre[-1]
                z = logits - logits.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                if not np.all(np.isfinite(p)):
                    raise DivergenceError(
                        f"non-finite loss in epoch {epoch}; lower the learning rate "
                        f"(currently {spec.learning_rate})"
                    )
                grad = (p - onehot[idx]) / idx.size
                for l in range(last, -1, -1):
                    a_prev = xb if l == 0 else np.maximum(pre[l - 1], 0.0)
                    gw = grad.T @ a_prev
                    gb = grad.sum(axis=0)
                    if l:
                        grad = (grad @ weights[l]) * (pre[l - 1] > 0.0)
                    weights[l] -= spec.learning_rate * gw
                    biases[l] -= spec.learning_rate * gb
            loss = _cross_entropy(model._forward(X)[-1], y)
            blown_up = loss > DIVERGENCE_FACTOR * max(model.history[0], 1.0)
            if blown_up or not np.isfinite(loss) or not all(np.all(np.isfinite(w)) for w in weights):
                raise DivergenceError(
                    f"non-finite loss after epoch {epoch}; lower the learning rate "
                    f"(currently {spec.learning_rate})"
                )
            model.history.append(loss)
    return model
