from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, InvalidArguments, UnsupportedOperation

KINDS = ("linear", "mlp", "forest")


@dataclass(frozen=True)
class TrainingSpec:
    """Hyper-parameters for one model family.

    ``hidden_layers`` only applies to ``mlp``; ``tree_count``/``max_depth`` only to ``forest``.
    """

    kind: str
    hidden_layers: tuple = ()
    epochs: int = 30
    learning_rate: float = 0.1
    batch_size: int = 32
    tree_count: int = 20
    max_depth: int = 12

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArguments(f"kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.epochs < 1:
            raise InvalidArguments("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidArguments("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidArguments("batch_size must be >= 1")
        if any(w < 1 for w in self.hidden_layers):
            raise InvalidArguments("hidden layer widths must be >= 1")
        if self.kind == "mlp" and not self.hidden_layers:
            raise InvalidArguments("mlp needs at least one hidden layer")
        if self.kind == "linear" and self.hidden_layers:
            raise InvalidArguments("linear models take no hidden layers")
        if self.kind == "forest" and (self.tree_count < 1 or self.max_depth < 1):
            raise InvalidArguments("forest needs tree_count >= 1 and max_depth >= 1")

    def to_dict(self):
        return {
            "kind": self.kind,
            "hidden_layers": list(self.hidden_layers),
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "tree_count": self.tree_count,
            "max_depth": self.max_depth,
        }


def argmax_lowest(values, axis=-1):
    """argmax that resolves ties towards the lowest index (numpy already does; kept explicit)."""
    return np.argmax(values, axis=axis)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ClassifierModel:
    """Common surface of every trained model.

    Inputs may be a single feature vector of shape ``(n,)`` or a batch of
    shape ``(m, n)``; label queries return an ``int`` or an integer array.
    """

    kind = None
    differentiable = False

    def __init__(self, class_count, feature_dim, train_seed=0):
        self.class_count = int(class_count)
        self.feature_dim = int(feature_dim)
        self.train_seed = int(train_seed)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.feature_dim:
            raise DimensionError(
                f"expected inputs with {self.feature_dim} features, got shape {x.shape}"
            )
        return x

    def predict_label(self, x):
        x = self._check_input(x)
        labels = self._labels(np.atleast_2d(x))
        return int(labels[0]) if x.ndim == 1 else labels

    def predict_logits(self, x):
        raise UnsupportedOperation(f"{self.kind} models do not expose logits")

    def boundary_gradient(self, x, class_a, class_b):
        raise UnsupportedOperation(f"{self.kind} models do not expose gradients")

    def _labels(self, X):
        raise NotImplementedError
