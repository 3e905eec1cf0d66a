"""Trainable classifiers behind one contract: labels, logits, boundary gradients."""
from .base import ClassifierModel, TrainingSpec, softmax
from .forest import RandomForest, Tree, train_forest
from .io import load_model, model_from_bytes, model_to_bytes, save_model
from .network import DenseNetwork, train_network


def train(ds, spec, rng):
    """Train a model of ``spec.kind`` on ``ds``; the result depends only on (ds, spec, rng)."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if spec.kind == "forest":
        return train_forest(ds, spec, rng)
    return train_network(ds, spec, rng)


def predict_label(model, x):
    return model.predict_label(x)


def predict_logits(model, x):
    return model.predict_logits(x)


def boundary_gradient(model, x, class_a, class_b):
    return model.boundary_gradient(x, class_a, class_b)


__all__ = [
    "ClassifierModel",
    "DenseNetwork",
    "RandomForest",
    "Tree",
    "TrainingSpec",
    "boundary_gradient",
    "load_model",
    "model_from_bytes",
    "model_to_bytes",
    "predict_label",
    "predict_logits",
    "save_model",
    "softmax",
    "train",
]
