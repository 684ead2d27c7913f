"""Shared test helpers."""

import numpy as np

from continual_retrieval.model import Hyperparameters, ModelState


def identity_model(dim: int, classifier_columns: np.ndarray | None = None,
                   class_ids=None, temperature: float = 1.0,
                   **hyper_overrides) -> ModelState:
    """A model whose embedding is exactly normalize(x) for non-negative x.

    Both layers are identity maps with zero bias, so handcrafted inputs give
    handcrafted embeddings; the classifier can be pinned to exact columns.
    """
    hyper = Hyperparameters(embed_dim=dim, hidden_dim=dim,
                            temperature=temperature, **hyper_overrides)
    state = ModelState(dim, hyper)
    state.layer1_w = np.eye(dim)
    state.layer1_b = np.zeros(dim)
    state.layer2_w = np.eye(dim)
    state.layer2_b = np.zeros(dim)
    if classifier_columns is not None:
        columns = np.asarray(classifier_columns, dtype=np.float64)
        state.classifier = columns
        state.class_registry = list(class_ids) if class_ids is not None else list(range(columns.shape[1]))
    return state
