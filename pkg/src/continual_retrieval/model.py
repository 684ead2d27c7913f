"""Embedding network, growable normalized classifier head, and frozen snapshots.

The network is a 2-layer MLP (input -> hidden ReLU -> embedding -> l2
normalize); all retrieval math only ever sees the unit-norm embedding output.
The classifier keeps one column per registered class; columns are normalized
on use, never in storage.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ContractError, DimensionError

PARAM_NAMES = ("layer1_w", "layer1_b", "layer2_w", "layer2_b", "classifier")


@dataclass
class Hyperparameters:
    """Training knobs; defaults follow the engine-wide defaults."""

    alpha: float = 10.0          # weight of the model-coherence term
    beta: float = 1.0            # weight of the data-coherence term
    margin: float = 0.1
    temperature: float = 0.05
    batch_size: int = 16
    embed_dim: int = 16
    hidden_dim: int = 32
    learning_rate: float = 0.03
    momentum: float = 0.9
    epochs_per_session: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be > 0")
        if self.margin < 0:
            raise ContractError("margin must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("loss weights must be >= 0")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")


class ModelState:
    """Mutable parameters of the embedding net plus the class registry."""

    def __init__(self, input_dim: int, hyper: Hyperparameters):
        self.input_dim = int(input_dim)
        self.hyper = hyper
        rng = np.random.default_rng(hyper.seed)
        lim1 = np.sqrt(6.0 / input_dim)
        lim2 = np.sqrt(6.0 / hyper.hidden_dim)
        self.layer1_w = rng.uniform(-lim1, lim1, (input_dim, hyper.hidden_dim))
        self.layer1_b = np.zeros(hyper.hidden_dim)
        self.layer2_w = rng.uniform(-lim2, lim2, (hyper.hidden_dim, hyper.embed_dim))
        self.layer2_b = np.zeros(hyper.embed_dim)
        self.classifier = np.zeros((hyper.embed_dim, 0))
        self.class_registry: list[int] = []
        self._head_rng = rng  # keeps advancing across register_classes calls

    @property
    def embed_dim(self) -> int:
        return self.hyper.embed_dim

    def class_column(self, class_id: int) -> int:
        try:
            return self.class_registry.index(class_id)
        except ValueError:
            raise ContractError(f"class {class_id} is not registered") from None

    def register_classes(self, new_class_ids) -> None:
        """Grow the head by one small-uniform, normalized column per new class.

        Existing columns are untouched byte-for-byte.
        """
        new_ids = sorted(set(int(c) for c in new_class_ids))
        if not new_ids:
            return
        dup = set(new_ids) & set(self.class_registry)
        if dup:
            raise ContractError(f"classes already registered: {sorted(dup)}")
        cols = []
        for _ in new_ids:
            col = self._head_rng.uniform(-0.05, 0.05, self.embed_dim)
            cols.append(col / max(np.linalg.norm(col), dc.NORM_EPS))
        self.classifier = np.concatenate([self.classifier, np.stack(cols, axis=1)], axis=1)
        self.class_registry.extend(new_ids)

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Unit-norm embedding of one input vector (inference path)."""
        out = BoundModel(self).embed(np.asarray(x, dtype=np.float64).reshape(1, -1))
        return out.data[0]

    def embed_many(self, xs: np.ndarray) -> np.ndarray:
        """Unit-norm embeddings of a stack of inputs, one per row."""
        return BoundModel(self).embed(np.asarray(xs, dtype=np.float64)).data

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def set_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in PARAM_NAMES:
            setattr(self, name, arrays[name].copy())


class BoundModel:
    """ModelState parameters bound to a tape (or to no tape for plain values)."""

    def __init__(self, state: ModelState, tape: dc.GradTape | None = None):
        self.state = state
        self.tape = tape
        if tape is None:
            self._p = {name: dc.Tensor(arr) for name, arr in state.parameter_arrays().items()}
        else:
            self._p = {name: tape.watch(arr) for name, arr in state.parameter_arrays().items()}

    def params(self) -> dict[str, dc.Tensor]:
        return dict(self._p)

    def embed(self, xs: np.ndarray) -> dc.Tensor:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[1] != self.state.input_dim:
            raise DimensionError(f"expected inputs of shape (n, {self.state.input_dim}), got {xs.shape}")
        x = dc.Tensor(xs)
        h = dc.relu(dc.add_row(dc.matmul(x, self._p["layer1_w"]), self._p["layer1_b"]))
        e = dc.add_row(dc.matmul(h, self._p["layer2_w"]), self._p["layer2_b"])
        return dc.normalize_rows(e)

    def class_logits(self, embeddings: dc.Tensor) -> dc.Tensor:
        """Cosine logits: embeddings (n, d) against the column-normalized head."""
        if self.state.classifier.shape[1] == 0:
            raise ContractError("no classes registered")
        return dc.matmul(embeddings, dc.normalize_columns(self._p["classifier"]))


class ModelSnapshot:
    """Immutable deep copy of a ModelState, used as the frozen teacher."""

    def __init__(self, state: ModelState, session: int):
        self.session = int(session)
        self.input_dim = state.input_dim
        self.hyper = copy.deepcopy(state.hyper)
        self._arrays = {}
        for name, arr in state.parameter_arrays().items():
            frozen = arr.copy()
            frozen.flags.writeable = False
            self._arrays[name] = frozen
        self.class_registry = list(state.class_registry)

    def _as_state(self) -> ModelState:
        # Cheap shell re-using the frozen arrays; forward ops never write.
        shell = ModelState.__new__(ModelState)
        shell.input_dim = self.input_dim
        shell.hyper = self.hyper
        for name in PARAM_NAMES:
            setattr(shell, name, self._arrays[name])
        shell.class_registry = self.class_registry
        return shell

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self._as_state().embed(x)

    def embed_many(self, xs: np.ndarray) -> np.ndarray:
        return self._as_state().embed_many(xs)


def snapshot(state: ModelState, session: int) -> ModelSnapshot:
    return ModelSnapshot(state, session)


class SgdMomentum:
    """Plain SGD with momentum; velocity buffers grow with the classifier head."""

    def __init__(self, learning_rate: float, momentum: float):
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, state: ModelState, grads: dict[str, np.ndarray]) -> None:
        for name in PARAM_NAMES:
            param = getattr(state, name)
            grad = grads[name]
            vel = self._velocity.get(name)
            if vel is None or vel.shape != param.shape:
                fresh = np.zeros_like(param)
                if vel is not None and name == "classifier" and vel.shape[0] == param.shape[0]:
                    fresh[:, : vel.shape[1]] = vel
                vel = fresh
            vel = self.momentum * vel + grad
            self._velocity[name] = vel
            param -= self.learning_rate * vel


def model_to_payload(state: ModelState, session: int) -> dict:
    """JSON-able checkpoint: shapes, flat parameter arrays, registry, session."""
    return {
        "format": "continual-retrieval-model",
        "version": 1,
        "session": int(session),
        "input_dim": state.input_dim,
        "hyper": dict(state.hyper.__dict__),
        "class_registry": list(state.class_registry),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in state.parameter_arrays().items()
        },
    }


def model_from_payload(payload: dict) -> tuple[ModelState, int]:
    if payload.get("format") != "continual-retrieval-model" or payload.get("version") != 1:
        raise ContractError("unrecognized model checkpoint payload")
    hyper = Hyperparameters(**payload["hyper"])
    state = ModelState(payload["input_dim"], hyper)
    state.class_registry = [int(c) for c in payload["class_registry"]]
    for name in PARAM_NAMES:
        spec = payload["params"][name]
        arr = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        setattr(state, name, arr)
    return state, int(payload["session"])
