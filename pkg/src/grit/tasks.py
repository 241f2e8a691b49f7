"""Built-in synthetic tasks with a planted structure and a retention probe.

Task specs are strings:

    synthetic_lowrank(d=24, r_true=2, noise=0.02, delta_scale=1.0)
        Single linear layer. Inputs live on an r_true-dimensional subspace
        plus isotropic noise of the given scale; targets come from the frozen
        base plus a dense planted delta (only its action on the input subspace
        matters, so the useful update is rank r_true). The retention probe is
        base-behavior preservation on isotropic inputs: pt loss is the mean
        squared deviation of the adapted map from the base map.

    two_task_forgetting(d=12, hidden=12, pretrain_steps=200, delta_scale=0.35,
                        ft_noise=0.1, init_jitter=0.0)
        Two-layer tanh network. The base is pretrained on a teacher (with
        init_jitter = 0 the base starts at the teacher, i.e. at an exact
        optimum of the pretraining objective, and the gradient-descent
        refinement is a no-op). Fine-tuning targets come from the teacher with
        a rank-2 perturbation per layer, plus observation noise of scale
        ft_noise; the noise is what makes geometry-agnostic updates wander in
        weakly constrained directions. pt loss is measured against the
        original teacher on a fixed held-out set.

Both tasks expose a dense pretraining Hessian over the adapted layers' base
weight coordinates, computed by central finite differences of the exact
gradient (step 1e-4, symmetrized).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError
from .model import Model, build_model
from .telemetry import hessian_fd


@dataclass
class TaskInstance:
    """A built task: model factory output, data stream, and retention probes."""

    name: str
    model: Model
    sample_batch: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]
    pt_inputs: np.ndarray
    pt_targets: np.ndarray
    n_params: int
    layer_slices: list[slice]
    _hessian_cache: np.ndarray | None = field(default=None, repr=False)

    def pt_loss(self, model: Model) -> float:
        pred = model.predict(self.pt_inputs)  # read-only: leaves training tapes alone
        err = pred - self.pt_targets
        return float(0.5 * np.mean(np.sum(err * err, axis=1)))

    def base_weight_vector(self) -> np.ndarray:
        return np.concatenate([base.w0.ravel() for base, _ in self.model.layers])

    def delta_w_vector(self, model: Model) -> np.ndarray:
        return np.concatenate(
            [adapter.scaling * adapter.delta_w().ravel() for _, adapter in model.layers]
        )

    def _pt_grad_at(self, w_vec: np.ndarray) -> np.ndarray:
        probe = _probe_model(self.model, w_vec)
        pred = probe.forward(self.pt_inputs)
        err = (pred - self.pt_targets) / self.pt_inputs.shape[0]
        probe.backward(err)
        return np.concatenate([tape.grad_w0.ravel() for tape in probe.tapes])

    def pt_hessian(self) -> np.ndarray:
        """Dense pretraining Hessian at the base point, cached after first build."""
        if self._hessian_cache is None:
            self._hessian_cache = hessian_fd(
                self._pt_grad_at, self.base_weight_vector(), step=1e-4
            )
        return self._hessian_cache


def _probe_model(reference: Model, w_vec: np.ndarray) -> Model:
    """Copy of the reference architecture with base weights replaced and adapters zeroed."""
    from .model import AdapterPair, BaseLayer

    layers = []
    offset = 0
    for base, adapter in reference.layers:
        size = base.d_out * base.d_in
        w0 = w_vec[offset : offset + size].reshape(base.d_out, base.d_in)
        offset += size
        layers.append(
            (
                BaseLayer(w0=w0, bias=None if base.bias is None else base.bias, activation=base.activation),
                AdapterPair(
                    a=np.zeros_like(adapter.a),
                    b=np.zeros_like(adapter.b),
                    rank=adapter.rank,
                    scaling=adapter.scaling,
                ),
            )
        )
    return Model(layers=layers)


def _layer_slices(model: Model) -> list[slice]:
    slices = []
    offset = 0
    for base, _ in model.layers:
        size = base.d_out * base.d_in
        slices.append(slice(offset, offset + size))
        offset += size
    return slices


def _orthonormal_columns(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(d, k)))
    return q


def build_synthetic_lowrank(
    params: dict,
    rank: int,
    alpha: float,
    eval_size: int,
    model_rng: np.random.Generator,
    data_rng: np.random.Generator,
) -> TaskInstance:
    d = int(params.get("d", 24))
    r_true = int(params.get("r_true", 2))
    noise = float(params.get("noise", 0.02))
    delta_scale = float(params.get("delta_scale", 1.0))
    if r_true < 1 or r_true > d:
        raise ConfigError("r_true must lie in [1, d]")

    w0 = model_rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    subspace = _orthonormal_columns(model_rng, d, r_true)
    delta = model_rng.normal(0.0, delta_scale / np.sqrt(d), size=(d, d))
    target_w = w0 + delta

    model = build_model(
        [d, d], rank=rank, scaling=alpha, rng=model_rng,
        activations=["identity"], base_weights=[w0],
    )

    def sample_batch(rng: np.random.Generator, batch: int):
        z = rng.normal(size=(batch, r_true))
        x = z @ subspace.T
        if noise > 0.0:
            x = x + noise * rng.normal(size=(batch, d))
        y = x @ target_w.T
        return x, y

    # Retention probe: keep the base map on isotropic inputs.
    pt_inputs = data_rng.normal(size=(eval_size, d))
    pt_targets = pt_inputs @ w0.T
    return TaskInstance(
        name="synthetic_lowrank",
        model=model,
        sample_batch=sample_batch,
        pt_inputs=pt_inputs,
        pt_targets=pt_targets,
        n_params=d * d,
        layer_slices=_layer_slices(model),
    )


def build_two_task_forgetting(
    params: dict,
    rank: int,
    alpha: float,
    eval_size: int,
    model_rng: np.random.Generator,
    data_rng: np.random.Generator,
) -> TaskInstance:
    d = int(params.get("d", 12))
    hidden = int(params.get("hidden", 12))
    pretrain_steps = int(params.get("pretrain_steps", 200))
    delta_scale = float(params.get("delta_scale", 0.35))
    ft_noise = float(params.get("ft_noise", 0.1))
    init_jitter = float(params.get("init_jitter", 0.0))

    teacher_w1 = model_rng.normal(0.0, 1.0 / np.sqrt(d), size=(hidden, d))
    teacher_w2 = model_rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(d, hidden))

    def teacher(x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ teacher_w1.T) @ teacher_w2.T

    # Pretraining: start at (or near) the teacher and refine with full-batch
    # gradient descent on noiseless teacher data. With init_jitter = 0 this is
    # already an exact optimum and the loop leaves the weights unchanged.
    w1 = teacher_w1 + init_jitter * model_rng.normal(size=teacher_w1.shape)
    w2 = teacher_w2 + init_jitter * model_rng.normal(size=teacher_w2.shape)
    x_tr = data_rng.normal(size=(max(eval_size, 128), d))
    y_tr = teacher(x_tr)
    lr = 0.5
    for _ in range(pretrain_steps):
        h_pre = x_tr @ w1.T
        h = np.tanh(h_pre)
        pred = h @ w2.T
        err = (pred - y_tr) / x_tr.shape[0]
        g2 = err.T @ h
        dh = (err @ w2) * (1.0 - h * h)
        g1 = dh.T @ x_tr
        w1 = w1 - lr * g1
        w2 = w2 - lr * g2

    model = build_model(
        [d, hidden, d], rank=rank, scaling=alpha, rng=model_rng,
        activations=["tanh", "identity"], base_weights=[w1, w2],
    )

    # Fine-tuning teacher: the pretraining teacher plus a rank-2 delta per layer.
    deltas = []
    for w in (teacher_w1, teacher_w2):
        u = _orthonormal_columns(model_rng, w.shape[0], 2)
        v = _orthonormal_columns(model_rng, w.shape[1], 2)
        deltas.append(delta_scale * (u @ v.T))
    ft_w1 = teacher_w1 + deltas[0]
    ft_w2 = teacher_w2 + deltas[1]

    def sample_batch(rng: np.random.Generator, batch: int):
        x = rng.normal(size=(batch, d))
        y = np.tanh(x @ ft_w1.T) @ ft_w2.T
        if ft_noise > 0.0:
            y = y + ft_noise * rng.normal(size=y.shape)
        return x, y

    pt_inputs = data_rng.normal(size=(eval_size, d))
    pt_targets = teacher(pt_inputs)
    return TaskInstance(
        name="two_task_forgetting",
        model=model,
        sample_batch=sample_batch,
        pt_inputs=pt_inputs,
        pt_targets=pt_targets,
        n_params=hidden * d + d * hidden,
        layer_slices=_layer_slices(model),
    )


_BUILDERS = {
    "synthetic_lowrank": build_synthetic_lowrank,
    "two_task_forgetting": build_two_task_forgetting,
}

_SPEC_RE = re.compile(r"^\s*([a-z_][a-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def parse_task_spec(spec: str) -> tuple[str, dict]:
    """Parse 'name(k1=v1, k2=v2)' into (name, params)."""
    match = _SPEC_RE.match(spec.strip().lower())
    if not match:
        raise ConfigError(f"malformed task spec {spec!r}", key="task")
    name, arg_text = match.group(1), match.group(2)
    if name not in _BUILDERS:
        raise ConfigError(
            f"unknown task {name!r}; available: {sorted(_BUILDERS)}", key="task"
        )
    params: dict = {}
    if arg_text and arg_text.strip():
        for piece in arg_text.split(","):
            if "=" not in piece:
                raise ConfigError(f"task argument {piece.strip()!r} must be key=value", key="task")
            key, value = piece.split("=", 1)
            params[key.strip()] = float(value.strip())
    return name, params


def build_task(
    spec: str,
    rank: int,
    alpha: float,
    eval_size: int,
    model_rng: np.random.Generator,
    data_rng: np.random.Generator,
) -> TaskInstance:
    name, params = parse_task_spec(spec)
    return _BUILDERS[name](params, rank, alpha, eval_size, model_rng, data_rng)
