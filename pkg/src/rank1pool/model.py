"""Small frozen dual-encoder classifier with one expert pool and router per layer.

Feature tower::

    h_0     = P_in x                      (frozen stem)
    h_{l+1} = tanh(W0_l h_l + c_l + sum_i g_li b_li (a_li . h_l))
    z       = h_L / |h_L|
    logit_c = <z, p_c> / tau              (p_c: frozen unit class prototypes)

The router of layer ``l`` scores experts from that layer's input ``h_l``,
which stands in for the transformer CLS token. Gradients are derived by hand;
selected index sets are constants of the backward pass.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ago import PastRegistry, ago_grad, ago_loss
from .core_math import ContractViolation, SeededRng, as_matrix
from .expert_pool import ExpertPool, GateVector, init_pool
from .router import (
    ActivationMemory,
    BatchSelection,
    Router,
    SelectionConfig,
    critical_set,
    route_batch,
)


@dataclass
class FrozenLayer:
    W0: np.ndarray
    bias: np.ndarray


@dataclass
class FrozenBackbone:
    input_proj: np.ndarray
    layers: list[FrozenLayer]
    temperature: float = 0.1

    @classmethod
    def init(cls, d_in: int, d: int, n_layers: int, rng: SeededRng,
             temperature: float = 0.1) -> "FrozenBackbone":
        stem = rng.normal((d, d_in), scale=1.0 / np.sqrt(d_in))
        layers = []
        for _ in range(n_layers):
            W0 = rng.normal((d, d), scale=1.0 / np.sqrt(d))
            layers.append(FrozenLayer(W0, np.zeros(d)))
        return cls(stem, layers, temperature)

    @property
    def d(self) -> int:
        return self.input_proj.shape[0]

    @property
    def d_in(self) -> int:
        return self.input_proj.shape[1]

    def copy(self) -> "FrozenBackbone":
        return FrozenBackbone(
            self.input_proj.copy(),
            [FrozenLayer(l.W0.copy(), l.bias.copy()) for l in self.layers],
            self.temperature,
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.input_proj).tobytes())
        for layer in self.layers:
            h.update(np.ascontiguousarray(layer.W0).tobytes())
            h.update(np.ascontiguousarray(layer.bias).tobytes())
        h.update(np.float64(self.temperature).tobytes())
        return h.hexdigest()

    def features(self, X) -> np.ndarray:
        H = _as_batch(X, self.d_in) @ self.input_proj.T
        for layer in self.layers:
            H = np.tanh(H @ layer.W0.T + layer.bias)
        return H


def _as_batch(X, d_in: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d_in:
        raise ContractViolation(f"inputs must be (N, {d_in}), got {X.shape}")
    if X.shape[0] == 0:
        raise ContractViolation("empty batch")
    return X


def normalize_rows(H: np.ndarray) -> np.ndarray:
    return H / np.linalg.norm(H, axis=1, keepdims=True)


def prototypes_from_inputs(backbone: FrozenBackbone, class_inputs) -> np.ndarray:
    """Unit class prototypes: frozen features of one representative input per class."""
    return normalize_rows(backbone.features(class_inputs))


def forward_eval(backbone: FrozenBackbone, X, prototypes) -> np.ndarray:
    """Plain dense forward on (possibly merged) weights: no routers, no pools."""
    P = as_matrix(prototypes, "prototypes")
    Z = normalize_rows(backbone.features(X))
    return Z @ P.T / backbone.temperature


@dataclass
class AdaptedModel:
    backbone: FrozenBackbone
    pools: list[ExpertPool]
    routers: list[Router]
    memories: list[ActivationMemory]
    prototypes: np.ndarray | None = None
    version: int = 0

    @classmethod
    def attach(cls, backbone: FrozenBackbone, r: int, rng: SeededRng,
               forward_scale: float = 1.0) -> "AdaptedModel":
        """Fresh pools (``b = 0``), routers and zeroed memories for every layer."""
        d = backbone.d
        pools, routers, memories = [], [], []
        for l in range(len(backbone.layers)):
            layer_rng = rng.derive("layer", l)
            pools.append(init_pool(d, d, r, layer_rng.derive("pool"), layer_id=layer_name(l),
                                   forward_scale=forward_scale))
            routers.append(Router.init(r, d, layer_rng.derive("router")))
            memories.append(ActivationMemory.zeros(r))
        return cls(backbone, pools, routers, memories)

    @property
    def layer_ids(self) -> list[str]:
        return [p.layer_id for p in self.pools]

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by name; the arrays are the live parameters."""
        params = {}
        for l, (pool, router) in enumerate(zip(self.pools, self.routers)):
            params[f"{l}.A"] = pool.A
            params[f"{l}.B"] = pool.B
            params[f"{l}.router"] = router.W
        return params

    def bump(self) -> None:
        self.version += 1


def layer_name(index: int) -> str:
    return f"layer_{index}"


@dataclass
class LayerTrace:
    H_in: np.ndarray
    proj: np.ndarray  # N x r, a_i . h
    gates: np.ndarray  # N x r
    H_out: np.ndarray
    selection: BatchSelection | None
    gate_mode: str


@dataclass
class ForwardTrace:
    layers: list[LayerTrace]
    h_final: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    prototypes: np.ndarray
    cfg: SelectionConfig | None
    version: int
    model_id: int = field(repr=False, default=0)


def forward_train(model: AdaptedModel, X, cfg: SelectionConfig, *, record: bool = True,
                  fixed_gates: Sequence[GateVector] | None = None,
                  prototypes=None):
    """Gated forward pass. Returns ``(logits, trace)``.

    With ``fixed_gates`` the routers are bypassed and each layer uses the
    given gate for every sample (nothing is recorded); otherwise the
    two-stage selection runs and, if ``record``, updates the memories.
    """
    bb = model.backbone
    P = model.prototypes if prototypes is None else prototypes
    if P is None:
        raise ContractViolation("model has no class prototypes")
    P = as_matrix(P, "prototypes")
    if P.shape[1] != bb.d:
        raise ContractViolation(f"prototype dim {P.shape[1]} != feature dim {bb.d}")
    if fixed_gates is not None and len(fixed_gates) != len(bb.layers):
        raise ContractViolation("need one fixed gate per layer")

    H = _as_batch(X, bb.d_in) @ bb.input_proj.T
    traces = []
    for l, layer in enumerate(bb.layers):
        pool, router = model.pools[l], model.routers[l]
        if fixed_gates is not None:
            g = fixed_gates[l].weights
            if g.shape != (pool.r,):
                raise ContractViolation(f"layer {l}: gate size {g.shape} != ({pool.r},)")
            G = np.broadcast_to(g, (H.shape[0], pool.r)).copy()
            sel, mode = None, "fixed"
        else:
            sel = route_batch(router, H, cfg, model.memories[l] if record else None)
            G, mode = sel.gates, cfg.gate_mode
        proj = H @ pool.A.T
        pre = H @ layer.W0.T + layer.bias + pool.forward_scale * ((G * proj) @ pool.B.T)
        H_out = np.tanh(pre)
        traces.append(LayerTrace(H, proj, G, H_out, sel, mode))
        H = H_out
    z = normalize_rows(H)
    logits = z @ P.T / bb.temperature
    trace = ForwardTrace(traces, H, z, logits, P, cfg, model.version, id(model))
    return logits, trace


def ce_loss(logits, labels) -> float:
    logits = as_matrix(logits, "logits")
    labels = _check_labels(labels, logits.shape)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logsumexp - shifted[np.arange(len(labels)), labels]))


def softmax(logits) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, shape) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (shape[0],):
        raise ContractViolation(f"need {shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= shape[1]):
        raise ContractViolation(f"labels must lie in [0, {shape[1]})")
    return labels.astype(np.int64)


def current_critical_sets(model: AdaptedModel, R: int) -> list[tuple[int, ...]]:
    return [critical_set(mem, min(R, mem.counts.shape[0])) for mem in model.memories]


def total_loss(model: AdaptedModel, trace: ForwardTrace, labels, lam: float,
               registry: PastRegistry | None, k_curr: Sequence[Sequence[int]] | None = None,
               ) -> tuple[float, float, float]:
    """``(total, supervised, orthogonality)`` for the batch behind ``trace``."""
    sup = ce_loss(trace.logits, labels)
    orth = 0.0
    if registry is not None and lam:
        if k_curr is None:
            k_curr = current_critical_sets(model, trace.cfg.R)
        for l, pool in enumerate(model.pools):
            orth += ago_loss(registry.layer(pool.layer_id), pool, k_curr[l])
    return sup + lam * orth, sup, orth


def backward(model: AdaptedModel, trace: ForwardTrace, labels, lam: float = 0.0,
             registry: PastRegistry | None = None,
             k_curr: Sequence[Sequence[int]] | None = None) -> dict[str, np.ndarray]:
    """Gradients of ``ce_loss + lam * sum_l ago_loss_l`` for every trainable array.

    Keys match :meth:`AdaptedModel.parameters`. Routers only get a gradient in
    ``masked_softmax`` mode. ``k_curr`` defaults to the current top-R sets
    of the activation memories.
    """
    if trace.version != model.version or trace.model_id != id(model):
        raise ContractViolation("trace is stale: parameters changed after the forward pass")
    labels = _check_labels(labels, trace.logits.shape)
    bb = model.backbone
    N = trace.logits.shape[0]

    dlogits = softmax(trace.logits)
    dlogits[np.arange(N), labels] -= 1.0
    dlogits /= N
    dz = dlogits @ trace.prototypes / bb.temperature
    z = trace.z
    norm = np.linalg.norm(trace.h_final, axis=1, keepdims=True)
    dH = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norm

    grads: dict[str, np.ndarray] = {}
    for l in reversed(range(len(bb.layers))):
        lt = trace.layers[l]
        pool, router = model.pools[l], model.routers[l]
        s = pool.forward_scale
        dpre = dH * (1.0 - lt.H_out ** 2)
        weighted = lt.gates * lt.proj
        dB = s * dpre.T @ weighted
        dweighted = s * dpre @ pool.B
        dproj = dweighted * lt.gates
        dA = dproj.T @ lt.H_in
        dH_in = dpre @ bb.layers[l].W0 + dproj @ pool.A
        dW = np.zeros_like(router.W)
        if lt.gate_mode == "masked_softmax":
            dG = dweighted * lt.proj
            idx = list(lt.selection.batch_set)
            if idx:
                g = lt.gates[:, idx]
                dg = dG[:, idx]
                dS = np.zeros_like(lt.gates)
                dS[:, idx] = g * (dg - np.sum(g * dg, axis=1, keepdims=True))
                dW = dS.T @ lt.H_in
                dH_in = dH_in + dS @ router.W
        grads[f"{l}.A"] = dA
        grads[f"{l}.B"] = dB
        grads[f"{l}.router"] = dW
        dH = dH_in

    if registry is not None and lam:
        if k_curr is None:
            k_curr = current_critical_sets(model, trace.cfg.R)
        for l, pool in enumerate(model.pools):
            gB, _ = ago_grad(registry.layer(pool.layer_id), pool, k_curr[l])
            grads[f"{l}.B"] = grads[f"{l}.B"] + lam * gB
    return grads
