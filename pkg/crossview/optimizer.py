"""
ASAM Optimizer
==============

AdamW with decoupled weight decay on a cosine schedule, wrapped by adaptive
sharpness-aware minimization:

1. forward/backward at w -> g
2. w <- w + eps(w, g), eps = rho * T_w^2 g / ||T_w g||, T_w = diag(|w| + eta)
3. forward/backward at the perturbed weights -> g'
4. restore w exactly
5. AdamW step with g'
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Protocol, Tuple

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger("ASAM")

OPTIM_PREFIX = "optim/"


class Parametrized(Protocol):
    def parameters(self) -> Dict[str, Tensor]: ...


LossFn = Callable[[Any, Any], Tensor]


@dataclass
class AdamWState:
    """AdamW hyperparameters plus per-parameter moments"""
    lr0: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.03
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray], lr: float):
        """One decoupled-weight-decay Adam update, in place"""
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            denom = np.sqrt(v / bias2) + self.eps
            p.data -= (lr / bias1) * m / denom

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"{OPTIM_PREFIX}m/{k}": v for k, v in self.m.items()}
        arrays.update({f"{OPTIM_PREFIX}v/{k}": v for k, v in self.v.items()})
        arrays[f"{OPTIM_PREFIX}step"] = np.array([self.t], dtype=np.float32)
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        m_prefix, v_prefix = f"{OPTIM_PREFIX}m/", f"{OPTIM_PREFIX}v/"
        self.m = {k[len(m_prefix):]: np.array(a) for k, a in arrays.items() if k.startswith(m_prefix)}
        self.v = {k[len(v_prefix):]: np.array(a) for k, a in arrays.items() if k.startswith(v_prefix)}
        step = arrays.get(f"{OPTIM_PREFIX}step")
        self.t = int(step[0]) if step is not None else 0


@dataclass(frozen=True)
class AsamConfig:
    """Perturbation radius rho and normalization floor eta"""
    rho: float = 2.5
    eta: float = 0.01
    adaptive: bool = True

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.eta < 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")


@dataclass(frozen=True)
class CosineSchedule:
    total_steps: int
    lr0: float = 1e-4
    lr_min: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.lr_min <= self.lr0:
            raise ValueError("need 0 <= lr_min <= lr0")


def cosine_lr(t: int, sched: CosineSchedule) -> float:
    """lr_min + (lr0 - lr_min)(1 + cos(pi t / T)) / 2"""
    if t < 0 or t > sched.total_steps:
        raise ValueError(f"step {t} outside [0, {sched.total_steps}]")
    return sched.lr_min + 0.5 * (sched.lr0 - sched.lr_min) * (1.0 + math.cos(math.pi * t / sched.total_steps))


def _weights(params: Dict[str, Any]) -> Dict[str, np.ndarray]:
    return {k: np.asarray(getattr(v, "data", v), dtype=np.float64) for k, v in params.items()}


def asam_perturb(params: Dict[str, Any], grads: Dict[str, np.ndarray], cfg: AsamConfig) -> Dict[str, np.ndarray]:
    """
    Adaptive ascent step eps = rho * T^2 g / ||T g|| over the concatenation of
    all parameters, so that ||T^-1 eps|| = rho.
    """
    weights = _weights(params)
    scaled = {}
    for name, w in weights.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        t_w = np.abs(w) + cfg.eta
        scaled[name] = (t_w, t_w * g)
    norm = math.sqrt(sum(float(np.sum(tg * tg)) for _, tg in scaled.values()))
    if norm == 0.0:
        raise ValueError("asam_perturb: ||T_w g|| is zero")
    return {name: cfg.rho * t_w * tg / norm for name, (t_w, tg) in scaled.items()}


def sam_perturb(grads: Dict[str, np.ndarray], rho: float) -> Dict[str, np.ndarray]:
    """Non-adaptive direction rho * g / ||g||"""
    norm = math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads.values()))
    if norm == 0.0:
        raise ValueError("sam_perturb: gradient is zero")
    return {name: rho * np.asarray(g, dtype=np.float64) / norm for name, g in grads.items()}


def forward_backward(model: Parametrized, batch: Any, loss_fn: LossFn) -> Tuple[float, Dict[str, np.ndarray]]:
    """Fresh gradients of loss_fn(model, batch) w.r.t. model.parameters()"""
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    loss = loss_fn(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value}")
    if loss.requires_grad:
        backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return value, grads


class AsamOptimizer:
    """AdamW wrapped by the two-pass (A)SAM update; counts forward-backward passes"""

    def __init__(self, adamw: AdamWState, cfg: AsamConfig = AsamConfig(), enabled: bool = True):
        self.adamw = adamw
        self.cfg = cfg
        self.enabled = enabled
        self.passes = 0

    def perturbation(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        if self.cfg.adaptive:
            return asam_perturb(params, grads, self.cfg)
        return sam_perturb(grads, self.cfg.rho)

    def step(self, model: Parametrized, batch: Any, loss_fn: LossFn, lr: float) -> float:
        """One optimization step; returns the loss at the unperturbed weights"""
        params = model.parameters()
        loss, grads = forward_backward(model, batch, loss_fn)
        self.passes += 1
        if self.enabled:
            saved = {k: p.data.copy() for k, p in params.items()}
            eps = self.perturbation(params, grads)
            try:
                with no_grad():
                    for k, p in params.items():
                        p.data = (p.data + eps[k]).astype(saved[k].dtype)
                perturbed_loss, grads = forward_backward(model, batch, loss_fn)
                self.passes += 1
            finally:
                for k, p in params.items():
                    p.data = saved[k]
            logger.debug(f"loss {loss:.5f} -> perturbed {perturbed_loss:.5f}")
        self.adamw.step(params, grads, lr)
        return loss


def asam_step(model: Parametrized, batch: Any, loss_fn: LossFn, asam_cfg: AsamConfig,
              adamw_state: AdamWState, lr: float) -> float:
    """Functional form of AsamOptimizer.step"""
    return AsamOptimizer(adamw_state, asam_cfg).step(model, batch, loss_fn, lr)


def adamw_step(model: Parametrized, batch: Any, loss_fn: LossFn, adamw_state: AdamWState, lr: float) -> float:
    """Plain AdamW step (single pass), the sharpness-unaware baseline"""
    return AsamOptimizer(adamw_state, enabled=False).step(model, batch, loss_fn, lr)


def sharpness_estimate(model: Parametrized, batch: Any, loss_fn: LossFn, rho: float,
                       adaptive: bool = True, eta: float = 0.01) -> float:
    """
    One-step ascent estimate L(w + eps) - L(w); weights are restored.
    A flat loss (zero gradient) has no ascent direction and scores 0.
    """
    params = model.parameters()
    loss, grads = forward_backward(model, batch, loss_fn)
    if all(not np.any(g) for g in grads.values()):
        logger.debug("zero gradient, sharpness estimate is 0")
        return 0.0
    cfg = AsamConfig(rho=rho, eta=eta, adaptive=adaptive)
    eps = asam_perturb(params, grads, cfg) if adaptive else sam_perturb(grads, rho)
    saved = {k: p.data.copy() for k, p in params.items()}
    try:
        with no_grad():
            for k, p in params.items():
                p.data = (p.data + eps[k]).astype(saved[k].dtype)
            perturbed = loss_fn(model, batch).item()
    finally:
        for k, p in params.items():
            p.data = saved[k]
    return perturbed - loss
