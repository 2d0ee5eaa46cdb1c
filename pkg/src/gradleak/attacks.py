"""Gradient inversion attacks on an intercepted client update.

Two families are implemented:

* gradient matching: minimise ``sum ||dL(x', y')/dw - g||^2`` with L-BFGS.
  The ``dlg``, ``idlg`` and ``cpl`` presets differ only in initialisation,
  label handling and early stopping.
* cosine inversion (``gradinv``): minimise ``1 - cos(dL(x')/dw, g)`` plus a
  total-variation prior with Adam.

Attacks work on normalised inputs; the returned reconstruction is mapped
back to [0, 1] pixel space.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetStats, to_image_space
from .federation import ClientUpdate
from .metrics import mse, ssim
from .models import Activation, Dense, Flatten, ModelSpec, Parameters, forward
from .optim import AdamConfig, LbfgsConfig, adam_minimize, lbfgs_minimize

METHODS = ("dlg", "idlg", "cpl", "gradinv")
LABEL_MODES = ("optimize-soft", "infer-analytic", "known")
INITS = ("normal", "uniform", "constant")

_PRESETS = {
    "dlg": dict(init="normal", label_mode="optimize-soft", max_iterations=300),
    "idlg": dict(init="normal", label_mode="infer-analytic", max_iterations=300),
    "cpl": dict(init="constant", label_mode="infer-analytic", max_iterations=300, objective_tol=1e-10),
    "gradinv": dict(init="normal", label_mode="infer-analytic", max_iterations=24000),
}


# iterations without 0.1% progress after which a multi-start attack moves on
STALL_WINDOW = 25


class AttackError(RuntimeError):
    """The attack cannot run on this target."""


class AmbiguousLabelError(AttackError):
    """The head gradient does not single out one class."""


@dataclass(frozen=True)
class AttackConfig:
    method: str = "dlg"
    max_iterations: int | None = None  # None: preset default
    init: str | None = None
    label_mode: str | None = None
    tv_weight: float = 1e-6
    restarts: int = 1
    seed: int = 0
    snapshot_stride: int = 0  # 0 disables snapshots
    lr: float = 0.1  # Adam step size for gradinv
    history_size: int = 100  # L-BFGS memory; the optimizer default (10) is too short here
    objective_tol: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        preset = _PRESETS[self.method]
        for key in ("max_iterations", "init", "label_mode", "objective_tol"):
            if getattr(self, key) is None and key in preset:
                object.__setattr__(self, key, preset[key])
        if self.max_iterations < 1 or self.restarts < 1:
            raise ValueError("max_iterations and restarts must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be non-negative")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.snapshot_stride < 0:
            raise ValueError("snapshot_stride must be >= 0")


@dataclass
class AttackResult:
    method: str
    reconstruction: np.ndarray  # (C, H, W) in [0, 1]
    reconstruction_normalized: np.ndarray
    label: int
    label_probs: np.ndarray | None
    trace: list  # objective after each iteration ([f(x0)] if none ran)
    snapshots: dict = field(default_factory=dict)  # iteration -> image in [0, 1]
    seconds: float = 0.0
    mse: float | None = None
    ssim: float | None = None
    status: str = ""
    iterations: int = 0
    seed: int = 0
    label_inferred: bool = False
    objective: float = math.nan  # best objective value, the one x' attains

    @property
    def final_objective(self) -> float:
        return self.objective


# --------------------------------------------------------------- label inference


def _head_input_activation(spec: ModelSpec) -> str | None:
    layers = [l for l in spec.layers[:-1] if not isinstance(l, Flatten)]
    if layers and isinstance(layers[-1], Activation):
        return layers[-1].kind
    return None


def infer_label(target: ClientUpdate | Sequence[np.ndarray], spec: ModelSpec) -> int:
    """Recover the class of a single-sample update from the head gradient.

    For cross-entropy on one sample the head weight gradient is
    ``h (softmax(z) - onehot(y))^T``.  With a non-negative head input ``h``
    (sigmoid or relu features) only the true class column sums negative.
    """
    head = spec.head
    if head is None:
        raise AttackError("label inference needs a fully-connected head")
    grads = target.grads if isinstance(target, ClientUpdate) else list(target)
    names = [n for n, _ in spec.param_shapes()]
    w_name = f"{len(spec.layers) - 1}.fc.weight"
    gw = np.asarray(grads[names.index(w_name)])
    act = _head_input_activation(spec)
    if act in ("sigmoid", "relu"):
        signal = gw.sum(axis=0)
    elif head.bias:
        signal = np.asarray(grads[names.index(f"{len(spec.layers) - 1}.fc.bias")])
    else:
        raise AttackError("label inference needs non-negative head features or a head bias")
    negative = np.flatnonzero(signal < 0)
    if len(negative) != 1:
        raise AmbiguousLabelError(f"{len(negative)} classes have negative head gradient")
    return int(negative[0])


# ------------------------------------------------------------------ objectives


def total_variation(x, eps: float = 1e-12) -> Tensor:
    """Smoothed anisotropic TV: sum of sqrt(d^2 + eps) - sqrt(eps) over neighbours.

    Accepts (H, W), (C, H, W) or (N, C, H, W).  The offset makes a constant
    image score exactly zero.
    """
    x = ad.constant(x)
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError("total variation needs H, W >= 2")
    lead = (slice(None),) * (x.ndim - 2)
    dh = ad.sub(x[lead + (slice(None), slice(1, None))], x[lead + (slice(None), slice(None, -1))])
    dv = ad.sub(x[lead + (slice(1, None), slice(None))], x[lead + (slice(None, -1), slice(None))])
    off = math.sqrt(eps)
    th = ad.tsum(ad.sub(ad.sqrt(ad.add(ad.mul(dh, dh), eps)), off))
    tv = ad.tsum(ad.sub(ad.sqrt(ad.add(ad.mul(dv, dv), eps)), off))
    return ad.add(th, tv)


class _Problem:
    """Shared pieces for evaluating dummy gradients at a candidate input."""

    def __init__(self, spec: ModelSpec, params: Parameters, target: ClientUpdate):
        if [g.shape for g in target.grads] != [a.shape for a in params.arrays()]:
            raise AttackError("target gradient layout does not match the model parameters")
        self.spec = spec
        self.tensors = params.as_tensors(requires_grad=True)
        self.plist = list(self.tensors.values())
        self.target = [Tensor(g) for g in target.grads]
        self.shape = (1,) + spec.input_shape
        self.k = spec.num_classes

    def dummy_grads(self, x: Tensor, y) -> list[Tensor]:
        loss = ad.softmax_cross_entropy(forward(self.spec, self.tensors, x), y)
        return ad.gradient(loss, self.plist, create_graph=True)

    def l2_objective(self, x: Tensor, y) -> Tensor:
        terms = []
        for dg, t in zip(self.dummy_grads(x, y), self.target):
            d = ad.sub(dg, t)
            terms.append(ad.tsum(ad.mul(d, d)))
        return _sum(terms)

    def target_sq(self) -> float:
        # same summation order as the dot products below, so that
        # dot == sq == tsq bitwise when the dummy gradient hits the target
        out = None
        for t in self.target:
            v = ad.tsum(ad.mul(t, t)).item()
            out = v if out is None else out + v
        return out

    def cosine_objective(self, x: Tensor, y, tsq: float) -> Tensor:
        dots, sq = [], []
        for dg, t in zip(self.dummy_grads(x, y), self.target):
            dots.append(ad.tsum(ad.mul(dg, t)))
            sq.append(ad.tsum(ad.mul(dg, dg)))
        # sqrt(a*b) rather than sqrt(a)*sqrt(b): sqrt(s*s) == s exactly
        cos = ad.div(_sum(dots), ad.sqrt(ad.scale(_sum(sq), tsq)))
        return ad.sub(1.0, cos)


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def _init_image(cfg: AttackConfig, shape, stats: DatasetStats | None, rng) -> np.ndarray:
    if cfg.init == "normal":
        return rng.standard_normal(shape)
    if cfg.init == "uniform":
        return rng.uniform(-1.0, 1.0, shape)
    mean = np.asarray(stats.mean if stats else [0.5] * shape[1]).reshape(1, -1, 1, 1)
    std = np.asarray(stats.std if stats else [1.0] * shape[1]).reshape(1, -1, 1, 1)
    return np.broadcast_to((0.5 - mean) / std, shape).copy()


def _resolve_label(cfg, target, spec, label):
    """Return (label or None, inferred flag) according to the label mode."""
    if cfg.label_mode == "optimize-soft":
        return None, False
    if cfg.label_mode == "infer-analytic":
        try:
            return infer_label(target, spec), True
        except AttackError:
            if label is None:
                raise
            return int(label), False
    if label is None:
        raise AttackError("label mode 'known' needs the true label")
    return int(label), False


def _trace(opt) -> list:
    return list(opt.trace[1:]) if len(opt.trace) > 1 else list(opt.trace)


def _finish(res: AttackResult, ground_truth, stats):
    if ground_truth is not None:
        gt = np.asarray(ground_truth, dtype=np.float64)
        res.mse = mse(res.reconstruction, gt)
        res.ssim = ssim(res.reconstruction, gt)
    return res


def _image(x_norm: np.ndarray, stats: DatasetStats | None) -> np.ndarray:
    x = np.asarray(x_norm).reshape(x_norm.shape[-3:])
    return to_image_space(x, stats) if stats is not None else np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------- attacks


def gradient_matching_attack(spec: ModelSpec, params: Parameters, target: ClientUpdate,
                             cfg: AttackConfig = AttackConfig(), stats: DatasetStats | None = None,
                             ground_truth: np.ndarray | None = None, label: int | None = None,
                             x0: np.ndarray | None = None) -> AttackResult:
    """L2 gradient matching with L-BFGS (dlg / idlg / cpl presets).

    ``ground_truth`` is the private image in [0, 1] pixel space and is only
    used for scoring.  ``x0`` overrides the dummy initialisation (normalised
    space).

    With ``restarts > 1`` the ``max_iterations`` budget is shared: when a
    start stalls at a stationary point whose objective is not ~0, a fresh
    start begins with the remaining iterations.  The start with the lowest
    objective wins.
    """
    if cfg.method == "gradinv":
        raise ValueError("use cosine_inversion_attack for gradinv")
    start = time.perf_counter()
    prob = _Problem(spec, params, target)
    fixed, inferred = _resolve_label(cfg, target, spec, label)
    rng = np.random.default_rng(cfg.seed)
    y_fixed = None if fixed is None else Tensor(np.eye(prob.k)[[fixed]])

    def objective(vs):
        x = Tensor(vs[0], requires_grad=True)
        if y_fixed is None:
            z = Tensor(vs[1], requires_grad=True)
            y = ad.reshape(ad.softmax(z), (1, prob.k))
            obj = prob.l2_objective(x, y)
            gx, gz = ad.gradient(obj, [x, z])
            return obj.item(), [gx.data, gz.data]
        obj = prob.l2_objective(x, y_fixed)
        (gx,) = ad.gradient(obj, [x])
        return obj.item(), [gx.data]

    snaps = {}
    trace = []
    done = 0  # iterations spent so far, over all starts
    best = None
    for attempt in range(cfg.restarts):
        if x0 is not None and attempt == 0:
            xi = np.array(x0, dtype=np.float64).reshape(prob.shape)
        else:
            # a constant start is deterministic, so later starts draw noise
            init = "normal" if attempt and cfg.init == "constant" else cfg.init
            xi = _init_image(replace(cfg, init=init), prob.shape, stats, rng)
        start_vars = [xi] if fixed is not None else [xi, rng.standard_normal(prob.k)]
        if cfg.snapshot_stride and done % cfg.snapshot_stride == 0:
            snaps[done] = _image(xi, stats)

        def callback(it, vs, f, offset=done):
            if cfg.snapshot_stride and (offset + it) % cfg.snapshot_stride == 0:
                snaps[offset + it] = _image(vs[0], stats)

        lcfg = LbfgsConfig(history_size=cfg.history_size, max_iterations=cfg.max_iterations - done,
                           objective_tol=cfg.objective_tol,
                           stall_window=STALL_WINDOW if attempt + 1 < cfg.restarts else 0)
        opt = lbfgs_minimize(objective, start_vars, lcfg, callback)
        trace += opt.trace[1:] if (trace or opt.iterations) else opt.trace
        done += opt.iterations
        if best is None or opt.fun < best.fun:
            best = opt
        # restart only from a stationary point that is clearly not the
        # global minimum (objective 0), and only while budget remains
        stalled = opt.status == "stalled" or (
            opt.status in ("converged", "line_search_failed") and opt.fun > 1e-9 * opt.trace[0])
        if not stalled or done >= cfg.max_iterations:
            break
    opt = best
    x_best = opt.x[0]
    if fixed is None:
        probs = np.exp(opt.x[1] - opt.x[1].max())
        probs /= probs.sum()
        lab = int(np.argmax(probs))
    else:
        probs, lab = None, fixed
    res = AttackResult(
        method=cfg.method, reconstruction=_image(x_best, stats),
        reconstruction_normalized=x_best.reshape(spec.input_shape), label=lab, label_probs=probs,
        trace=trace or list(opt.trace), snapshots=snaps, status=opt.status, iterations=done,
        seed=cfg.seed, label_inferred=inferred, objective=opt.fun,
    )
    res.seconds = time.perf_counter() - start
    return _finish(res, ground_truth, stats)


def cosine_inversion_attack(spec: ModelSpec, params: Parameters, target: ClientUpdate,
                            cfg: AttackConfig = AttackConfig(method="gradinv"),
                            stats: DatasetStats | None = None,
                            ground_truth: np.ndarray | None = None, label: int | None = None,
                            x0: np.ndarray | None = None) -> AttackResult:
    """Cosine-distance inversion with a TV prior, optimised by Adam."""
    start = time.perf_counter()
    prob = _Problem(spec, params, target)
    tsq = prob.target_sq()
    if tsq == 0.0:
        raise AttackError("cosine inversion needs a non-zero target gradient")
    mode = cfg.label_mode if cfg.label_mode != "optimize-soft" else "infer-analytic"
    fixed, inferred = _resolve_label(replace(cfg, label_mode=mode), target, spec, label)
    y = Tensor(np.eye(prob.k)[[fixed]])
    rng = np.random.default_rng(cfg.seed)
    acfg = AdamConfig(lr=cfg.lr, max_iterations=cfg.max_iterations)

    def objective(vs):
        x = Tensor(vs[0], requires_grad=True)
        obj = prob.cosine_objective(x, y, tsq)
        if cfg.tv_weight:
            obj = ad.add(obj, ad.scale(total_variation(x), cfg.tv_weight))
        (gx,) = ad.gradient(obj, [x])
        return obj.item(), [gx.data]

    best = None
    for _ in range(cfg.restarts):
        xi = np.array(x0, dtype=np.float64).reshape(prob.shape) if x0 is not None else \
            _init_image(cfg, prob.shape, stats, rng)
        snaps = {0: _image(xi, stats)} if cfg.snapshot_stride else {}

        def callback(it, vs, f):
            if cfg.snapshot_stride and it % cfg.snapshot_stride == 0:
                snaps[it] = _image(vs[0], stats)

        opt = adam_minimize(objective, [xi], acfg, callback)
        if best is None or opt.fun < best[0].fun:
            best = (opt, snaps)
    opt, snaps = best
    x_best = opt.x[0]
    res = AttackResult(
        method=cfg.method, reconstruction=_image(x_best, stats),
        reconstruction_normalized=x_best.reshape(spec.input_shape), label=fixed, label_probs=None,
        trace=_trace(opt), snapshots=snaps, status=opt.status, iterations=opt.iterations,
        seed=cfg.seed, label_inferred=inferred, objective=opt.fun,
    )
    res.seconds = time.perf_counter() - start
    return _finish(res, ground_truth, stats)


def gradient_matching_objective(spec: ModelSpec, params: Parameters, target: ClientUpdate,
                                x: np.ndarray, y) -> float:
    """L2 gradient distance at a given (normalised) input and label."""
    prob = _Problem(spec, params, target)
    lab = Tensor(np.eye(prob.k)[[y]]) if np.isscalar(y) else Tensor(np.reshape(y, (1, prob.k)))
    with_batch = np.asarray(x, dtype=np.float64).reshape(prob.shape)
    return prob.l2_objective(Tensor(with_batch, requires_grad=True), lab).item()


def cosine_objective(spec: ModelSpec, params: Parameters, target: ClientUpdate,
                     x: np.ndarray, y: int) -> float:
    """Cosine gradient distance (without the TV term)."""
    prob = _Problem(spec, params, target)
    tsq = prob.target_sq()
    if tsq == 0.0:
        raise AttackError("cosine inversion needs a non-zero target gradient")
    xt = Tensor(np.asarray(x, dtype=np.float64).reshape(prob.shape), requires_grad=True)
    return prob.cosine_objective(xt, Tensor(np.eye(prob.k)[[y]]), tsq).item()


def run_attack(spec, params, target, cfg: AttackConfig, **kwargs) -> AttackResult:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "gradinv":
        return cosine_inversion_attack(spec, params, target, cfg, **kwargs)
    return gradient_matching_attack(spec, params, target, cfg, **kwargs)
