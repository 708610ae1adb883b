"""Gradient-based adversarial attacks on image classifiers.

All attacks work in the 0..255 pixel domain of the model input and accept a
batch ``x`` of shape (n, *model.input_shape).  Each returns one
:class:`AdvOutcome` per sample.  ``gradient_cost`` on an outcome counts the
batch-gradient units spent on that sample; the model's ``gradient_meter``
counts every batch call.
"""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .nn import autodiff as ad

MAX_INTENSITY = 255.0
JSMA_MAX_GAMMA = 1.5 / 255.0
DEFAULT_CONFIDENCE = 0.65


class Algorithm(str, enum.Enum):
    LBFGS = "L-BFGS"
    FGSM = "FGSM"
    BIM_A = "BIM-a"
    BIM_B = "BIM-b"
    JSMA = "JSMA"
    CW_L2 = "CWA"
    DEEPFOOL = "DeepFool"


class Norm(str, enum.Enum):
    L0 = "l0"
    L2 = "l2"
    LINF = "linf"


class ZeroGradientError(ArithmeticError):
    """An L2-normalized step was requested along a zero gradient."""


class StalledAttackError(RuntimeError):
    """The saliency map vanished; no pixel can move the target output."""


@dataclass(frozen=True)
class AttackSpec:
    algorithm: Algorithm
    targeted: bool = False
    norm: Norm = Norm.LINF
    epsilon: float = 0.0
    max_iter: int = 10
    kappa: float = 0.0
    c_init: float | None = None
    c_search_steps: int = 1
    gamma: float = JSMA_MAX_GAMMA
    confidence: float = DEFAULT_CONFIDENCE
    use_confidence: bool = False
    overshoot: float = 0.02
    learning_rate: float = 0.01
    optimizer: str = "adam"

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "norm", Norm(self.norm))
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if not 0 < self.gamma <= JSMA_MAX_GAMMA + 1e-15:
            raise ValueError("gamma must lie in (0, 1.5/255]")
        if self.algorithm in (Algorithm.JSMA, Algorithm.LBFGS) and not self.targeted:
            raise ValueError(f"{self.algorithm.value} is a targeted attack")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError("optimizer must be 'adam' or 'gd'")
        if self.algorithm is Algorithm.FGSM and self.norm not in (Norm.LINF, Norm.L2):
            raise ValueError("FGSM supports the linf and l2 norms")

    @property
    def budget(self) -> float:
        """Scalar budget used to order specs on the fooling-rate curve."""
        a = self.algorithm
        if a in (Algorithm.FGSM, Algorithm.BIM_A, Algorithm.BIM_B):
            return float(self.epsilon)
        if a is Algorithm.CW_L2:
            return float(self.max_iter * self.c_search_steps)
        return float(self.max_iter)

    def to_dict(self):
        d = asdict(self)
        d["algorithm"] = self.algorithm.value
        d["norm"] = self.norm.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class AdvOutcome:
    x_adv: np.ndarray
    original_label: int
    predicted: int
    success: bool
    l0: int
    l2: float
    linf: float
    gradient_cost: int
    iterations: int
    target: int | None = None
    confidence: float = 0.0
    algorithm: str = ""
    budget: float = 0.0
    spec_index: int = -1
    sample_index: int = -1
    error: str | None = None

    def record(self) -> dict:
        """JSON-serializable dict without the pixel payload."""
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "x_adv"}
        for k in ("original_label", "predicted", "l0", "gradient_cost", "iterations", "spec_index", "sample_index"):
            d[k] = int(d[k])
        d["target"] = None if self.target is None else int(self.target)
        for k in ("l2", "linf", "confidence", "budget"):
            d[k] = float(d[k])
        d["success"] = bool(self.success)
        return d


# ---------------------------------------------------------------------------
# shared helpers


def clip_region(x_candidate, x_original, delta, M=MAX_INTENSITY):
    """Project elementwise into [max(0, x - delta), min(M, x + delta)]."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return np.minimum(np.minimum(M, x_original + delta), np.maximum(np.maximum(0.0, x_original - delta), x_candidate))


def _norms(x_adv, x):
    d = (x_adv - x).reshape(len(x), -1)
    return (np.count_nonzero(d, axis=1), np.sqrt((d * d).sum(axis=1)), np.abs(d).max(axis=1, initial=0.0))


def judge(model, x_adv, labels, targets, spec):
    """Predicted classes, confidences and success flags for a candidate batch."""
    pred, conf = model.predict(x_adv)
    if targets is not None:
        ok = pred == np.asarray(targets)
    else:
        ok = pred != np.asarray(labels)
    if spec.use_confidence:
        ok = ok & (conf >= spec.confidence)
    return pred, conf, ok


def _finish(model, x, x_adv, labels, targets, spec, cost, iters, errors=None):
    pred, conf, ok = judge(model, x_adv, labels, targets, spec)
    l0, l2, linf = _norms(x_adv, x)
    out = []
    for i in range(len(x)):
        out.append(
            AdvOutcome(
                x_adv=x_adv[i].copy(),
                original_label=int(labels[i]),
                predicted=int(pred[i]),
                success=bool(ok[i]),
                l0=int(l0[i]),
                l2=float(l2[i]),
                linf=float(linf[i]),
                gradient_cost=int(cost[i]),
                iterations=int(iters[i]),
                target=None if targets is None else int(targets[i]),
                confidence=float(conf[i]),
                algorithm=spec.algorithm.value,
                budget=spec.budget,
                error=None if errors is None else errors[i],
            )
        )
    return out


def _batchify(model, x, labels, targets):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(model.input_shape)
    if single:
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if targets is not None:
        targets = np.atleast_1d(np.asarray(targets, dtype=int))
    return x, labels, targets, single


def _unwrap(outcomes, single):
    return outcomes[0] if single else outcomes


def _bshape(v, ndim):
    return np.asarray(v).reshape((-1,) + (1,) * (ndim - 1))


# ---------------------------------------------------------------------------
# FGSM / BIM


def _loss_direction(model, x, labels, targets):
    """Ascent direction: raise loss of the true class, or lower loss of the target."""
    if targets is None:
        return model.grad_input(x, labels, "ce")
    return -model.grad_input(x, targets, "ce")


def fgsm(model, x, labels, spec: AttackSpec, targets=None):
    """One-shot sign (linf) or normalized-gradient (l2) step, clipped to [0, 255]."""
    x, labels, targets, single = _batchify(model, x, labels, targets)
    g = _loss_direction(model, x, labels, targets)
    errors = [None] * len(x)
    if spec.norm is Norm.LINF:
        step = spec.epsilon * np.sign(g)
    else:
        norm = np.sqrt((g.reshape(len(x), -1) ** 2).sum(axis=1))
        zero = norm == 0
        if single and zero[0]:
            raise ZeroGradientError("gradient is identically zero; l2 direction undefined")
        errors = ["zero-gradient" if z else None for z in zero]
        step = spec.epsilon * g / _bshape(np.where(zero, 1.0, norm), g.ndim)
    x_adv = np.clip(x + step, 0.0, MAX_INTENSITY)
    n = len(x)
    return _unwrap(_finish(model, x, x_adv, labels, targets, spec, np.ones(n), np.ones(n), errors), single)


def fgsm_minimal_epsilon(model, x, labels, norm=Norm.L2, grid=None, tol=1e-6, targets=None):
    """Smallest successful FGSM step size per sample, by grid search then bisection.

    The gradient is computed once per batch (one unit); every probe is a
    forward pass.  Returns an array with ``inf`` where no grid value succeeds.
    """
    x, labels, targets, _ = _batchify(model, x, labels, targets)
    spec = AttackSpec(Algorithm.FGSM, targeted=targets is not None, norm=norm)
    g = _loss_direction(model, x, labels, targets)
    if norm is Norm.LINF or norm == "linf":
        d = np.sign(g)
    else:
        nrm = np.sqrt((g.reshape(len(x), -1) ** 2).sum(axis=1))
        d = g / _bshape(np.where(nrm == 0, 1.0, nrm), g.ndim)
    if grid is None:
        grid = np.geomspace(1e-3, 4.0 * MAX_INTENSITY * math.sqrt(x[0].size), 200)
    grid = np.sort(np.asarray(grid, dtype=float))

    def ok(i, eps):
        xa = np.clip(x[i] + eps * d[i], 0.0, MAX_INTENSITY)[None]
        t = None if targets is None else targets[i:i + 1]
        return bool(judge(model, xa, labels[i:i + 1], t, spec)[2][0])

    out = np.full(len(x), np.inf)
    for i in range(len(x)):
        if ok(i, 0.0):
            out[i] = 0.0
            continue
        prev = 0.0
        for eps in grid:
            if ok(i, eps):
                lo, hi = prev, eps
                while hi - lo > tol * max(1.0, hi):
                    mid = 0.5 * (lo + hi)
                    lo, hi = (lo, mid) if ok(i, mid) else (mid, hi)
                out[i] = hi
                break
            prev = eps
    return out


def bim_step_size(spec: AttackSpec) -> float:
    return spec.epsilon / max(4.0, spec.max_iter / 2.0)


def bim(model, x, labels, spec: AttackSpec, targets=None):
    """Iterated sign steps projected into the epsilon box.

    BIM-a freezes each sample at its first success; BIM-b always runs
    ``max_iter`` steps.
    """
    x, labels, targets, single = _batchify(model, x, labels, targets)
    stop_early = spec.algorithm is Algorithm.BIM_A
    alpha = bim_step_size(spec)
    x_adv = x.copy()
    cost = np.zeros(len(x), dtype=int)
    active = np.ones(len(x), dtype=bool)
    for _ in range(spec.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        t = None if targets is None else targets[idx]
        g = _loss_direction(model, x_adv[idx], labels[idx], t)
        x_adv[idx] = clip_region(x_adv[idx] + alpha * np.sign(g), x[idx], spec.epsilon)
        cost[idx] += 1
        if stop_early:
            _, _, ok = judge(model, x_adv[idx], labels[idx], t, spec)
            active[idx[ok]] = False
    return _unwrap(_finish(model, x, x_adv, labels, targets, spec, cost, cost), single)


# ---------------------------------------------------------------------------
# JSMA


def jsma_iterations(n_pixels: int, gamma: float, scale: float) -> int:
    """Iteration budget ceil(m * gamma / n) with gamma expressed in intensity units."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return max(1, math.ceil(n_pixels * gamma * MAX_INTENSITY / scale))


def saliency_map(jac, target):
    """Single-pixel saliency for increasing ``target`` from a (classes, ...) Jacobian.

    Pixels where the target derivative is negative or the summed other-class
    derivative is positive get zero; elsewhere the score is
    d f_target * |sum_{j != target} d f_j|.
    """
    jac = np.asarray(jac)
    a = jac[target]
    b = jac.sum(axis=0) - a
    return np.where((a < 0) | (b > 0), 0.0, a * np.abs(b))


def jsma(model, x, labels, spec: AttackSpec, targets):
    """Greedy single-pixel increases by gamma * 255 along the saliency argmax."""
    x, labels, targets, single = _batchify(model, x, labels, targets)
    n = len(x)
    batch_units = math.ceil(model.n_classes / n)
    step = spec.gamma * MAX_INTENSITY
    x_adv = x.copy()
    cost = np.zeros(n, dtype=int)
    iters = np.zeros(n, dtype=int)
    errors = [None] * n
    _, _, ok = judge(model, x_adv, labels, targets, spec)
    active = ~ok
    for _ in range(spec.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        _, jac = model.jacobian_input(x_adv[idx], "softmax", batch_size=n)
        cost[idx] += batch_units
        for r, i in enumerate(idx):
            s = saliency_map(jac[r], targets[i]).ravel()
            s[x_adv[i].ravel() >= MAX_INTENSITY] = 0.0
            if not np.any(s > 0):
                if single:
                    raise StalledAttackError("saliency map is identically zero")
                errors[i] = "stalled"
                active[i] = False
                continue
            flat = x_adv[i].reshape(-1)
            p = int(np.argmax(s))
            flat[p] = min(MAX_INTENSITY, flat[p] + step)
            iters[i] += 1
        live = idx[active[idx]]
        if live.size:
            _, _, ok = judge(model, x_adv[live], labels[live], targets[live], spec)
            active[live[ok]] = False
    return _unwrap(_finish(model, x, x_adv, labels, targets, spec, cost, iters, errors), single)


# ---------------------------------------------------------------------------
# Carlini-Wagner l2

CW_CLAMP = 1e-6
LBFGS_LADDER_RUNGS = 6
LBFGS_C_START = 1e-3
CW_C_START = 1.0


def to_tanh_space(x):
    """Pixels -> unconstrained variable w with x/255 = (tanh(w) + 1) / 2."""
    p = np.clip(np.asarray(x, dtype=np.float64) / MAX_INTENSITY, CW_CLAMP, 1.0 - CW_CLAMP)
    return np.arctanh(2.0 * p - 1.0)


def from_tanh_space(w, delta=0.0):
    """Normalized image 0.5 * (tanh(w + delta) + 1) in [0, 1]."""
    return 0.5 * (np.tanh(w + delta) + 1.0)


def cw_margin(logits, labels, targets, kappa):
    """Per-sample CW objective term and the runner-up class used for its gradient."""
    z = np.asarray(logits)
    rows = np.arange(len(z))
    if targets is not None:
        other = z.copy()
        other[rows, targets] = -np.inf
        j = other.argmax(axis=1)
        raw = z[rows, j] - z[rows, targets]
        pos, negc = j, targets
    else:
        other = z.copy()
        other[rows, labels] = -np.inf
        j = other.argmax(axis=1)
        raw = z[rows, labels] - z[rows, j]
        pos, negc = labels, j
    return np.maximum(raw, -kappa), raw > -kappa, pos, negc


def cw_l2(model, x, labels, spec: AttackSpec, targets=None):
    """Tanh-space descent on ||x' - x||^2 + c f(x'), with a binary search over c.

    Distances inside the objective are measured on the [0, 1] scale.  The
    inner optimizer is Adam by default; ``optimizer="gd"`` gives plain
    gradient descent with step ``learning_rate``.
    """
    x, labels, targets, single = _batchify(model, x, labels, targets)
    n = len(x)
    p0 = x / MAX_INTENSITY
    w0 = to_tanh_space(x)
    c = np.full(n, CW_C_START if spec.c_init is None else float(spec.c_init))
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    best_l2 = np.full(n, np.inf)
    best_x = x.copy()
    last_x = x.copy()
    cost = np.zeros(n, dtype=int)
    iters = np.zeros(n, dtype=int)
    check_every = max(1, spec.max_iter // 10)
    lr = spec.learning_rate

    for _ in range(spec.c_search_steps):
        delta = np.zeros_like(x)
        m1 = np.zeros_like(x)
        m2 = np.zeros_like(x)
        step_no = np.zeros(n, dtype=int)
        prev = np.full(n, np.inf)
        active = np.ones(n, dtype=bool)
        found = np.zeros(n, dtype=bool)
        for it in range(spec.max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            xn = from_tanh_space(w0[idx], delta[idx])
            t = None if targets is None else targets[idx]
            picked = {}

            def objective(z, idx=idx, t=t, picked=picked):
                f, on, pos, negc = cw_margin(z.data, labels[idx], t, spec.kappa)
                picked.update(f=f)
                mask = ad.Tensor(on.astype(float))
                return ad.mul(ad.add(ad.take_rows(z, pos), ad.neg(ad.take_rows(z, negc))), mask)

            _, gpix = model.gradient(xn * MAX_INTENSITY, objective)
            cost[idx] += 1
            iters[idx] += 1
            dist = ((xn - p0[idx]) ** 2).reshape(idx.size, -1).sum(axis=1)
            loss = dist + c[idx] * picked["f"]
            # record successful iterates before stepping
            cand = xn * MAX_INTENSITY
            _, _, ok = judge(model, cand, labels[idx], t, spec)
            l2 = np.sqrt(dist) * MAX_INTENSITY
            better = ok & (l2 < best_l2[idx])
            best_l2[idx[better]] = l2[better]
            best_x[idx[better]] = cand[better]
            found[idx[ok]] = True
            last_x[idx] = cand
            dxn_dw = 0.5 * (1.0 - np.tanh(w0[idx] + delta[idx]) ** 2)
            cb = _bshape(c[idx], x.ndim)
            grad = (2.0 * (xn - p0[idx]) + cb * gpix * MAX_INTENSITY) * dxn_dw
            if spec.optimizer == "gd":
                delta[idx] -= lr * grad
            else:
                step_no[idx] += 1
                k = _bshape(step_no[idx], x.ndim)
                m1[idx] = 0.9 * m1[idx] + 0.1 * grad
                m2[idx] = 0.999 * m2[idx] + 0.001 * grad * grad
                mh = m1[idx] / (1.0 - 0.9 ** k)
                vh = m2[idx] / (1.0 - 0.999 ** k)
                delta[idx] -= lr * mh / (np.sqrt(vh) + 1e-8)
            if (it + 1) % check_every == 0:
                stalled = loss > prev[idx] * (1.0 - 1e-4)
                prev[idx] = loss
                active[idx[stalled]] = False
        # binary search on c per sample
        for i in range(n):
            if found[i]:
                hi[i] = min(hi[i], c[i])
                c[i] = (lo[i] + hi[i]) / 2.0
            else:
                lo[i] = max(lo[i], c[i])
                c[i] = c[i] * 10.0 if not np.isfinite(hi[i]) else (lo[i] + hi[i]) / 2.0

    x_adv = np.where(_bshape(np.isfinite(best_l2), x.ndim), best_x, last_x)
    return _unwrap(_finish(model, x, x_adv, labels, targets, spec, cost, iters), single)


# ---------------------------------------------------------------------------
# DeepFool


def deepfool_step(logits, jac, label, target=None):
    """Minimal l2 step onto the nearest linearized boundary for one sample.

    ``logits`` is (classes,), ``jac`` the logit Jacobian (classes, ...).
    Without a target the closest competing class is chosen; with a target
    the boundary against the strongest non-target class is used.
    """
    z = np.asarray(logits)
    C = z.size
    if target is None:
        best, r = np.inf, None
        for k in range(C):
            if k == label:
                continue
            f = z[k] - z[label]
            w = jac[k] - jac[label]
            wn = np.sqrt((w * w).sum())
            if wn == 0:
                continue
            dist = abs(f) / wn
            if dist < best:
                best, r = dist, abs(f) / wn ** 2 * w
        return np.zeros_like(jac[0]) if r is None else r
    others = [k for k in range(C) if k != target]
    k = others[int(np.argmax(z[others]))]
    f = z[target] - z[k]
    w = jac[target] - jac[k]
    wn2 = (w * w).sum()
    if wn2 == 0:
        return np.zeros_like(jac[0])
    return -f / wn2 * w


def deepfool(model, x, labels, spec: AttackSpec, targets=None):
    """Iterative linearization; final x' = x + (1 + overshoot) * accumulated step."""
    x, labels, targets, single = _batchify(model, x, labels, targets)
    n = len(x)
    batch_units = math.ceil(model.n_classes / n)
    r_tot = np.zeros_like(x)
    x_adv = x.copy()
    cost = np.zeros(n, dtype=int)
    iters = np.zeros(n, dtype=int)
    _, _, ok = judge(model, x_adv, labels, targets, spec)
    active = ~ok
    for _ in range(spec.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        z, jac = model.jacobian_input(x_adv[idx], "logits", batch_size=n)
        cost[idx] += batch_units
        iters[idx] += 1
        for r, i in enumerate(idx):
            t = None if targets is None else int(targets[i])
            r_tot[i] += deepfool_step(z[r], jac[r], int(labels[i]), t)
        x_adv[idx] = np.clip(x[idx] + (1.0 + spec.overshoot) * r_tot[idx], 0.0, MAX_INTENSITY)
        t = None if targets is None else targets[idx]
        _, _, ok = judge(model, x_adv[idx], labels[idx], t, spec)
        active[idx[ok]] = False
    errors = ["not-converged" if a else None for a in active]
    return _unwrap(_finish(model, x, x_adv, labels, targets, spec, cost, iters, errors), single)


# ---------------------------------------------------------------------------
# L-BFGS


def box_lbfgs(fun_grad, x0, lower=0.0, upper=MAX_INTENSITY, maxiter=50, tol=1e-10):
    """Limited-memory BFGS with projected line search on a box; returns (x, evaluations)."""
    x0 = np.asarray(x0, dtype=np.float64)
    shape = x0.shape
    calls = [0]

    def f(v):
        calls[0] += 1
        val, g = fun_grad(v.reshape(shape))
        return float(val), np.asarray(g, dtype=np.float64).ravel()

    bounds = [(lower, upper)] * x0.size
    res = minimize(
        f, x0.ravel(), jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": maxiter, "ftol": tol, "gtol": tol, "maxcor": 10},
    )
    return np.clip(res.x.reshape(shape), lower, upper), calls[0]


def lbfgs_objective(model, x, target, c):
    """c * ||x' - x||_2 + cross-entropy(x', target), with value and pixel gradient."""

    def fun_grad(xp):
        loss, g = model.gradient(xp[None], lambda z: ad.cross_entropy(z, np.array([target]), reduction="none"))
        d = xp - x
        nrm = np.sqrt((d * d).sum())
        gd = c * d / nrm if nrm > 0 else np.zeros_like(d)
        return c * nrm + loss[0], g[0] + gd

    return fun_grad


def lbfgs_attack(model, x, labels, spec: AttackSpec, targets):
    """Box-constrained L-BFGS with a line search for the largest adversarial c.

    The ladder starts at ``c_init`` and moves by factors of 10 (upwards while
    the result is adversarial, downwards while it is not) until it brackets
    the switch, then bisects geometrically ``c_search_steps`` times to find
    the largest adversarial c, i.e. the smallest perturbation.
    """
    x, labels, targets, single = _batchify(model, x, labels, targets)
    out = []
    for i in range(len(x)):
        best, c_ok, c_bad, evals = None, None, None, 0

        def attempt(c):
            nonlocal evals
            xa, k = box_lbfgs(lbfgs_objective(model, x[i], int(targets[i]), c), x[i], maxiter=spec.max_iter)
            evals += k
            _, _, ok = judge(model, xa[None], labels[i:i + 1], targets[i:i + 1], spec)
            return xa, bool(ok[0])

        def record(c, xa, ok):
            nonlocal best, c_ok, c_bad
            if ok:
                best, c_ok = xa, c
            else:
                c_bad = c

        # walk the ladder by decades: up while adversarial, down until adversarial
        c = LBFGS_C_START if spec.c_init is None else spec.c_init
        xa, ok = attempt(c)
        record(c, xa, ok)
        factor = 10.0 if ok else 0.1
        for _ in range(LBFGS_LADDER_RUNGS):
            if c_ok is not None and c_bad is not None:
                break
            c *= factor
            xa, ok = attempt(c)
            record(c, xa, ok)
        if c_ok is not None and c_bad is not None:
            for _ in range(spec.c_search_steps):
                mid = math.sqrt(c_ok * c_bad)
                xa, ok = attempt(mid)
                if ok:
                    best, c_ok = xa, mid
                else:
                    c_bad = mid
        x_adv = best if best is not None else x[i]
        o = _finish(model, x[i:i + 1], x_adv[None], labels[i:i + 1], targets[i:i + 1], spec, [evals], [evals])[0]
        if best is None:
            o.error = "no-adversarial"
        out.append(o)
    return _unwrap(out, single)


# ---------------------------------------------------------------------------
# dispatch and sweeps

_ATTACKS = {
    Algorithm.FGSM: fgsm,
    Algorithm.BIM_A: bim,
    Algorithm.BIM_B: bim,
    Algorithm.JSMA: jsma,
    Algorithm.CW_L2: cw_l2,
    Algorithm.DEEPFOOL: deepfool,
    Algorithm.LBFGS: lbfgs_attack,
}


def run_attack(model, x, labels, spec: AttackSpec, targets=None):
    fn = _ATTACKS[spec.algorithm]
    return fn(model, x, labels, spec, targets=targets if spec.targeted else None)


def select_targets(labels, n_classes, seed):
    """Seeded uniform choice of a wrong label per sample."""
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    return (labels + rng.integers(1, n_classes, size=labels.size)) % n_classes


def _failed(x, labels, targets, spec, err, model):
    n = len(x)
    out = _finish(model, x, x.copy(), labels, targets, spec, np.zeros(n), np.zeros(n))
    for o in out:
        o.success = False
        o.error = err
    return out


@dataclass
class SweepResult:
    outcomes: list
    targets: np.ndarray
    meter: list = field(default_factory=list)


def run_budget_sweep(model, x, labels, specs, seed=0, batch_size=200, workers=1, progress=None):
    """Run every spec over the whole batch; never aborts on per-batch failures.

    Batches are independent and may run on a thread pool (``workers``); the
    model is shared read-only and its meter is updated atomically.  Returns a
    :class:`SweepResult` whose outcomes carry ``spec_index`` and
    ``sample_index``; ``meter`` lists the model's gradient meter per spec run.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("spec grid must be non-empty")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    targets = select_targets(labels, model.n_classes, seed)
    starts = list(range(0, len(x), batch_size))
    outcomes, meters = [], []

    def one(spec, start):
        sl = slice(start, start + batch_size)
        t = targets[sl] if spec.targeted else None
        try:
            return run_attack(model, x[sl], labels[sl], spec, t)
        except Exception as exc:  # recorded, the sweep continues
            return _failed(x[sl], labels[sl], t, spec, f"{type(exc).__name__}: {exc}", model)

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for s, spec in enumerate(specs):
            model.reset_meter()
            if pool is None:
                results = [one(spec, st) for st in starts]
            else:
                results = list(pool.map(lambda st, spec=spec: one(spec, st), starts))
            for start, res in zip(starts, results):
                for k, o in enumerate(res):
                    o.spec_index = s
                    o.sample_index = start + k
                outcomes.extend(res)
            meters.append(model.gradient_meter)
            if progress is not None:
                progress(s, spec)
    finally:
        if pool is not None:
            pool.shutdown()
    return SweepResult(outcomes, targets, meters)


# ---------------------------------------------------------------------------
# outcome logs


def outcomes_to_jsonl(outcomes) -> str:
    return "".join(json.dumps(o.record(), sort_keys=True) + "\n" for o in outcomes)


def outcomes_from_jsonl(text: str, payload=None) -> list:
    """Parse records; ``payload`` is an (n, ...) array of adversarial inputs in record order."""
    out = []
    for i, line in enumerate(l for l in text.splitlines() if l.strip()):
        d = json.loads(line)
        xa = None if payload is None else np.asarray(payload[i])
        out.append(AdvOutcome(x_adv=xa, **d))
    return out


def with_budget(spec: AttackSpec, **changes) -> AttackSpec:
    return replace(spec, **changes)
