"""Central finite-difference verification of backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    per_input: List[float] = field(default_factory=list)
    instances: int = 1

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28s} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} n={self.instances}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def numeric_gradient(f: Callable[[], T.Tensor], arr: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place, then restored)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(f: Callable[..., T.Tensor], inputs: Sequence[T.Tensor], h: float = 1e-5,
               tol: float = 1e-3, floor: float = 1e-3, name: str = "f",
               numeric_dtype=np.float64) -> GradCheckReport:
    """Compare backward gradients of ``f(*inputs)`` against central differences.

    The backward pass runs in the inputs' own dtype.  Central differences are
    taken on copies promoted to ``numeric_dtype`` (float64 by default), so a
    float32 backward is judged against a derivative that is not itself
    dominated by float32 rounding.  Pass ``numeric_dtype=None`` to difference
    in the native dtype.  Only inputs with ``requires_grad`` are checked;
    ``floor`` bounds the denominator of the relative error for near-zero
    gradient entries.
    """
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    if numeric_dtype is None:
        shadow = list(inputs)
    else:
        shadow = [T.Tensor(t.data, requires_grad=t.requires_grad, dtype=numeric_dtype) for t in inputs]
    errs = []
    with T.no_grad():
        for t, s in zip(inputs, shadow):
            if not t.requires_grad:
                continue
            analytic = np.zeros(t.shape) if t.grad is None else t.grad
            numeric = numeric_gradient(lambda: f(*shadow), s.data, h)
            errs.append(float(relative_error(analytic, numeric, floor).max()) if t.size else 0.0)
    return GradCheckReport(name=name, max_rel_err=max(errs, default=0.0), tol=tol, per_input=errs)


# ---------------------------------------------------------------------------
# suite over every differentiable op
# ---------------------------------------------------------------------------

def _param(rng, shape, dtype, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:
        # keep away from activation kinks so central differences do not straddle them
        x = np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo + x, x)
    return T.Tensor(x, requires_grad=True, dtype=dtype)


def _weighted(rng, dtype):
    """Return g(y) = sum(w * y) with fixed random w, so every output element matters."""
    cache = {}

    def g(y: T.Tensor) -> T.Tensor:
        w = cache.get(y.shape)
        if w is None:
            w = cache[y.shape] = T.Tensor(rng.uniform(-1, 1, y.shape), dtype=dtype)
        return (y * w).sum()

    return g


def _case_builders(dtype) -> dict:
    from . import training  # losses live with the training loop

    def elementwise(rng):
        op = rng.choice(["add", "sub", "mul", "scale", "square"])
        a = _param(rng, (3, 4), dtype)
        b = _param(rng, (3, 4), dtype)
        g = _weighted(rng, dtype)
        if op == "scale":
            c = float(rng.uniform(-2, 2))
            return (lambda a: g(T.scale(a, c))), [a]
        if op == "square":
            return (lambda a: g(T.square(a))), [a]
        return (lambda a, b: g(T.elementwise(op, a, b))), [a, b]

    def reduce(rng):
        op = rng.choice(["sum", "mean"])
        a = _param(rng, (2, 3, 4), dtype)
        axes = [None, (0,), (1, 2), (2,)][rng.integers(4)]
        g = _weighted(rng, dtype)
        return (lambda a: g(T.reduce(op, a, axes))), [a]

    def act(kind):
        def build(rng):
            a = _param(rng, (4, 5), dtype, lo=0.1)
            g = _weighted(rng, dtype)
            alpha = float(rng.uniform(0.05, 0.5))
            return (lambda a: g(T.activation(kind, a, alpha))), [a]
        return build

    def matmul(rng):
        m, k, p = (int(v) for v in rng.integers(1, 5, size=3))
        a, b = _param(rng, (m, k), dtype), _param(rng, (k, p), dtype)
        g = _weighted(rng, dtype)
        return (lambda a, b: g(T.matmul(a, b))), [a, b]

    def conv(rng):
        cin, cout = (int(v) for v in rng.integers(1, 3, size=2))
        kdims = tuple(int(v) for v in rng.integers(1, 4, size=3))
        stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
        padding = tuple(int(rng.integers(0, k)) for k in kdims)
        dims = tuple(int(k + rng.integers(0, 3)) for k in kdims)
        x = _param(rng, (1, cin, *dims), dtype)
        k = _param(rng, (cout, cin, *kdims), dtype)
        b = _param(rng, (cout,), dtype)
        g = _weighted(rng, dtype)
        return (lambda x, k, b: g(T.conv3d(x, k, b, stride, padding))), [x, k, b]

    def conv_t(rng):
        cin, cout = (int(v) for v in rng.integers(1, 3, size=2))
        kdims = tuple(int(v) for v in rng.integers(1, 4, size=3))
        stride = tuple(int(v) for v in rng.integers(1, 3, size=3))
        padding = tuple(int(rng.integers(0, k // 2 + 1)) for k in kdims)
        outpad = tuple(int(rng.integers(0, s)) for s in stride)
        dims = tuple(int(v) for v in rng.integers(2, 4, size=3))
        x = _param(rng, (1, cin, *dims), dtype)
        k = _param(rng, (cin, cout, *kdims), dtype)
        b = _param(rng, (cout,), dtype)
        g = _weighted(rng, dtype)
        return (lambda x, k, b: g(T.conv3d_transpose(x, k, b, stride, padding, outpad))), [x, k, b]

    def bn(training_mode):
        def build(rng):
            x = _param(rng, (2, 2, 2, 3, 3), dtype)
            gamma = T.Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True, dtype=dtype)
            beta = _param(rng, (2,), dtype)
            rm = T.Tensor(rng.standard_normal(2) * 0.1, dtype=dtype)
            rv = T.Tensor(rng.uniform(0.5, 1.5, 2), dtype=dtype)
            g = _weighted(rng, dtype)

            def f(x, gamma, beta):
                # running stats are side state; restore them so every evaluation is identical
                m0, v0 = rm.data, rv.data
                y = T.batchnorm(x, gamma, beta, rm, rv, training=training_mode)
                rm.data, rv.data = m0, v0
                return g(y)
            return f, [x, gamma, beta]
        return build

    def recon(rng):
        shape = (2, 3, 2, 3, 3)
        v = T.Tensor(rng.uniform(0, 1, shape), requires_grad=True, dtype=dtype)
        r = T.Tensor(rng.uniform(0, 1, shape), requires_grad=True, dtype=dtype)
        return (lambda v, r: training.reconstruction_loss(v, r)), [v, r]

    def teacher(rng):
        real = T.Tensor(rng.uniform(0.05, 0.95, 6), requires_grad=True, dtype=dtype)
        fake = T.Tensor(rng.uniform(0.05, 0.95, 6), requires_grad=True, dtype=dtype)
        return (lambda r, f: training.teacher_loss(r, f)), [real, fake]

    def generator(rng):
        fake = T.Tensor(rng.uniform(0.05, 0.95, 6), requires_grad=True, dtype=dtype)
        return (lambda f: training.generator_loss(f)), [fake]

    return {
        "elementwise": elementwise,
        "reduce": reduce,
        "relu": act("relu"),
        "leaky_relu": act("leaky_relu"),
        "sigmoid": act("sigmoid"),
        "tanh": act("tanh"),
        "matmul": matmul,
        "conv3d": conv,
        "conv3d_transpose": conv_t,
        "batchnorm_train": bn(True),
        "batchnorm_eval": bn(False),
        "reconstruction_loss": recon,
        "teacher_loss": teacher,
        "generator_loss": generator,
    }


SUITE_OPS = (
    "elementwise", "reduce", "relu", "leaky_relu", "sigmoid", "tanh", "matmul", "conv3d",
    "conv3d_transpose", "batchnorm_train", "batchnorm_eval", "reconstruction_loss",
    "teacher_loss", "generator_loss",
)


def run_suite(instances: int = 20, tol: float = 1e-3, h: float = 1e-5, seed: int = 0,
              dtype=np.float32, ops: Sequence[str] = None) -> List[GradCheckReport]:
    """Check every op on ``instances`` random small problems; one report per op."""
    dtype = np.dtype(dtype)
    floor = 1e-3 if dtype == np.float32 else 1e-8
    builders = _case_builders(dtype)
    reports = []
    for i, name in enumerate(ops or SUITE_OPS):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(instances):
            f, inputs = builders[name](rng)
            worst = max(worst, grad_check(f, inputs, h=h, tol=tol, floor=floor, name=name).max_rel_err)
        reports.append(GradCheckReport(name=name, max_rel_err=worst, tol=tol, instances=instances))
    return reports
