"""Trainable-parameter management: store, initializers, Adam, gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorio
from .autodiff import AutodiffError, Tape, Tensor, backward


class ParameterStore:
    """Named parameter tensors plus per-parameter Adam state."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._steps: dict[str, int] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grad_norms(self) -> dict[str, float]:
        return {n: float(np.linalg.norm(t.grad)) for n, t in self.params.items() if t.grad is not None}

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        arrays = {n: t.data for n, t in sorted(self.params.items())}
        tensorio.write_archive(path, arrays, meta=meta or {})

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParameterStore", dict]:
        arrays, meta = tensorio.read_archive(path)
        store = cls()
        for name, arr in arrays.items():
            store.add(name, arr)
        return store, meta


def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """Bias-corrected Adam update on every parameter with a populated gradient.

    Parameters without a gradient are skipped and listed in the returned
    summary. Gradients are cleared afterwards.
    """
    updated, skipped = [], []
    for name, t in store.params.items():
        if t.grad is None:
            skipped.append(name)
            continue
        g = t.grad
        store._steps[name] += 1
        s = store._steps[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / (1 - beta1**s)
        vhat = v / (1 - beta2**s)
        t.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(t.data.dtype)
        updated.append(name)
    store.zero_grads()
    return {"updated": updated, "skipped": skipped}


# ---------------------------------------------------------------------------
# initializers (deterministic: every init takes the rng)


def uniform_init(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def xavier_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    return uniform_init(rng, shape, np.sqrt(6.0 / (fan_in + fan_out)))


SIREN_OMEGA = 30.0


def siren_first_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return uniform_init(rng, (fan_in, fan_out), 1.0 / fan_in)


def siren_hidden_init(rng: np.random.Generator, fan_in: int, fan_out: int, omega: float = SIREN_OMEGA) -> np.ndarray:
    return uniform_init(rng, (fan_in, fan_out), np.sqrt(6.0 / fan_in) / omega)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-4,
    max_entries: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    fn must map a list of Tensors to a scalar Tensor and be pure. Runs in
    float64; up to max_entries coordinates per input are probed (all of them
    when the input is small), chosen deterministically.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        loss = fn(tensors)
        backward(tape, loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_where = ""
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        for j in idx:
            orig = flat[j]
            h = 1e-5 * (1.0 + abs(orig))
            flat[j] = orig + h
            f_plus = float(fn(tensors).data)
            flat[j] = orig - h
            f_minus = float(fn(tensors).data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = analytic[ti].reshape(-1)[j]
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
            if rel > worst:
                worst = rel
                worst_where = f"input {ti} flat[{j}]: analytic={a:.6g} numeric={numeric:.6g}"
    return GradCheckReport(max_rel_err=float(worst), tol=tol, worst=worst_where)
