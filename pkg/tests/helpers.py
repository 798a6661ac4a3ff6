"""Finite-difference oracle and small fixtures shared by the unit and acceptance suites."""

import numpy as np

from busholding.env import Batch

VOCAB = (40, 22, 13, 2)


def random_states(rng: np.random.Generator, n: int, vocab=VOCAB):
    cat = np.stack([rng.integers(0, v, n) for v in vocab], axis=1)
    num = rng.normal(1.0, 0.3, (n, 3))
    return cat, num


def random_batch(rng: np.random.Generator, n: int, max_hold: float = 60.0, vocab=VOCAB) -> Batch:
    cat, num = random_states(rng, n, vocab)
    ncat, nnum = random_states(rng, n, vocab)
    return Batch(cat, num, rng.uniform(0, max_hold, n), rng.normal(-2.0, 1.0, n), ncat, nnum,
                 (rng.random(n) < 0.1).astype(float))


def max_rel_error(loss_fn, params: dict, grads: dict, h: float = 1e-5, floor: float = 1e-6,
                  max_per_tensor: int | None = None, rng: np.random.Generator | None = None,
                  retry_h: float | None = None) -> float:
    """Largest |fd - analytic| / max(|fd|, |analytic|, floor) over checked entries (central differences).

    With ``retry_h``, an entry that misses at ``h`` is measured again at the
    smaller step: a +-h probe can straddle a ReLU kink, where no derivative
    exists, while a wrong gradient disagrees at every step size.
    """
    worst = 0.0
    for key, p in params.items():
        flat = p.reshape(-1)
        g = grads[key].reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, max_per_tensor, replace=False)
        for i in idx:
            err = _entry_error(loss_fn, flat, i, g[i], h, floor)
            if retry_h is not None and err >= 1e-4:
                err = min(err, _entry_error(loss_fn, flat, i, g[i], retry_h, floor))
            worst = max(worst, err)
    return worst


def _entry_error(loss_fn, flat, i, analytic, h, floor):
    old = flat[i]
    flat[i] = old + h
    lp = loss_fn()
    flat[i] = old - h
    lm = loss_fn()
    flat[i] = old
    fd = (lp - lm) / (2 * h)
    return abs(fd - analytic) / max(abs(fd), abs(analytic), floor)


# --- acceptance reporting ---------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


class criterion:
    """Context manager recording one PASS/FAIL line for an acceptance criterion.

    The body sets ``.ok`` and ``.detail``; an exception counts as a failure.
    """

    def __init__(self, number: int):
        self.number, self.ok, self.detail = number, False, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.ok, self.detail = False, f"{self.detail} error: {exc_type.__name__}: {exc}".strip()
        ACCEPTANCE_RESULTS[self.number] = (bool(self.ok), self.detail)
        return False


def acceptance_lines() -> list[str]:
    return [f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
            for n, (ok, detail) in sorted(ACCEPTANCE_RESULTS.items())]
