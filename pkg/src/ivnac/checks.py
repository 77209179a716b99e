"""Self-checks shared by the CLI and the test-suite: bijectivity trials and gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .flow import FlowConfig, FlowModel, random_model
from .training import loss_total, parameter_gradients


@dataclass
class RoundTrip:
    trials: int
    max_forward_inverse: float
    max_inverse_forward: float

    @property
    def max_error(self) -> float:
        return max(self.max_forward_inverse, self.max_inverse_forward)


def invertibility_trials(trials: int, size: int = 64, seed: int = 0, model: Optional[FlowModel] = None,
                         config: Optional[FlowConfig] = None) -> RoundTrip:
    """Max-abs errors of f^-1(f(x)) - x and f(f^-1(y)) - y over random inputs.

    Without ``model`` every trial also draws fresh random parameters.
    """
    rng = np.random.default_rng(seed)
    fi = if_ = 0.0
    for t in range(trials):
        m = model if model is not None else random_model(config, seed=int(rng.integers(2**31)))
        shape = (1, m.config.channels, size, size)
        x = Tensor(rng.standard_normal(shape))
        y = Tensor(rng.standard_normal(shape))
        fi = max(fi, float(np.abs(m.inverse(m.forward(x)).data - x.data).max()))
        if_ = max(if_, float(np.abs(m.forward(m.inverse(y)).data - y.data).max()))
    return RoundTrip(trials, fi, if_)


def gradient_check(n_blocks: int = 2, size: int = 8, seed: int = 0, hidden: int = 4, lam: float = 1.0,
                   eps: float = 1e-6, samples: int = 6) -> Dict[str, float]:
    """Relative error of backprop against central differences, per parameter array.

    Runs in float64 on a random toy model.  For each parameter array,
    ``samples`` random entries are perturbed; the reported error is
    ||fd - analytic|| / max(||fd|| + ||analytic||, 1e-12) over those entries.
    """
    rng = np.random.default_rng(seed)
    with ad.float64():
        model = random_model(FlowConfig(n_blocks=n_blocks, hidden=hidden), seed=seed, weight_scale=0.6)
        x = rng.uniform(0.0, 1.0, (2, 1, size, size))
        y = rng.uniform(0.0, 1.0, (2, 1, size, size))
        tape = Tape()
        loss = loss_total(model, x, y, lam, tape)
        grads = parameter_gradients(model, tape, ad.backward(loss))

        def f():
            return loss_total(model, x, y, lam).item()

        errors = {}
        for name, p in model.parameters():
            flat = p.reshape(-1)
            idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
            fd, an = [], []
            g = grads[name].reshape(-1)
            for i in idx:
                old = flat[i]
                flat[i] = old + eps
                up = f()
                flat[i] = old - eps
                down = f()
                flat[i] = old
                fd.append((up - down) / (2 * eps))
                an.append(g[i])
            fd, an = np.array(fd), np.array(an)
            errors[name] = float(np.linalg.norm(fd - an) / max(np.linalg.norm(fd) + np.linalg.norm(an), 1e-12))
    return errors
