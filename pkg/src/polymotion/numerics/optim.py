import numpy as np

from .. import _accel
from ..errors import TrainingError


class Adam:
    """Adam with per-group learning rates.

    ``params`` is either a list of parameters or a list of
    ``{"params": [...], "lr": float}`` groups.  State persists across
    ``step`` calls and can be reset row-wise (used by codebook
    re-initialisation).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        params = list(params)
        if params and isinstance(params[0], dict):
            groups = [{"params": list(g["params"]), "lr": g.get("lr", lr)} for g in params]
        else:
            groups = [{"params": params, "lr": lr}]
        self.groups = groups
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {}

    @property
    def params(self):
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, strict=True):
        """Apply one update.  With ``strict`` every parameter must carry a
        gradient; otherwise parameters without one are skipped."""
        for group in self.groups:
            lr = group["lr"]
            for p in group["params"]:
                if p.grad is None:
                    if strict:
                        raise TrainingError(f"parameter {p.name or '<unnamed>'} has no gradient")
                    continue
                st = self.state.get(id(p))
                if st is None:
                    st = self.state[id(p)] = {
                        "m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0,
                    }
                st["t"] += 1
                grad = np.ascontiguousarray(p.grad, dtype=np.float64)
                if not np.isfinite(grad).all():
                    raise TrainingError(f"non-finite gradient in {p.name or '<unnamed>'}")
                _accel.adam_update(p.data, grad, st["m"], st["v"], lr,
                                   self.beta1, self.beta2, self.eps, st["t"])

    def reset_rows(self, param, rows):
        st = self.state.get(id(param))
        if st is None:
            return
        st["m"][rows] = 0.0
        st["v"][rows] = 0.0


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
