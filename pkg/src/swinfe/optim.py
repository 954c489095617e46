"""AdamW with decoupled weight decay."""
import numpy as np


def _update(theta, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    # theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    dt = theta.dtype
    m = (beta1 * m + (1 - beta1) * g).astype(dt)
    v = (beta2 * v + (1 - beta2) * g * g).astype(dt)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    theta = (theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)).astype(dt)
    return theta, m, v


def _check_finite(grads):
    for k, g in grads:
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k}; step refused")


def adamw_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
    """One step on plain arrays; returns ``(new_params, new_state)``.

    ``state`` is ``{"t", "m", "v"}`` or ``{}`` for a fresh optimizer. Missing
    gradients count as zero. Inputs are not modified.
    """
    _check_finite(grads.items())
    t = state.get("t", 0) + 1
    new_p, m_new, v_new = {}, {}, {}
    for k, theta in params.items():
        theta = np.asarray(theta)
        g = np.asarray(grads.get(k, np.zeros_like(theta)), dtype=theta.dtype)
        m = state.get("m", {}).get(k, np.zeros_like(theta))
        v = state.get("v", {}).get(k, np.zeros_like(theta))
        new_p[k], m_new[k], v_new[k] = _update(theta, g, m, v, t, lr, beta1, beta2, eps,
                                               weight_decay)
    return new_p, {"t": t, "m": m_new, "v": v_new}


class AdamW:
    """In-place AdamW over a ``name -> Tensor`` store, reading ``.grad``."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
        self.params = params
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        _check_finite((k, p.grad) for k, p in self.params.items())
        self.t += 1
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad.astype(p.data.dtype, copy=False)
            p.data, self.m[k], self.v[k] = _update(p.data, g, self.m[k], self.v[k], self.t,
                                                   **self.hyper)

    def state_arrays(self):
        """``name -> array`` view of the moments and step count for checkpointing."""
        out = {"optim.t": np.asarray(float(self.t), dtype=np.float64)}
        for k in self.params:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["optim.t"])
        for k in self.params:
            self.m[k] = np.array(arrays[f"optim.m.{k}"])
            self.v[k] = np.array(arrays[f"optim.v.{k}"])
