"""Parameter containers and initialisers shared by the model parts."""
import numpy as np

from .autodiff import Tensor


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def param(arr, name):
    return Tensor(np.array(arr), requires_grad=True, name=name)


class ParamStore(dict):
    """Ordered ``name -> Tensor`` mapping with prefix views."""

    def new(self, name, arr):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        self[name] = param(arr, name)
        return self[name]

    def sub(self, prefix):
        """View of the parameters under ``prefix.`` with the prefix stripped."""
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in self.items() if k.startswith(pre)}

    def num_elements(self):
        return sum(p.size for p in self.values())

    def astype(self, dtype):
        out = ParamStore()
        for k, v in self.items():
            out[k] = param(v.data.astype(dtype), k)
        return out

    def copy(self):
        out = ParamStore()
        for k, v in self.items():
            out[k] = param(v.data, k)
        return out


def linear_params(store, name, rng, fan_in, fan_out, bias=True, dtype=np.float32):
    store.new(f"{name}.weight", trunc_normal(rng, (fan_in, fan_out), dtype=dtype))
    if bias:
        store.new(f"{name}.bias", np.zeros(fan_out, dtype=dtype))


def norm_params(store, name, dim, dtype=np.float32):
    store.new(f"{name}.weight", np.ones(dim, dtype=dtype))
    store.new(f"{name}.bias", np.zeros(dim, dtype=dtype))


def conv_params(store, name, rng, cin, cout, k, bias=True, dtype=np.float32):
    # Kaiming-uniform style scale, as conv layers in detection necks/heads usually get.
    bound = np.sqrt(1.0 / (cin * k * k))
    store.new(f"{name}.weight", rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype))
    if bias:
        store.new(f"{name}.bias", np.zeros(cout, dtype=dtype))


def identity_conv3x3(channels, dtype=np.float64):
    """3x3 kernel whose cross-correlation (pad 1) is the identity map."""
    k = np.zeros((channels, channels, 3, 3), dtype=dtype)
    k[np.arange(channels), np.arange(channels), 1, 1] = 1.0
    return k
