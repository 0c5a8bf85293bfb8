"""Parameter containers and the layers the models are built from."""
import numpy as np

from .ops import attention, conv1d, conv_transpose1d, embedding, layer_norm, linear
from .tensor import Tensor, concat, gelu, reshape


class Parameter(Tensor):
    __slots__ = ("name", "frozen")

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = False


class Module:
    """Minimal module tree.  Parameters are discovered from attributes in
    definition order; names are dotted attribute paths."""

    def named_parameters(self, prefix=""):
        seen = set()
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self, frozen=True):
        for p in self.parameters():
            p.frozen = frozen
            p.requires_grad = not frozen
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if not p.frozen]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        from ..errors import CheckpointFormatError

        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise CheckpointFormatError(
                    f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}"
                )
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise CheckpointFormatError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
                )
            p.data = arr.copy()
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, path, seen):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield path, value
    elif isinstance(value, Module):
        for key, sub in vars(value).items():
            if not key.startswith("_"):
                yield from _walk(sub, f"{path}.{key}", seen)
    elif isinstance(value, (list, tuple)):
        for i, sub in enumerate(value):
            yield from _walk(sub, f"{path}.{i}", seen)
    elif isinstance(value, dict):
        for key in value:
            yield from _walk(value[key], f"{path}.{key}", seen)


# ---------------------------------------------------------------------------
# layers


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n, dim, rng, std=0.02):
        self.weight = Parameter(rng.normal(0.0, std, size=(n, dim)))

    def forward(self, ids):
        return embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=None):
        fan_in = c_in * kernel
        self.weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(kernel, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=2, padding=1):
        fan_in = c_in * kernel // stride
        self.weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(kernel, c_out, c_in)))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv_transpose1d(x, self.weight, self.bias, self.stride, self.padding)


class ResBlock1d(Module):
    """x + conv1x1(act(conv3(act(x))))"""

    def __init__(self, width, rng):
        self.conv1 = Conv1d(width, width, 3, rng)
        self.conv2 = Conv1d(width, width, 1, rng)

    def forward(self, x):
        h = self.conv1(gelu(x))
        h = self.conv2(gelu(h))
        return x + h


# ---------------------------------------------------------------------------
# transformer blocks (pre-norm)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.heads = heads

    def _split(self, x):
        b, t, d = x.shape
        return reshape(x, (b, t, self.heads, d // self.heads)).transpose(0, 2, 1, 3)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        h = attention(q, k, v, mask)
        b, _, t, _ = h.shape
        h = reshape(h.transpose(0, 2, 1, 3), (b, t, -1))
        return self.o(h)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, dim, heads, ffn, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ffn, rng)

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ff(self.ln2(x))


class DecoderLayer(Module):
    def __init__(self, dim, heads, ffn, rng):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.ff = FeedForward(dim, ffn, rng)

    def forward(self, x, memory, self_mask=None, memory_mask=None):
        x = x + self.self_attn(self.ln1(x), mask=self_mask)
        x = x + self.cross_attn(self.ln2(x), context=memory, mask=memory_mask)
        return x + self.ff(self.ln3(x))


def cat_channels(tensors):
    return concat(tensors, axis=-1)
