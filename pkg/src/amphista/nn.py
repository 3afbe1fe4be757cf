"""Layer building blocks shared by the target model and the draft module."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Parameter, Tensor

MASKED_SCORE = -1e9


class Module:
    """Minimal parameter container with deterministic dotted naming.

    Attributes that are Parameters, Modules, or lists thereof are registered
    in definition order; attributes starting with "_" are ignored (used for
    shared/frozen references that belong to another module's checkpoint).
    """

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            full = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = full
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{full}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        item.name = f"{full}.{i}"
                        yield f"{full}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {}
        for name, p in self.named_parameters(prefix):
            if name in state:
                raise ValueError(f"duplicate parameter name {name!r}")
            state[name] = p.data.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"checkpoint is missing {name!r}")
            arr = state[name]
            if tuple(arr.shape) != p.shape:
                raise DimensionError(
                    f"{name!r}: checkpoint shape {arr.shape} != parameter shape {p.shape}"
                )
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    def promote_to(self, dtype) -> None:
        """Cast all parameters (f32 -> f64 is exact, so a model trained in f32
        can be evaluated under the f64 decoding engine bit-stably)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (in_dim, out_dim), in_dim))
        self.bias = Parameter(uniform_init(rng, (out_dim,), in_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, dtype=T.default_dtype()))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.rms_norm(x, self.gain, self._eps)


class LayerKV:
    """Per-layer rolling key/value store, shape [len, n_heads, head_dim]."""

    def __init__(self, n_heads: int, head_dim: int):
        dt = T.default_dtype()
        self.k = np.zeros((0, n_heads, head_dim), dtype=dt)
        self.v = np.zeros((0, n_heads, head_dim), dtype=dt)

    @property
    def length(self) -> int:
        return self.k.shape[0]

    def extend(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        self.k = np.concatenate([self.k, k_new], axis=0)
        self.v = np.concatenate([self.v, v_new], axis=0)

    def truncate(self, new_len: int) -> None:
        if new_len > self.length:
            raise DimensionError(f"cannot truncate cache of length {self.length} to {new_len}")
        self.k = np.ascontiguousarray(self.k[:new_len])
        self.v = np.ascontiguousarray(self.v[:new_len])

    def select(self, base: int, offsets: list[int]) -> None:
        keep = list(range(base)) + [base + o for o in offsets]
        self.k = np.ascontiguousarray(self.k[keep])
        self.v = np.ascontiguousarray(self.v[keep])

    def clone(self) -> "LayerKV":
        out = LayerKV(self.k.shape[1], self.k.shape[2])
        out.k = self.k.copy()
        out.v = self.v.copy()
        return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., T, d] -> [..., H, T, dh]."""
    *lead, t, d = x.shape
    head_dim = d // n_heads
    x = T.reshape(x, (*lead, t, n_heads, head_dim))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., H, T, dh] -> [..., T, d]."""
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = T.transpose(x, axes)
    *lead, t, h, dh = x.shape
    return T.reshape(x, (*lead, t, h * dh))


def causal_mask_bias(n_query: int, n_cached: int, dtype) -> np.ndarray:
    """Additive mask for queries appended after ``n_cached`` committed entries."""
    total = n_cached + n_query
    bias = np.zeros((n_query, total), dtype=dtype)
    cols = np.arange(total)[None, :]
    rows = np.arange(n_query)[:, None]
    bias[cols > n_cached + rows] = MASKED_SCORE
    return bias


def tree_mask_bias(tree_mask: np.ndarray, n_cached: int, dtype) -> np.ndarray:
    """Additive mask from a boolean ancestor-or-self matrix over new tokens."""
    n = tree_mask.shape[0]
    bias = np.zeros((n, n_cached + n), dtype=dtype)
    bias[:, n_cached:][~tree_mask] = MASKED_SCORE
    return bias


class SelfAttention(Module):
    """Multi-head self-attention over [..., T, d] with optional KV cache."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise DimensionError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng, bias=False)
        self._n_heads = n_heads
        self._scale = 1.0 / np.sqrt(dim // n_heads)

    def __call__(
        self,
        x: Tensor,
        cache: LayerKV | None = None,
        mask_bias: np.ndarray | None = None,
    ) -> Tensor:
        q = _split_heads(self.wq(x), self._n_heads)
        k = _split_heads(self.wk(x), self._n_heads)
        v = _split_heads(self.wv(x), self._n_heads)

        if cache is not None:
            if x.ndim != 2:
                raise DimensionError("cached attention expects an unbatched [T, d] input")
            k_new = np.swapaxes(k.data, 0, 1)  # [T, H, dh]
            v_new = np.swapaxes(v.data, 0, 1)
            k_all = np.concatenate([cache.k, k_new], axis=0)
            v_all = np.concatenate([cache.v, v_new], axis=0)
            cache.extend(k_new, v_new)
            k = Tensor(np.swapaxes(k_all, 0, 1).copy())
            v = Tensor(np.swapaxes(v_all, 0, 1).copy())

        scores = T.mul(
            T.matmul(q, T.swap_last_axes(k)),
            Tensor(np.asarray(self._scale, dtype=x.data.dtype)),
        )
        if mask_bias is not None:
            scores = T.add(scores, Tensor(mask_bias))
        probs = T.softmax(scores, axis=-1)
        out = _merge_heads(T.matmul(probs, v))
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.w1 = Linear(dim, hidden, rng, bias=False)
        self.w2 = Linear(hidden, dim, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.silu(self.w1(x)))


class TransformerLayer(Module):
    """Pre-norm attention + feed-forward block with residual connections.

    ``out_norm=True`` adds a final normalization, used where a single layer
    stands alone (adaptation layers, encoder stacks) rather than inside a deep
    stack with one shared final norm.
    """

    def __init__(
        self,
        dim: int,
        n_heads: int,
        ffn_dim: int,
        rng: np.random.Generator,
        eps: float = 1e-5,
        out_norm: bool = False,
    ):
        self.norm1 = RMSNorm(dim, eps)
        self.attn = SelfAttention(dim, n_heads, rng)
        self.norm2 = RMSNorm(dim, eps)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.out_norm = RMSNorm(dim, eps) if out_norm else None

    def __call__(
        self,
        x: Tensor,
        cache: LayerKV | None = None,
        mask_bias: np.ndarray | None = None,
    ) -> Tensor:
        h = T.add(x, self.attn(self.norm1(x), cache=cache, mask_bias=mask_bias))
        h = T.add(h, self.ffn(self.norm2(h)))
        if self.out_norm is not None:
            h = self.out_norm(h)
        return h
