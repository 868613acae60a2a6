"""Small numpy layers with hand-written reverse-mode gradients.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``grads`` during ``backward``. Frozen
networks call ``backward(dout, param_grads=False)`` to obtain input
gradients only.
"""

from __future__ import annotations

import hashlib
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from services.matvae_errors import NonFiniteError

NamedArray = Tuple[str, np.ndarray]


class Layer:
    training: bool = False

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, param_grads: bool = True) -> np.ndarray:
        raise NotImplementedError

    def children(self) -> List[Tuple[str, "Layer"]]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[NamedArray]:
        for name, value in self.params.items():
            yield prefix + name, value
        for child_name, child in self.children():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_gradients(self, prefix: str = "") -> Iterator[NamedArray]:
        for name, value in self.grads.items():
            yield prefix + name, value
        for child_name, child in self.children():
            yield from child.named_gradients(f"{prefix}{child_name}.")

    def zero_grad(self) -> None:
        for value in self.grads.values():
            value.fill(0.0)
        for _, child in self.children():
            child.zero_grad()

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])


class Linear(Layer):
    """y = x W^T + b with W stored as (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self._param("weight", rng.uniform(-bound, bound, size=(out_features, in_features)))
        self._param("bias", rng.uniform(-bound, bound, size=(out_features,)))
        self._x: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout: np.ndarray, param_grads: bool = True) -> np.ndarray:
        if param_grads:
            self.grads["weight"] += dout.T @ self._x
            self.grads["bias"] += dout.sum(axis=0)
        return dout @ self.params["weight"]


class LayerNorm(Layer):
    def __init__(self, features: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self._param("gamma", np.ones(features))
        self._param("beta", np.zeros(features))
        self._xhat: Optional[np.ndarray] = None
        self._inv_std: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._inv_std
        return self._xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dout: np.ndarray, param_grads: bool = True) -> np.ndarray:
        xhat = self._xhat
        if param_grads:
            self.grads["gamma"] += (dout * xhat).sum(axis=0)
            self.grads["beta"] += dout.sum(axis=0)
        dxhat = dout * self.params["gamma"]
        n = xhat.shape[-1]
        return (
            self._inv_std
            / n
            * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        )


class SiLU(Layer):
    def __init__(self) -> None:
        super().__init__()
        self._x: Optional[np.ndarray] = None
        self._sig: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        self._x = x
        self._sig = expit(x)
        return x * self._sig

    def backward(self, dout: np.ndarray, param_grads: bool = True) -> np.ndarray:
        sig = self._sig
        return dout * (sig + self._x * sig * (1.0 - sig))


class Dropout(Layer):
    """Inverted dropout; identity in eval mode or without a generator."""

    def __init__(self, p: float) -> None:
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"Dropout rate must lie in [0, 1), got {p}.")
        self.p = p
        self._mask: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if not self.training or self.p == 0.0 or rng is None:
            self._mask = None
            return x
        self._mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dout: np.ndarray, param_grads: bool = True) -> np.ndarray:
        return dout if self._mask is None else dout * self._mask


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]) -> None:
        super().__init__()
        self.layers = list(layers)

    def children(self) -> List[Tuple[str, Layer]]:
        return [(str(index), layer) for index, layer in enumerate(self.layers)]

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        for index, layer in enumerate(self.layers):
            x = layer.forward(x, rng)
            check_finite(x, f"layer {index} ({type(layer).__name__})")
        return x

    def backward(self, dout: np.ndarray, param_grads: bool = True) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout, param_grads)
        return dout


class ResidualBlock(Layer):
    """Pre-activation bottleneck: LN, SiLU, Linear(H, H/2), LN, SiLU, dropout, Linear(H/2, H), plus skip."""

    def __init__(self, hidden: int, dropout: float, rng: np.random.Generator) -> None:
        super().__init__()
        bottleneck = max(1, hidden // 2)
        self.body = Sequential(
            [
                LayerNorm(hidden),
                SiLU(),
                Linear(hidden, bottleneck, rng),
                LayerNorm(bottleneck),
                SiLU(),
                Dropout(dropout),
                Linear(bottleneck, hidden, rng),
            ]
        )

    def children(self) -> List[Tuple[str, Layer]]:
        return [("body", self.body)]

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return x + self.body.forward(x, rng)

    def backward(self, dout: np.ndarray, param_grads: bool = True) -> np.ndarray:
        return dout + self.body.backward(dout, param_grads)


class Mlp(Layer):
    """Input projection, SiLU, residual blocks and concatenated linear heads."""

    def __init__(
        self,
        in_features: int,
        hidden: int,
        head_sizes: Sequence[int],
        rng: np.random.Generator,
        blocks: int = 3,
        dropout: float = 0.05,
    ) -> None:
        super().__init__()
        self.in_features = in_features
        self.hidden = hidden
        self.head_sizes = list(head_sizes)
        self.in_proj = Linear(in_features, hidden, rng)
        self.act = SiLU()
        self.blocks = [ResidualBlock(hidden, dropout, rng) for _ in range(blocks)]
        self.heads = [Linear(hidden, size, rng) for size in self.head_sizes]

    def children(self) -> List[Tuple[str, Layer]]:
        items: List[Tuple[str, Layer]] = [("in_proj", self.in_proj)]
        items += [(f"blocks.{index}", block) for index, block in enumerate(self.blocks)]
        items += [(f"heads.{index}", head) for index, head in enumerate(self.heads)]
        return items

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        check_finite(x, "input")
        h = self.act.forward(self.in_proj.forward(x))
        check_finite(h, "layer 0 (input projection)")
        for index, block in enumerate(self.blocks, start=1):
            h = block.forward(h, rng)
            check_finite(h, f"layer {index} (residual block)")
        out = np.concatenate([head.forward(h) for head in self.heads], axis=1)
        check_finite(out, f"layer {len(self.blocks) + 1} (heads)")
        return out

    def backward(self, dout: np.ndarray, param_grads: bool = True) -> np.ndarray:
        dh = np.zeros((dout.shape[0], self.hidden))
        start = 0
        for head, size in zip(self.heads, self.head_sizes):
            dh += head.backward(dout[:, start : start + size], param_grads)
            start += size
        for block in reversed(self.blocks):
            dh = block.backward(dh, param_grads)
        return self.in_proj.backward(self.act.backward(dh), param_grads)


def check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Non-finite activation at {where}.")


def state_dict(layer: Layer) -> List[Dict[str, object]]:
    return [{"name": name, "value": value.tolist()} for name, value in layer.named_parameters()]


def load_state_dict(layer: Layer, entries: Sequence[Dict[str, object]]) -> None:
    """Copies named tensors into ``layer`` in place, checking names and shapes."""
    targets = dict(layer.named_parameters())
    provided = {str(entry["name"]): entry["value"] for entry in entries}
    if set(targets) != set(provided):
        missing = sorted(set(targets) - set(provided))
        extra = sorted(set(provided) - set(targets))
        raise ValueError(f"Parameter names do not match: missing {missing}, unexpected {extra}.")
    for name, target in targets.items():
        value = np.asarray(provided[name], dtype=np.float64)
        if value.shape != target.shape:
            raise ValueError(f"Parameter {name} has shape {value.shape}, expected {target.shape}.")
        target[...] = value


def parameter_checksum(layer: Layer) -> str:
    digest = hashlib.sha256()
    for name, value in layer.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(value).tobytes())
    return digest.hexdigest()
