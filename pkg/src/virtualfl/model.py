"""Server MLP and client MLP with gated lateral connections.

A client hidden layer ``l >= 2`` computes::

    h_c[l] = relu(h_c[l-1] @ w + alpha * (relu(h_s[l-1] + b) @ u) + c)

Layer 1 reads the input only. The output head is linear (logits) and by
default takes a lateral connection from the last server hidden layer, so
every server layer feeds the client.

Parameters travel as flat vectors. A flat vector of shape ``(D,)`` is one
weight draw; shape ``(S, D)`` stacks ``S`` Monte Carlo draws and every
activation then carries a leading sample axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .variational import VariationalParams


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ParamLayout:
    """Ordered named blocks inside a flat parameter vector."""

    blocks: tuple[tuple[str, tuple[int, ...]], ...]
    offsets: dict[str, tuple[int, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offsets, pos = {}, 0
        for name, shape in self.blocks:
            n = int(np.prod(shape))
            offsets[name] = (pos, pos + n)
            pos += n
        object.__setattr__(self, "offsets", offsets)

    @property
    def size(self) -> int:
        return max((stop for _, stop in self.offsets.values()), default=0)

    def shape_of(self, name: str) -> tuple[int, ...]:
        return dict(self.blocks)[name]

    def unpack(self, flat: Tensor) -> dict[str, Tensor]:
        if flat.shape[-1] != self.size:
            raise ArchitectureError(f"parameter vector has length {flat.shape[-1]}, expected {self.size}")
        lead = flat.shape[:-1]
        if len(lead) > 1:
            raise ArchitectureError(f"parameter tensor must be (D,) or (S, D), got {flat.shape}")
        out = {}
        for name, shape in self.blocks:
            start, stop = self.offsets[name]
            piece = flat[..., start:stop]
            out[name] = piece.reshape(lead + shape)
        return out

    def unpack_array(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {
            name: np.asarray(flat)[..., a:b].reshape(np.shape(flat)[:-1] + self.shape_of(name))
            for name, (a, b) in self.offsets.items()
        }

    def pack_array(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        flat = np.zeros(self.size)
        for name, shape in self.blocks:
            a, b = self.offsets[name]
            flat[a:b] = np.asarray(parts[name], dtype=np.float64).reshape(-1)
        return flat


def _check_widths(widths, what: str) -> tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if not widths:
        raise ArchitectureError(f"{what} needs at least one hidden layer")
    if any(w <= 0 for w in widths):
        raise ArchitectureError(f"{what} widths must be positive, got {widths}")
    return widths


@dataclass(frozen=True)
class ServerArchitecture:
    input_dim: int
    hidden: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "hidden", _check_widths(self.hidden, "server"))
        if self.input_dim <= 0:
            raise ArchitectureError("input_dim must be positive")

    @property
    def layout(self) -> ParamLayout:
        blocks, prev = [], self.input_dim
        for l, width in enumerate(self.hidden, start=1):
            blocks += [(f"W{l}", (prev, width)), (f"b{l}", (width,))]
            prev = width
        return ParamLayout(tuple(blocks))

    @property
    def num_params(self) -> int:
        return self.layout.size


@dataclass(frozen=True)
class ClientArchitecture:
    input_dim: int
    hidden: tuple[int, ...]
    server_hidden: tuple[int, ...]
    num_classes: int
    head_lateral: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", _check_widths(self.hidden, "client"))
        object.__setattr__(self, "server_hidden", _check_widths(self.server_hidden, "server"))
        if len(self.hidden) != len(self.server_hidden):
            raise ArchitectureError(
                f"client depth {len(self.hidden)} must equal server depth {len(self.server_hidden)}"
            )
        if self.num_classes < 2:
            raise ArchitectureError("need at least two classes")

    @property
    def depth(self) -> int:
        return len(self.hidden)

    def _layer_blocks(self, l: int, fan_in: int, width: int, lateral_from: int | None):
        blocks = [(f"w{l}", (fan_in, width))]
        if lateral_from is not None:
            blocks += [
                (f"u{l}", (lateral_from, width)),
                (f"alpha{l}", (width,)),
                (f"b{l}", (lateral_from,)),
            ]
        blocks.append((f"c{l}", (width,)))
        return blocks

    @property
    def layout(self) -> ParamLayout:
        blocks, prev = [], self.input_dim
        for l, width in enumerate(self.hidden, start=1):
            lateral = self.server_hidden[l - 2] if l >= 2 else None
            blocks += self._layer_blocks(l, prev, width, lateral)
            prev = width
        head = self.depth + 1
        blocks += self._layer_blocks(
            head, prev, self.num_classes, self.server_hidden[-1] if self.head_lateral else None
        )
        return ParamLayout(tuple(blocks))

    @property
    def num_params(self) -> int:
        return self.layout.size

    def has_lateral(self, l: int) -> bool:
        return 2 <= l <= self.depth or (l == self.depth + 1 and self.head_lateral)


@dataclass(frozen=True)
class MLPArchitecture:
    """Plain MLP used by the baselines and as the gate-closed reference."""

    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", _check_widths(self.hidden, "mlp"))

    @property
    def layout(self) -> ParamLayout:
        blocks, prev = [], self.input_dim
        for l, width in enumerate(self.hidden + (self.num_classes,), start=1):
            blocks += [(f"w{l}", (prev, width)), (f"c{l}", (width,))]
            prev = width
        return ParamLayout(tuple(blocks))

    @property
    def num_params(self) -> int:
        return self.layout.size


@dataclass
class ForwardTrace:
    server: list[Tensor]
    client: list[Tensor]
    logits: Tensor


def apply_dropout(h, rate: float, rng: np.random.Generator | None, training: bool = True):
    """Inverted dropout; identity when ``rate == 0`` or not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return h
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(np.shape(h.data if isinstance(h, Tensor) else h)) >= rate) / (1.0 - rate)
    return ad.mul(h, keep)


def _bias(b: Tensor, sampled: bool) -> Tensor:
    # (S, h) -> (S, 1, h) so it broadcasts over the batch axis
    return b.reshape((b.shape[0], 1) + b.shape[1:]) if sampled else b


def _check_input(x: Tensor, width: int) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ArchitectureError(f"input of shape {x.shape} does not match input width {width}")


def server_forward(
    x, theta, arch: ServerArchitecture, *, dropout: float = 0.0, rng=None, training: bool = False
) -> list[Tensor]:
    """Hidden activations ``relu(h @ W + b)`` for every server layer."""
    x, theta = ad.as_tensor(x), ad.as_tensor(theta)
    _check_input(x, arch.input_dim)
    p = arch.layout.unpack(theta)
    sampled = theta.ndim == 2
    acts, h = [], x
    for l in range(1, len(arch.hidden) + 1):
        h_in = apply_dropout(h, dropout, rng, training)
        h = ad.relu(ad.matmul(h_in, p[f"W{l}"]) + _bias(p[f"b{l}"], sampled))
        acts.append(h)
    return acts


def lateral_term(server_act: Tensor, p: dict[str, Tensor], l: int, sampled: bool) -> Tensor:
    """``alpha * (relu(h_s + b) @ u)`` for layer ``l``."""
    adapted = ad.relu(server_act + _bias(p[f"b{l}"], sampled))
    return ad.matmul(adapted, p[f"u{l}"]) * _bias(p[f"alpha{l}"], sampled)


def client_forward(
    x,
    server_acts: list[Tensor],
    phi,
    arch: ClientArchitecture,
    *,
    dropout: float = 0.0,
    rng=None,
    training: bool = False,
    trace: bool = False,
):
    """Client logits; returns a :class:`ForwardTrace` when ``trace`` is set."""
    x, phi = ad.as_tensor(x), ad.as_tensor(phi)
    _check_input(x, arch.input_dim)
    if len(server_acts) != arch.depth:
        raise ArchitectureError(f"expected {arch.depth} server activations, got {len(server_acts)}")
    for act, width in zip(server_acts, arch.server_hidden):
        if act.shape[-1] != width:
            raise ArchitectureError(f"server activation width {act.shape[-1]} != {width}")
    p = arch.layout.unpack(phi)
    sampled = phi.ndim == 2
    h, hidden = x, []
    for l in range(1, arch.depth + 2):
        h_in = apply_dropout(h, dropout, rng, training)
        pre = ad.matmul(h_in, p[f"w{l}"])
        if arch.has_lateral(l):
            pre = pre + lateral_term(server_acts[l - 2], p, l, sampled)
        pre = pre + _bias(p[f"c{l}"], sampled)
        if l <= arch.depth:
            h = ad.relu(pre)
            hidden.append(h)
        else:
            logits = pre
    if trace:
        return ForwardTrace(list(server_acts), hidden, logits)
    return logits


def mlp_forward(x, weights, arch: MLPArchitecture, *, dropout: float = 0.0, rng=None, training: bool = False):
    x, weights = ad.as_tensor(x), ad.as_tensor(weights)
    _check_input(x, arch.input_dim)
    p = arch.layout.unpack(weights)
    sampled = weights.ndim == 2
    h = x
    n_layers = len(arch.hidden) + 1
    for l in range(1, n_layers + 1):
        h_in = apply_dropout(h, dropout, rng, training)
        pre = ad.matmul(h_in, p[f"w{l}"]) + _bias(p[f"c{l}"], sampled)
        h = ad.relu(pre) if l < n_layers else pre
    return h


def log_likelihood(logits, labels) -> Tensor:
    """Sum over all rows of ``log softmax(logits)[label]``."""
    return -ad.sum(ad.softmax_cross_entropy(logits, labels))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_weights(layout: ParamLayout, rng: np.random.Generator, gate: float = 1.0) -> np.ndarray:
    """Glorot-uniform matrices, zero biases, gates set to ``gate``."""
    parts = {}
    for name, shape in layout.blocks:
        if len(shape) == 2:
            parts[name] = glorot_uniform(rng, shape)
        elif name.startswith("alpha"):
            parts[name] = np.full(shape, gate)
        else:
            parts[name] = np.zeros(shape)
    return layout.pack_array(parts)


def gate_closed_mlp_weights(phi: np.ndarray, arch: ClientArchitecture) -> tuple[np.ndarray, MLPArchitecture]:
    """The (w, c) part of a client vector, as weights of the equivalent plain MLP."""
    mlp = MLPArchitecture(arch.input_dim, arch.hidden, arch.num_classes)
    parts = arch.layout.unpack_array(np.asarray(phi))
    return mlp.layout.pack_array({k: v for k, v in parts.items() if k[0] in "wc"}), mlp


class LateralNetwork:
    """Categorical likelihood ``p(y | x, theta, phi)`` of the server-client network.

    This is the model object consumed by the refinement routine; any object
    with the same ``server_dim``/``client_dim``/``log_likelihood`` surface
    can stand in for it.
    """

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        server_hidden=(100, 100),
        client_hidden=None,
        *,
        dropout: float = 0.3,
        head_lateral: bool = True,
    ):
        server_hidden = tuple(server_hidden)
        client_hidden = tuple(client_hidden) if client_hidden is not None else server_hidden
        self.server_arch = ServerArchitecture(input_dim, server_hidden)
        self.client_arch = ClientArchitecture(input_dim, client_hidden, server_hidden, num_classes, head_lateral)
        self.dropout = dropout
        self.num_classes = num_classes

    @property
    def server_dim(self) -> int:
        return self.server_arch.num_params

    @property
    def client_dim(self) -> int:
        return self.client_arch.num_params

    def logits(self, theta, phi, x, *, rng=None, training: bool = False) -> Tensor:
        acts = server_forward(x, theta, self.server_arch, dropout=self.dropout, rng=rng, training=training)
        return client_forward(x, acts, phi, self.client_arch, dropout=self.dropout, rng=rng, training=training)

    def log_likelihood(self, theta: Tensor, phi: Tensor, x, y, *, rng=None, training: bool = True) -> Tensor:
        """Batch log-likelihood summed over rows, averaged over weight draws."""
        ll = log_likelihood(self.logits(theta, phi, x, rng=rng, training=training), y)
        draws = theta.shape[0] if theta.ndim == 2 else 1
        return ll / float(draws) if draws > 1 else ll

    def predict_proba(self, theta: np.ndarray, phi: np.ndarray, x) -> np.ndarray:
        """Class probabilities averaged over the leading draw axis, if any."""
        logits = self.logits(theta, phi, x).data
        z = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=-1, keepdims=True)
        return probs.mean(axis=0) if probs.ndim == 3 else probs

    def init_server(self, rng: np.random.Generator, sigma: float) -> VariationalParams:
        mean = init_weights(self.server_arch.layout, rng)
        return VariationalParams.from_sigma(mean, np.full(mean.shape, sigma))

    def init_client(self, rng: np.random.Generator, sigma: float) -> VariationalParams:
        mean = init_weights(self.client_arch.layout, rng)
        return VariationalParams.from_sigma(mean, np.full(mean.shape, sigma))
