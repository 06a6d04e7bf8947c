"""Server factor bookkeeping, the per-client free energy and the refinement loop.

The server posterior over the shared parameters is the product of one
natural-parameter factor per client. Refining client ``i``:

1. target = prior * (product of the other clients' factors), projected proper;
2. minimise ``KL(q || target) + KL(c_i || p(phi_i)) - E_{q, c_i}[log p(D_i)]``
   over the new server posterior ``q`` and the client posterior ``c_i``;
3. recover the client's factor as ``q / (product of the other factors)``.

Because the other factors are fixed during step 2, ``q`` is exactly the new
server posterior, so the first KL needs no unnormalized densities.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .data import FederatedDataset, minibatch_indices
from .metrics import accuracy
from .model import LateralNetwork
from .optim import Adam
from .variational import (
    DEFAULT_MIN_PRECISION,
    DiagGaussian,
    NaturalFactor,
    VariationalParams,
    damp,
    factor_product,
    factor_quotient,
    params_kl,
    project_proper,
    sample_params,
    to_natural,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "virtualfl-posterior"
CHECKPOINT_VERSION = 1


class RefinementError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at optimizer step {step}")
        self.step = step


class Likelihood(Protocol):
    server_dim: int
    client_dim: int

    def log_likelihood(self, theta, phi, x, y, *, rng=None, training: bool = True) -> ad.Tensor: ...


@dataclass(frozen=True)
class RefinementConfig:
    mc_samples: int = 20
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    min_precision: float = DEFAULT_MIN_PRECISION
    damping: float = 1.0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.min_precision > 0:
            raise ValueError("min_precision must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class ServerState:
    """What the server holds: the prior, one factor per client and a step counter.

    No field refers to client posteriors or client data.
    """

    prior: DiagGaussian
    factors: tuple[NaturalFactor, ...]
    t: int = 0
    min_precision: float = DEFAULT_MIN_PRECISION
    posterior: DiagGaussian = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise ValueError("server needs at least one client factor")
        for f in self.factors:
            if len(f) != len(self.prior):
                raise ValueError("factor dimension does not match the prior")
        object.__setattr__(self, "posterior", posterior_from_factors(self.factors, self.min_precision))

    @property
    def num_clients(self) -> int:
        return len(self.factors)

    @property
    def dim(self) -> int:
        return len(self.prior)


@dataclass(frozen=True, eq=False)
class ClientState:
    posterior: VariationalParams
    prior: DiagGaussian

    def __post_init__(self):
        if len(self.posterior) != len(self.prior):
            raise ValueError("client posterior and prior dimensions differ")


def product(factors) -> NaturalFactor:
    factors = list(factors)
    out = factors[0]
    for f in factors[1:]:
        out = factor_product(out, f)
    return out


def posterior_from_factors(factors, min_precision: float = DEFAULT_MIN_PRECISION) -> DiagGaussian:
    joint = product(factors)
    if not joint.is_proper:
        log.warning("server factor product improper in %d dims; clamping", int((joint.precision <= 0).sum()))
    return project_proper(joint, min_precision)


def init_server(prior: DiagGaussian, num_clients: int, min_precision: float = DEFAULT_MIN_PRECISION) -> ServerState:
    """Every factor is ``prior^(1/K)``, so the initial posterior is the prior."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    share = to_natural(prior).scaled(1.0 / num_clients)
    return ServerState(prior, (share,) * num_clients, 0, min_precision)


def others(state: ServerState, i: int) -> NaturalFactor:
    """Product of every factor except client ``i``'s (uniform when K = 1)."""
    _check_index(state, i)
    rest = [f for j, f in enumerate(state.factors) if j != i]
    return product(rest) if rest else NaturalFactor.uniform(state.dim)


def cavity(state: ServerState, i: int) -> NaturalFactor:
    """Unnormalized ``prior * s / s_i``: the prior the refining client trains against."""
    return factor_product(to_natural(state.prior), others(state, i))


def cavity_target(state: ServerState, i: int) -> DiagGaussian:
    raw = cavity(state, i)
    if not raw.is_proper:
        log.info("cavity for client %d improper in %d dims; clamping", i, int((raw.precision <= 0).sum()))
    return project_proper(raw, state.min_precision)


def _check_index(state: ServerState, i: int) -> None:
    if not 0 <= i < state.num_clients:
        raise IndexError(f"client index {i} out of range for {state.num_clients} clients")


def free_energy(
    theta_mean: ad.Tensor,
    theta_rho: ad.Tensor,
    phi_mean: ad.Tensor,
    phi_rho: ad.Tensor,
    *,
    target: DiagGaussian,
    phi_prior: DiagGaussian,
    x,
    y,
    n_total: int,
    model: Likelihood,
    rng: np.random.Generator,
    mc_samples: int,
    training: bool = True,
    terms: dict | None = None,
) -> ad.Tensor:
    """Monte Carlo estimate of the refinement objective on one minibatch.

    The batch log-likelihood is rescaled by ``n_total / len(batch)``; with
    ``n_total = 0`` only the two KL terms remain. If ``terms`` is a dict it
    receives the three components as floats.
    """
    batch = len(y)
    if batch == 0:
        raise ValueError("free_energy needs a non-empty batch")
    eps_theta = rng.standard_normal((mc_samples, theta_mean.shape[0]))
    eps_phi = rng.standard_normal((mc_samples, phi_mean.shape[0]))
    theta = sample_params(theta_mean, theta_rho, eps_theta)
    phi = sample_params(phi_mean, phi_rho, eps_phi)
    kl_server = params_kl(theta_mean, theta_rho, target)
    kl_client = params_kl(phi_mean, phi_rho, phi_prior)
    loss = kl_server + kl_client
    if n_total:
        ll = model.log_likelihood(theta, phi, x, y, rng=rng, training=training)
        nll = ll * (-float(n_total) / batch)
        loss = loss + nll
    if terms is not None:
        terms["kl_server"] = kl_server.item()
        terms["kl_client"] = kl_client.item()
        terms["nll"] = nll.item() if n_total else 0.0
    return loss


@dataclass
class RefinementReport:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    posterior: DiagGaussian | None = None  # the optimized q before it is turned into a factor


def refine_client(
    server: ServerState,
    client: ClientState,
    i: int,
    x: np.ndarray,
    y: np.ndarray,
    model: Likelihood,
    cfg: RefinementConfig,
    rng: np.random.Generator,
    *,
    theta_init: VariationalParams | None = None,
    report: RefinementReport | None = None,
) -> tuple[ServerState, ClientState]:
    """One refinement of client ``i``; returns the updated server and client states.

    ``q`` is warm-started at the current server posterior unless
    ``theta_init`` is given; ``c_i`` starts from its previous value and stays
    anchored to its fixed prior.
    """
    _check_index(server, i)
    rest = others(server, i)
    target = cavity_target(server, i)
    start = theta_init if theta_init is not None else VariationalParams.from_gaussian(server.posterior)
    if len(start) != server.dim:
        raise ValueError("theta_init dimension does not match the server")
    params = [
        np.array(start.mean),
        np.array(start.rho),
        np.array(client.posterior.mean),
        np.array(client.posterior.rho),
    ]
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    n = len(y)
    step = 0
    for _ in range(cfg.epochs):
        for idx in minibatch_indices(n, cfg.batch_size, rng):
            leaves = [ad.Tensor(p, check=False) for p in params]
            try:
                with ad.Tape() as tape:
                    tape.watch(*leaves)
                    loss = free_energy(
                        *leaves, target=target, phi_prior=client.prior, x=x[idx], y=y[idx],
                        n_total=n, model=model, rng=rng, mc_samples=cfg.mc_samples,
                    )
            except ad.NonFiniteError as exc:
                raise RefinementError(f"non-finite value in free energy ({exc})", step) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise RefinementError("non-finite free energy", step)
            grads = tape.gradient(loss, leaves)
            if not all(np.isfinite(g).all() for g in grads):
                raise RefinementError("non-finite gradient", step)
            opt.step(grads)
            step += 1
            if report is not None:
                report.losses.append(value)
    if report is not None:
        report.steps = step

    q_new = VariationalParams(params[0], params[1]).to_gaussian()
    if report is not None:
        report.posterior = q_new
    update = factor_quotient(to_natural(q_new), rest)
    factors = list(server.factors)
    factors[i] = damp(factors[i], update, cfg.damping)
    new_server = ServerState(server.prior, tuple(factors), server.t + 1, server.min_precision)
    new_client = ClientState(VariationalParams(params[2], params[3]), client.prior)
    return new_server, new_client


# --------------------------------------------------------------------------
# full loop


@dataclass(frozen=True)
class VirtualConfig:
    refinements_per_client: int = 3
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    prior_variance: float = 1.0
    client_prior_variance: float = 1.0
    server_init_sigma: float = 1e-3
    client_init_sigma: float = 1e-3
    eval_samples: int = 20

    def __post_init__(self):
        if self.refinements_per_client < 1:
            raise ValueError("refinements_per_client must be >= 1")
        if self.eval_samples < 1:
            raise ValueError("eval_samples must be >= 1")

    @property
    def epochs_per_client(self) -> int:
        return self.refinements_per_client * self.refinement.epochs


def refinement_schedule(num_clients: int, refinements_per_client: int) -> list[int]:
    """Clients visited cyclically in fixed order."""
    return [i for _ in range(refinements_per_client) for i in range(num_clients)]


def predict_proba(
    model, server: ServerState, client: ClientState, x: np.ndarray, samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Posterior predictive class probabilities, averaged over ``samples`` weight draws."""
    theta = server.posterior.mean + server.posterior.std * rng.standard_normal((samples, server.dim))
    post = client.posterior
    phi = post.mean + post.sigma * rng.standard_normal((samples, len(post)))
    return model.predict_proba(theta, phi, x)


@dataclass
class VirtualResult:
    server: ServerState
    clients: list[ClientState]
    accuracies: list[float]
    history: list[list[float]]
    schedule: list[int]
    epochs_per_client: list[int]


def run_virtual(
    ds: FederatedDataset,
    cfg: VirtualConfig,
    rng: np.random.Generator,
    *,
    widths=(100, 100),
    dropout: float = 0.3,
    model: LateralNetwork | None = None,
) -> VirtualResult:
    """Alg.-style loop: ``refinements_per_client`` passes over the clients in order.

    The first refinement starts ``q`` from a standard network initialisation
    (small per-weight scale) instead of the prior itself; every later one
    warm-starts from the current server posterior.
    """
    K = ds.num_clients
    if model is None:
        model = LateralNetwork(ds.feature_dim, ds.num_classes, widths, dropout=dropout)
    prior = DiagGaussian.standard(model.server_dim, cfg.prior_variance)
    server = init_server(prior, K, cfg.refinement.min_precision)
    phi_prior = DiagGaussian.standard(model.client_dim, cfg.client_prior_variance)
    init_rng, train_rng, eval_rng = rng.spawn(3)
    theta_init = model.init_server(init_rng, cfg.server_init_sigma)
    clients = [ClientState(model.init_client(init_rng, cfg.client_init_sigma), phi_prior) for _ in range(K)]
    schedule = refinement_schedule(K, cfg.refinements_per_client)
    epochs = [0] * K
    history: list[list[float]] = []
    for step, i in enumerate(schedule):
        shard = ds[i]
        server, clients[i] = refine_client(
            server, clients[i], i, shard.x_train, shard.y_train, model, cfg.refinement, train_rng,
            theta_init=theta_init if server.t == 0 else None,
        )
        epochs[i] += cfg.refinement.epochs
        if (step + 1) % K == 0:
            accs = []
            for j, s in enumerate(ds):
                probs = predict_proba(model, server, clients[j], s.x_test, cfg.eval_samples, eval_rng)
                accs.append(accuracy(probs, s.y_test))
            history.append(accs)
            log.info("pass %d: mean accuracy %.4f", len(history), float(np.mean(accs)))
    return VirtualResult(server, clients, history[-1], history, schedule, epochs)


# --------------------------------------------------------------------------
# checkpoints


def _floats(a: np.ndarray) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=np.float64)]


def save_checkpoint(path, server: ServerState, clients: list[ClientState] | None = None) -> None:
    """JSON record; floats are written in shortest round-trip form, so reads are bit-exact."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": server.t,
        "min_precision": server.min_precision,
        "prior": {"mean": _floats(server.prior.mean), "variance": _floats(server.prior.variance)},
        "factors": [{"precision": _floats(f.precision), "shift": _floats(f.shift)} for f in server.factors],
        "clients": [
            {
                "mean": _floats(c.posterior.mean),
                "rho": _floats(c.posterior.rho),
                "prior_mean": _floats(c.prior.mean),
                "prior_variance": _floats(c.prior.variance),
            }
            for c in (clients or [])
        ],
    }
    Path(path).write_text(json.dumps(record, allow_nan=False))


def load_checkpoint(path) -> tuple[ServerState, list[ClientState]]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a posterior checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {record.get('version')}")
    prior = DiagGaussian(record["prior"]["mean"], record["prior"]["variance"])
    factors = tuple(NaturalFactor(f["precision"], f["shift"]) for f in record["factors"])
    server = ServerState(prior, factors, int(record["step"]), float(record["min_precision"]))
    clients = [
        ClientState(VariationalParams(c["mean"], c["rho"]), DiagGaussian(c["prior_mean"], c["prior_variance"]))
        for c in record["clients"]
    ]
    return server, clients


def server_field_names() -> list[str]:
    return [f.name for f in fields(ServerState)]
