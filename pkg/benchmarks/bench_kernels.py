"""Compiled vs pure-NumPy kernels: per-kernel timings and one refinement minibatch.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from virtualfl import autodiff as ad
from virtualfl import kernels
from virtualfl.model import LateralNetwork
from virtualfl.variational import DiagGaussian
from virtualfl.virtual import free_energy


def kernel_cases(rng):
    d, s = 20_000, 20
    mu, rho = rng.standard_normal(d), rng.standard_normal(d) - 3
    eps, grad = rng.standard_normal((s, d)), rng.standard_normal((s, d))
    tm, tv = rng.standard_normal(d), rng.uniform(0.5, 2.0, d)
    logits, labels = rng.standard_normal((s * 32, 10)), rng.integers(0, 10, s * 32)
    return {
        "softplus": lambda k: k.softplus(rho),
        "sigmoid": lambda k: k.sigmoid(rho),
        "reparam_forward": lambda k: k.reparam_forward(mu, rho, eps),
        "reparam_backward": lambda k: k.reparam_backward(rho, eps, grad),
        "gauss_kl": lambda k: k.gauss_kl(mu, rho, tm, tv),
        "gauss_kl_grad": lambda k: k.gauss_kl_grad(mu, rho, tm, tv),
        "softmax_xent": lambda k: k.softmax_xent(logits, labels),
    }


def training_step(rng):
    """One free-energy forward/backward on a 196-50-50-10 network with 20 draws."""
    net = LateralNetwork(196, 10, (50, 50), dropout=0.3)
    x, y = rng.random((32, 196)), rng.integers(0, 10, 32)
    target = DiagGaussian.standard(net.server_dim)
    phi_prior = DiagGaussian.standard(net.client_dim)
    arrays = [rng.standard_normal(net.server_dim) * 0.1, np.full(net.server_dim, -5.0),
              rng.standard_normal(net.client_dim) * 0.1, np.full(net.client_dim, -5.0)]

    def step():
        leaves = [ad.Tensor(a) for a in arrays]
        with ad.Tape() as tape:
            tape.watch(*leaves)
            loss = free_energy(*leaves, target=target, phi_prior=phi_prior, x=x, y=y, n_total=600, model=net,
                               rng=np.random.default_rng(0), mc_samples=20)
        tape.gradient(loss, leaves)

    return step


def best(fn, repeat: int, number: int) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + f"{'speedup':>10}")
    for name, fn in kernel_cases(rng).items():
        times = [best(lambda k=kernels.get(b): fn(k), args.repeat, 20) * 1e3 for b in backends]
        speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) > 1 else ""
        print(f"{name:<18}" + "".join(f"{t:>16.3f}" for t in times) + speed)
    step = training_step(rng)
    times = []
    for b in backends:
        previous = kernels.use(b)
        try:
            times.append(best(step, args.repeat, 3) * 1e3)
        finally:
            kernels.use(previous)
    speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) > 1 else ""
    print(f"{'training step':<18}" + "".join(f"{t:>16.3f}" for t in times) + speed)


if __name__ == "__main__":
    main()
