"""Compare the compiled and numpy routing backends.

    python benchmarks/bench_routing.py [--batch 128] [--repeat 20]

Times the routing kernel (forward, forward+backward) and one full training
step of the routed model (sequence build, expert stage, backward) per backend.
"""
import argparse
import time

import numpy as np

from rtmoe import autodiff as ad
from rtmoe import kernels
from rtmoe.model import ModelConfig, RTModel
from rtmoe.routing import init_routing_weights, layer1_inputs, route


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def kernel_case(backend, B, L, N, rng):
    W = init_routing_weights(L, N, rng).weights
    f0 = ad.tensor(rng.dirichlet(np.ones(N), size=B), requires_grad=True)
    mask = ad.tensor((rng.random((B, L * N)) < 0.5).astype(np.float64))

    def fwd():
        with ad.no_grad():
            route(f0, layer1_inputs(f0), mask, W, backend)

    def fwd_bwd():
        with ad.Tape() as tape:
            rates, out, _ = route(f0, layer1_inputs(f0), mask, W, backend)
            loss = ad.sum(rates) + ad.sum(out)
        tape.backward(loss)

    return fwd, fwd_bwd


def step_case(backend, B, rng):
    model = RTModel(ModelConfig(), seed=0)
    x = ad.tensor(rng.random((B, 1, 28, 28)).astype(np.float32))
    y = rng.integers(0, 10, B)
    noise = model.noise_for([(0, 0, i) for i in range(B)])

    def step():
        model.zero_grad()
        with ad.Tape() as tape:
            res = model.forward_batch(x, noise, backend=backend)
            loss = ad.cross_entropy_logits(res.logits, y)
        tape.backward(loss)

    return step


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'backend':8s} {'case':28s} {'ms':>9s}")
    for backend in sorted(kernels.BACKENDS):
        fwd, fwd_bwd = kernel_case(backend, args.batch, 4, 8, rng)
        print(f"{backend:8s} {'route fwd (L=4, N=8)':28s} {best_of(fwd, args.repeat):9.3f}")
        print(f"{backend:8s} {'route fwd+bwd (L=4, N=8)':28s} {best_of(fwd_bwd, args.repeat):9.3f}")
        fwd, fwd_bwd = kernel_case(backend, args.batch, 8, 16, rng)
        print(f"{backend:8s} {'route fwd+bwd (L=8, N=16)':28s} {best_of(fwd_bwd, args.repeat):9.3f}")
        step = step_case(backend, args.batch, rng)
        print(f"{backend:8s} {'training step (mnist shape)':28s} {best_of(step, max(3, args.repeat // 4)):9.3f}")


if __name__ == "__main__":
    main()
