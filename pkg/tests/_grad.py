"""Directional central-difference gradient probes in float64."""
import torch


def probe_gradient(fn, inputs, n_probes=20, eps=1e-6, seed=0):
    """Compare autodiff with central differences along random directions.

    ``fn`` maps the list of input tensors to a scalar. Returns the worst
    relative error over ``n_probes`` directions.
    """
    gen = torch.Generator().manual_seed(seed)
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]
    worst = 0.0
    for _ in range(n_probes):
        dirs = [torch.randn(x.shape, generator=gen, dtype=torch.float64) for x in inputs]
        with torch.no_grad():
            plus = fn(*[x + eps * d for x, d in zip(inputs, dirs)])
            minus = fn(*[x - eps * d for x, d in zip(inputs, dirs)])
        numeric = float((plus - minus) / (2 * eps))
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        scale = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def weighted_sum(seed=0):
    """A fixed random linear read-out so a tensor output becomes a scalar."""
    cache = {}

    def f(t):
        key = tuple(t.shape)
        if key not in cache:
            g = torch.Generator().manual_seed(seed)
            cache[key] = torch.randn(t.shape, generator=g, dtype=torch.float64)
        return (t * cache[key]).sum()
    return f
