"""Central finite-difference oracle for scalar functions of torch tensors."""

import torch


def finite_difference_grad(fn, tensors, eps=1e-6):
    """Gradient of scalar ``fn()`` w.r.t. every entry of ``tensors`` by central differences."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def directional_fd(fn, tensors, directions, eps=1e-6):
    """Directional derivative of ``fn`` along ``directions`` by central differences."""
    with torch.no_grad():
        for t, d in zip(tensors, directions):
            t.add_(eps * d)
        up = float(fn())
        for t, d in zip(tensors, directions):
            t.sub_(2 * eps * d)
        down = float(fn())
        for t, d in zip(tensors, directions):
            t.add_(eps * d)
    return (up - down) / (2 * eps)


def autograd_grad(fn, tensors):
    for t in tensors:
        t.grad = None
    out = fn()
    return torch.autograd.grad(out, tensors, allow_unused=True)


def relative_error(a, b):
    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale
