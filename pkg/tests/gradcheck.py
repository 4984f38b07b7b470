"""Central finite-difference gradient checking against autograd."""

import torch


def randomize_parameters(model: torch.nn.Module, seed: int, std: float = 0.05) -> None:
    """Overwrite every parameter with seeded Gaussian values.

    Zero-initialized blocks (output heads, motion projections) deliberately
    kill gradients upstream of them; tests that probe gradient flow need
    every path live.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def finite_difference_check(
    model: torch.nn.Module,
    loss_fn,
    num_slots: int = 100,
    h: float = 1e-4,
    rel_tol: float = 1e-3,
    seed: int = 0,
) -> float:
    """Compare autograd gradients with central differences on a parameter slice.

    loss_fn() must be a deterministic closure evaluating the model to a
    scalar. The model should be in double precision. Returns the worst
    relative error over the checked slots and asserts it is within rel_tol.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    grads = torch.cat([p.grad.flatten() for p in params])

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randperm(total, generator=gen)[:num_slots].tolist()

    flat_params = []
    for p in params:
        flat_params.append(p)

    def locate(i):
        for p, n in zip(flat_params, sizes):
            if i < n:
                return p, i
            i -= n
        raise IndexError(i)

    worst = 0.0
    with torch.no_grad():
        for i in idx:
            p, off = locate(i)
            view = p.flatten()
            old = view[off].item()
            view[off] = old + h
            f_plus = float(loss_fn())
            view[off] = old - h
            f_minus = float(loss_fn())
            view[off] = old
            fd = (f_plus - f_minus) / (2.0 * h)
            an = float(grads[i])
            if abs(fd) < 1e-10 and abs(an) < 1e-10:
                continue
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
    assert worst < rel_tol, f"worst relative gradient error {worst:.3e} >= {rel_tol}"
    return worst
