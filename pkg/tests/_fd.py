"""Central finite-difference oracle shared by the gradient tests."""
import torch


def fd_relative_errors(loss_fn, tensors, samples=12, step=1e-4, seed=0):
    """Compare autograd against central differences on sampled coordinates.

    ``tensors`` are float64 leaves with requires_grad. Returns a dict
    name -> relative error ||fd - an|| / max(||fd||, ||an||) over the sampled
    coordinates of that tensor.
    """
    gen = torch.Generator().manual_seed(seed)
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    errors = {}
    for name, t in tensors.items():
        an = t.grad.detach().clone().reshape(-1)
        flat = t.data.view(-1)
        k = min(samples, flat.numel())
        idx = torch.randperm(flat.numel(), generator=gen)[:k]
        fd = torch.empty(k, dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fd[j] = (up - down) / (2 * step)
        a = an[idx]
        denom = max(fd.norm().item(), a.norm().item())
        errors[name] = 0.0 if denom < 1e-12 else (fd - a).norm().item() / denom
    return errors
