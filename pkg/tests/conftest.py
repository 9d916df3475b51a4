import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode


ACCEPTANCE_LINES = []


def record_acceptance(line):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def float64():
    """Run the test with float64 as torch's default dtype."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_(module, seed=0, scale=0.5):
    """Overwrite every parameter and BN buffer with seeded random values (BN variance kept positive)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, t in module.state_dict().items():
            if not t.is_floating_point():
                continue
            if name.endswith("running_var"):
                t.copy_(torch.rand(t.shape, generator=g, dtype=t.dtype) + 0.5)
            else:
                t.copy_(torch.randn(t.shape, generator=g, dtype=t.dtype) * scale)
    return module


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


class BranchRecorder(TorchFunctionMode):
    """Records which branch every ReLU and max-reduction took during a forward pass."""

    def __init__(self):
        super().__init__()
        self.pattern = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        out = func(*args, **kwargs)
        if func in _RELUS:
            self.pattern.append((args[0] > 0).detach().clone())
        elif func in _MAXES:
            dim = kwargs.get("dim", args[1] if len(args) > 1 else None)
            x = args[0]
            keep = out if kwargs.get("keepdim", False) else out.reshape(_kept_shape(x, dim))
            self.pattern.append((x == keep).detach().clone())
        return out


_RELUS = {F.relu, torch.relu, torch.Tensor.relu}
_MAXES = {torch.amax, torch.Tensor.amax}


def _kept_shape(x, dim):
    dims = range(x.dim()) if dim is None else ([dim] if isinstance(dim, int) else dim)
    dims = {d % x.dim() for d in dims}
    return [1 if i in dims else n for i, n in enumerate(x.shape)]


def _same_branches(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def central_differences(fn, tensors, h=1e-3, max_coords=None, seed=0, return_skipped=False):
    """Relative error between autograd and central-difference gradients.

    Returns ||g_a - g_n|| / max(||g_a||, ||g_n||) over every checked
    coordinate of every tensor. With ``max_coords`` only that many randomly
    chosen coordinates of each tensor are perturbed.

    A coordinate whose +h and -h evaluations take different ReLU or max
    branches straddles a kink, where a finite difference does not estimate
    the derivative; such coordinates are left out. ``return_skipped`` also
    returns how many were left out and how many were checked in total.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    gen = np.random.default_rng(seed)
    a_all, n_all = [], []
    skipped = total = 0
    with torch.no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.view(-1)
            ga = ga.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = gen.choice(flat.numel(), max_coords, replace=False)
            for i in idx:
                total += 1
                orig = flat[i].item()
                flat[i] = orig + h
                with BranchRecorder() as up:
                    fp = fn().item()
                flat[i] = orig - h
                with BranchRecorder() as down:
                    fm = fn().item()
                flat[i] = orig
                if not _same_branches(up.pattern, down.pattern):
                    skipped += 1
                    continue
                n_all.append((fp - fm) / (2 * h))
                a_all.append(ga[i].item())
    a, n = np.array(a_all), np.array(n_all)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    err = float(np.linalg.norm(a - n) / scale)
    return (err, skipped, total) if return_skipped else err
