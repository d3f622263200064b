"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

from nerfedit import autodiff as ad


def finite_difference_check(fn, tensors, h=1e-3, rel_tol=1e-3, max_probes=24):
    """Check analytic gradients of ``fn(*tensors)`` against central
    finite differences.

    Per tensor, a bounded subset of elements is probed and the probed
    sub-vectors are compared by relative L2 error, which keeps the check
    meaningful under float32 forward rounding (per-element comparison of
    near-zero entries would only measure noise). ``fn`` rebuilds its graph
    on every call, so the oracle never reuses the tape it is checking.
    """
    for t in tensors:
        t.grad = None
    loss = fn(*tensors)
    base = float(loss.data)
    ad.backward(loss)
    rng = np.random.default_rng(0)
    for t in tensors:
        assert t.grad is not None, f"no gradient reached {t.name or t.shape}"
        flat = t.data.reshape(-1)
        n = flat.size
        probes = np.arange(n) if n <= max_probes else rng.choice(n, max_probes, replace=False)
        fd, an = [], []
        for i in probes:
            orig = flat[i]
            flat[i] = orig + h
            with ad.no_grad():
                up = float(fn(*tensors).data)
            flat[i] = orig - h
            with ad.no_grad():
                down = float(fn(*tensors).data)
            flat[i] = orig
            fwd = (up - base) / h
            bwd = (base - down) / h
            if abs(fwd - bwd) > 0.1 * max(abs(fwd), abs(bwd), 1.0):
                continue  # the probe straddles a kink (relu/clip/abs boundary)
            fd.append((up - down) / (2.0 * h))
            an.append(float(t.grad.reshape(-1)[i]))
        assert fd, f"every probe of {t.name or t.shape} hit a kink"
        fd = np.asarray(fd)
        an = np.asarray(an)
        denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-6)
        rel = np.linalg.norm(fd - an) / denom
        assert rel < rel_tol, (
            f"gradient mismatch for {t.name or t.shape}: relative error {rel:.3g}\n"
            f"fd={fd}\nanalytic={an}")
