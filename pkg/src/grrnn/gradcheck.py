"""Central finite-difference gradient checking.

Deliberately independent of the tape: the numerical side only ever calls the
forward function on perturbed copies of the input arrays.
"""

import numpy as np

from .tensor import SwitchRecorder, Tape, Tensor


def relative_error(analytic, numeric, floor=1e-8):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numerical_grad(fn, arrays, wrt, step=1e-5, indices=None):
    """d fn(arrays) / d arrays[wrt] by central differences.

    ``fn`` maps a list of float64 arrays to a float. When ``indices`` is given
    only those flat positions are probed; the result is then a 1-d array.
    """
    target = arrays[wrt]
    flat = target.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = []
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(arrays)
        flat[i] = orig - step
        fm = fn(arrays)
        flat[i] = orig
        out.append((fp - fm) / (2 * step))
    out = np.asarray(out)
    return out.reshape(target.shape) if indices is None else out


def check_gradients(build, arrays, step=1e-5, max_probes=None, rng=None):
    """Compare tape gradients with central differences for every input.

    ``build`` takes a list of Tensors and returns a scalar Tensor. Returns a
    dict ``{input index: max relative error}``. ``max_probes`` limits how many
    coordinates per input are probed (chosen with ``rng``).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(tensors)
    tape.backward(loss)

    def scalar(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    rng = rng or np.random.default_rng(0)
    errors = {}
    for k, t in enumerate(tensors):
        analytic = np.zeros_like(arrays[k]) if t.grad is None else t.grad
        if max_probes is not None and arrays[k].size > max_probes:
            idx = rng.choice(arrays[k].size, size=max_probes, replace=False)
            numeric = numerical_grad(scalar, arrays, k, step, idx)
            errors[k] = relative_error(analytic.reshape(-1)[idx], numeric)
        else:
            numeric = numerical_grad(scalar, arrays, k, step)
            errors[k] = relative_error(analytic, numeric)
    return errors


def kink_free_grad(fn, arrays, wrt, step, candidates, want):
    """Central differences at up to ``want`` positions that straddle no kink.

    ``candidates`` is an ordered pool of flat positions in ``arrays[wrt]``. A
    position is skipped when the relu/maxpool switch pattern at ``+step`` or
    ``-step`` differs from the unperturbed one. Returns ``(positions,
    numeric, n_skipped)``.
    """
    flat = arrays[wrt].reshape(-1)

    def probe():
        with SwitchRecorder() as rec:
            value = fn(arrays)
        return value, rec.signature()

    _, base = probe()
    kept, values, skipped = [], [], 0
    for i in candidates:
        if len(kept) == want:
            break
        orig = flat[i]
        flat[i] = orig + step
        fp, sp = probe()
        flat[i] = orig - step
        fm, sm = probe()
        flat[i] = orig
        if sp != base or sm != base:
            skipped += 1
            continue
        kept.append(int(i))
        values.append((fp - fm) / (2 * step))
    return np.array(kept, dtype=np.int64), np.array(values), skipped
