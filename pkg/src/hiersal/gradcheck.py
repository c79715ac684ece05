"""Central-finite-difference gradient verification.

The oracle runs in float64 regardless of the inputs' dtype; analytic
gradients come from the tape. The scalarization uses a fixed random
projection so sign errors cannot cancel.
"""

import numpy as np

from .tensor import Tensor, record_tape


def finite_diff_check(op_instance, inputs, epsilon=1e-3, seed=0):
    """Return the worst elementwise relative error between analytic and
    central-difference gradients of ``op_instance(*inputs)``.

    ``op_instance`` is any callable from Tensors to a Tensor; ``inputs``
    are checked one element at a time, so keep them small.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    ins = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    rng = np.random.default_rng(seed)

    with record_tape() as tape:
        out = op_instance(*ins)
    proj = rng.standard_normal(out.shape)
    tape.backward(out, seed=proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ins]

    def objective():
        return float((op_instance(*ins).data * proj).sum())

    worst = 0.0
    for t, a in zip(ins, analytic):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = objective()
            flat[i] = orig - epsilon
            f_minus = objective()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)
        a = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
