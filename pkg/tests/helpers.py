"""Gradient-check plumbing shared by the test modules."""

from __future__ import annotations

from topicnet import tensor as tn

from oracles import central_diff_scalar, rel_err


def check_grads(build, tensors, h: float, floor: float) -> float:
    """Worst relative error between autodiff and central differences.

    build() must construct the scalar loss afresh from the given tensors
    each time it is called; finite-difference evaluations run under
    no_grad so only the autodiff pass touches the tape.
    """
    for t in tensors:
        t.zero_grad()
    tn.TAPE.clear()
    loss = build()
    tn.backward(loss)

    def value():
        with tn.no_grad():
            return build().item()

    worst = 0.0
    for t in tensors:
        fd = central_diff_scalar(value, t.data, h)
        worst = max(worst, rel_err(t.grad, fd, floor))
    return worst
