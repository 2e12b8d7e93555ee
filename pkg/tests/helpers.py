"""Shared oracles for the test suite."""
import numpy as np


def central_difference(f, tensors, h=1e-5):
    """Numeric gradient of scalar ``f()`` w.r.t. each tensor's data, in place-perturbed."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(np.asarray(f()))
            flat[i] = old - h
            down = float(np.asarray(f()))
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def straight_line_mlp(weights, biases, x):
    """Independent re-implementation of the MLP arithmetic, loop by loop."""
    h = [list(row) for row in x]
    for li, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for row in h:
            vals = []
            for o in range(w.shape[0]):
                acc = 0.0
                for i in range(w.shape[1]):
                    acc += w[o, i] * row[i]
                acc += b[o]
                vals.append(np.tanh(acc) if li < len(weights) - 1 else acc)
            out.append(vals)
        h = out
    return np.array(h)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
