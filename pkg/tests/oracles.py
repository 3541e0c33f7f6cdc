"""Independent reference implementations used as test oracles.

Everything here is plain Python/numpy written directly from the formulas,
without going through the autodiff tape.
"""
import itertools
import math

import numpy as np


def tv_double_loop(img) -> float:
    h, w = len(img), len(img[0])
    s = 0.0
    for i in range(h - 1):
        for j in range(w - 1):
            s += (img[i][j + 1] - img[i][j]) ** 2 + (img[i + 1][j] - img[i][j]) ** 2
    return s / ((h - 1) * (w - 1))


def angle_deg(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    c = max(-1.0, min(1.0, dot / (na * nb)))
    return math.degrees(math.acos(c))


def gaze_vec(pitch, yaw):
    return (-math.cos(pitch) * math.sin(yaw), -math.sin(pitch), -math.cos(pitch) * math.cos(yaw))


def iterations(eps, alpha) -> int:
    x = max(eps / alpha + 4.0, 2.0 * eps / alpha)
    return int(math.floor(x + 0.5))


def linear_pred(weight, bias, x):
    """Unit direction of W x/255 + b for the pixel-linear toy model."""
    raw = [sum(weight[i][k] * x[i] / 255.0 for i in range(len(x))) + bias[k] for k in range(3)]
    n = math.sqrt(sum(r * r for r in raw))
    return [r / n for r in raw]


def brute_force_linear(weight, bias, x0, target, eps, alpha):
    """Best angular error over the alpha grid of the feasible box around ``x0``.

    Returns ``(best, slack)`` where ``slack`` is the largest loss change
    from one sign step away from the optimum: every coordinate moves by
    -alpha, 0 or +alpha (clipped to [0, 255]).
    """
    steps = int(round(eps / alpha))
    axes = []
    for v in x0:
        lo, hi = max(0.0, v - eps), min(255.0, v + eps)
        axes.append(sorted({min(hi, max(lo, v + k * alpha)) for k in range(-steps, steps + 1)}))

    def loss(point):
        return angle_deg(linear_pred(weight, bias, point), target)

    best, arg = math.inf, None
    for point in itertools.product(*axes):
        val = loss(point)
        if val < best:
            best, arg = val, point
    slack = 0.0
    for d in itertools.product((-alpha, 0.0, alpha), repeat=len(arg)):
        moved = [min(255.0, max(0.0, v + dv)) for v, dv in zip(arg, d)]
        slack = max(slack, abs(loss(moved) - best))
    return best, slack


def central_diff(f, x, step=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def linear_instance(rng, n_pixels):
    """Random pixel-linear toy problem: (weight, bias, integer x0, unit target)."""
    weight = rng.normal(0.0, 20.0, size=(n_pixels, 3))
    bias = rng.normal(size=3) + np.array([0.0, 0.0, -1.0])
    x0 = rng.integers(0, 256, size=n_pixels).astype(np.float64)
    t = rng.normal(size=3)
    return weight, bias, x0, t / np.linalg.norm(t)
