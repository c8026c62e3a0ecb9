"""Reference computations written independently of the package internals.

Everything here is plain numpy so that the checks do not share code paths
with the torch-based implementation they validate.
"""

from __future__ import annotations

import math

import numpy as np

SIGMOID = (lambda z: 1.0 / (1.0 + np.exp(-z)), lambda a: a * (1.0 - a))
TANH = (np.tanh, lambda a: 1.0 - a * a)


def unpack_mlp(params, widths):
    """Split a flat vector into [(W (in, out), b (out,)), ...] in the package's layout order."""
    out, pos = [], 0
    for a, b in zip(widths[:-1], widths[1:]):
        W = params[pos:pos + a * b].reshape(a, b)
        pos += a * b
        bias = params[pos:pos + b]
        pos += b
        out.append((W, bias))
    assert pos == params.size
    return out


def mlp_loss_and_grad(params, widths, x, target, act=SIGMOID):
    """Cross-entropy of softmax(logits) against ``target`` and its analytic parameter gradient."""
    f, df = act
    layers = unpack_mlp(np.asarray(params, dtype=np.float64), widths)
    hs = [np.asarray(x, dtype=np.float64)]
    for i, (W, b) in enumerate(layers):
        z = hs[-1] @ W + b
        hs.append(z if i == len(layers) - 1 else f(z))
    logits = hs[-1]
    shift = logits - logits.max()
    logp = shift - math.log(np.exp(shift).sum())
    loss = -float(np.dot(target, logp))
    delta = np.exp(logp) * target.sum() - target  # d loss / d logits
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((np.outer(hs[i], delta), delta))
        if i:
            delta = (delta @ W.T) * df(hs[i])
    flat = []
    for gW, gb in reversed(grads):
        flat += [gW.reshape(-1), gb]
    return loss, np.concatenate(flat)


def mlp_loss(params, widths, x, target, act=SIGMOID) -> float:
    return mlp_loss_and_grad(params, widths, x, target, act)[0]


def softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


def match_loss(params, widths, x, y_logits, target_grad, act=SIGMOID) -> float:
    _, g = mlp_loss_and_grad(params, widths, x, softmax(y_logits), act)
    return float(np.sum((g - target_grad) ** 2))


def central_difference(fn, point, h):
    point = np.asarray(point, dtype=np.float64)
    out = np.empty(point.size)
    for i in range(point.size):
        up, down = point.copy(), point.copy()
        up[i] += h
        down[i] -= h
        out[i] = (fn(up) - fn(down)) / (2 * h)
    return out


def gaussian_sigma(clip, m, eps, delta):
    return (2.0 * clip / m) * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def laplace_scale(clip, m, eps):
    return (2.0 * clip / m) / eps


def nbafl_server_sigma(T, L, N, clip, m, eps, c):
    if T <= L * math.sqrt(N):
        return 0.0
    return c * (2.0 * clip / m) * math.sqrt(T * T - L * L * N) / (N * eps)


def conditional_gaussian_posterior(alpha, gamma_prev):
    """Coefficients of E[X_{t-1} | X_0, X_t] and Var, from the joint Gaussian directly.

    With X_{t-1} = sqrt(gp) X0 + sqrt(1-gp) e1 and X_t = sqrt(a) X_{t-1} + sqrt(1-a) e2,
    the pair (X_{t-1}, X_t) given X_0 is jointly Gaussian; condition with the
    usual Schur complement.
    """
    gamma = alpha * gamma_prev
    mean = np.array([math.sqrt(gamma_prev), math.sqrt(gamma)])  # per unit X0
    cov = np.array([[1 - gamma_prev, math.sqrt(alpha) * (1 - gamma_prev)],
                    [math.sqrt(alpha) * (1 - gamma_prev), 1 - gamma]])
    k = cov[0, 1] / cov[1, 1]
    coef_xt = k
    coef_x0 = mean[0] - k * mean[1]
    var = cov[0, 0] - k * cov[1, 0]
    return coef_x0, coef_xt, var


def tprime_oracle(M, beta_start=1e-4, beta_end=0.02, T=1000):
    gamma = 1.0
    target = 1.0 / (1.0 + M * M)
    if gamma <= target:
        return 0
    for t in range(1, T + 1):
        beta = beta_start + (beta_end - beta_start) * (t - 1) / (T - 1)
        gamma *= 1.0 - beta
        if gamma <= target:
            return t
    return T
