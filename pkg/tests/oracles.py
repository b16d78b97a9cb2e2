"""Straight-line numpy references, written without touching the package's op layer.

Each function restates one formula with plain loops or array expressions so
the package can be compared against it.
"""

import math

import numpy as np


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        row = x[r] - x[r].max()
        e = np.exp(row)
        out[r] = e / e.sum()
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def style_injection(q, e_c, e_r, w_k, w_v, w_g, b_g, m, alpha, gate_constant=None):
    """F = alpha * softmax(Q K^T / sqrt(d)) V + (1 - alpha) * Q + g."""
    q = np.asarray(q, dtype=np.float64)
    n, d = q.shape
    e_r = np.asarray(e_r, dtype=np.float64).reshape(-1)
    e_c = np.asarray(e_c, dtype=np.float64).reshape(-1)
    k = np.zeros((m, d))
    v = np.zeros((m, d))
    for j in range(m):
        for c in range(d):
            k[j, c] = sum(e_r[i] * w_k[i, j * d + c] for i in range(d))
            v[j, c] = sum(e_r[i] * w_v[i, j * d + c] for i in range(d))
    logits = np.zeros((n, m))
    for r in range(n):
        for j in range(m):
            logits[r, j] = float(np.dot(q[r], k[j])) / math.sqrt(d)
    attn = softmax(logits) @ v
    if gate_constant is None:
        z = (e_c * e_r) @ w_g + b_g.reshape(-1)
        g = sigmoid(z)
    else:
        g = np.full(d, float(gate_constant))
    return alpha * attn + (1.0 - alpha) * q + g[None, :]


def structure_residual(f_s, w1, b1, w2, b2):
    """R = sigma(f W1 + b1) W2 + b2, one grid cell at a time, cells row-major."""
    f_s = np.asarray(f_s, dtype=np.float64)
    h, w, _ = f_s.shape
    rows = []
    for y in range(h):
        for x in range(w):
            hidden = sigmoid(f_s[y, x] @ w1 + b1.reshape(-1))
            rows.append(hidden @ w2 + b2.reshape(-1))
    return np.array(rows)


def structure_injection(f, r, gamma):
    return np.asarray(f, dtype=np.float64) + gamma * np.asarray(r, dtype=np.float64)


def cyclic_assignment(k, num_sites):
    out, j = [], 0
    for _ in range(num_sites):
        out.append(j)
        j = j + 1 if j + 1 < k else 0
    return out


def adamw_step(theta, grad, m, v, t, lr, b1, b2, eps, wd):
    theta = theta * (1.0 - lr * wd)
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def ddim(x_T, eps_fn, alpha_bar):
    x = np.array(x_T, dtype=np.float64)
    for t in range(len(alpha_bar) - 1, 0, -1):
        eps = eps_fn(x, t)
        x0 = (x - math.sqrt(1 - alpha_bar[t]) * eps) / math.sqrt(alpha_bar[t])
        x = math.sqrt(alpha_bar[t - 1]) * x0 + math.sqrt(1 - alpha_bar[t - 1]) * eps
    return x


def binary_iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union
