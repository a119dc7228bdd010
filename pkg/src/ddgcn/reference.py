"""Slow, loop-based reference implementations.

These follow the node-level definitions one index at a time in plain
numpy and share no code with the vectorised layers. The test suite and
``ddgcn selftest`` compare the two.
"""
from __future__ import annotations

import math

import numpy as np


def softsign(x):
    return x / (1.0 + abs(x))


def contract_4d_3d(a, f):
    """``out[i, j, d] = sum_{m, n} a[i, j, m, n] * f[m, n, d]`` by explicit loops."""
    t, m = a.shape[0], a.shape[1]
    d = f.shape[2]
    out = np.zeros((t, m, d))
    for i in range(t):
        for j in range(m):
            for p in range(t):
                for q in range(m):
                    for c in range(d):
                        out[i, j, c] += a[i, j, p, q] * f[p, q, c]
    return out


def phi_value(h_ij, h_mn, mode):
    if mode == "phi1":
        return softsign(sum(h_ij) / len(h_ij) - sum(h_mn) / len(h_mn))
    if mode == "phi2":
        return softsign(-sum(x * y for x, y in zip(h_ij, h_mn)))
    raise ValueError(mode)


def dynamic_weights(h, mode):
    t, m, _ = h.shape
    out = np.zeros((t, m, t, m))
    for i in range(t):
        for j in range(m):
            for p in range(t):
                for q in range(m):
                    out[i, j, p, q] = phi_value(h[i, j], h[p, q], mode)
    return out


def aggregate(h, weights, degree, phi_mode=None, d_out=None, mask=None):
    """Messages for one sample ``h[T, M, d]``, quadruple loop over (i, j, m, n)."""
    t, m, d = h.shape
    out = np.zeros((t, m, d))
    for i in range(t):
        for j in range(m):
            acc = np.zeros(d)
            for p in range(t):
                for q in range(m):
                    if mask is not None and not mask[i, j, p, q]:
                        continue
                    c = weights[i, j, p, q] / degree[i, j]
                    if phi_mode not in (None, "off"):
                        c += phi_value(h[i, j], h[p, q], phi_mode) / math.sqrt(d_out)
                    acc += c * h[p, q]
            out[i, j] = acc
    return out


def update(h, m, theta, bias, activation=np.tanh):
    """Per-node ``activation(theta_j @ (h + m) + b)``; a 2D theta is shared."""
    t, mj, _ = h.shape
    d_out = bias.shape[0]
    out = np.zeros((t, mj, d_out))
    for i in range(t):
        for j in range(mj):
            th = theta if theta.ndim == 2 else theta[j]
            out[i, j] = th @ (h[i, j] + m[i, j]) + bias
    return out if activation is None else activation(out)


def batch_norm_train(x, gamma, beta, eps):
    """Batch statistics over every axis but the last."""
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(0)
    var = ((flat - mean) ** 2).mean(0)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps):
    return (x - running_mean) / np.sqrt(running_var + eps) * gamma + beta


def slmp(h, weights, degree, theta, bias, gamma, beta, eps, phi_mode, d_out,
         final=False, training=True, running=None, mask=None):
    """One SLMP block (dropout inactive) over a batch ``h[N, T, M, d]``."""
    lin = np.stack([
        update(x, aggregate(x, weights, degree, phi_mode, d_out, mask), theta, bias, None)
        for x in h
    ])
    if final:
        return lin
    if training:
        z = batch_norm_train(lin, gamma, beta, eps)
    else:
        z = batch_norm_eval(lin, gamma, beta, running[0], running[1], eps)
    return np.tanh(z)


def apply_transform(z, f):
    t, m, d = f.shape
    ms = z.shape[1]
    out = np.zeros((t, ms, d))
    for i in range(t):
        for p in range(ms):
            for j in range(m):
                out[i, p] += z[j, p] * f[i, j]
    return out


def clmp(h_s, zbar, a, theta=None):
    """``out[i, j] = sum_{p, q} zbar[j, p] a[p, q] h_s[i, q] (@ theta)`` for one sample."""
    t, ms, ds = h_s.shape
    m = zbar.shape[0]
    out = np.zeros((t, m, ds))
    for i in range(t):
        for j in range(m):
            for p in range(ms):
                for q in range(ms):
                    out[i, j] += zbar[j, p] * a[p, q] * h_s[i, q]
    if theta is not None:
        out = out @ theta
    return out


def per_frame_gcn(h, blocks, theta, bias, activation=np.tanh):
    """Independent spatial graph convolutions, one per frame.

    ``blocks[i]`` is frame ``i``'s normalised ``M x M`` adjacency; the node's
    own representation enters through the identity, i.e. each frame computes
    ``activation(((A_i + I) H_i) Theta^T + b)`` on its own.
    """
    out = []
    for i in range(h.shape[0]):
        a = blocks[i] + np.eye(blocks[i].shape[0])
        out.append(activation((a @ h[i]) @ theta.T + bias))
    return np.stack(out)


def per_joint_temporal_gcn(h, trajectories, theta, bias, activation=np.tanh):
    """Independent temporal graph convolutions, one per joint over its trajectory."""
    t, m, _ = h.shape
    out = np.zeros((t, m, bias.shape[0]))
    for j in range(m):
        a = trajectories[j] + np.eye(t)
        out[:, j] = activation((a @ h[:, j]) @ theta.T + bias)
    return out


def mpjpe(pred, gt):
    n, t, m, _ = pred.shape
    total = 0.0
    for a in range(n):
        for i in range(t):
            for j in range(m):
                total += math.sqrt(sum((gt[a, i, j] - pred[a, i, j]) ** 2))
    return total / (n * t * m)


def adam_trajectory(grad_fn, x0, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam written out from the textbook update; returns every iterate."""
    x, m, v = x0, 0.0, 0.0
    xs = [x]
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        xs.append(x)
    return xs


def pad_history(x, n_frames):
    t_h = x.shape[-3]
    reps = [x[..., -1:, :, :]] * (n_frames - t_h)
    return np.concatenate([x] + reps, axis=-3)


def _slmp_params(mod):
    g = lambda t: t.detach().numpy()
    final = mod.bn is None
    return dict(
        weights=g(mod.adjacency), degree=mod.degree.numpy(), theta=g(mod.update.theta),
        bias=g(mod.update.bias),
        gamma=None if final else g(mod.bn.weight), beta=None if final else g(mod.bn.bias),
        eps=None if final else mod.bn.eps, phi_mode=mod.phi_mode, d_out=mod.d_out,
        final=final,
    )


def _run_slmp(mod, h, training):
    p = _slmp_params(mod)
    running = None
    if not p["final"] and not training:
        running = (mod.bn.running_mean.numpy(), mod.bn.running_var.numpy())
    return slmp(h, training=training, running=running, **p)


def ddgc_block(block, hs, training=True, extra=None):
    """One block at node level: SLMP per level, then level-0 fusion of cross-level messages."""
    outs = [_run_slmp(s, h, training) for s, h in zip(block.slmps, hs)]
    if extra:
        for level, add in extra.items():
            outs[level] = outs[level] + add
    fused = outs[0].copy()
    for c, h_s in zip(block.clmps, outs[1:]):
        theta = None if c.theta is None else c.theta.detach().numpy()
        fused += np.stack([clmp(x, c.zbar.numpy(), c.a.detach().numpy(), theta) for x in h_s])
    return [fused] + outs[1:]


def model_forward(model, x, training=False):
    """The whole network assembled from the loop references above (dropout inactive)."""
    cfg = model.cfg
    padded = pad_history(x, cfg.n_frames)
    levels = [padded] + [np.stack([apply_transform(z.detach().numpy(), f) for f in padded])
                         for z in model.transforms]
    hs = [_run_slmp(enc, f, training) for enc, f in zip(model.encoders, levels)]
    coarsest = len(hs) - 1
    skip = _run_slmp(model.skip, hs[coarsest], training)
    for k, block in enumerate(model.blocks):
        extra = {coarsest: skip} if k == len(model.blocks) - 1 else None
        hs = ddgc_block(block, hs, training, extra)
    return _run_slmp(model.decoder, hs[0], training) + padded
