"""Compiled per-sample gradient descent epochs for the learned gates.

These mirror ``LearnedGate.gradients`` exactly; the numpy path stays the
reference and the test suite checks that the two agree.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def sgd_epoch_mlp(W1, b1, W2, b2, X, Y, order, lr):
    hidden = W1.shape[0]
    n_in = W1.shape[1]
    n_out = W2.shape[0]
    pre = np.empty(hidden)
    h = np.empty(hidden)
    g_out = np.empty(n_out)
    g_pre = np.empty(hidden)
    for idx in order:
        x = X[idx]
        for j in range(hidden):
            s = b1[j]
            for i in range(n_in):
                s += W1[j, i] * x[i]
            pre[j] = s
            h[j] = s if s > 0.0 else 0.0
        for o in range(n_out):
            s = b2[o]
            for j in range(hidden):
                s += W2[o, j] * h[j]
            d = s - Y[idx, o]
            if d > 0.0:
                g_out[o] = 1.0 / n_out
            elif d < 0.0:
                g_out[o] = -1.0 / n_out
            else:
                g_out[o] = 0.0
        for j in range(hidden):
            if pre[j] > 0.0:
                s = 0.0
                for o in range(n_out):
                    s += W2[o, j] * g_out[o]
                g_pre[j] = s
            else:
                g_pre[j] = 0.0
        for o in range(n_out):
            for j in range(hidden):
                W2[o, j] -= lr * g_out[o] * h[j]
            b2[o] -= lr * g_out[o]
        for j in range(hidden):
            if g_pre[j] != 0.0:
                for i in range(n_in):
                    W1[j, i] -= lr * g_pre[j] * x[i]
                b1[j] -= lr * g_pre[j]


@njit(cache=True)
def sgd_epoch_attention(W1, b1, W2, b2, att, X, Y, order, lr, n_blocks, block_dim):
    hidden = W1.shape[0]
    n_z = W1.shape[1]
    n_out = W2.shape[0]
    n_in = X.shape[1]
    z = np.empty(n_z)
    pre = np.empty(hidden)
    h = np.empty(hidden)
    g_out = np.empty(n_out)
    g_pre = np.empty(hidden)
    scores = np.empty(n_blocks)
    a = np.empty(n_blocks)
    g_pooled = np.empty(block_dim)
    g_a = np.empty(n_blocks)
    g_att = np.empty(block_dim)
    for idx in order:
        x = X[idx]
        smax = -np.inf
        for m in range(n_blocks):
            s = 0.0
            for k in range(block_dim):
                s += x[m * block_dim + k] * att[k]
            scores[m] = s
            if s > smax:
                smax = s
        tot = 0.0
        for m in range(n_blocks):
            a[m] = np.exp(scores[m] - smax)
            tot += a[m]
        for m in range(n_blocks):
            a[m] /= tot
        for k in range(block_dim):
            s = 0.0
            for m in range(n_blocks):
                s += a[m] * x[m * block_dim + k]
            z[k] = s
        for i in range(n_in):
            z[block_dim + i] = x[i]
        for j in range(hidden):
            s = b1[j]
            for i in range(n_z):
                s += W1[j, i] * z[i]
            pre[j] = s
            h[j] = s if s > 0.0 else 0.0
        for o in range(n_out):
            s = b2[o]
            for j in range(hidden):
                s += W2[o, j] * h[j]
            d = s - Y[idx, o]
            if d > 0.0:
                g_out[o] = 1.0 / n_out
            elif d < 0.0:
                g_out[o] = -1.0 / n_out
            else:
                g_out[o] = 0.0
        for j in range(hidden):
            if pre[j] > 0.0:
                s = 0.0
                for o in range(n_out):
                    s += W2[o, j] * g_out[o]
                g_pre[j] = s
            else:
                g_pre[j] = 0.0
        for k in range(block_dim):
            s = 0.0
            for j in range(hidden):
                s += W1[j, k] * g_pre[j]
            g_pooled[k] = s
        ga_mean = 0.0
        for m in range(n_blocks):
            s = 0.0
            for k in range(block_dim):
                s += x[m * block_dim + k] * g_pooled[k]
            g_a[m] = s
            ga_mean += a[m] * s
        for k in range(block_dim):
            g_att[k] = 0.0
        for m in range(n_blocks):
            gs = a[m] * (g_a[m] - ga_mean)
            for k in range(block_dim):
                g_att[k] += gs * x[m * block_dim + k]
        for o in range(n_out):
            for j in range(hidden):
                W2[o, j] -= lr * g_out[o] * h[j]
            b2[o] -= lr * g_out[o]
        for j in range(hidden):
            if g_pre[j] != 0.0:
                for i in range(n_z):
                    W1[j, i] -= lr * g_pre[j] * z[i]
                b1[j] -= lr * g_pre[j]
        for k in range(block_dim):
            att[k] -= lr * g_att[k]
