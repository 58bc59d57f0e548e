"""Compiled inner loops of the LSTM recurrence.

Only the sequential part lives here; the time-parallel matmuls stay in
NumPy. Gate layout matches :data:`meteocast.layers.GATE_ORDER`.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def lstm_recurrence(zx, Wh, gates, c, h, tanh_c):
    """Fill ``gates``/``c``/``h``/``tanh_c`` given input projections ``zx`` [B, T, 4H]."""
    B, T, G = zx.shape
    H = G // 4
    for b in range(B):
        for t in range(T):
            for j in range(G):
                acc = zx[b, t, j]
                for k in range(H):
                    acc += h[b, t, k] * Wh[k, j]
                if j < 2 * H or j >= 3 * H:
                    if acc >= 0:
                        acc = 1.0 / (1.0 + math.exp(-acc))
                    else:
                        e = math.exp(acc)
                        acc = e / (1.0 + e)
                else:
                    acc = math.tanh(acc)
                gates[b, t, j] = acc
            for k in range(H):
                ct = gates[b, t, H + k] * c[b, t, k] + gates[b, t, k] * gates[b, t, 2 * H + k]
                c[b, t + 1, k] = ct
                tc = math.tanh(ct)
                tanh_c[b, t, k] = tc
                h[b, t + 1, k] = gates[b, t, 3 * H + k] * tc


@njit(cache=True)
def lstm_recurrence_backward(dh_all, Wh, gates, c, tanh_c, dz):
    """Fill ``dz`` [B, T, 4H], the gradient w.r.t. the gate pre-activations."""
    B, T, G = gates.shape
    H = G // 4
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for b in range(B):
        dh_next[:] = 0.0
        dc_next[:] = 0.0
        for t in range(T - 1, -1, -1):
            for k in range(H):
                i = gates[b, t, k]
                f = gates[b, t, H + k]
                g = gates[b, t, 2 * H + k]
                o = gates[b, t, 3 * H + k]
                tc = tanh_c[b, t, k]
                dh = dh_all[b, t, k] + dh_next[k]
                dc = dh * o * (1.0 - tc * tc) + dc_next[k]
                dz[b, t, k] = dc * g * i * (1.0 - i)
                dz[b, t, H + k] = dc * c[b, t, k] * f * (1.0 - f)
                dz[b, t, 2 * H + k] = dc * i * (1.0 - g * g)
                dz[b, t, 3 * H + k] = dh * tc * o * (1.0 - o)
                dc_next[k] = dc * f
            for k in range(H):
                acc = 0.0
                for j in range(G):
                    acc += dz[b, t, j] * Wh[k, j]
                dh_next[k] = acc
