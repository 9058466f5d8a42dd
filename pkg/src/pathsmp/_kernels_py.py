"""NumPy fallback with the same signatures as the compiled module."""
import numpy as np


def rho_apply(ker, lags, w, Z, k):
    Pk, n1, a = ker.shape[:3]
    P = Z.shape[0]
    out = np.zeros((P, n1, ker.shape[3]))
    for i in range(a):
        if w[i] == 0.0:
            continue
        lo = k + int(lags[i])
        out += w[i] * np.einsum("pnrc,pnc->pnr", ker[:, :, i], Z[:, lo:lo + n1])
    return out


def rho_star_scatter(ker, lags, w, Q, k):
    Pk, n1, a = ker.shape[:3]
    P = Q.shape[0]
    out = np.zeros((P, n1 + k, ker.shape[4]))
    for i in range(a):
        if w[i] == 0.0:
            continue
        lo = k + int(lags[i])
        out[:, lo:lo + n1] += w[i] * np.einsum("pnrc,pnr->pnc", ker[:, :, i], Q)
    return out


def rho_star_gather(ker, lags, w, Q, k):
    Pk, n1, a = ker.shape[:3]
    P = Q.shape[0]
    out = np.zeros((P, n1 + k, ker.shape[4]))
    u = np.arange(-k, n1)
    for i in range(a):
        if w[i] == 0.0:
            continue
        src = u - int(lags[i])
        ok = (src >= 0) & (src < n1)
        s = src[ok]
        out[:, ok] += w[i] * np.einsum("pnrc,pnr->pnc", ker[:, s, i], Q[:, s])
    return out
