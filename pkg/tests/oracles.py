"""Brute-force reference computations used by the tests."""
import itertools

import numpy as np

from tsge.model import MultibandConfig


def exhaustive_bg_posterior(y, phis, p_s, sigma_x_sq, noise_var):
    """Exact posterior under a common-support Bernoulli-Gaussian prior.

    Enumerates all 2^L supports. Given a support s, each subband gain vector is
    CN(0, diag(s * sigma_x_sq[m])) and y_m ~ CN(0, Phi_m D Phi_m^H + noise I).

    Returns
    -------
    means : (M, L) complex
    support : (L,) marginal support probabilities
    """
    M = len(y)
    L = phis[0].shape[1]
    sigma_x_sq = np.broadcast_to(np.asarray(sigma_x_sq, float), (M, L))
    logw, cond_means, supports = [], [], []
    for s in itertools.product((0, 1), repeat=L):
        s = np.array(s)
        lw = np.sum(s * np.log(p_s) + (1 - s) * np.log(1 - p_s))
        means = np.zeros((M, L), complex)
        for m in range(M):
            D = np.diag(s * sigma_x_sq[m])
            C = phis[m] @ D @ phis[m].conj().T + noise_var * np.eye(len(y[m]))
            sign, logdet = np.linalg.slogdet(C)
            sol = np.linalg.solve(C, y[m])
            lw += -logdet - np.real(np.vdot(y[m], sol)) - len(y[m]) * np.log(np.pi)
            means[m] = D @ phis[m].conj().T @ sol
        logw.append(lw)
        cond_means.append(means)
        supports.append(s)
    logw = np.array(logw)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = np.tensordot(w, np.array(cond_means), axes=1)
    support = w @ np.array(supports)
    return mean, support


def dft_config(n, fs=1.0):
    """Single- or multi-band toy plan whose 1/(n fs) delay grid gives orthogonal columns."""
    return MultibandConfig((100.0, 200.0), (fs, fs), (n, n), allow_overlap=True)


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2.0 * h)
