"""Robust contrastive loss mathematics.

For an anchor with hardness scores h over its m negatives, the per-anchor
loss in its dual form is

    L(h, tau) = tau * log( mean_j exp(h_j / tau) ) + (tau - tau0) * rho,

minimized over tau in [tau0, tau_max].  The worst-case weights over the
KL ball are the softmax p*_j = exp(h_j/tau) / sum_k exp(h_k/tau).  The
full objective averages the per-anchor dual losses, each with its own
learnable temperature.

This module also provides the exact full-batch gradients of the objective
with respect to encoder parameters and temperatures, computed analytically
through the hardness scores and the encoder backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import EmbeddingBatch, EncoderParams, encode, encode_backward
from .numerics import log_sum_exp, softmax_shifted

__all__ = [
    "HARDNESS_BOUND",
    "RgclConfig",
    "HardnessVector",
    "DistributionalWeights",
    "ViewPairs",
    "hardness_scores",
    "g_value",
    "dual_loss_anchor",
    "p_star",
    "primal_rgcl_value",
    "kl_uniform",
    "exact_grad_tau",
    "pair_weights_for_w_grad",
    "objective_unimodal",
    "objective_bimodal",
    "unimodal_value_and_grads",
    "bimodal_value_and_grads",
]

# h is a difference of two inner products of unit vectors, so |h| <= 2.
HARDNESS_BOUND = 2.0


@dataclass
class RgclConfig:
    """Loss and optimizer hyperparameters with their derived bounds.

    tau_max = tau0 + C/rho bounds the optimal temperature, and
    g_floor = exp(-C/tau_max) is the claimed lower bound on g over full
    negative sets.  Both are properties so they track rho and tau0.

    tau_grad_scale multiplies the temperature gradient estimator; None
    means "use the dataset size n", which cancels the 1/n factor in the
    estimator and makes the temperature step size independent of n.
    """

    rho: float = 0.3
    tau0: float = 0.05
    tau_init: float = 0.7
    beta0: float = 0.9
    beta1: float = 0.9
    eta_w: float = 0.1
    eta_tau: float = 0.1
    tau_grad_scale: float | None = None
    log_epsilon: float = 0.0

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        if not (0 < self.beta0 <= 1 and 0 < self.beta1 <= 1):
            raise ValueError("beta0 and beta1 must lie in (0, 1]")
        if self.eta_w < 0 or self.eta_tau < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.log_epsilon < 0:
            raise ValueError("log_epsilon must be nonnegative")
        if not (self.tau0 <= self.tau_init <= self.tau_max):
            raise ValueError("need tau0 <= tau_init <= tau_max")

    @property
    def hardness_bound(self) -> float:
        return HARDNESS_BOUND

    @property
    def tau_max(self) -> float:
        return self.tau0 + HARDNESS_BOUND / self.rho

    @property
    def g_floor(self) -> float:
        return math.exp(-HARDNESS_BOUND / self.tau_max)

    def resolved_tau_grad_scale(self, n: int) -> float:
        return float(n) if self.tau_grad_scale is None else float(self.tau_grad_scale)


@dataclass
class HardnessVector:
    """Hardness scores of one anchor's negatives."""

    values: np.ndarray
    anchor_index: int = -1
    bound: float = HARDNESS_BOUND

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class DistributionalWeights:
    """A point on the simplex over an anchor's negatives."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-10:
            raise ValueError("weights must lie on the simplex")
        self.p = p


@dataclass
class ViewPairs:
    """Fixed augmented views of a dataset: row i of views_a is the anchor
    view of sample i and row i of views_b is its positive view.  The
    negative set of anchor i is both views of every other sample."""

    views_a: np.ndarray  # (n, d_in)
    views_b: np.ndarray  # (n, d_in)

    def __post_init__(self):
        if self.views_a.shape != self.views_b.shape:
            raise ValueError("view matrices must have identical shape")

    @property
    def n(self) -> int:
        return self.views_a.shape[0]


def _h_array(h) -> np.ndarray:
    if isinstance(h, HardnessVector):
        return np.asarray(h.values, dtype=np.float64)
    return np.asarray(h, dtype=np.float64)


def hardness_scores(anchor, positive, negatives, anchor_index: int = -1) -> HardnessVector:
    """h_j = anchor.neg_j - anchor.positive for every negative."""
    if isinstance(negatives, EmbeddingBatch):
        neg = negatives.embeddings
    else:
        neg = np.asarray(negatives, dtype=np.float64)
    if neg.size == 0:
        raise ValueError("no negatives")
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    h = neg @ anchor - float(anchor @ positive)
    return HardnessVector(h, anchor_index)


def g_value(h, tau: float, log_epsilon: float = 0.0) -> float:
    """Mean of exp(h_j / tau), plus the optional smoothing constant."""
    v = _h_array(h)
    return float(np.mean(np.exp(v / tau))) + log_epsilon


def dual_loss_anchor(h, tau: float, cfg: RgclConfig) -> float:
    """tau * log g(h, tau) + (tau - tau0) * rho, via log-sum-exp."""
    v = _h_array(h)
    lme = log_sum_exp(v / tau) - math.log(len(v))
    if cfg.log_epsilon > 0.0:
        log_g = np.logaddexp(lme, math.log(cfg.log_epsilon))
    else:
        log_g = lme
    return tau * float(log_g) + (tau - cfg.tau0) * cfg.rho


def p_star(h, tau: float) -> DistributionalWeights:
    """Closed-form worst-case weights: softmax of h / tau."""
    return DistributionalWeights(softmax_shifted(_h_array(h) / tau))


def kl_uniform(p) -> float:
    """KL(p, uniform) = sum p_j log(m p_j), with 0 log 0 = 0."""
    pv = p.p if isinstance(p, DistributionalWeights) else np.asarray(p, dtype=np.float64)
    m = len(pv)
    nz = pv > 0.0
    return float(np.sum(pv[nz] * np.log(m * pv[nz])))


def primal_rgcl_value(h, p, tau0: float) -> float:
    """sum p_j h_j - tau0 * KL(p, uniform)."""
    v = _h_array(h)
    pv = p.p if isinstance(p, DistributionalWeights) else np.asarray(p, dtype=np.float64)
    if len(pv) != len(v):
        raise ValueError("dimension mismatch")
    return float(pv @ v) - tau0 * kl_uniform(pv)


def exact_grad_tau(h, tau: float, rho: float, n: int, log_epsilon: float = 0.0) -> float:
    """(1/n) [ tau * dg/dtau / g + log g + rho ] for a full negative set.

    dg/dtau = mean(exp(h_j/tau) * (-h_j / tau^2)); evaluated through the
    shifted softmax so it stays finite for tau down to the floor.
    """
    v = _h_array(h)
    lme = log_sum_exp(v / tau) - math.log(len(v))
    p = softmax_shifted(v / tau)
    mean_exp = math.exp(lme)
    g = mean_exp + log_epsilon
    # tau * dg/dtau / g = -(mean_exp / g) * E_p[h] / tau
    term = -(mean_exp / g) * float(p @ v) / tau
    log_g = math.log(g)
    return (term + log_g + rho) / n


def pair_weights_for_w_grad(h, tau: float, g_or_s: float, n: int) -> np.ndarray:
    """Per-negative weights exp(h_j/tau) / (m * g_or_s * n).

    Contracted so that the anchor's contribution to the parameter gradient
    is sum_j weight_j * grad_w h_j.
    """
    if g_or_s <= 0:
        raise ValueError("g_or_s must be positive")
    v = _h_array(h)
    m = len(v)
    return np.exp(v / tau) / (m * g_or_s * n)


def _anchor_h_rows(ya: np.ndarray, yb: np.ndarray):
    """Hardness rows for every anchor over the full negative sets.

    Anchor i is row i of ya, its positive is row i of yb, and its
    negatives are both views of every other sample (m = 2(n-1)).
    Returns (H, pos) where H is (n, 2(n-1)).
    """
    n = ya.shape[0]
    saa = ya @ ya.T
    sab = ya @ yb.T
    pos = np.diag(sab).copy()
    off = ~np.eye(n, dtype=bool)
    ha = saa[off].reshape(n, n - 1)
    hb = sab[off].reshape(n, n - 1)
    return np.concatenate([ha, hb], axis=1) - pos[:, None], pos


def objective_unimodal(params: EncoderParams, views: ViewPairs, taus, cfg: RgclConfig) -> float:
    """Exact full-batch objective: mean over anchors of the dual loss."""
    n = views.n
    if n < 2:
        raise ValueError("need at least 2 samples")
    taus = np.asarray(taus, dtype=np.float64)
    ya = encode(params, views.views_a).embeddings
    yb = encode(params, views.views_b).embeddings
    hmat, _ = _anchor_h_rows(ya, yb)
    total = 0.0
    for i in range(n):
        total += dual_loss_anchor(hmat[i], taus[i], cfg)
    return total / n


def unimodal_value_and_grads(params: EncoderParams, views: ViewPairs, taus, cfg: RgclConfig):
    """Objective value plus exact gradients w.r.t. the flattened encoder
    parameters and the temperature vector.  Vectorized over anchors."""
    n = views.n
    if n < 2:
        raise ValueError("need at least 2 samples")
    taus = np.asarray(taus, dtype=np.float64)
    ya = encode(params, views.views_a).embeddings
    yb = encode(params, views.views_b).embeddings
    hmat, _ = _anchor_h_rows(ya, yb)
    m = 2 * (n - 1)
    eps = cfg.log_epsilon

    hz = hmat / taus[:, None]
    shift = hz.max(axis=1, keepdims=True)
    ez = np.exp(hz - shift)
    sez = ez.sum(axis=1)
    lme = (shift[:, 0] + np.log(sez)) - math.log(m)  # log mean exp per anchor
    mean_exp = np.exp(lme)
    g = mean_exp + eps
    log_g = np.log(g)

    value = float(np.mean(taus * log_g + (taus - cfg.tau0) * cfg.rho))

    p = ez / sez[:, None]  # softmax rows
    eph = np.sum(p * hmat, axis=1)
    grad_tau = (-(mean_exp / g) * eph / taus + log_g + cfg.rho) / n

    # weights_ij = exp(h_ij/tau_i) / (m * g_i * n), split back into the
    # a-view and b-view negative blocks
    w = p * (mean_exp / g)[:, None] / n
    wa = np.zeros((n, n))
    wb = np.zeros((n, n))
    off = ~np.eye(n, dtype=bool)
    wa[off] = w[:, : n - 1].ravel()
    wb[off] = w[:, n - 1 :].ravel()

    row_a = wa.sum(axis=1)
    row_b = wb.sum(axis=1)
    rs = row_a + row_b
    # anchor role: dL/d ya_i += sum_j w_ij (neg_j - pos_i)
    dya = wa @ ya + wb @ yb - rs[:, None] * yb
    # negative role of the a-views
    dya += wa.T @ ya
    # positive role and negative role of the b-views
    dyb = -rs[:, None] * ya + wb.T @ ya

    ga = encode_backward(params, views.views_a, dya)
    gb = encode_backward(params, views.views_b, dyb)
    grad_w = ga.flatten() + gb.flatten()
    return value, grad_w, grad_tau


def _bimodal_h_rows(x_emb: np.ndarray, t_emb: np.ndarray):
    """Hardness rows for both directions of the bimodal loss.

    hx[i, .] ranges over negative texts (m = n-1), ht[i, .] over negative
    images.  pos_i = x_i . t_i.
    """
    n = x_emb.shape[0]
    # both directions are computed by the same code path so that mirrored
    # modalities (x_emb identical to t_emb) give bitwise-identical rows
    sx = x_emb @ t_emb.T
    st = t_emb @ x_emb.T
    pos = np.diag(sx).copy()
    off = ~np.eye(n, dtype=bool)
    hx = sx[off].reshape(n, n - 1) - pos[:, None]
    ht = st[off].reshape(n, n - 1) - np.diag(st)[:, None]
    return hx, ht, pos


def objective_bimodal(
    params_img: EncoderParams,
    params_txt: EncoderParams,
    images: np.ndarray,
    texts: np.ndarray,
    taus_v,
    taus_t,
    cfg: RgclConfig,
) -> float:
    """Exact two-way full-batch objective over n image-text pairs."""
    n = images.shape[0]
    if n < 2:
        raise ValueError("need at least 2 pairs")
    taus_v = np.asarray(taus_v, dtype=np.float64)
    taus_t = np.asarray(taus_t, dtype=np.float64)
    x_emb = encode(params_img, images).embeddings
    t_emb = encode(params_txt, texts).embeddings
    hx, ht, _ = _bimodal_h_rows(x_emb, t_emb)
    total = 0.0
    for i in range(n):
        total += dual_loss_anchor(hx[i], taus_v[i], cfg)
        total += dual_loss_anchor(ht[i], taus_t[i], cfg)
    return total / n


def _direction_grads(hmat, taus, cfg, n):
    """Shared per-direction weight computation: softmax-style weights and
    the temperature gradient, for hardness rows over m negatives."""
    m = hmat.shape[1]
    eps = cfg.log_epsilon
    hz = hmat / taus[:, None]
    shift = hz.max(axis=1, keepdims=True)
    ez = np.exp(hz - shift)
    sez = ez.sum(axis=1)
    lme = (shift[:, 0] + np.log(sez)) - math.log(m)
    mean_exp = np.exp(lme)
    g = mean_exp + eps
    log_g = np.log(g)
    p = ez / sez[:, None]
    eph = np.sum(p * hmat, axis=1)
    grad_tau = (-(mean_exp / g) * eph / taus + log_g + cfg.rho) / n
    weights = p * (mean_exp / g)[:, None] / n
    value_terms = taus * log_g + (taus - cfg.tau0) * cfg.rho
    return weights, grad_tau, value_terms


def bimodal_value_and_grads(
    params_img: EncoderParams,
    params_txt: EncoderParams,
    images: np.ndarray,
    texts: np.ndarray,
    taus_v,
    taus_t,
    cfg: RgclConfig,
):
    """Objective value and exact gradients for the bimodal objective.

    Returns (value, grad_w_img_flat, grad_w_txt_flat, grad_tau_v, grad_tau_t).
    """
    n = images.shape[0]
    if n < 2:
        raise ValueError("need at least 2 pairs")
    taus_v = np.asarray(taus_v, dtype=np.float64)
    taus_t = np.asarray(taus_t, dtype=np.float64)
    x_emb = encode(params_img, images).embeddings
    t_emb = encode(params_txt, texts).embeddings
    hx, ht, _ = _bimodal_h_rows(x_emb, t_emb)

    wv, grad_tau_v, terms_v = _direction_grads(hx, taus_v, cfg, n)
    wt, grad_tau_t, terms_t = _direction_grads(ht, taus_t, cfg, n)
    value = float(np.mean(terms_v + terms_t))

    off = ~np.eye(n, dtype=bool)
    wvm = np.zeros((n, n))
    wtm = np.zeros((n, n))
    wvm[off] = wv.ravel()
    wtm[off] = wt.ravel()
    rv = wvm.sum(axis=1)
    rt = wtm.sum(axis=1)

    # anchor-role term first, negative/positive-role term second, in the
    # same order for both towers so mirrored inputs stay bitwise symmetric
    dx = (wvm @ t_emb - rv[:, None] * t_emb) + (wtm.T @ t_emb - rt[:, None] * t_emb)
    dt = (wtm @ x_emb - rt[:, None] * x_emb) + (wvm.T @ x_emb - rv[:, None] * x_emb)

    gx = encode_backward(params_img, images, dx).flatten()
    gt = encode_backward(params_txt, texts, dt).flatten()
    return value, gx, gt, grad_tau_v, grad_tau_t
