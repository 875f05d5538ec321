"""Stochastic training loop with individualized temperatures.

Each anchor i keeps a scalar s_i, a moving average of mini-batch estimates
of g_i = mean_j exp(h_ij / tau_i), plus a momentum buffer u_i and its own
temperature tau_i.  Every step:

    g      <- batch estimate of g_i over the batch negatives
    s      <- (1 - beta0) s + beta0 g            (first touch: s <- g)
    G(tau) <- (1/n)[tau dg/dtau / s + log s + rho] * tau_grad_scale
    u      <- (1 - beta1) u + beta1 G(tau)
    tau    <- clamp(tau - eta_tau u, [tau0, tau_max])
    G(w)   <- (1/B) sum_i (tau_i / s_i) grad_w g_i(batch)
    v      <- (1 - beta1) v + beta1 G(w)
    w      <- w - eta_w v

With a full batch and beta0 = beta1 = 1 this degenerates to exact gradient
descent on the objective.  The fixed-temperature baseline mode runs the
same step with eta_tau forced to 0.  Parameter updates optionally use an
Adam-style rule instead of momentum; temperatures always use momentum.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode, encode_backward
from .loss import RgclConfig, _anchor_h_rows, _bimodal_h_rows
from .numerics import RandomStream

__all__ = [
    "AnchorState",
    "BimodalAnchorState",
    "OptimizerState",
    "BimodalOptimizerState",
    "init_optimizer_state",
    "init_bimodal_optimizer_state",
    "sample_batch",
    "update_s",
    "grad_tau_estimator",
    "grad_w_estimator",
    "project_tau",
    "step_unimodal",
    "step_bimodal",
    "step_sogclr_baseline",
    "save_optimizer_state",
    "load_optimizer_state",
]

_MODES = ("momentum", "adam", "sogclr-baseline")
# Adam-style parameter update (temperatures always use momentum).
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_MAGIC_UNI = b"RGCLOPT1"
_MAGIC_BI = b"RGCLOPB1"


@dataclass
class AnchorState:
    """Per-anchor scalar state: moving average s, momentum u, temperature."""

    s: float
    u: float
    tau: float
    initialized: bool


@dataclass
class BimodalAnchorState:
    """Per-pair state for both directions (image anchor, text anchor)."""

    s_v: float
    u_v: float
    tau_v: float
    s_t: float
    u_t: float
    tau_t: float
    initialized: bool


@dataclass
class OptimizerState:
    """Whole-run optimizer state: per-anchor arrays plus parameter momentum.

    Arrays are indexed by dataset index.  min_g_seen / min_s_seen track the
    smallest batch estimate and moving average ever produced, for checking
    the lower bound on g.
    """

    mode: str
    seed: int
    t: int
    s: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    initialized: np.ndarray  # bool per anchor
    v: np.ndarray  # parameter momentum, flat
    adam_m2: np.ndarray | None = None
    min_g_seen: float = math.inf
    min_s_seen: float = math.inf
    min_tau_seen: float = math.inf
    max_tau_seen: float = -math.inf
    # test hook: disables the temperature clamp so the bound check can be
    # demonstrated to catch violations
    _disable_tau_projection: bool = field(default=False, repr=False)

    @property
    def n(self) -> int:
        return self.s.shape[0]

    def anchor_state(self, i: int) -> AnchorState:
        return AnchorState(
            float(self.s[i]), float(self.u[i]), float(self.tau[i]), bool(self.initialized[i])
        )


@dataclass
class BimodalOptimizerState:
    mode: str
    seed: int
    t: int
    s_v: np.ndarray
    u_v: np.ndarray
    tau_v: np.ndarray
    s_t: np.ndarray
    u_t: np.ndarray
    tau_t: np.ndarray
    initialized: np.ndarray
    v: np.ndarray  # momentum over concat(img params, txt params)
    adam_m2: np.ndarray | None = None
    min_g_seen: float = math.inf
    min_s_seen: float = math.inf
    min_tau_seen: float = math.inf
    max_tau_seen: float = -math.inf
    _disable_tau_projection: bool = field(default=False, repr=False)

    @property
    def n(self) -> int:
        return self.s_v.shape[0]

    def anchor_state(self, i: int) -> BimodalAnchorState:
        return BimodalAnchorState(
            float(self.s_v[i]),
            float(self.u_v[i]),
            float(self.tau_v[i]),
            float(self.s_t[i]),
            float(self.u_t[i]),
            float(self.tau_t[i]),
            bool(self.initialized[i]),
        )


def init_optimizer_state(
    n: int, n_params: int, cfg: RgclConfig, seed: int, mode: str = "momentum"
) -> OptimizerState:
    if mode not in _MODES:
        raise ValueError("unknown mode %r" % mode)
    return OptimizerState(
        mode=mode,
        seed=int(seed),
        t=0,
        s=np.ones(n),
        u=np.zeros(n),
        tau=np.full(n, cfg.tau_init),
        initialized=np.zeros(n, dtype=bool),
        v=np.zeros(n_params),
        adam_m2=np.zeros(n_params) if mode == "adam" else None,
    )


def init_bimodal_optimizer_state(
    n: int, n_params_img: int, n_params_txt: int, cfg: RgclConfig, seed: int, mode: str = "momentum"
) -> BimodalOptimizerState:
    if mode not in _MODES:
        raise ValueError("unknown mode %r" % mode)
    total = n_params_img + n_params_txt
    return BimodalOptimizerState(
        mode=mode,
        seed=int(seed),
        t=0,
        s_v=np.ones(n),
        u_v=np.zeros(n),
        tau_v=np.full(n, cfg.tau_init),
        s_t=np.ones(n),
        u_t=np.zeros(n),
        tau_t=np.full(n, cfg.tau_init),
        initialized=np.zeros(n, dtype=bool),
        v=np.zeros(total),
        adam_m2=np.zeros(total) if mode == "adam" else None,
    )


def sample_batch(stream: RandomStream, n: int, batch_size: int, d_in: int):
    """Distinct batch indices plus two standard-normal augmentation draws
    per index (scaled by the caller's augmentation strength)."""
    if not (2 <= batch_size <= n):
        raise ValueError("need 2 <= batch_size <= n")
    indices = np.sort(stream.split("indices").choice_without_replacement(n, batch_size))
    noise_a = stream.split("aug-a").normal(batch_size, d_in)
    noise_b = stream.split("aug-b").normal(batch_size, d_in)
    return indices, noise_a, noise_b


def update_s(state: AnchorState, g_batch: float, beta0: float) -> float:
    """Moving-average update (1 - beta0) s + beta0 g; the first update of an
    anchor uses beta0 = 1 so no arbitrary initial value leaks in."""
    if g_batch <= 0:
        raise ValueError("g_batch must be positive")
    if not state.initialized:
        return float(g_batch)
    return float((1.0 - beta0) * state.s + beta0 * g_batch)


def _batch_g_terms(hmat: np.ndarray, taus: np.ndarray, log_epsilon: float):
    """Shared per-row quantities: batch g, softmax rows, E_p[h], log-mean-exp
    kept shift-stable for temperatures down to the floor."""
    m = hmat.shape[1]
    hz = hmat / taus[:, None]
    shift = hz.max(axis=1, keepdims=True)
    ez = np.exp(hz - shift)
    sez = ez.sum(axis=1)
    lme = (shift[:, 0] + np.log(sez)) - math.log(m)
    mean_exp = np.exp(lme)
    g = mean_exp + log_epsilon
    p = ez / sez[:, None]
    eph = np.sum(p * hmat, axis=1)
    return g, mean_exp, p, eph


def grad_tau_estimator(
    state: AnchorState, h_batch, rho: float, n: int, tau_grad_scale: float, log_epsilon: float = 0.0
) -> float:
    """(1/n)[tau dg/dtau / s + log s + rho] * tau_grad_scale with dg/dtau
    taken on the batch negatives and s from the moving average."""
    if not state.initialized:
        raise ValueError("anchor state not initialized")
    if state.s <= 0:
        raise ValueError("s must be positive")
    hv = np.asarray(getattr(h_batch, "values", h_batch), dtype=np.float64)
    g, mean_exp, p, eph = _batch_g_terms(hv[None, :], np.array([state.tau]), log_epsilon)
    # tau * dg/dtau = -mean_exp * E_p[h] / tau
    term = -(float(mean_exp[0]) / state.s) * float(eph[0]) / state.tau
    return (term + math.log(state.s) + rho) / n * tau_grad_scale


def grad_w_estimator(
    params: EncoderParams,
    views_a: np.ndarray,
    views_b: np.ndarray,
    taus: np.ndarray,
    s_values: np.ndarray,
    log_epsilon: float = 0.0,
):
    """(1/B) sum_i (tau_i / s_i) grad_w g_i over the batch, as a flat vector.

    The batch negatives of anchor i are both views of every other batch
    member; the gradient flows through anchor, positive, and negative roles.
    """
    batch = views_a.shape[0]
    taus = np.asarray(taus, dtype=np.float64)
    s_values = np.asarray(s_values, dtype=np.float64)
    if taus.shape[0] != batch or s_values.shape[0] != batch:
        raise ValueError("per-anchor state length does not match the batch")
    if np.any(s_values <= 0):
        raise ValueError("s must be positive")
    ya = encode(params, views_a).embeddings
    yb = encode(params, views_b).embeddings
    hmat, _ = _anchor_h_rows(ya, yb)
    _, mean_exp, p, _ = _batch_g_terms(hmat, taus, log_epsilon)

    # pair weight exp(h_ij/tau_i) / (m * s_i * B) = p_ij * mean_exp_i / (s_i B)
    w = p * (mean_exp / s_values)[:, None] / batch
    wa = np.zeros((batch, batch))
    wb = np.zeros((batch, batch))
    off = ~np.eye(batch, dtype=bool)
    wa[off] = w[:, : batch - 1].ravel()
    wb[off] = w[:, batch - 1 :].ravel()
    row_sum = wa.sum(axis=1) + wb.sum(axis=1)

    dya = wa @ ya + wb @ yb - row_sum[:, None] * yb + wa.T @ ya
    dyb = -row_sum[:, None] * ya + wb.T @ ya
    ga = encode_backward(params, views_a, dya)
    gb = encode_backward(params, views_b, dyb)
    return ga.flatten() + gb.flatten()


def project_tau(tau: float, cfg: RgclConfig) -> float:
    """Clamp onto [tau0, tau_max]."""
    return float(min(max(tau, cfg.tau0), cfg.tau_max))


def _param_update(opt, params_flat: np.ndarray, grad: np.ndarray, cfg: RgclConfig) -> np.ndarray:
    """Momentum or Adam-style update of the flat parameter vector."""
    if opt.mode == "adam":
        opt.v = ADAM_BETA1 * opt.v + (1.0 - ADAM_BETA1) * grad
        opt.adam_m2 = ADAM_BETA2 * opt.adam_m2 + (1.0 - ADAM_BETA2) * grad * grad
        t = opt.t + 1
        m_hat = opt.v / (1.0 - ADAM_BETA1**t)
        v_hat = opt.adam_m2 / (1.0 - ADAM_BETA2**t)
        return params_flat - cfg.eta_w * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    opt.v = (1.0 - cfg.beta1) * opt.v + cfg.beta1 * grad
    return params_flat - cfg.eta_w * opt.v


def _tau_side_update(
    opt, idx, taus, s_arr, u_arr, tau_arr, g, mean_exp, eph, cfg: RgclConfig, eta_tau: float
):
    """Shared per-anchor updates for one direction: s, u, and projected tau.

    Returns the fresh s values for the batch (used by the parameter
    gradient).  Mutates the state arrays in place.
    """
    n = s_arr.shape[0]
    scale = cfg.resolved_tau_grad_scale(n)
    init = opt.initialized[idx]
    s_new = np.where(init, (1.0 - cfg.beta0) * s_arr[idx] + cfg.beta0 * g, g)
    s_arr[idx] = s_new
    opt.min_g_seen = min(opt.min_g_seen, float(np.min(g)))
    opt.min_s_seen = min(opt.min_s_seen, float(np.min(s_new)))

    grad_tau = (-(mean_exp / s_new) * eph / taus + np.log(s_new) + cfg.rho) / n * scale
    u_new = (1.0 - cfg.beta1) * u_arr[idx] + cfg.beta1 * grad_tau
    u_arr[idx] = u_new
    tau_new = taus - eta_tau * u_new
    if not opt._disable_tau_projection:
        tau_new = np.clip(tau_new, cfg.tau0, cfg.tau_max)
    tau_arr[idx] = tau_new
    opt.min_tau_seen = min(opt.min_tau_seen, float(np.min(tau_new)))
    opt.max_tau_seen = max(opt.max_tau_seen, float(np.max(tau_new)))
    return s_new


def _step_unimodal_core(
    opt: OptimizerState,
    params: EncoderParams,
    inputs: np.ndarray,
    cfg: RgclConfig,
    batch_size: int,
    aug_strength: float,
    eta_tau: float,
) -> EncoderParams:
    n = inputs.shape[0]
    step_stream = RandomStream(opt.seed, ("train", str(opt.t)))
    idx, noise_a, noise_b = sample_batch(step_stream, n, batch_size, inputs.shape[1])
    views_a = inputs[idx] + aug_strength * noise_a
    views_b = inputs[idx] + aug_strength * noise_b

    ya = encode(params, views_a).embeddings
    yb = encode(params, views_b).embeddings
    hmat, _ = _anchor_h_rows(ya, yb)
    taus = opt.tau[idx].copy()
    g, mean_exp, p, eph = _batch_g_terms(hmat, taus, cfg.log_epsilon)

    s_new = _tau_side_update(
        opt, idx, taus, opt.s, opt.u, opt.tau, g, mean_exp, eph, cfg, eta_tau
    )
    opt.initialized[idx] = True

    # parameter gradient uses the temperatures the batch was scored with
    # and the freshly updated s
    w = p * (mean_exp / s_new)[:, None] / batch_size
    wa = np.zeros((batch_size, batch_size))
    wb = np.zeros((batch_size, batch_size))
    off = ~np.eye(batch_size, dtype=bool)
    wa[off] = w[:, : batch_size - 1].ravel()
    wb[off] = w[:, batch_size - 1 :].ravel()
    row_sum = wa.sum(axis=1) + wb.sum(axis=1)
    dya = wa @ ya + wb @ yb - row_sum[:, None] * yb + wa.T @ ya
    dyb = -row_sum[:, None] * ya + wb.T @ ya
    grad_w = (
        encode_backward(params, views_a, dya).flatten()
        + encode_backward(params, views_b, dyb).flatten()
    )

    new_flat = _param_update(opt, params.flatten(), grad_w, cfg)
    opt.t += 1
    return params.from_flat(new_flat)


def step_unimodal(
    opt: OptimizerState,
    params: EncoderParams,
    inputs: np.ndarray,
    cfg: RgclConfig,
    batch_size: int,
    aug_strength: float,
) -> EncoderParams:
    """One optimizer step; returns the new parameters and mutates opt.

    Deterministic given (opt.seed, opt.t): the batch and augmentations are
    drawn from a stream keyed by the step counter, so a resumed run
    continues bit-identically.
    """
    if inputs.shape[0] < 2:
        raise ValueError("dataset must have at least 2 samples")
    return _step_unimodal_core(opt, params, inputs, cfg, batch_size, aug_strength, cfg.eta_tau)


def step_sogclr_baseline(
    opt: OptimizerState,
    params: EncoderParams,
    inputs: np.ndarray,
    cfg: RgclConfig,
    batch_size: int,
    aug_strength: float,
) -> EncoderParams:
    """Fixed-temperature baseline: the same step with the tau update
    disabled (eta_tau = 0), so every tau stays at tau_init."""
    if inputs.shape[0] < 2:
        raise ValueError("dataset must have at least 2 samples")
    return _step_unimodal_core(opt, params, inputs, cfg, batch_size, aug_strength, 0.0)


def step_bimodal(
    opt: BimodalOptimizerState,
    params_img: EncoderParams,
    params_txt: EncoderParams,
    images: np.ndarray,
    texts: np.ndarray,
    cfg: RgclConfig,
    batch_size: int,
):
    """One two-tower step over a batch of pairs; negatives of an image
    anchor are the other batch texts and vice versa (no augmentation).
    Returns (new_params_img, new_params_txt)."""
    n = images.shape[0]
    if n < 2:
        raise ValueError("dataset must have at least 2 pairs")
    step_stream = RandomStream(opt.seed, ("train", str(opt.t)))
    if not (2 <= batch_size <= n):
        raise ValueError("need 2 <= batch_size <= n")
    idx = np.sort(step_stream.split("indices").choice_without_replacement(n, batch_size))

    x_emb = encode(params_img, images[idx]).embeddings
    t_emb = encode(params_txt, texts[idx]).embeddings
    hx, ht, _ = _bimodal_h_rows(x_emb, t_emb)

    taus_v = opt.tau_v[idx].copy()
    taus_t = opt.tau_t[idx].copy()
    gv, mev, pv, ephv = _batch_g_terms(hx, taus_v, cfg.log_epsilon)
    gt_, met, pt, epht = _batch_g_terms(ht, taus_t, cfg.log_epsilon)

    sv_new = _tau_side_update(
        opt, idx, taus_v, opt.s_v, opt.u_v, opt.tau_v, gv, mev, ephv, cfg, cfg.eta_tau
    )
    st_new = _tau_side_update(
        opt, idx, taus_t, opt.s_t, opt.u_t, opt.tau_t, gt_, met, epht, cfg, cfg.eta_tau
    )
    opt.initialized[idx] = True

    wv = pv * (mev / sv_new)[:, None] / batch_size
    wt = pt * (met / st_new)[:, None] / batch_size
    off = ~np.eye(batch_size, dtype=bool)
    wvm = np.zeros((batch_size, batch_size))
    wtm = np.zeros((batch_size, batch_size))
    wvm[off] = wv.ravel()
    wtm[off] = wt.ravel()
    rv = wvm.sum(axis=1)
    rt = wtm.sum(axis=1)

    # mirror-symmetric evaluation order (see bimodal_value_and_grads)
    dx = (wvm @ t_emb - rv[:, None] * t_emb) + (wtm.T @ t_emb - rt[:, None] * t_emb)
    dt = (wtm @ x_emb - rt[:, None] * x_emb) + (wvm.T @ x_emb - rv[:, None] * x_emb)

    gx = encode_backward(params_img, images[idx], dx).flatten()
    gtx = encode_backward(params_txt, texts[idx], dt).flatten()
    grad = np.concatenate([gx, gtx])

    flat = np.concatenate([params_img.flatten(), params_txt.flatten()])
    new_flat = _param_update(opt, flat, grad, cfg)
    opt.t += 1
    n_img = params_img.n_params
    return params_img.from_flat(new_flat[:n_img]), params_txt.from_flat(new_flat[n_img:])


def save_optimizer_state(opt, path: str) -> None:
    """Binary checkpoint.  Layout: 8-byte magic, little-endian int64 header
    (mode flag, seed, step, n, len(v), adam flag), two float64 extrema, then
    the flat float64 arrays in a fixed order with initialized as uint8."""
    mode_flag = _MODES.index(opt.mode)
    bimodal = isinstance(opt, BimodalOptimizerState)
    with open(path, "wb") as fh:
        fh.write(_MAGIC_BI if bimodal else _MAGIC_UNI)
        fh.write(
            struct.pack(
                "<qqqqqq",
                mode_flag,
                opt.seed,
                opt.t,
                opt.n,
                opt.v.shape[0],
                0 if opt.adam_m2 is None else 1,
            )
        )
        fh.write(struct.pack("<dddd", opt.min_g_seen, opt.min_s_seen, opt.min_tau_seen, opt.max_tau_seen))
        fh.write(opt.v.astype("<f8").tobytes())
        if bimodal:
            for arr in (opt.s_v, opt.u_v, opt.tau_v, opt.s_t, opt.u_t, opt.tau_t):
                fh.write(arr.astype("<f8").tobytes())
        else:
            for arr in (opt.s, opt.u, opt.tau):
                fh.write(arr.astype("<f8").tobytes())
        fh.write(opt.initialized.astype(np.uint8).tobytes())
        if opt.adam_m2 is not None:
            fh.write(opt.adam_m2.astype("<f8").tobytes())


def load_optimizer_state(path: str):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic not in (_MAGIC_UNI, _MAGIC_BI):
            raise ValueError("not an optimizer checkpoint")
        mode_flag, seed, t, n, nv, has_adam = struct.unpack("<qqqqqq", fh.read(48))
        min_g, min_s, min_tau, max_tau = struct.unpack("<dddd", fh.read(32))

        def arr(count):
            return np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64)

        v = arr(nv)
        if magic == _MAGIC_BI:
            s_v, u_v, tau_v = arr(n), arr(n), arr(n)
            s_t, u_t, tau_t = arr(n), arr(n), arr(n)
        else:
            s, u, tau = arr(n), arr(n), arr(n)
        initialized = np.frombuffer(fh.read(n), dtype=np.uint8).astype(bool)
        adam_m2 = arr(nv) if has_adam else None

    if magic == _MAGIC_BI:
        return BimodalOptimizerState(
            mode=_MODES[mode_flag],
            seed=seed,
            t=t,
            s_v=s_v,
            u_v=u_v,
            tau_v=tau_v,
            s_t=s_t,
            u_t=u_t,
            tau_t=tau_t,
            initialized=initialized,
            v=v,
            adam_m2=adam_m2,
            min_g_seen=min_g,
            min_s_seen=min_s,
            min_tau_seen=min_tau,
            max_tau_seen=max_tau,
        )
    return OptimizerState(
        mode=_MODES[mode_flag],
        seed=seed,
        t=t,
        s=s,
        u=u,
        tau=tau,
        initialized=initialized,
        v=v,
        adam_m2=adam_m2,
        min_g_seen=min_g,
        min_s_seen=min_s,
        min_tau_seen=min_tau,
        max_tau_seen=max_tau,
    )
