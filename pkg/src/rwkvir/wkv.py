"""Weighted key-value attention kernels.

Each output token is a per-channel convex combination of value rows, with
weights exp(k_i - (|t-i|-1)/T * w) for i != t and exp(u + k_t) for the token
itself. Three routes compute it:

* ``bi_wkv_oracle`` - the literal quadratic double sum in 80-bit extended
  precision with per-position max-exponent subtraction; ground truth.
* ``bi_wkv_scan`` - two stabilized linear passes (one per direction) plus the
  diagonal term. Work is O(T*C); a chunked formulation keeps the Python-level
  step count near 2*sqrt(T) without changing the math.
* ``bi_wkv``/``uni_wkv``/``re_wkv`` - autodiff ops wrapping the scan. The
  backward pass is also scan-form (linear time); a quadratic reference
  backward is kept for equivalence tests.

``re_wkv`` applies the bidirectional kernel recurrently, alternating the
horizontal and vertical raster orders, each pass consuming the previous
pass's output as its values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import Tensor, accumulate, gather_rows, make_op

DEFAULT_CHUNK = 64


@dataclass
class WkvParams:
    """Per-channel decay magnitude w and current-token bonus u."""

    w: Tensor
    u: Tensor

    @property
    def channels(self) -> int:
        return self.w.data.shape[0]


@dataclass
class ScanOrder:
    """Token ordering of an H x W grid: 'h' rasters rows, 'v' rasters columns."""

    direction: str  # 'h' or 'v'
    H: int
    W: int

    def permutation(self) -> np.ndarray:
        """perm[p] = canonical (h-raster) index of the p-th token in this order."""
        if self.direction == "h":
            return np.arange(self.H * self.W)
        if self.direction == "v":
            h = np.arange(self.H)
            w = np.arange(self.W)
            return (w[:, None] + h[None, :] * self.W).reshape(-1)
        raise ShapeError(f"unknown scan direction {self.direction!r}")

    def inverse_permutation(self) -> np.ndarray:
        perm = self.permutation()
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return inv


def _exp_sub(x, m):
    # exp(x - m), where m == -inf means "empty state" and contributes zero
    with np.errstate(invalid="ignore"):
        r = np.exp(x - m)
    return np.where(np.isneginf(m), 0.0, r)


def _chunk_size(T: int, target: int) -> int:
    # python-level step count is b + T/b, so aim near sqrt(T); b must divide T
    b = min(T, max(target, 1), max(int(np.sqrt(T)), 1))
    while T % b:
        b -= 1
    return b


def _scan_causal(E, X, w_over_T, with_distance=False, chunk=DEFAULT_CHUNK):
    """Stabilized causal decayed sums over stacked streams.

    For every position t and column c:
        plain[t] = sum_{i<t} exp(E[i] - (t-1-i) * w_over_T) * X[i]
        dist[t]  = sum_{i<t} (t-1-i) * exp(...) * X[i]          (optional)

    Returns (m, plain, dist); the true sums are value * exp(m). This is the
    single-step recurrence A_{t+1} = e^{-w/T} A_t + e^{E_t} x_t regrouped
    into chunks: local prefixes run vectorized across all chunks, a short
    carry pass stitches the boundaries, and a running max exponent is carried
    throughout so nothing overflows for any finite inputs.
    """
    T, C = E.shape
    b = _chunk_size(T, chunk)
    G = T // b
    Eg = np.ascontiguousarray(E.reshape(G, b, C).transpose(1, 0, 2))
    Xg = np.ascontiguousarray(X.reshape(G, b, C).transpose(1, 0, 2))

    m = np.full((G, C), -np.inf)
    s = np.zeros((G, C))
    d = np.zeros((G, C)) if with_distance else None

    Pm = np.empty((b, G, C))
    Ps = np.empty((b, G, C))
    Pd = np.empty((b, G, C)) if with_distance else None

    for l in range(b):
        Pm[l] = m
        Ps[l] = s
        e = Eg[l]
        md = m - w_over_T
        m2 = np.maximum(md, e)
        a = np.exp(md - m2)  # md may be -inf; exp(-inf) is a clean zero
        be = np.exp(e - m2)
        if with_distance:
            Pd[l] = d
            d = a * (d + s)
        s = a * s + be * Xg[l]
        m = m2

    # carry chunk totals (anchored at local position b) across boundaries
    Bm = np.empty((G, C))
    Bs = np.empty((G, C))
    Bd = np.empty((G, C)) if with_distance else None
    cm = np.full((C,), -np.inf)
    cs = np.zeros(C)
    cd = np.zeros(C) if with_distance else None
    step = b * w_over_T
    for g in range(G):
        Bm[g] = cm
        Bs[g] = cs
        md = cm - step
        m2 = np.maximum(md, m[g])
        a = np.exp(md - m2)
        at = np.exp(m[g] - m2)
        if with_distance:
            Bd[g] = cd
            cd = a * (cd + b * cs) + at * d[g]
        cs = a * cs + at * s[g]
        cm = m2

    # combine: position t = g*b + l sees the carry state decayed l steps
    # plus its chunk-local prefix
    loff = np.arange(b).reshape(b, 1, 1)
    mb = Bm[None, :, :] - loff * w_over_T
    mg = np.maximum(mb, Pm)
    with np.errstate(invalid="ignore"):
        a1 = np.exp(mb - mg)
        a2 = np.exp(Pm - mg)
    empty = np.isneginf(mg)
    if empty.any():  # both sides empty (the very first position)
        a1[empty] = 0.0
        a2[empty] = 0.0

    def unchunk(arr):
        return arr.transpose(1, 0, 2).reshape(T, C)

    plain = unchunk(a1 * Bs[None] + a2 * Ps)
    dist = None
    if with_distance:
        dist = unchunk(a1 * (Bd[None] + loff * Bs[None]) + a2 * Pd)
    return unchunk(mg), plain, dist


def _check_inputs(k, v, w, u):
    if k.ndim != 2 or v.shape != k.shape:
        raise ShapeError(f"wkv: k {k.shape} vs v {v.shape}")
    T, C = k.shape
    if T < 1:
        raise ShapeError("wkv: empty input (T=0)")
    if w.shape != (C,) or u.shape != (C,):
        raise ShapeError(f"wkv: params {w.shape}/{u.shape} vs C={C}")
    for name, arr in (("k", k), ("v", v), ("w", w), ("u", u)):
        if not np.isfinite(arr).all():
            raise NumericError(f"wkv: non-finite values in {name}")
    return T, C


def _forward_arrays(k, v, w, u, bidirectional, chunk):
    """Both directions and both running sums (weighted values and the weight
    total) are stacked into one wide scan to keep the Python step count low."""
    T, C = k.shape
    wT = w / T
    ones = np.ones_like(v)
    dm = u + k
    if bidirectional:
        kr = k[::-1]
        E = np.concatenate([k, k, kr, kr], axis=1)
        X = np.concatenate([v, ones, v[::-1], ones], axis=1)
        M, P, _ = _scan_causal(E, X, np.tile(wT, 4), chunk=chunk)
        Lm, Lv, Lq = M[:, :C], P[:, :C], P[:, C : 2 * C]
        Rm = M[:, 2 * C : 3 * C][::-1]
        Rv = P[:, 2 * C : 3 * C][::-1]
        Rq = P[:, 3 * C :][::-1]
        mu = np.maximum(np.maximum(Lm, Rm), dm)
        al = _exp_sub(Lm, mu)
        ar = _exp_sub(Rm, mu)
        ad = np.exp(dm - mu)
        num = al * Lv + ar * Rv + ad * v
        den = al * Lq + ar * Rq + ad
    else:
        E = np.concatenate([k, k], axis=1)
        X = np.concatenate([v, ones], axis=1)
        M, P, _ = _scan_causal(E, X, np.tile(wT, 2), chunk=chunk)
        Lm, Lv, Lq = M[:, :C], P[:, :C], P[:, C:]
        mu = np.maximum(Lm, dm)
        al = _exp_sub(Lm, mu)
        ad = np.exp(dm - mu)
        num = al * Lv + ad * v
        den = al * Lq + ad
    return num / den, mu, den


def _grads_scan(k, v, w, u, out, mu, den, g, bidirectional, chunk):
    """Linear-time backward: the same decayed-sum machinery applied to the
    softmax-form gradient identities, with distance-weighted sums for dL/dw.

    For channel c, out_t = sum_i p_ti v_i with softmax weights p over scores
    s_ti, so with phi_t = g_t / Z_t and psi_t = g_t out_t / Z_t:
        dL/dv_i = e^{k_i} sum_{t != i} e^{-d w/T} phi_t + p_ii g_i
        dL/dk_i = v_i dL/dv_i - (same sums over psi)
        dL/dw   = -(1/T) sum_i [v_i (d-weighted phi sums) - (d-weighted psi)]
        dL/du   = sum_t p_tt g_t (v_t - out_t)
    The sums over t are the forward scans transposed (distance is symmetric).
    """
    T, C = k.shape
    wT = w / T
    f = g / den
    h = g * out / den
    E2 = -mu
    if bidirectional:
        Er = E2[::-1]
        E = np.concatenate([E2, E2, Er, Er], axis=1)
        X = np.concatenate([f, h, f[::-1], h[::-1]], axis=1)
        M, P, D = _scan_causal(E, X, np.tile(wT, 4), with_distance=True, chunk=chunk)
        Lm, Rm = M[:, :C], M[:, 2 * C : 3 * C][::-1]
        mS = np.maximum(Lm, Rm)
        a1 = _exp_sub(Lm, mS)
        a2 = _exp_sub(Rm, mS)
        P1 = a1 * P[:, :C] + a2 * P[:, 2 * C : 3 * C][::-1]
        P2 = a1 * P[:, C : 2 * C] + a2 * P[:, 3 * C :][::-1]
        Q1 = a1 * D[:, :C] + a2 * D[:, 2 * C : 3 * C][::-1]
        Q2 = a1 * D[:, C : 2 * C] + a2 * D[:, 3 * C :][::-1]
    else:
        # causal forward attends to i <= t, so position i feeds all t >= i:
        # the transposed sums run in the reverse direction only
        Er = E2[::-1]
        E = np.concatenate([Er, Er], axis=1)
        X = np.concatenate([f[::-1], h[::-1]], axis=1)
        M, P, D = _scan_causal(E, X, np.tile(wT, 2), with_distance=True, chunk=chunk)
        mS = M[:, :C][::-1]
        P1, P2 = P[:, :C][::-1], P[:, C:][::-1]
        Q1, Q2 = D[:, :C][::-1], D[:, C:][::-1]
    ek = _exp_sub(k, -mS)  # exp(k + mS); bounded because mu_t >= k_i - d*w/T
    pdiag = np.exp(u + k - mu) / den
    gv = ek * P1 + pdiag * g
    gk = v * gv - (ek * P2 + pdiag * g * out)
    gu = (pdiag * g * (v - out)).sum(axis=0)
    gw = -((v * ek * Q1 - ek * Q2).sum(axis=0)) / T
    return gk, gv, gw, gu


def bi_wkv_oracle(k, v, w, u) -> np.ndarray:
    """Quadratic ground truth: the literal double sum, extended precision."""
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    T, C = _check_inputs(k, v, w, u)
    kl = k.astype(np.longdouble)
    vl = v.astype(np.longdouble)
    wl = w.astype(np.longdouble) / T
    ul = u.astype(np.longdouble)
    out = np.empty((T, C), dtype=np.longdouble)
    idx = np.arange(T, dtype=np.longdouble)
    for t in range(T):
        dist = np.abs(t - idx) - 1.0
        s = kl - dist[:, None] * wl
        s[t] = ul + kl[t]
        m = s.max(axis=0)
        e = np.exp(s - m)
        out[t] = (e * vl).sum(axis=0) / e.sum(axis=0)
    return out.astype(np.float64)


def uni_wkv_oracle(k, v, w, u) -> np.ndarray:
    """Causal variant of the oracle: summation restricted to i <= t."""
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    T, C = _check_inputs(k, v, w, u)
    kl = k.astype(np.longdouble)
    vl = v.astype(np.longdouble)
    wl = w.astype(np.longdouble) / T
    ul = u.astype(np.longdouble)
    out = np.empty((T, C), dtype=np.longdouble)
    for t in range(T):
        dist = (t - np.arange(t + 1, dtype=np.longdouble)) - 1.0
        s = kl[: t + 1] - dist[:, None] * wl
        s[t] = ul + kl[t]
        m = s.max(axis=0)
        e = np.exp(s - m)
        out[t] = (e * vl[: t + 1]).sum(axis=0) / e.sum(axis=0)
    return out.astype(np.float64)


def bi_wkv_scan(k, v, w, u, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Linear-time evaluation, identical to the oracle within rounding."""
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_inputs(k, v, w, u)
    out, _, _ = _forward_arrays(k, v, w, u, bidirectional=True, chunk=chunk)
    return out


def uni_wkv_scan(k, v, w, u, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_inputs(k, v, w, u)
    out, _, _ = _forward_arrays(k, v, w, u, bidirectional=False, chunk=chunk)
    return out


def wkv_grads_reference(k, v, w, u, g, bidirectional: bool = True):
    """Quadratic backward obtained by differentiating the oracle's softmax
    form directly. Used to gate the scan-form backward in tests."""
    T, C = k.shape
    gk = np.zeros((T, C))
    gv = np.zeros((T, C))
    gw = np.zeros(C)
    gu = np.zeros(C)
    idx = np.arange(T)
    for t in range(T):
        lim = T if bidirectional else t + 1
        dist = (np.abs(t - idx[:lim]) - 1.0)[:, None]
        s = k[:lim] - dist * w / T
        s[t] = u + k[t]
        m = s.max(axis=0)
        e = np.exp(s - m)
        den = e.sum(axis=0)
        p = e / den
        out_t = (p * v[:lim]).sum(axis=0)
        gt = g[t]
        gv[:lim] += gt * p
        gk[:lim] += gt * p * (v[:lim] - out_t)
        gu += gt * p[t] * (v[t] - out_t)
        ds_dw = -dist / T
        ds_dw[t] = 0.0
        gw += (gt * p * (v[:lim] - out_t) * ds_dw).sum(axis=0)
    return gk, gv, gw, gu


def _wkv_op(k: Tensor, v: Tensor, params: WkvParams, bidirectional: bool, chunk: int) -> Tensor:
    kd, vd = k.data, v.data
    wd, ud = params.w.data, params.u.data
    _check_inputs(kd, vd, wd, ud)
    out, mu, den = _forward_arrays(kd, vd, wd, ud, bidirectional, chunk)

    def backward(g):
        gk, gv, gw, gu = _grads_scan(kd, vd, wd, ud, out, mu, den, g, bidirectional, chunk)
        accumulate(k, gk)
        accumulate(v, gv)
        accumulate(params.w, gw)
        accumulate(params.u, gu)

    name = "bi_wkv" if bidirectional else "uni_wkv"
    return make_op(out, (k, v, params.w, params.u), backward, name)


def bi_wkv(k: Tensor, v: Tensor, params: WkvParams, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Bidirectional WKV attention as an autodiff op."""
    return _wkv_op(k, v, params, bidirectional=True, chunk=chunk)


def uni_wkv(k: Tensor, v: Tensor, params: WkvParams, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Causal WKV attention (ablation baseline)."""
    return _wkv_op(k, v, params, bidirectional=False, chunk=chunk)


def re_wkv(
    k: Tensor,
    v: Tensor,
    params: list[WkvParams],
    hw: tuple[int, int],
    chunk: int = DEFAULT_CHUNK,
) -> Tensor:
    """Recurrent multi-direction attention.

    Pass j permutes the keys and the previous pass's output into the j-th
    scan order (odd passes raster horizontally, even passes vertically),
    applies the bidirectional kernel with that pass's own (w, u), and
    un-permutes back to the canonical horizontal order.
    """
    H, W = hw
    T = k.data.shape[0]
    if T != H * W:
        raise ShapeError(f"re_wkv: T={T} != H*W={H * W}")
    if len(params) < 1:
        raise ShapeError("re_wkv: need at least one recurrence")
    out = v
    for j, p in enumerate(params):
        order = ScanOrder("h" if j % 2 == 0 else "v", H, W)
        if order.direction == "h":
            out = bi_wkv(k, out, p, chunk=chunk)
        else:
            perm = order.permutation()
            inv = order.inverse_permutation()
            kp = gather_rows(k, perm)
            vp = gather_rows(out, perm)
            out = gather_rows(bi_wkv(kp, vp, p, chunk=chunk), inv)
    return out
