"""Pure-Python trajectory sampling kernel.

Reference implementation of the hot loop; flashsim._kernels is the compiled
twin. Both consume the Philox stream in the same order (one uniform per
waiting-time draw, one more only when a flash occurred), and both implement
the same coarse-scan / dyadic-bisection search, so a (seed, stream_id) pair
yields the same trajectory on either backend up to floating-point summation
order.

The waiting-time draw inverts the survival function S(t) = ||e^{Gt} psi||^2
against a target 1 - u: the coarse scan walks powers of E = e^{G dt'}, the
crossing interval is refined by bisection where each midpoint costs one
matvec with a precomputed ladder matrix e^{G dt' 2^-j}, and partial
intervals (the horizon remainder) advance by the greedy binary expansion of
their width against the same ladder. No matrix exponentials happen here.

Status codes: 0 ok, 1 flash buffer full (caller retries with more room),
2 total rate vanished at a draw (inconsistent model data).
"""

from __future__ import annotations

import math

import numpy as np

from .rng import PhiloxStream

STATUS_OK = 0
STATUS_BUFFER_FULL = 1
STATUS_ZERO_RATE = 2


def philox_raw(seed: int, stream_id: int, n: int) -> np.ndarray:
    """First n raw 64-bit outputs of the keyed stream (backend-equality tests)."""
    return PhiloxStream(seed, stream_id).raw(n)


def _norm2(v: np.ndarray) -> float:
    return float(np.vdot(v, v).real)


def _apply_bits(ladder: np.ndarray, levels: np.ndarray, psi: np.ndarray, width: float):
    """Advance psi by (almost) width using the dyadic ladder.

    Greedy binary expansion: level j is applied at most once since the
    remainder entering level j is below 2 * levels[j]. Returns the new
    vector and the exactly-applied amount (width minus a sub-resolution
    residual). width must not exceed levels[0].
    """
    r = width
    applied = 0.0
    v = psi
    for j in range(1, len(levels)):
        s = levels[j]
        if r >= s:
            v = ladder[j] @ v
            applied += s
            r -= s
    return v, applied


def _bisect(ladder, levels, psi_lo, s_lo, s_hi, width, target, tol):
    """Shrink a bracket [lo, lo + width] with S(lo) >= target > S(hi).

    Returns (offset_from_lo, psi_at_offset, S_at_offset) for the final lower
    edge; stops when the bracket width is within tol or below the ladder
    resolution.
    """
    off = 0.0
    w = width
    v = psi_lo
    while w > tol:
        half = 0.5 * w
        mid, applied = _apply_bits(ladder, levels, v, half)
        if applied == 0.0:
            break
        s_mid = _norm2(mid)
        if s_mid >= target:
            v = mid
            s_lo = s_mid
            off += applied
            w = w - applied
        else:
            s_hi = s_mid
            w = applied
    return off, v, s_lo


def _waiting_scan(ladder, levels, delta, psi, remaining, target, tol):
    """Locate the first time S drops below target within [0, remaining].

    Returns (found, t, psi_at_t, S_at_t): on a hit t is the refined crossing
    (lower bracket edge), otherwise t = remaining and the state is the
    surviving unnormalised vector there.
    """
    s_prev = _norm2(psi)
    v_prev = psi
    n_full = int(remaining / delta)
    for k in range(1, n_full + 1):
        v_next = ladder[0] @ v_prev
        s_next = _norm2(v_next)
        if s_next < target:
            off, v_lo, s_lo = _bisect(ladder, levels, v_prev, s_prev, s_next, delta, target, tol)
            return True, (k - 1) * delta + off, v_lo, s_lo
        v_prev, s_prev = v_next, s_next
    w = remaining - n_full * delta
    if w > 0.0:
        v_next, applied = _apply_bits(ladder, levels, v_prev, w)
        if applied > 0.0:
            s_next = _norm2(v_next)
            if s_next < target:
                off, v_lo, s_lo = _bisect(ladder, levels, v_prev, s_prev, s_next, applied, target, tol)
                return True, n_full * delta + off, v_lo, s_lo
            v_prev, s_prev = v_next, s_next
    return False, remaining, v_prev, s_prev


def _site_draw(channel_ops: np.ndarray, psi_hat: np.ndarray, u: float):
    """Draw a flash channel with probability ||B_c psi||^2 / total.

    Returns (channel, collapsed_state, total_rate); channel -1 when the
    total rate vanishes.
    """
    vecs = channel_ops @ psi_hat
    q = np.einsum("cd,cd->c", vecs.conj(), vecs).real
    total = float(np.cumsum(q)[-1]) if q.size else 0.0
    if total <= 0.0:
        return -1, psi_hat, 0.0
    thresh = u * total
    acc = 0.0
    chosen = -1
    for c in range(q.size):
        if q[c] > 0.0:
            chosen = c
        acc += q[c]
        if acc > thresh:
            break
    v = vecs[chosen]
    return chosen, v / math.sqrt(q[chosen]), total


def run_trajectory_kernel(
    ladder: np.ndarray,
    channel_ops: np.ndarray,
    psi0: np.ndarray,
    delta: float,
    horizon: float,
    tol_t: float,
    survival_floor: float,
    seed: int,
    stream_id: int,
    max_flashes: int = 0,
    stop_after: int = 0,
):
    """Sample one full trajectory on [0, horizon].

    Returns (times, channels, psi_final, status, clock). psi_final is
    normalised: the post-collapse state when stop_after cut the run short,
    otherwise the conditional state at the horizon. max_flashes is ignored
    here (lists grow as needed); the compiled twin uses it as buffer
    capacity.
    """
    rng = PhiloxStream(seed, stream_id)
    levels = delta * np.ldexp(1.0, -np.arange(ladder.shape[0], dtype=np.int32))
    psi = np.array(psi0, dtype=np.complex128)
    clock = 0.0
    times: list[float] = []
    channels: list[int] = []
    status = STATUS_OK
    while True:
        remaining = horizon - clock
        if remaining <= 0.0:
            break
        u1 = rng.uniform()
        target = 1.0 - u1
        if target < survival_floor:
            target = survival_floor
        found, t_rel, v, s = _waiting_scan(ladder, levels, delta, psi, remaining, target, tol_t)
        if not found:
            psi = v / math.sqrt(s)
            clock = horizon
            break
        if t_rel <= 0.0:
            t_rel = levels[-1]  # keep flash times strictly increasing
        t_flash = clock + t_rel
        if t_flash <= clock:
            t_flash = math.nextafter(clock, math.inf)
        if t_flash >= horizon:
            psi = v / math.sqrt(s)
            clock = horizon
            break
        psi_hat = v / math.sqrt(s)
        u2 = rng.uniform()
        chosen, psi_new, _total = _site_draw(channel_ops, psi_hat, u2)
        if chosen < 0:
            status = STATUS_ZERO_RATE
            psi = psi_hat
            clock = t_flash
            break
        times.append(t_flash)
        channels.append(chosen)
        psi = psi_new
        clock = t_flash
        if stop_after and len(times) >= stop_after:
            break
    return (
        np.array(times, dtype=np.float64),
        np.array(channels, dtype=np.int64),
        psi,
        status,
        clock,
    )
