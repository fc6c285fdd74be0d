# cython: language_level=3
"""Compiled trajectory sampling kernel.

Twin of flashsim._kernels_py with identical control flow, random-stream
consumption, and status codes; see that module for the algorithm notes.
Everything runs without the GIL so ensemble threads scale.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ldexp, nextafter, sqrt
from libc.string cimport memcpy

cnp.import_array()

# Philox-4x64-10 round count
cdef int ROUNDS = 10

cdef extern from *:
    """
    #include <stdint.h>
    static inline uint64_t flashsim_mullo(uint64_t a, uint64_t b, uint64_t *hi) {
        __uint128_t p = (__uint128_t)a * (__uint128_t)b;
        *hi = (uint64_t)(p >> 64);
        return (uint64_t)p;
    }
    """
    unsigned long long flashsim_mullo(unsigned long long a, unsigned long long b,
                                      unsigned long long *hi) nogil

cdef unsigned long long MULT0 = 0xD2E7470EE14C6C93ULL
cdef unsigned long long MULT1 = 0xCA5A826395121157ULL
cdef unsigned long long WEYL0 = 0x9E3779B97F4A7C15ULL
cdef unsigned long long WEYL1 = 0xBB67AE8584CAA73BULL
cdef double INV53 = 1.0 / 9007199254740992.0

STATUS_OK = 0
STATUS_BUFFER_FULL = 1
STATUS_ZERO_RATE = 2


cdef struct Philox:
    unsigned long long c0, c1, c2, c3
    unsigned long long k0, k1
    unsigned long long buf[4]
    int pos


cdef void _philox_init(Philox *s, unsigned long long seed, unsigned long long stream_id) nogil:
    s.c0 = 0; s.c1 = 0; s.c2 = 0; s.c3 = 0
    s.k0 = seed
    s.k1 = stream_id
    s.pos = 4


cdef void _philox_block(Philox *s) nogil:
    # counter advances before the block, so the first block sits at 1
    cdef unsigned long long c0, c1, c2, c3
    cdef unsigned long long k0 = s.k0, k1 = s.k1
    cdef unsigned long long lo0, hi0, lo1, hi1
    cdef int r
    s.c0 = s.c0 + 1
    if s.c0 == 0:
        s.c1 = s.c1 + 1
        if s.c1 == 0:
            s.c2 = s.c2 + 1
            if s.c2 == 0:
                s.c3 = s.c3 + 1
    c0 = s.c0; c1 = s.c1; c2 = s.c2; c3 = s.c3
    for r in range(ROUNDS):
        if r:
            k0 = k0 + WEYL0
            k1 = k1 + WEYL1
        lo0 = flashsim_mullo(MULT0, c0, &hi0)
        lo1 = flashsim_mullo(MULT1, c2, &hi1)
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
    s.buf[0] = c0; s.buf[1] = c1; s.buf[2] = c2; s.buf[3] = c3
    s.pos = 0


cdef unsigned long long _philox_raw(Philox *s) nogil:
    cdef unsigned long long out
    if s.pos == 4:
        _philox_block(s)
    out = s.buf[s.pos]
    s.pos += 1
    return out


cdef double _philox_uniform(Philox *s) nogil:
    return <double>(_philox_raw(s) >> 11) * INV53


def philox_raw(seed, stream_id, n):
    """First n raw outputs of the keyed stream (must bit-match the pure twin)."""
    cdef Philox s
    _philox_init(&s, <unsigned long long>int(seed), <unsigned long long>int(stream_id))
    out = np.empty(int(n), dtype=np.uint64)
    cdef unsigned long long[::1] view = out
    cdef Py_ssize_t i
    for i in range(view.shape[0]):
        view[i] = _philox_raw(&s)
    return out


cdef void _matvec(const double complex *m, const double complex *x, double complex *y,
                  Py_ssize_t d) nogil:
    cdef Py_ssize_t i, j
    cdef double complex acc
    for i in range(d):
        acc = 0
        for j in range(d):
            acc = acc + m[i * d + j] * x[j]
        y[i] = acc


cdef double _norm2(const double complex *v, Py_ssize_t d) nogil:
    cdef Py_ssize_t i
    cdef double acc = 0.0
    for i in range(d):
        acc += v[i].real * v[i].real + v[i].imag * v[i].imag
    return acc


cdef double _apply_bits(const double complex *ladder, const double *levels, Py_ssize_t n_levels,
                        double complex *v, double width, double complex *tmp, Py_ssize_t d) nogil:
    # greedy binary expansion of width; at most one hit per level
    cdef double r = width
    cdef double applied = 0.0
    cdef Py_ssize_t j
    for j in range(1, n_levels):
        if r >= levels[j]:
            _matvec(ladder + j * d * d, v, tmp, d)
            memcpy(v, tmp, d * sizeof(double complex))
            applied += levels[j]
            r -= levels[j]
    return applied


cdef double _bisect(const double complex *ladder, const double *levels, Py_ssize_t n_levels,
                    double complex *v_lo, double *s_lo, double s_hi, double width,
                    double target, double tol,
                    double complex *mid, double complex *tmp, Py_ssize_t d) nogil:
    cdef double off = 0.0
    cdef double w = width
    cdef double half, applied, s_mid
    while w > tol:
        half = 0.5 * w
        memcpy(mid, v_lo, d * sizeof(double complex))
        applied = _apply_bits(ladder, levels, n_levels, mid, half, tmp, d)
        if applied == 0.0:
            break
        s_mid = _norm2(mid, d)
        if s_mid >= target:
            memcpy(v_lo, mid, d * sizeof(double complex))
            s_lo[0] = s_mid
            off += applied
            w = w - applied
        else:
            s_hi = s_mid
            w = applied
    return off


cdef int _run(const double complex *ladder, const double *levels, Py_ssize_t n_levels,
              const double complex *channel_ops, Py_ssize_t n_channels,
              double complex *psi, Py_ssize_t d,
              double delta, double horizon, double tol_t, double survival_floor,
              unsigned long long seed, unsigned long long stream_id,
              double *times, long long *channels, Py_ssize_t capacity, long long stop_after,
              double complex *v_prev, double complex *v_next,
              double complex *mid, double complex *tmp,
              double complex *vecs, double *q,
              Py_ssize_t *out_count, double *out_clock) nogil:
    cdef Philox rng
    cdef double clock = 0.0
    cdef double remaining, u1, target, s_prev, s_next, s_lo, w, applied, off, t_rel, t_flash
    cdef double total, thresh, acc, u2, inv
    cdef Py_ssize_t count = 0, n_full, k, c, chosen, i
    cdef bint found
    _philox_init(&rng, seed, stream_id)
    while True:
        remaining = horizon - clock
        if remaining <= 0.0:
            break
        u1 = _philox_uniform(&rng)
        target = 1.0 - u1
        if target < survival_floor:
            target = survival_floor
        # coarse scan over full delta steps, then the dyadic remainder
        memcpy(v_prev, psi, d * sizeof(double complex))
        s_prev = _norm2(v_prev, d)
        found = False
        t_rel = remaining
        n_full = <Py_ssize_t>(remaining / delta)
        for k in range(1, n_full + 1):
            _matvec(ladder, v_prev, v_next, d)
            s_next = _norm2(v_next, d)
            if s_next < target:
                s_lo = s_prev
                off = _bisect(ladder, levels, n_levels, v_prev, &s_lo, s_next, delta,
                              target, tol_t, mid, tmp, d)
                found = True
                t_rel = (k - 1) * delta + off
                break
            memcpy(v_prev, v_next, d * sizeof(double complex))
            s_prev = s_next
        if not found:
            w = remaining - n_full * delta
            if w > 0.0:
                memcpy(v_next, v_prev, d * sizeof(double complex))
                applied = _apply_bits(ladder, levels, n_levels, v_next, w, tmp, d)
                if applied > 0.0:
                    s_next = _norm2(v_next, d)
                    if s_next < target:
                        s_lo = s_prev
                        off = _bisect(ladder, levels, n_levels, v_prev, &s_lo, s_next, applied,
                                      target, tol_t, mid, tmp, d)
                        found = True
                        t_rel = n_full * delta + off
                    else:
                        memcpy(v_prev, v_next, d * sizeof(double complex))
                        s_prev = s_next
        if not found:
            inv = 1.0 / sqrt(s_prev)
            for i in range(d):
                psi[i] = v_prev[i] * inv
            clock = horizon
            break
        if t_rel <= 0.0:
            t_rel = levels[n_levels - 1]  # keep flash times strictly increasing
        t_flash = clock + t_rel
        if t_flash <= clock:
            t_flash = nextafter(clock, horizon + 1.0)
        if t_flash >= horizon:
            inv = 1.0 / sqrt(s_lo)
            for i in range(d):
                psi[i] = v_prev[i] * inv
            clock = horizon
            break
        inv = 1.0 / sqrt(s_lo)
        for i in range(d):
            v_prev[i] = v_prev[i] * inv
        u2 = _philox_uniform(&rng)
        total = 0.0
        for c in range(n_channels):
            _matvec(channel_ops + c * d * d, v_prev, vecs + c * d, d)
            q[c] = _norm2(vecs + c * d, d)
            total += q[c]
        if total <= 0.0:
            memcpy(psi, v_prev, d * sizeof(double complex))
            clock = t_flash
            out_count[0] = count
            out_clock[0] = clock
            return 2
        thresh = u2 * total
        acc = 0.0
        chosen = -1
        for c in range(n_channels):
            if q[c] > 0.0:
                chosen = c
            acc += q[c]
            if acc > thresh:
                break
        if count >= capacity:
            out_count[0] = count
            out_clock[0] = clock
            return 1
        inv = 1.0 / sqrt(q[chosen])
        for i in range(d):
            psi[i] = vecs[chosen * d + i] * inv
        times[count] = t_flash
        channels[count] = chosen
        count += 1
        clock = t_flash
        if stop_after > 0 and count >= stop_after:
            break
    out_count[0] = count
    out_clock[0] = clock
    return 0


def run_trajectory_kernel(ladder, channel_ops, psi0, double delta, double horizon,
                          double tol_t, double survival_floor,
                          seed, stream_id, max_flashes=0, stop_after=0):
    """Sample one trajectory; same contract as the pure twin.

    max_flashes bounds the flash buffer; status 1 on overflow means the
    caller should retry with a larger bound.
    """
    cdef cnp.ndarray[cnp.complex128_t, ndim=3] lad = np.ascontiguousarray(ladder, dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=3] ops = np.ascontiguousarray(channel_ops, dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=1] psi = np.array(psi0, dtype=np.complex128).ravel()
    cdef Py_ssize_t d = psi.shape[0]
    cdef Py_ssize_t n_levels = lad.shape[0]
    cdef Py_ssize_t n_channels = ops.shape[0]
    if lad.shape[1] != d or lad.shape[2] != d or ops.shape[1] != d or ops.shape[2] != d:
        raise ValueError("ladder/channel operator shapes do not match the state dimension")
    cdef Py_ssize_t capacity = int(max_flashes) if int(max_flashes) > 0 else 256
    cdef cnp.ndarray[cnp.float64_t, ndim=1] levels = delta * np.ldexp(1.0, -np.arange(n_levels, dtype=np.int32))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] times = np.empty(capacity, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] chans = np.empty(capacity, dtype=np.int64)
    scratch = np.empty((4, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] scr = scratch
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] vecs = np.empty((n_channels, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] q = np.empty(n_channels, dtype=np.float64)
    cdef unsigned long long c_seed = <unsigned long long>int(seed)
    cdef unsigned long long c_stream = <unsigned long long>int(stream_id)
    cdef long long c_stop = int(stop_after)
    cdef Py_ssize_t count = 0
    cdef double clock = 0.0
    cdef int status
    with nogil:
        status = _run(
            <const double complex *>lad.data, <const double *>levels.data, n_levels,
            <const double complex *>ops.data, n_channels,
            <double complex *>psi.data, d,
            delta, horizon, tol_t, survival_floor,
            c_seed, c_stream,
            <double *>times.data, <long long *>chans.data, capacity, c_stop,
            <double complex *>scr.data, (<double complex *>scr.data) + d,
            (<double complex *>scr.data) + 2 * d, (<double complex *>scr.data) + 3 * d,
            <double complex *>vecs.data, <double *>q.data,
            &count, &clock)
    return times[:count].copy(), chans[:count].copy(), np.asarray(psi), int(status), float(clock)
