"""Compiled inner step for the nodal solver.

The pure-numpy step spends most of the 52 us budget on per-call overhead,
so the whole inner step is fused into one numba kernel over the compiled
port arrays. Import is optional: callers fall back to the numpy path when
numba is unavailable or EMTBENCH_NO_NUMBA is set.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = ["step_kernel", "analog_codes", "record_column", "sv_counts",
           "relay_sample"]

# relay_sample event bits
EV_IOC = 1
EV_IDMT = 2
EV_MHO = 4
EV_TRIP = 8
EV_DROPOUT = 16


@njit(cache=True)
def relay_codes_to_values(codes, chs, gains, offs, vals6):
    """Invert the DAC mapping for the six consumed channels."""
    for q in range(6):
        vals6[q] = codes[chs[q]] * gains[q] + offs[q]


@njit(cache=True)
def relay_sample(win, kern, vals6, t, pf, istate, fstate, rec_a, rec_d,
                 brk_val):
    """One relay sample: window push, single-bin DFT, elements, latch,
    record. Returns an event bitmask for the (rare) bookkeeping the
    caller wants to log.

    pf: [ioc_pickup, idmt_pickup, idmt_tms, period, zr_re, zr_im, reach,
         i_min, k0, dropout]
    istate: [pos, filled, trip, rec_n, ioc_flag, idmt_flag, mho_flag]
    fstate: [idmt_acc, last_operate (-1 none), trip_time (-1 none)]
    """
    n = win.shape[1]
    pos = istate[0]
    for ch in range(6):
        win[ch, pos] = vals6[ch]
    istate[0] = (pos + 1) % n
    if istate[1] < n:
        istate[1] += 1

    events = 0
    operated = False
    if istate[1] >= n:
        rt2 = math.sqrt(2.0)
        pr = np.empty(6)
        pi = np.empty(6)
        for ch in range(6):
            ar = 0.0
            ai = 0.0
            for j in range(n):
                w = win[ch, j]
                ar += w * kern[j].real
                ai += w * kern[j].imag
            pr[ch] = ar
            pi[ch] = ai
        ia_m = math.hypot(pr[3], pi[3]) / rt2
        ib_m = math.hypot(pr[4], pi[4]) / rt2
        ic_m = math.hypot(pr[5], pi[5]) / rt2
        imax = max(ia_m, ib_m, ic_m)

        ioc_pickup = pf[0]
        if ioc_pickup > 0.0 and imax >= ioc_pickup:
            operated = True
            if istate[4] == 0:
                istate[4] = 1
                events |= EV_IOC
        idmt_pickup = pf[1]
        if idmt_pickup > 0.0:
            m = imax / idmt_pickup
            if m <= 1.0:
                fstate[0] = 0.0
            else:
                top = pf[2] * 0.14 / (m ** 0.02 - 1.0)
                fstate[0] += pf[3] / top
                if fstate[0] >= 1.0:
                    operated = True
                    if istate[5] == 0:
                        istate[5] = 1
                        events |= EV_IDMT
        zr_re = pf[4]
        zr_im = pf[5]
        if zr_re != 0.0 or zr_im != 0.0:
            reach = pf[6]
            i_min = pf[7]
            k0 = pf[8]
            ires_re = (pr[3] + pr[4] + pr[5]) / rt2
            ires_im = (pi[3] + pi[4] + pi[5]) / rt2
            c_re = reach * zr_re / 2.0
            c_im = reach * zr_im / 2.0
            c_abs = math.hypot(c_re, c_im)
            for ph in range(3):
                li_re = pr[3 + ph] / rt2 + k0 * ires_re
                li_im = pi[3 + ph] / rt2 + k0 * ires_im
                mag_i = math.hypot(li_re, li_im)
                if mag_i < i_min:
                    continue
                v_re = pr[ph] / rt2
                v_im = pi[ph] / rt2
                den = li_re * li_re + li_im * li_im
                z_re = (v_re * li_re + v_im * li_im) / den
                z_im = (v_im * li_re - v_re * li_im) / den
                if math.hypot(z_re - c_re, z_im - c_im) <= c_abs:
                    operated = True
                    if istate[6] == 0:
                        istate[6] = 1
                        events |= EV_MHO
                    break

    if operated:
        fstate[1] = t
        if istate[2] == 0:
            istate[2] = 1
            if fstate[2] < 0.0:
                fstate[2] = t
            events |= EV_TRIP
    elif istate[2] == 1 and fstate[1] >= 0.0 and t - fstate[1] > pf[9]:
        istate[2] = 0
        istate[4] = 0
        istate[5] = 0
        istate[6] = 0
        events |= EV_DROPOUT

    s = istate[3]
    for ch in range(6):
        rec_a[ch, s] = vals6[ch]
    rec_d[0, s] = istate[2]
    rec_d[1, s] = brk_val
    istate[3] = s + 1
    return events

# gather modes shared by the I/O kernels:
# 0 = node voltage, 1 = branch current, 2 = port current, 3 = aux slot


@njit(cache=True)
def pipeline_step(
    k, dt, resid_rtol, hdr,
    g, s, pfrom, pto,
    src_f, react_f, line_f, line_i, line_buf,
    G, Ginv,
    v, port_i, branch_i, primary_port, primary_sign,
    scratch,
    a_modes, a_idxs, a_invfs, codes, sat,
    r_modes, r_idxs, aux, rec_buf,
):
    """Solve + DAC codes + record column in one dispatch; the compiled
    sub-calls inline, so the paced loop pays one crossing per step."""
    rrel = step_kernel(k, dt, resid_rtol, hdr, g, s, pfrom, pto,
                       src_f, react_f, line_f, line_i, line_buf,
                       G, Ginv, v, port_i, branch_i, primary_port,
                       primary_sign, scratch)
    if rrel < 0.0:
        return rrel
    analog_codes(v, branch_i, port_i, a_modes, a_idxs, a_invfs, codes, sat)
    record_column(rec_buf, k, v, branch_i, port_i, r_modes, r_idxs, aux)
    return rrel


@njit(cache=True)
def analog_codes(v, branch_i, port_i, modes, idxs, inv_fs, codes, sat):
    """Scale six signals to the +-10 V terminal, clamp, quantize to
    offset-binary half-up; saturation increments per clamped channel."""
    for c in range(modes.shape[0]):
        m = modes[c]
        if m == 0:
            x = v[idxs[c]]
        elif m == 1:
            x = branch_i[idxs[c]]
        elif m == 2:
            x = port_i[idxs[c]]
        else:
            x = 0.0
        x *= inv_fs[c]
        if x > 10.0:
            x = 10.0
            sat[c] += 1
        elif x < -10.0:
            x = -10.0
            sat[c] += 1
        codes[c] = int(math.floor(204.75 * (x + 10.0) + 0.5))


@njit(cache=True)
def record_column(buf, k, v, branch_i, port_i, modes, idxs, aux):
    for r in range(modes.shape[0]):
        m = modes[r]
        if m == 0:
            buf[r, k] = v[idxs[r]]
        elif m == 1:
            buf[r, k] = branch_i[idxs[r]]
        elif m == 2:
            buf[r, k] = port_i[idxs[r]]
        else:
            buf[r, k] = aux[idxs[r]]


@njit(cache=True)
def sv_patch_frame(frame_u8, cnt_off, data_off, smp_cnt, vals, quals):
    """Patch smpCnt and the 8x(INT32+quality) dataset into the frame
    template, big-endian."""
    frame_u8[cnt_off] = (smp_cnt >> 8) & 0xFF
    frame_u8[cnt_off + 1] = smp_cnt & 0xFF
    for ch in range(8):
        off = data_off + ch * 8
        x = vals[ch] & 0xFFFFFFFF
        frame_u8[off] = (x >> 24) & 0xFF
        frame_u8[off + 1] = (x >> 16) & 0xFF
        frame_u8[off + 2] = (x >> 8) & 0xFF
        frame_u8[off + 3] = x & 0xFF
        q = quals[ch] & 0xFFFFFFFF
        frame_u8[off + 4] = (q >> 24) & 0xFF
        frame_u8[off + 5] = (q >> 16) & 0xFF
        frame_u8[off + 6] = (q >> 8) & 0xFF
        frame_u8[off + 7] = q & 0xFF


@njit(cache=True)
def sv_counts(v, branch_i, port_i, modes, idxs, scales, vals, quals):
    """Physical signals -> INT32 counts + quality (0 good, 1 not valid:
    clamped or unbound)."""
    for c in range(modes.shape[0]):
        m = modes[c]
        if m == 3:
            vals[c] = 0
            quals[c] = 1
            continue
        if m == 0:
            x = v[idxs[c]]
        elif m == 1:
            x = branch_i[idxs[c]]
        else:
            x = port_i[idxs[c]]
        x /= scales[c]
        if x >= 2147483647.0:
            vals[c] = 2147483647
            quals[c] = 1
        elif x <= -2147483648.0:
            vals[c] = -2147483648
            quals[c] = 1
        else:
            vals[c] = int(round(x))
            quals[c] = 0


@njit(cache=True)
def step_kernel(
    k, dt, resid_rtol, hdr,
    g, s, pfrom, pto,
    src_f, react_f, line_f, line_i, line_buf,
    G, Ginv,
    v, port_i, branch_i, primary_port, primary_sign,
    scratch,
):
    """One trapezoidal step. Returns the relative residual, or -1.0 when
    refinement cannot reach the bound (caller raises).

    hdr: [src_lo, src_hi, react_lo, react_hi, nl, buf_len, lk_lo, lm_lo]
    src_f rows: w, phase, coef; react_f rows: c1, c2;
    line_f rows: z, h, ca, cb, wa, wb; line_i rows: lo, hi, knode, mnode;
    scratch rows: rhs, vsol, resid, delta.
    """
    src_lo = hdr[0]
    src_hi = hdr[1]
    react_lo = hdr[2]
    react_hi = hdr[3]
    nl = hdr[4]
    buf_len = hdr[5]
    lk_lo = hdr[6]
    lm_lo = hdr[7]
    rhs = scratch[0]
    vsol = scratch[1]
    resid = scratch[2]
    delta = scratch[3]

    t = k * dt
    n = rhs.shape[0]
    n_ports = s.shape[0]

    for j in range(src_lo, src_hi):
        jj = j - src_lo
        s[j] = -src_f[2, jj] * math.cos(src_f[0, jj] * t + src_f[1, jj])

    for l in range(nl):
        ia = (k - line_i[0, l]) % buf_len
        ib = (k - line_i[1, l]) % buf_len
        wa = line_f[4, l]
        wb = line_f[5, l]
        vk_d = wa * line_buf[l, ia, 0] + wb * line_buf[l, ib, 0]
        vm_d = wa * line_buf[l, ia, 1] + wb * line_buf[l, ib, 1]
        ik_d = wa * line_buf[l, ia, 2] + wb * line_buf[l, ib, 2]
        im_d = wa * line_buf[l, ia, 3] + wb * line_buf[l, ib, 3]
        z = line_f[0, l]
        h = line_f[1, l]
        s[lk_lo + l] = -(line_f[2, l] * (vm_d / z + h * im_d)
                         + line_f[3, l] * (vk_d / z + h * ik_d))
        s[lm_lo + l] = -(line_f[2, l] * (vk_d / z + h * ik_d)
                         + line_f[3, l] * (vm_d / z + h * im_d))

    for r in range(n):
        rhs[r] = 0.0
    for p in range(n_ports):
        sp = s[p]
        f = pfrom[p]
        if f > 0:
            rhs[f - 1] -= sp
        q = pto[p]
        if q > 0:
            rhs[q - 1] += sp

    for r in range(n):
        acc = 0.0
        for c in range(n):
            acc += Ginv[r, c] * rhs[c]
        vsol[r] = acc

    scale = 1e-30
    for r in range(n):
        a = abs(rhs[r])
        if a > scale:
            scale = a
    rmax = 0.0
    for r in range(n):
        acc = -rhs[r]
        for c in range(n):
            acc += G[r, c] * vsol[c]
        resid[r] = acc
        a = abs(acc)
        if a > rmax:
            rmax = a
    tries = 0
    while rmax > resid_rtol * scale and tries < 3:
        for r in range(n):
            acc = 0.0
            for c in range(n):
                acc += Ginv[r, c] * resid[c]
            delta[r] = acc
        for r in range(n):
            vsol[r] -= delta[r]
        rmax = 0.0
        for r in range(n):
            acc = -rhs[r]
            for c in range(n):
                acc += G[r, c] * vsol[c]
            resid[r] = acc
            a = abs(acc)
            if a > rmax:
                rmax = a
        tries += 1
    if rmax > resid_rtol * scale:
        return -1.0

    v[0] = 0.0
    for r in range(n):
        v[r + 1] = vsol[r]

    for p in range(n_ports):
        vbp = v[pfrom[p]] - v[pto[p]]
        ip = g[p] * vbp + s[p]
        port_i[p] = ip
        if react_lo <= p < react_hi:
            jj = p - react_lo
            s[p] = react_f[0, jj] * ip + react_f[1, jj] * vbp

    slot = k % buf_len
    for l in range(nl):
        line_buf[l, slot, 0] = v[line_i[2, l]]
        line_buf[l, slot, 1] = v[line_i[3, l]]
        line_buf[l, slot, 2] = port_i[lk_lo + l]
        line_buf[l, slot, 3] = port_i[lm_lo + l]

    for j in range(branch_i.shape[0]):
        branch_i[j] = port_i[primary_port[j]] * primary_sign[j]

    return rmax / scale
