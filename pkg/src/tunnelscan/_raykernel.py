"""Compiled per-ray shading for the synthetic renderer.

Mirrors ``SyntheticScene.roughness``/``albedo``/``_shading`` in scalar form;
tests check both paths agree.
"""

import math

import numpy as np
from numba import njit

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xC2B2AE3D27D4EB4F)
_M3 = np.uint64(0x165667B19E3779F9)
_F1 = np.uint64(0xFF51AFD7ED558CCD)
_F2 = np.uint64(0xC4CEB9FE1A85EC53)
_S33 = np.uint64(33)
_S11 = np.uint64(11)
_INV53 = 1.0 / float(1 << 53)


@njit(cache=True, fastmath=True)
def _hash01(i, j, seed):
    h = (np.uint64(np.int64(i)) * _M1) ^ (np.uint64(np.int64(j)) * _M2)
    h ^= np.uint64(seed) * _M3
    h ^= h >> _S33
    h *= _F1
    h ^= h >> _S33
    h *= _F2
    h ^= h >> _S33
    return float(h >> _S11) * _INV53


@njit(cache=True, fastmath=True)
def _value_noise(a, b, period, seed):
    fa_floor = math.floor(a)
    fb_floor = math.floor(b)
    fa = a - fa_floor
    fb = b - fb_floor
    ia = np.int64(fa_floor)
    ib = np.int64(fb_floor)
    ia0 = ia % period
    ia1 = (ia + 1) % period
    wa = fa * fa * fa * (fa * (fa * 6 - 15) + 10)
    wb = fb * fb * fb * (fb * (fb * 6 - 15) + 10)
    v00 = _hash01(ia0, ib, seed)
    v10 = _hash01(ia1, ib, seed)
    v01 = _hash01(ia0, ib + 1, seed)
    v11 = _hash01(ia1, ib + 1, seed)
    return (v00 * (1 - wa) + v10 * wa) * (1 - wb) + (v01 * (1 - wa) + v11 * wa) * wb


@njit(cache=True, fastmath=True)
def _roughness(theta, x, m, kx, ph, amp):
    h = 0.0
    ht = 0.0
    hx = 0.0
    for k in range(m.shape[0]):
        arg = m[k] * theta + kx[k] * x + ph[k]
        c = math.cos(arg)
        s = math.sin(arg)
        h += amp[k] * c
        ht -= amp[k] * m[k] * s
        hx -= amp[k] * kx[k] * s
    return h, ht, hx


@njit(cache=True, fastmath=True)
def _clip01(v):
    return min(1.0, max(0.0, v))


@njit(cache=True, fastmath=True)
def _albedo(theta, x, layers, out, f):
    f[:] = 0.0
    for r in range(layers.shape[0]):
        layer = int(layers[r, 0])
        period = np.int64(layers[r, 1])
        cell = layers[r, 2]
        a = theta * period / (2 * math.pi)
        f[layer] += layers[r, 3] * _value_noise(a, x / cell, period, np.int64(layers[r, 4]))
    fine, fine2, tint, rockiness = f[0], f[1], f[2], f[3]
    rock = _clip01((rockiness - 0.4) / 0.2)
    rock = rock * rock * (3 - 2 * rock)
    g_rock = 0.25 + 1.3 * fine
    g_crete = 0.55 + 0.8 * (0.6 * fine2 + 0.4 * fine)
    out[0] = _clip01(rock * (0.50 + 0.10 * tint) * g_rock + (1 - rock) * (0.72 + 0.0 * tint) * g_crete)
    out[1] = _clip01(rock * (0.42 + 0.04 * tint) * g_rock + (1 - rock) * (0.72 + 0.02 * tint) * g_crete)
    out[2] = _clip01(rock * (0.34 - 0.06 * tint) * g_rock + (1 - rock) * (0.70 + 0.04 * tint) * g_crete)


@njit(cache=True, fastmath=True)
def _shading(px, py, pz, nx, ny, nz, lamp):
    lx = lamp[0] - px
    ly = lamp[1] - py
    lz = lamp[2] - pz
    dist = math.sqrt(lx * lx + ly * ly + lz * lz)
    cos = max((nx * lx + ny * ly + nz * lz) / dist, 0.0)
    return 0.35 + 0.65 * cos * (7.0 / dist) ** 2


@njit(cache=True, fastmath=True)
def intersect_ray(o, dx, dy, dz, R, m, kx, ph, amp):
    a = dy * dy + dz * dz
    b = o[1] * dy + o[2] * dz
    c0 = o[1] * o[1] + o[2] * o[2]
    disc = b * b - a * (c0 - R * R)
    if a <= 0 or disc < 0:
        return math.nan
    t = (-b + math.sqrt(disc)) / a
    for _ in range(60):
        py = o[1] + t * dy
        pz = o[2] + t * dz
        px = o[0] + t * dx
        rho = math.hypot(py, pz)
        theta = math.atan2(pz, py)
        h, ht, hx = _roughness(theta, px, m, kx, ph, amp)
        g = rho - R - h
        drho = (py * dy + pz * dz) / rho
        dtheta = (py * dz - pz * dy) / (rho * rho)
        dg = drho - ht * dtheta - hx * dx
        step = g / dg
        # damped near grazing incidence
        if abs(step) > 0.5:
            step = 0.5 * step / abs(step)
        t -= step
        if abs(step) < 1e-12:
            return t
    return math.nan


@njit(cache=True, fastmath=True)
def shade_rays(origin, dirs, R, m, kx, ph, amp, layers, lamp, tcenters, tnormals, tdiam):
    n = dirs.shape[0]
    rgb = np.empty((n, 3))
    ts = np.empty(n)
    alb = np.empty(3)
    scratch = np.empty(4)
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t = intersect_ray(origin, dx, dy, dz, R, m, kx, ph, amp)
        ts[i] = t
        if math.isnan(t):
            rgb[i, 0] = rgb[i, 1] = rgb[i, 2] = 0.0
            continue
        px = origin[0] + t * dx
        py = origin[1] + t * dy
        pz = origin[2] + t * dz
        theta = math.atan2(pz, py)
        h, ht, hx = _roughness(theta, px, m, kx, ph, amp)
        r = R + h
        ct, st = math.cos(theta), math.sin(theta)
        # outward normal = e_r - (h_t / r) e_theta - h_x e_x
        ox = -hx
        oy = ct + (ht / r) * st
        oz = st - (ht / r) * ct
        on = math.sqrt(ox * ox + oy * oy + oz * oz)
        nx, ny, nz = -ox / on, -oy / on, -oz / on
        _albedo(theta, px, layers, alb, scratch)
        shade = _shading(px, py, pz, nx, ny, nz, lamp)
        a0, a1, a2 = alb[0], alb[1], alb[2]
        for k in range(tcenters.shape[0]):
            tnx, tny, tnz = tnormals[k, 0], tnormals[k, 1], tnormals[k, 2]
            denom = dx * tnx + dy * tny + dz * tnz
            if denom == 0.0:
                continue
            td = ((tcenters[k, 0] - origin[0]) * tnx + (tcenters[k, 1] - origin[1]) * tny
                  + (tcenters[k, 2] - origin[2]) * tnz) / denom
            if td <= 0 or td >= t:
                continue
            qx = origin[0] + td * dx
            qy = origin[1] + td * dy
            qz = origin[2] + td * dz
            ex = qx - tcenters[k, 0]
            ey = qy - tcenters[k, 1]
            ez = qz - tcenters[k, 2]
            rr = math.sqrt(ex * ex + ey * ey + ez * ez)
            if rr < 0.8 * tdiam[k]:
                v = 0.95 if rr < 0.5 * tdiam[k] else 0.06
                a0 = a1 = a2 = v
                shade = _shading(qx, qy, qz, tnx, tny, tnz, lamp)
        rgb[i, 0] = a0 * shade
        rgb[i, 1] = a1 * shade
        rgb[i, 2] = a2 * shade
    return rgb, ts


@njit(cache=True, fastmath=True)
def intersect_rays(origin, dirs, R, m, kx, ph, amp):
    n = dirs.shape[0]
    ts = np.empty(n)
    for i in range(n):
        ts[i] = intersect_ray(origin, dirs[i, 0], dirs[i, 1], dirs[i, 2], R, m, kx, ph, amp)
    return ts
