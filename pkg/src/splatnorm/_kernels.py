"""Scalar-loop JIT kernels for the tile rasterizer.

Same math as the vectorized reference path in `rasterizer` (which the tests
cross-check), just restructured as sequential per-pixel loops: forward runs
front to back, backward recovers transmittances back to front the way tile
rasterizers usually do.  Everything is sequential and IEEE-ordered, so
results are deterministic run to run.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def forward_kernel(entries, bounds, tiles_x, tile_size, height, width,
                   mean2d, conic, opacity, depth, color, proxy,
                   alpha_cutoff, t_floor, background,
                   out_color, out_depth, out_alpha, out_grad):
    n_tiles = bounds.shape[0] - 1
    for t in range(n_tiles):
        s = bounds[t]
        e = bounds[t + 1]
        if s == e:
            continue
        ty = t // tiles_x
        tx = t % tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        for py in range(y0, y1):
            fy = py + 0.5
            for px in range(x0, x1):
                fx = px + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dep = 0.0
                g0 = 0.0
                g1 = 0.0
                g2 = 0.0
                for k in range(s, e):
                    if T < t_floor:
                        break
                    i = entries[k]
                    dx = fx - mean2d[i, 0]
                    dy = fy - mean2d[i, 1]
                    rho = (conic[i, 0] * dx + 2.0 * conic[i, 1] * dy) * dx \
                        + conic[i, 2] * dy * dy
                    w = opacity[i] * np.exp(-0.5 * rho)
                    if w < alpha_cutoff:
                        continue
                    f = w * T
                    c0 += color[i, 0] * f
                    c1 += color[i, 1] * f
                    c2 += color[i, 2] * f
                    dep += depth[i] * f
                    g0 += proxy[i, 0] * f
                    g1 += proxy[i, 1] * f
                    g2 += proxy[i, 2] * f
                    T *= 1.0 - w
                out_color[py, px, 0] = c0 + background[0] * T
                out_color[py, px, 1] = c1 + background[1] * T
                out_color[py, px, 2] = c2 + background[2] * T
                out_depth[py, px] = dep
                out_alpha[py, px] = 1.0 - T
                out_grad[py, px, 0] = g0
                out_grad[py, px, 1] = g1
                out_grad[py, px, 2] = g2


@njit(cache=True)
def backward_kernel(entries, bounds, tiles_x, tile_size, height, width,
                    mean2d, conic, opacity, depth, color, proxy,
                    alpha_cutoff, t_floor, background,
                    has_c, has_d, has_a, has_g,
                    u_color, u_depth, u_alpha, u_grad,
                    g_alpha_raw, g_u, g_lam, g_color, g_z, g_proxy, hit):
    n_tiles = bounds.shape[0] - 1
    for t in range(n_tiles):
        s = bounds[t]
        e = bounds[t + 1]
        if s == e:
            continue
        for k in range(s, e):
            hit[entries[k]] = True
        ty = t // tiles_x
        tx = t % tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        for py in range(y0, y1):
            fy = py + 0.5
            for px in range(x0, x1):
                fx = px + 0.5
                # forward sweep: final transmittance and the last blended entry
                T = 1.0
                last = -1
                for k in range(s, e):
                    if T < t_floor:
                        break
                    i = entries[k]
                    dx = fx - mean2d[i, 0]
                    dy = fy - mean2d[i, 1]
                    rho = (conic[i, 0] * dx + 2.0 * conic[i, 1] * dy) * dx \
                        + conic[i, 2] * dy * dy
                    w = opacity[i] * np.exp(-0.5 * rho)
                    if w < alpha_cutoff:
                        continue
                    last = k
                    T *= 1.0 - w
                if last < 0:
                    continue
                t_end = T
                uc0 = uc1 = uc2 = 0.0
                ud = 0.0
                ua = 0.0
                ug0 = ug1 = ug2 = 0.0
                bg_tail = 0.0
                if has_c:
                    uc0 = u_color[py, px, 0]
                    uc1 = u_color[py, px, 1]
                    uc2 = u_color[py, px, 2]
                    bg_tail += uc0 * background[0] + uc1 * background[1] + uc2 * background[2]
                if has_d:
                    ud = u_depth[py, px]
                if has_a:
                    ua = u_alpha[py, px]
                    bg_tail -= ua
                if has_g:
                    ug0 = u_grad[py, px, 0]
                    ug1 = u_grad[py, px, 1]
                    ug2 = u_grad[py, px, 2]
                # reverse sweep with running suffix sums
                suffix = bg_tail * t_end
                t_run = t_end
                for k in range(last, s - 1, -1):
                    i = entries[k]
                    dx = fx - mean2d[i, 0]
                    dy = fy - mean2d[i, 1]
                    rho = (conic[i, 0] * dx + 2.0 * conic[i, 1] * dy) * dx \
                        + conic[i, 2] * dy * dy
                    e_val = np.exp(-0.5 * rho)
                    w = opacity[i] * e_val
                    if w < alpha_cutoff:
                        continue
                    t_k = t_run / (1.0 - w)
                    val = 0.0
                    if has_c:
                        val += uc0 * color[i, 0] + uc1 * color[i, 1] + uc2 * color[i, 2]
                    if has_d:
                        val += ud * depth[i]
                    if has_g:
                        val += ug0 * proxy[i, 0] + ug1 * proxy[i, 1] + ug2 * proxy[i, 2]
                    g_w = val * t_k - suffix / (1.0 - w)
                    contrib = w * t_k
                    g_alpha_raw[i] += g_w * e_val
                    gww = g_w * w
                    lx = conic[i, 0] * dx + conic[i, 1] * dy
                    ly = conic[i, 1] * dx + conic[i, 2] * dy
                    g_u[i, 0] += gww * lx
                    g_u[i, 1] += gww * ly
                    gam = -0.5 * gww
                    g_lam[i, 0] += gam * dx * dx
                    g_lam[i, 1] += gam * dx * dy
                    g_lam[i, 2] += gam * dy * dy
                    if has_c:
                        g_color[i, 0] += uc0 * contrib
                        g_color[i, 1] += uc1 * contrib
                        g_color[i, 2] += uc2 * contrib
                    if has_d:
                        g_z[i] += ud * contrib
                    if has_g:
                        g_proxy[i, 0] += ug0 * contrib
                        g_proxy[i, 1] += ug1 * contrib
                        g_proxy[i, 2] += ug2 * contrib
                    suffix += val * contrib
                    t_run = t_k
