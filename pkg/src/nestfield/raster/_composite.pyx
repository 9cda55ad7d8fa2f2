# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-tile front-to-back compositing kernel."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def composite_tiles(
    const double[:, ::1] means2d,
    const double[:, ::1] conics,
    const double[::1] opacities,
    const long long[::1] tile_ptr,
    const long long[::1] tile_splats,
    int width,
    int height,
    int tile_size,
    double alpha_clamp,
    double alpha_min,
    double t_cutoff,
):
    """Composite every pixel against the depth-sorted splat list of its tile.

    Returns (pix_start, pix_count, entry_splat, entry_weight, t_final); the
    entries of pixel p are entry_*[pix_start[p]:pix_start[p] + pix_count[p]]
    in front-to-back order.
    """
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int tiles_y = (height + tile_size - 1) // tile_size
    cdef Py_ssize_t n_pix = <Py_ssize_t>width * height
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pix_start_arr = np.zeros(n_pix, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pix_count_arr = np.zeros(n_pix, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] t_final_arr = np.ones(n_pix, dtype=np.float64)
    cdef long long[::1] pix_start = pix_start_arr
    cdef long long[::1] pix_count = pix_count_arr
    cdef double[::1] t_final = t_final_arr

    cdef Py_ssize_t capacity = max(1024, 4 * n_pix)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ent_splat_arr = np.empty(capacity, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ent_w_arr = np.empty(capacity, dtype=np.float64)
    cdef long long[::1] ent_splat = ent_splat_arr
    cdef double[::1] ent_w = ent_w_arr
    cdef Py_ssize_t n_ent = 0

    cdef int tx, ty, px, py, x0, y0, x1, y1
    cdef long long k, j, lo, hi
    cdef Py_ssize_t p
    cdef double T, alpha, dx, dy, power

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            lo = tile_ptr[ty * tiles_x + tx]
            hi = tile_ptr[ty * tiles_x + tx + 1]
            x0 = tx * tile_size
            y0 = ty * tile_size
            x1 = min(x0 + tile_size, width)
            y1 = min(y0 + tile_size, height)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    p = <Py_ssize_t>py * width + px
                    pix_start[p] = n_ent
                    T = 1.0
                    if n_ent + (hi - lo) > capacity:
                        capacity = 2 * capacity + (hi - lo)
                        ent_splat_arr = np.resize(ent_splat_arr, capacity)
                        ent_w_arr = np.resize(ent_w_arr, capacity)
                        ent_splat = ent_splat_arr
                        ent_w = ent_w_arr
                    for k in range(lo, hi):
                        j = tile_splats[k]
                        dx = px - means2d[j, 0]
                        dy = py - means2d[j, 1]
                        power = -0.5 * (conics[j, 0] * dx * dx + 2.0 * conics[j, 1] * dx * dy + conics[j, 2] * dy * dy)
                        alpha = opacities[j] * exp(power)
                        if alpha > alpha_clamp:
                            alpha = alpha_clamp
                        if alpha < alpha_min:
                            continue
                        ent_splat[n_ent] = j
                        ent_w[n_ent] = alpha * T
                        n_ent += 1
                        T = T * (1.0 - alpha)
                        if T < t_cutoff:
                            break
                    pix_count[p] = n_ent - pix_start[p]
                    t_final[p] = T
    return pix_start_arr, pix_count_arr, ent_splat_arr[:n_ent].copy(), ent_w_arr[:n_ent].copy(), t_final_arr
