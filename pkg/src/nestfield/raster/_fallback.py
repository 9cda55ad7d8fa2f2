"""Pure numpy implementation of the per-tile compositing kernel.

Same contract as the compiled ``_composite.composite_tiles``; used when the
extension is not built or ``NESTFIELD_PURE_PYTHON`` is set.
"""

import numpy as np


def composite_tiles(
    means2d, conics, opacities, tile_ptr, tile_splats, width, height, tile_size,
    alpha_clamp, alpha_min, t_cutoff,
):
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_pix = width * height
    pix_start = np.zeros(n_pix, dtype=np.int64)
    pix_count = np.zeros(n_pix, dtype=np.int64)
    t_final = np.ones(n_pix, dtype=np.float64)
    splat_chunks, weight_chunks = [], []
    n_ent = 0
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            x0, y0 = tx * tile_size, ty * tile_size
            xs = np.arange(x0, min(x0 + tile_size, width))
            ys = np.arange(y0, min(y0 + tile_size, height))
            px, py = np.meshgrid(xs, ys)
            pix = (py * width + px).ravel()
            splats = tile_splats[tile_ptr[t]:tile_ptr[t + 1]]
            if splats.size == 0:
                pix_start[pix] = n_ent
                continue
            dx = px.ravel()[:, None] - means2d[splats, 0][None, :]
            dy = py.ravel()[:, None] - means2d[splats, 1][None, :]
            c = conics[splats]
            power = -0.5 * (c[:, 0] * dx * dx + 2.0 * c[:, 1] * dx * dy + c[:, 2] * dy * dy)
            alpha = np.minimum(opacities[splats] * np.exp(power), alpha_clamp)
            alpha[alpha < alpha_min] = 0.0
            trans = np.cumprod(1.0 - alpha, axis=1)
            t_before = np.ones_like(trans)
            t_before[:, 1:] = trans[:, :-1]
            # A splat is composited while the transmittance before it is above the cutoff.
            live = t_before >= t_cutoff
            keep = live & (alpha > 0.0)
            weight = alpha * t_before
            n_live = live.sum(axis=1)
            t_final[pix] = trans[np.arange(len(pix)), n_live - 1]
            counts = keep.sum(axis=1)
            rows = np.repeat(np.arange(len(pix)), counts)
            cols = np.nonzero(keep)[1]
            # pixels inside a tile are written row-major, so starts follow the local order
            starts = n_ent + np.concatenate([[0], np.cumsum(counts)[:-1]])
            pix_start[pix] = starts
            pix_count[pix] = counts
            splat_chunks.append(splats[cols])
            weight_chunks.append(weight[rows, cols])
            n_ent += int(counts.sum())
    ent_splat = np.concatenate(splat_chunks) if splat_chunks else np.zeros(0, dtype=np.int64)
    ent_w = np.concatenate(weight_chunks) if weight_chunks else np.zeros(0, dtype=np.float64)
    return pix_start, pix_count, ent_splat.astype(np.int64), ent_w, t_final
