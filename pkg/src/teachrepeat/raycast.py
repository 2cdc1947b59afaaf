"""Ray / surfel-disc intersection with a uniform 2D grid accelerator.

Surfels are one-sided discs: a ray hits only the face whose normal points
back toward the sensor.  The grid bins discs by the xy cells their bounding
square touches; rays walk the grid with a 2D DDA and stop once the entry
distance of the current cell exceeds the best hit so far.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np


@dataclass(frozen=True, eq=False)
class SurfelGrid:
    x0: float
    y0: float
    cell: float
    nx: int
    ny: int
    start: np.ndarray  # (nx*ny + 1,) CSR offsets
    items: np.ndarray  # surfel indices


def build_grid(centers: np.ndarray, radii: np.ndarray, cell: float = 2.0, pad: float = 50.0) -> SurfelGrid:
    if len(centers) == 0:
        return SurfelGrid(0.0, 0.0, cell, 1, 1, np.zeros(2, np.int64), np.zeros(0, np.int64))
    lo = centers[:, :2].min(axis=0) - pad
    hi = centers[:, :2].max(axis=0) + pad
    nx = int(np.ceil((hi[0] - lo[0]) / cell)) + 1
    ny = int(np.ceil((hi[1] - lo[1]) / cell)) + 1
    ix0 = np.floor((centers[:, 0] - radii - lo[0]) / cell).astype(np.int64)
    ix1 = np.floor((centers[:, 0] + radii - lo[0]) / cell).astype(np.int64)
    iy0 = np.floor((centers[:, 1] - radii - lo[1]) / cell).astype(np.int64)
    iy1 = np.floor((centers[:, 1] + radii - lo[1]) / cell).astype(np.int64)
    cells, owners = [], []
    for k in range(len(centers)):
        xs, ys = np.meshgrid(np.arange(ix0[k], ix1[k] + 1), np.arange(iy0[k], iy1[k] + 1), indexing="ij")
        cells.append((xs * ny + ys).ravel())
        owners.append(np.full(xs.size, k, np.int64))
    cells = np.concatenate(cells)
    owners = np.concatenate(owners)
    order = np.lexsort((owners, cells))
    cells, owners = cells[order], owners[order]
    counts = np.bincount(cells, minlength=nx * ny)
    start = np.zeros(nx * ny + 1, np.int64)
    start[1:] = np.cumsum(counts)
    return SurfelGrid(float(lo[0]), float(lo[1]), float(cell), nx, ny, start, owners)


@nb.njit(cache=True, inline="always")
def _hit_disc(ox, oy, oz, dx, dy, dz, C, N, s, r):
    den = dx * N[s, 0] + dy * N[s, 1] + dz * N[s, 2]
    if den >= -1e-12:
        return -1.0
    cx, cy, cz = C[s, 0], C[s, 1], C[s, 2]
    t = ((cx - ox) * N[s, 0] + (cy - oy) * N[s, 1] + (cz - oz) * N[s, 2]) / den
    if t <= 1e-6:
        return -1.0
    px = ox + t * dx - cx
    py = oy + t * dy - cy
    pz = oz + t * dz - cz
    if px * px + py * py + pz * pz > r * r:
        return -1.0
    return t


@nb.njit(cache=True)
def _cast_grid(origin, dirs, max_range, x0, y0, cell, nx, ny, start, items,
               centers, normals, radii, active, zmin, zmax):
    n_rays = dirs.shape[0]
    t_out = np.full(n_rays, np.inf)
    idx_out = np.full(n_rays, -1, np.int64)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for k in range(n_rays):
        dx, dy, dz = dirs[k, 0], dirs[k, 1], dirs[k, 2]
        best = max_range
        # leave early once the ray exits the height slab holding every surfel
        if dz > 1e-12:
            best = min(best, (zmax - oz) / dz)
        elif dz < -1e-12:
            best = min(best, (zmin - oz) / dz)
        limit = best
        best_i = -1
        gx = (ox - x0) / cell
        gy = (oy - y0) / cell
        ix = int(np.floor(gx))
        iy = int(np.floor(gy))
        step_x = 1 if dx > 0 else -1
        step_y = 1 if dy > 0 else -1
        big = 1e30
        if abs(dx) > 1e-12:
            nxt = (ix + (1 if dx > 0 else 0)) * cell + x0
            tmax_x = (nxt - ox) / dx
            tdelta_x = cell / abs(dx)
        else:
            tmax_x = big
            tdelta_x = big
        if abs(dy) > 1e-12:
            nxt = (iy + (1 if dy > 0 else 0)) * cell + y0
            tmax_y = (nxt - oy) / dy
            tdelta_y = cell / abs(dy)
        else:
            tmax_y = big
            tdelta_y = big
        t_enter = 0.0
        while t_enter <= best:
            if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
                break
            c = ix * ny + iy
            for p in range(start[c], start[c + 1]):
                s = items[p]
                if not active[s]:
                    continue
                t = _hit_disc(ox, oy, oz, dx, dy, dz, centers, normals, s, radii[s])
                if t > 0.0 and (t < best or (t == best and s < best_i)):
                    best = t
                    best_i = s
            if tmax_x < tmax_y:
                t_enter = tmax_x
                tmax_x += tdelta_x
                ix += step_x
            else:
                t_enter = tmax_y
                tmax_y += tdelta_y
                iy += step_y
        if best_i >= 0 and best <= limit:
            t_out[k] = best
            idx_out[k] = best_i
    return t_out, idx_out


@nb.njit(cache=True)
def _cast_brute(origin, dirs, max_range, centers, normals, radii, t_in, idx_in, offset):
    ox, oy, oz = origin[0], origin[1], origin[2]
    for k in range(dirs.shape[0]):
        best = min(t_in[k], max_range)
        for s in range(centers.shape[0]):
            t = _hit_disc(ox, oy, oz, dirs[k, 0], dirs[k, 1], dirs[k, 2], centers, normals, s, radii[s])
            if t > 0.0 and t < best:
                best = t
                t_in[k] = t
                idx_in[k] = offset + s
    return t_in, idx_in


def cast_rays(origin: np.ndarray, dirs: np.ndarray, max_range: float, grid: SurfelGrid,
              centers: np.ndarray, normals: np.ndarray, radii: np.ndarray, active: np.ndarray,
              extra: tuple | None = None):
    """Nearest-hit distance and surfel index per ray (``inf`` / ``-1`` on miss).

    ``extra`` optionally holds ``(centers, normals, radii, index_offset)`` of moving
    surfels that are tested by brute force after the grid pass.
    """
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    if len(centers):
        zmin = float(np.min(centers[:, 2] - radii)) - 1e-6
        zmax = float(np.max(centers[:, 2] + radii)) + 1e-6
    else:
        zmin, zmax = 0.0, 0.0
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    t, idx = _cast_grid(origin, dirs, float(max_range), grid.x0, grid.y0, grid.cell, grid.nx, grid.ny,
                        grid.start, grid.items, centers, normals, radii, active, zmin, zmax)
    if extra is not None and len(extra[0]):
        ec, en, er, off = extra
        t, idx = _cast_brute(origin, dirs, float(max_range), np.ascontiguousarray(ec, np.float64),
                             np.ascontiguousarray(en, np.float64), np.ascontiguousarray(er, np.float64),
                             t, idx, int(off))
    return t, idx
