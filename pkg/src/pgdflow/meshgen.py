"""Mesh builders: structured rectangles for verification and the curved swimmer channel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import DIRICHLET, NEUMANN, SLIP, ReferenceMesh, lattice_nodes

# boundary markers written to swimmer mesh files
INLET, SPHERE_MINUS, SPHERE_PLUS, OUTLET, WALL = 1, 2, 3, 4, 5


def high_order_mesh(k, vertices, triangles, boundary_edges, arcs=None) -> ReferenceMesh:
    """Promote a linear triangulation to degree k.

    boundary_edges maps a sorted vertex pair to (tag, marker).  arcs maps a sorted vertex pair to
    (centre, radius) for edges that follow a circle; their edge nodes are placed on the circle and
    element interiors are blended so neighbouring straight edges stay straight.
    """
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64).copy()
    arcs = arcs or {}
    # orient counter-clockwise
    p = vertices[triangles]
    area = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    triangles[area < 0] = triangles[area < 0][:, [0, 2, 1]]

    nodes = [v for v in vertices]
    edge_ids: dict[tuple[int, int], list[int]] = {}

    def edge_curve(a, b, t):
        """Points at fractions t along edge a->b (on the arc if the edge is curved)."""
        key = (min(a, b), max(a, b))
        A, B = vertices[a], vertices[b]
        if key in arcs:
            c, r = arcs[key]
            c = np.asarray(c, dtype=float)
            ta = np.arctan2(A[1] - c[1], A[0] - c[0])
            tb = np.arctan2(B[1] - c[1], B[0] - c[0])
            d = (tb - ta + np.pi) % (2 * np.pi) - np.pi
            th = ta + t * d
            return c[None, :] + r * np.column_stack([np.cos(th), np.sin(th)])
        return A[None, :] + t[:, None] * (B - A)[None, :]

    fr = np.arange(1, k) / k
    for a, b in {(min(int(t[i]), int(t[(i + 1) % 3])), max(int(t[i]), int(t[(i + 1) % 3])))
                 for t in triangles for i in range(3)}:
        pts = edge_curve(a, b, fr)
        ids = list(range(len(nodes), len(nodes) + len(pts)))
        nodes.extend(pts)
        edge_ids[(a, b)] = ids

    lat = lattice_nodes(k)
    bary = np.column_stack([1.0 - lat[:, 0] - lat[:, 1], lat[:, 0], lat[:, 1]])
    n_int = (k - 1) * (k - 2) // 2
    interior_bary = bary[len(bary) - n_int:] if n_int else bary[:0]
    elements = []
    for tri in triangles:
        conn = [int(v) for v in tri]
        for f in range(3):
            a, b = int(tri[f]), int(tri[(f + 1) % 3])
            ids = edge_ids[(min(a, b), max(a, b))]
            conn.extend(ids if a < b else ids[::-1])
        if n_int:
            X = interior_bary @ vertices[tri]
            for f in range(3):
                a, b = int(tri[f]), int(tri[(f + 1) % 3])
                if (min(a, b), max(a, b)) not in arcs:
                    continue
                la, lb = interior_bary[:, f], interior_bary[:, (f + 1) % 3]
                s = la + lb
                t = lb / s
                straight = vertices[a][None, :] + t[:, None] * (vertices[b] - vertices[a])[None, :]
                delta = edge_curve(a, b, t) - straight
                X = X + (s ** 2)[:, None] * delta
            conn.extend(range(len(nodes), len(nodes) + n_int))
            nodes.extend(X)
        elements.append(conn)

    lookup = {}
    for e, tri in enumerate(triangles):
        for f in range(3):
            a, b = int(tri[f]), int(tri[(f + 1) % 3])
            lookup[(min(a, b), max(a, b))] = (e, f)
    boundary = []
    for key, (tag, marker) in boundary_edges.items():
        e, f = lookup[(min(key), max(key))]
        boundary.append((e, f, tag, marker))
    boundary.sort()
    return ReferenceMesh(k, np.array(nodes), np.array(elements), np.array(boundary, dtype=np.int64).reshape(-1, 4))


def rectangle_mesh(k, nx, ny, box=(0.0, 1.0, 0.0, 1.0), sides=None) -> ReferenceMesh:
    """Structured mesh of a box, each cell split along its diagonal.

    sides maps 'left', 'right', 'bottom', 'top' to (tag, marker); Dirichlet by default.
    """
    x0, x1, y0, y1 = box
    sides = {s: (DIRICHLET, 0) for s in ("left", "right", "bottom", "top")} | (sides or {})
    xs, ys = np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    vid = lambda i, j: i * (ny + 1) + j  # noqa: E731
    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    bnd = {}
    for i in range(nx):
        bnd[(vid(i, 0), vid(i + 1, 0))] = sides["bottom"]
        bnd[(vid(i, ny), vid(i + 1, ny))] = sides["top"]
    for j in range(ny):
        bnd[(vid(0, j), vid(0, j + 1))] = sides["left"]
        bnd[(vid(nx, j), vid(nx, j + 1))] = sides["right"]
    return high_order_mesh(k, verts, tris, bnd)


@dataclass(frozen=True)
class SwimmerMeshSize:
    """Resolution controls for the swimmer channel mesh."""

    sphere_segments: int = 8
    outer_segments: int = 12
    annulus_area: float = 0.01
    strip_area: float = 0.05
    far_area: float = 0.4
    min_angle: float = 28.0


DESK = SwimmerMeshSize()
NOMINAL = SwimmerMeshSize(sphere_segments=14, outer_segments=20, annulus_area=0.004, strip_area=0.02, far_area=0.1)


def swimmer_mesh(k: int, size: SwimmerMeshSize = DESK, geometry=None) -> ReferenceMesh:
    """Half channel [-L, L] x [0, H] around two half-disks, conforming to the mapping interfaces."""
    import triangle

    from .mapping import SwimmerGeometry

    g = geometry or SwimmerGeometry()
    L, H, c0 = g.L, g.H, g.x0
    centres = (-c0, c0)
    pts: list[tuple[float, float]] = []
    index: dict[tuple[float, float], int] = {}

    def vid(x, y):
        key = (round(x, 14), round(y, 14))
        if key not in index:
            index[key] = len(pts)
            pts.append((x, y))
        return index[key]

    segs, marks = [], []
    # markers used inside this function only
    M_IN, M_OUT, M_WALL, M_LINE = 101, 104, 105, 120
    M_SPH = {-1: 102, 1: 103}
    M_RING = {-1: 112, 1: 113}

    def arc(cx, r, n, marker):
        ids = [vid(cx + r * np.cos(t), r * np.sin(t)) for t in np.linspace(0.0, np.pi, n + 1)]
        for a, b in zip(ids[:-1], ids[1:]):
            segs.append((a, b))
            marks.append(marker)

    for sgn, cx in zip((-1, 1), centres):
        arc(cx, g.R_ref, size.sphere_segments, M_SPH[sgn])
        arc(cx, g.R_out, size.outer_segments, M_RING[sgn])
    xb = sorted({-L, L} | {cx + s * r for cx in centres for s in (-1, 1) for r in (g.R_ref, g.R_out, g.R_int)})
    for a, b in zip(xb[:-1], xb[1:]):
        inside = any(abs(0.5 * (a + b) - cx) < g.R_ref for cx in centres)
        if not inside:
            segs.append((vid(a, 0.0), vid(b, 0.0)))
            marks.append(M_WALL)
    xt = sorted({-L, L} | {cx + s * g.R_int for cx in centres for s in (-1, 1)})
    for a, b in zip(xt[:-1], xt[1:]):
        segs.append((vid(a, H), vid(b, H)))
        marks.append(M_WALL)
    segs.append((vid(-L, 0.0), vid(-L, H)))
    marks.append(M_IN)
    segs.append((vid(L, 0.0), vid(L, H)))
    marks.append(M_OUT)
    for cx in centres:
        for s in (-1, 1):
            x = cx + s * g.R_int
            segs.append((vid(x, 0.0), vid(x, H)))
            marks.append(M_LINE)

    regions = []
    for cx in centres:
        regions.append([cx, 0.5 * (g.R_ref + g.R_out), 1, size.annulus_area])
        regions.append([cx, 0.5 * (g.R_out + H), 2, size.strip_area])
    regions.append([0.0, 1.0, 3, size.far_area])
    regions.append([-0.5 * (L + c0 + g.R_int), 1.0, 3, size.far_area])
    regions.append([0.5 * (L + c0 + g.R_int), 1.0, 3, size.far_area])
    pslg = {
        "vertices": np.array(pts),
        "segments": np.array(segs),
        "segment_markers": np.array(marks)[:, None],
        "holes": np.array([[cx, 0.5 * g.R_ref] for cx in centres]),
        "regions": np.array(regions),
    }
    out = triangle.triangulate(pslg, f"pq{size.min_angle}Aae")
    verts = out["vertices"].copy()
    tris = out["triangles"]
    vmark = out["vertex_markers"].ravel()
    circles = {M_SPH[-1]: (centres[0], g.R_ref), M_SPH[1]: (centres[1], g.R_ref),
               M_RING[-1]: (centres[0], g.R_out), M_RING[1]: (centres[1], g.R_out)}
    for m, (cx, r) in circles.items():
        sel = vmark == m
        d = verts[sel] - np.array([cx, 0.0])
        verts[sel] = np.array([cx, 0.0]) + r * d / np.linalg.norm(d, axis=1)[:, None]

    bnd, arcs = {}, {}
    file_marker = {M_IN: (DIRICHLET, INLET), M_SPH[-1]: (DIRICHLET, SPHERE_MINUS), M_SPH[1]: (DIRICHLET, SPHERE_PLUS),
                   M_OUT: (NEUMANN, OUTLET), M_WALL: (SLIP, WALL)}
    for (a, b), m in zip(out["edges"], out["edge_markers"].ravel()):
        key = (min(a, b), max(a, b))
        if m in file_marker:
            bnd[key] = file_marker[m]
        if m in circles:
            cx, r = circles[m]
            arcs[key] = ((cx, 0.0), r)
    return high_order_mesh(k, verts, tris, bnd, arcs)


def main(argv=None) -> int:
    """Write the swimmer mesh to a file readable by `load_mesh`."""
    import argparse

    from .mesh import save_mesh

    ap = argparse.ArgumentParser(prog="python -m pgdflow.meshgen", description=main.__doc__)
    ap.add_argument("output", help="mesh file to write")
    ap.add_argument("--degree", type=int, default=3, help="element degree k (1 to 4)")
    ap.add_argument("--size", choices=("desk", "nominal"), default="desk", help="resolution preset")
    args = ap.parse_args(argv)
    if not 1 <= args.degree <= 4:
        ap.error("degree must be in [1, 4]")
    mesh = swimmer_mesh(args.degree, DESK if args.size == "desk" else NOMINAL)
    save_mesh(mesh, args.output)
    print(f"{args.output}: {mesh.n_elements} elements of degree {mesh.k}, {len(mesh.nodes)} nodes")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
