"""CSV and legacy-VTK writers.

All numbers are written with ``.15e`` (16 significant digits, ``.``
decimal separator), independent of locale, so repeated runs produce
identical files.
"""
from __future__ import annotations

import os

import numpy as np

SERIES_HEADER = ("t", "int_n", "int_w", "int_c", "l2_u")
CONVERGENCE_HEADER = ("resolution", "var", "norm", "error", "order")
FAILED = "failed"


class OutputError(OSError):
    """Writing an output file failed; the message names the path."""


def fmt(v) -> str:
    return format(float(v), ".15e")


def write_text(path, text):
    path = os.fspath(path)
    try:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None
    return path


def write_series_csv(rows, path):
    """Per-step totals: ``t,int_n,int_w,int_c,l2_u``."""
    rows = list(rows)
    if not rows:
        raise ValueError("series is empty")
    out = [",".join(SERIES_HEADER)]
    for r in rows:
        out.append(",".join(fmt(r[k]) for k in SERIES_HEADER))
    return write_text(path, "\n".join(out) + "\n")


def write_diagnostics_csv(rows, diagnostics, path):
    """``t`` with the L^(10/3) norms of ``s`` and ``c`` at every step."""
    out = ["t,s_L10_3,c_L10_3"]
    for r, (ns, nc) in zip(rows, diagnostics):
        out.append(f"{fmt(r['t'])},{fmt(ns)},{fmt(nc)}")
    return write_text(path, "\n".join(out) + "\n")


def write_convergence_csv(rows, path):
    """``resolution,var,norm,error,order``; failed rows carry ``failed`` as error."""
    out = [",".join(CONVERGENCE_HEADER)]
    for r in rows:
        res = r["resolution"]
        res = str(res) if isinstance(res, (int, np.integer)) else fmt(res)
        err = FAILED if r.get("failed") else fmt(r["error"])
        order = "" if r.get("order") is None else fmt(r["order"])
        out.append(f"{res},{r['var']},{r['norm']},{err},{order}")
    return write_text(path, "\n".join(out) + "\n")


def _vertex_vector(space, coeffs):
    """Vertex values of a (possibly bubble-enriched) vector field."""
    nv = space.mesh.n_vertices
    n = space.scalar_ndofs
    return np.column_stack([coeffs[:nv], coeffs[n : n + nv]])


def vtk_text(mesh, state, title="chemoflow snapshot") -> str:
    S = state.spaces
    nv, ne = mesh.n_vertices, mesh.n_triangles
    lines = ["# vtk DataFile Version 3.0", f"{title} t={fmt(state.t)}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {ne} {4 * ne}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {ne}")
    lines += ["5"] * ne
    lines.append(f"POINT_DATA {nv}")
    for name, vals in (("n", state.n), ("w", state.w), ("c", state.c), ("pi", state.pi)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [fmt(v) for v in vals[:nv]]
    for name, space, coeffs in (("s", S.flux, state.s), ("u", S.velocity, state.u)):
        lines.append(f"VECTORS {name} double")
        lines += [f"{fmt(a)} {fmt(b)} 0" for a, b in _vertex_vector(space, coeffs)]
    return "\n".join(lines) + "\n"


def write_vtk_snapshot(mesh, state, path):
    """Legacy ASCII unstructured grid with vertex values of every field."""
    return write_text(path, vtk_text(mesh, state))
