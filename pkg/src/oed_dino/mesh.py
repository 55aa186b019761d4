"""Uniform triangulated meshes of the unit square and P1 finite element assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ParameterDomainError

_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass(frozen=True)
class Mesh2D:
    """Uniform mesh of [0, 1]^2 with every square cell split into two triangles.

    ``diagonal`` selects the split: ``"ne"`` joins the lower-left and upper-right
    corners of each cell, ``"nw"`` the lower-right and upper-left ones.  The two
    variants are mirror images of each other under x -> 1 - x.
    """

    n: int
    diagonal: str = "ne"
    coords: np.ndarray = field(init=False, repr=False)
    cells: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ParameterDomainError(f"cells per side must be a positive integer, got {self.n}")
        if self.diagonal not in ("ne", "nw"):
            raise ParameterDomainError(f"diagonal must be 'ne' or 'nw', got {self.diagonal!r}")
        n = int(self.n)
        ticks = np.linspace(0.0, 1.0, n + 1)
        xx, yy = np.meshgrid(ticks, ticks)
        coords = np.column_stack([xx.ravel(), yy.ravel()])

        i, j = np.meshgrid(np.arange(n), np.arange(n))
        a = (j * (n + 1) + i).ravel()
        b = a + 1
        c = a + (n + 1)
        d = c + 1
        if self.diagonal == "ne":
            tri = np.stack([np.column_stack([a, b, d]), np.column_stack([a, d, c])], axis=1)
        else:
            tri = np.stack([np.column_stack([a, b, c]), np.column_stack([b, d, c])], axis=1)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "cells", tri.reshape(-1, 3))

    @property
    def node_count(self) -> int:
        return (self.n + 1) ** 2

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def node_index(self, i, j):
        return np.asarray(j) * (self.n + 1) + np.asarray(i)

    def reflected(self) -> "Mesh2D":
        """Mesh whose node (i, j) sits at the mirror image of node (n - i, j) here."""
        return Mesh2D(self.n, "nw" if self.diagonal == "ne" else "ne")

    def mirror_permutation(self) -> np.ndarray:
        """Index map p with coords[p[k]] = (1 - x_k, y_k)."""
        n = self.n
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
        return self.node_index(n - i.ravel(), j.ravel())

    def boundary_nodes(self, side: str) -> np.ndarray:
        x, y = self.coords[:, 0], self.coords[:, 1]
        tol = 0.25 * self.h
        masks = {
            "bottom": y < tol,
            "top": y > 1.0 - tol,
            "left": x < tol,
            "right": x > 1.0 - tol,
        }
        if side == "all":
            return np.flatnonzero(masks["bottom"] | masks["top"] | masks["left"] | masks["right"])
        return np.flatnonzero(masks[side])

    def element_geometry(self):
        """Return (areas, grads) with grads[e, a] the gradient of the a-th hat on element e."""
        p = self.coords[self.cells]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        areas = 0.5 * np.abs(det)
        # inverse-transpose of the affine map applied to reference gradients
        inv = np.empty((len(det), 2, 2))
        inv[:, 0, 0] = e2[:, 1] / det
        inv[:, 0, 1] = -e2[:, 0] / det
        inv[:, 1, 0] = -e1[:, 1] / det
        inv[:, 1, 1] = e1[:, 0] / det
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        grads = np.einsum("ak,ekj->eaj", ref, inv)
        return areas, grads

    def locate(self, points):
        """Element index and barycentric weights for each point in ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = self.n
        ci = np.clip(np.floor(pts[:, 0] * n).astype(int), 0, n - 1)
        cj = np.clip(np.floor(pts[:, 1] * n).astype(int), 0, n - 1)
        first = 2 * (cj * n + ci)
        elems = np.empty(len(pts), dtype=int)
        bary = np.empty((len(pts), 3))
        for k, (pt, e0) in enumerate(zip(pts, first)):
            for e in (e0, e0 + 1):
                lam = _barycentric(self.coords[self.cells[e]], pt)
                if lam.min() >= -1e-12:
                    elems[k], bary[k] = e, np.clip(lam, 0.0, None)
                    break
            else:
                raise ParameterDomainError(f"point {pt} lies outside the unit square")
        return elems, bary


def _barycentric(verts, pt):
    T = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
    l12 = np.linalg.solve(T, pt - verts[0])
    return np.array([1.0 - l12.sum(), l12[0], l12[1]])


def local_matrices(mesh: Mesh2D):
    """Per-element P1 mass and unit-coefficient stiffness matrices, shape (n_el, 3, 3)."""
    areas, grads = mesh.element_geometry()
    Ke = areas[:, None, None] * np.einsum("eaj,ebj->eab", grads, grads)
    Me = areas[:, None, None] * _MASS_REF[None]
    return Me, Ke


def assemble(mesh: Mesh2D, local: np.ndarray) -> sp.csr_matrix:
    """Sum element matrices ``local`` (n_el, 3, 3) into a global CSR matrix."""
    cells = mesh.cells
    rows = np.repeat(cells, 3, axis=1).ravel()
    cols = np.tile(cells, (1, 3)).ravel()
    N = mesh.node_count
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(N, N)).tocsr()


def interpolation_matrix(mesh: Mesh2D, points) -> sp.csr_matrix:
    """Sparse (len(points), node_count) matrix of barycentric point evaluations."""
    elems, bary = mesh.locate(points)
    rows = np.repeat(np.arange(len(elems)), 3)
    cols = mesh.cells[elems].ravel()
    B = sp.coo_matrix((bary.ravel(), (rows, cols)), shape=(len(elems), mesh.node_count))
    return B.tocsr()
