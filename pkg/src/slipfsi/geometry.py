"""Reference geometry: concentric spherical shell, rigid body data, mesh I/O.

The fluid reference domain is the gap between a solid ball (radius
``solid_radius``, boundary tag SOLID) and an outer ball (radius
``fluid_radius``, tag OUTER).  Meshing: icosphere surface triangulation,
extruded radially into prism layers, each prism split into three tetrahedra
with globally consistent diagonals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

TAG_SOLID = 1
TAG_OUTER = 2

MESH_HEADER = "slipfsi-mesh v1"


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# icosphere
# ---------------------------------------------------------------------------

def icosphere(refinement: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere: vertices on the unit sphere, triangular faces.

    refinement = number of midpoint subdivisions of the icosahedron.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(refinement):
        edge_mid: dict[tuple[int, int], int] = {}
        new_faces = []
        vlist = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = vlist[i] + vlist[j]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(vlist)
                vlist.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def _split_prism(bottom, top):
    """Split prism (b0,b1,b2,t0,t1,t2) into 3 tets with consistent diagonals.

    Diagonal choices depend only on global vertex ids (smallest-id rule), so
    adjacent prisms agree on shared quad faces.
    """
    v = [bottom[0], bottom[1], bottom[2], top[0], top[1], top[2]]
    # rotate so the smallest id sits at position 0
    imin = int(np.argmin(v))
    rot = imin % 3
    order = [rot, (rot + 1) % 3, (rot + 2) % 3]
    b = [v[i] for i in order]
    t = [v[i + 3] for i in order]
    if imin >= 3:
        # smallest vertex is on the top face: flip the prism upside down,
        # which swaps the faces and reverses orientation
        b, t = t, b
    v0, v1, v2 = b
    v3, v4, v5 = t
    if min(v1, v5) < min(v2, v4):
        tets = [(v0, v1, v2, v5), (v0, v1, v5, v4), (v0, v4, v5, v3)]
    else:
        tets = [(v0, v1, v2, v4), (v0, v4, v2, v5), (v0, v4, v5, v3)]
    return tets


# ---------------------------------------------------------------------------
# mesh container
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray            # (nv, 3)
    tets: np.ndarray                # (nt, 4) positive orientation
    boundary_facets: np.ndarray     # (nf, 3) vertex triples
    facet_tags: np.ndarray          # (nf,) TAG_SOLID or TAG_OUTER
    vertex_normals: np.ndarray | None = None  # unit, outward w.r.t. fluid, NaN off-boundary

    # derived, filled by finalize()
    facet_normals: np.ndarray = field(default=None, repr=False)
    facet_areas: np.ndarray = field(default=None, repr=False)
    tet_volumes: np.ndarray = field(default=None, repr=False)

    def finalize(self) -> "Mesh":
        x = self.vertices
        t = self.tets
        e1 = x[t[:, 1]] - x[t[:, 0]]
        e2 = x[t[:, 2]] - x[t[:, 0]]
        e3 = x[t[:, 3]] - x[t[:, 0]]
        vol6 = np.einsum("ij,ij->i", np.cross(e1, e2), e3)
        neg = vol6 < 0
        if np.any(neg):
            t = t.copy()
            t[neg, 2], t[neg, 3] = t[neg, 3].copy(), t[neg, 2].copy()
            self.tets = t
            e2 = x[t[:, 2]] - x[t[:, 0]]
            e3 = x[t[:, 3]] - x[t[:, 0]]
            vol6 = np.einsum("ij,ij->i", np.cross(e1, e2), e3)
        self.tet_volumes = vol6 / 6.0

        f = self.boundary_facets
        cr = np.cross(x[f[:, 1]] - x[f[:, 0]], x[f[:, 2]] - x[f[:, 0]])
        area2 = np.linalg.norm(cr, axis=1)
        normals = cr / area2[:, None]
        # orient outward with respect to the fluid: away from the adjacent
        # tet's centroid
        owner = self._facet_owner_tets()
        cent_t = x[self.tets[owner]].mean(axis=1)
        cent_f = x[f].mean(axis=1)
        flip = np.einsum("ij,ij->i", normals, cent_f - cent_t) < 0
        if np.any(flip):
            f = f.copy()
            f[flip, 1], f[flip, 2] = f[flip, 2].copy(), f[flip, 1].copy()
            self.boundary_facets = f
            normals[flip] *= -1.0
        self.facet_normals = normals
        self.facet_areas = 0.5 * area2
        return self

    def _facet_owner_tets(self) -> np.ndarray:
        face_map: dict[tuple[int, int, int], int] = {}
        for it, tet in enumerate(self.tets):
            for tri in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
                key = tuple(sorted(tet[list(tri)]))
                face_map[key] = it
        owners = np.empty(len(self.boundary_facets), dtype=np.int64)
        for i, fac in enumerate(self.boundary_facets):
            key = tuple(sorted(fac))
            if key not in face_map:
                raise GeometryError(f"boundary facet {fac} is not a face of any tet")
            owners[i] = face_map[key]
        return owners

    # boundary vertex bookkeeping -------------------------------------------------
    def boundary_vertices(self, tag: int) -> np.ndarray:
        sel = self.facet_tags == tag
        return np.unique(self.boundary_facets[sel])

    def closed_surface_defect(self, tag: int) -> float:
        """Norm of sum(area * normal) over one tagged boundary (0 for a closed surface)."""
        sel = self.facet_tags == tag
        s = (self.facet_areas[sel, None] * self.facet_normals[sel]).sum(axis=0)
        scale = self.facet_areas[sel].sum()
        return float(np.linalg.norm(s) / scale)

    def quality_report(self) -> dict:
        x = self.vertices[self.tets]
        edges = []
        for i in range(4):
            for j in range(i + 1, 4):
                edges.append(np.linalg.norm(x[:, i] - x[:, j], axis=1))
        edges = np.stack(edges)
        h = edges.max(axis=0)
        # inradius from volume and face areas
        faces = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]
        areas = sum(
            0.5 * np.linalg.norm(np.cross(x[:, b] - x[:, a], x[:, c] - x[:, a]), axis=1)
            for a, b, c in faces
        )
        rho = 3.0 * self.tet_volumes / areas
        aspect = h / rho
        return {
            "n_vertices": int(len(self.vertices)),
            "n_tets": int(len(self.tets)),
            "h_max": float(h.max()),
            "h_min": float(h.min()),
            "aspect_max": float(aspect.max()),
            "aspect_mean": float(aspect.mean()),
            "volume": float(self.tet_volumes.sum()),
        }


@dataclass
class DomainConfig:
    solid_radius: float
    fluid_radius: float
    refinement: int
    mesh: Mesh
    builtin_shell: bool = True

    @property
    def gap(self) -> float:
        """Initial clearance between the solid boundary and the outer wall."""
        return self.fluid_radius - self.solid_radius

    def outer_distance(self, x: np.ndarray) -> np.ndarray:
        """dist(x, ∂Ω) for points inside the outer ball (builtin shell)."""
        if not self.builtin_shell:
            raise GeometryError("outer_distance requires the builtin shell geometry")
        return self.fluid_radius - np.linalg.norm(np.atleast_2d(x), axis=-1)


def make_reference_geometry(solid_radius: float = 1.0, fluid_radius: float = 4.0,
                            refinement: int = 1) -> DomainConfig:
    """Build the concentric-shell reference domain.

    Radial layers are geometrically graded so element size scales with radius;
    refinement doubles the angular resolution and roughly doubles the layers.
    """
    if not (0.0 < solid_radius < fluid_radius):
        raise GeometryError(
            f"need 0 < solid_radius < fluid_radius, got {solid_radius}, {fluid_radius}")
    if refinement < 0 or refinement > 4:
        raise GeometryError("refinement must be between 0 and 4")

    sverts, sfaces = icosphere(refinement)
    n_shell = len(sverts)
    edge = 1.0515 * 0.5 ** refinement  # icosahedron edge length after subdivision
    n_layers = max(2, int(round(np.log(fluid_radius / solid_radius) / np.log1p(edge))))
    radii = solid_radius * (fluid_radius / solid_radius) ** (np.arange(n_layers + 1) / n_layers)

    verts = np.concatenate([r * sverts for r in radii], axis=0)
    tets = []
    for k in range(n_layers):
        lo = k * n_shell
        hi = (k + 1) * n_shell
        for a, b, c in sfaces:
            tets.extend(_split_prism((lo + a, lo + b, lo + c), (hi + a, hi + b, hi + c)))
    tets = np.array(tets, dtype=np.int64)

    solid_fac = sfaces.copy()
    outer_fac = sfaces + n_layers * n_shell
    facets = np.concatenate([solid_fac, outer_fac], axis=0)
    tags = np.concatenate([
        np.full(len(solid_fac), TAG_SOLID, dtype=np.int64),
        np.full(len(outer_fac), TAG_OUTER, dtype=np.int64),
    ])

    normals = np.full_like(verts, np.nan)
    rad = verts / np.linalg.norm(verts, axis=1)[:, None]
    solid_ids = np.arange(n_shell)
    outer_ids = np.arange(n_layers * n_shell, (n_layers + 1) * n_shell)
    normals[solid_ids] = -rad[solid_ids]   # outward w.r.t. the fluid: into the solid
    normals[outer_ids] = rad[outer_ids]

    mesh = Mesh(verts, tets, facets, tags, vertex_normals=normals).finalize()
    logger.debug("shell mesh: %s", mesh.quality_report())
    return DomainConfig(solid_radius, fluid_radius, refinement, mesh)


# ---------------------------------------------------------------------------
# rigid body
# ---------------------------------------------------------------------------

@dataclass
class RigidBody:
    mass: float
    inertia: np.ndarray  # 3×3, reference (body) frame

    @classmethod
    def uniform_ball(cls, density: float, radius: float) -> "RigidBody":
        m = density * 4.0 / 3.0 * np.pi * radius ** 3
        return cls(mass=m, inertia=0.4 * m * radius ** 2 * np.eye(3))


@dataclass
class RigidState:
    """Rigid configuration and reference-frame velocities.

    h: body-center position, Q: orientation, l_body/omega_body: translational
    and angular velocity rotated back to the reference frame.
    """
    h: np.ndarray
    Q: np.ndarray
    l_body: np.ndarray
    omega_body: np.ndarray

    @classmethod
    def rest(cls) -> "RigidState":
        return cls(np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))

    @property
    def l_spatial(self) -> np.ndarray:
        return self.Q @ self.l_body

    @property
    def omega_spatial(self) -> np.ndarray:
        return self.Q @ self.omega_body

    def orthogonality_defect(self) -> float:
        return float(np.linalg.norm(self.Q.T @ self.Q - np.eye(3)))


def reorthonormalize(Q: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition)."""
    u, _, vt = np.linalg.svd(Q)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] *= -1.0
        R = u @ vt
    return R


def inertia_tensor(density: float, surface_vertices: np.ndarray,
                   surface_faces: np.ndarray) -> tuple[float, np.ndarray]:
    """Mass and inertia tensor of a uniform solid bounded by a closed triangulated
    surface, about its centroid.

    Volume integrals are reduced to exact surface quadrature via the divergence
    theorem (the integrands are polynomials on each facet).
    """
    x = surface_vertices
    f = surface_faces
    a, b, c = x[f[:, 0]], x[f[:, 1]], x[f[:, 2]]
    cr = np.cross(b - a, c - a)  # 2*area*normal, outward if faces are oriented

    # closedness check: sum of vector areas must vanish
    defect = np.linalg.norm(cr.sum(axis=0)) / np.linalg.norm(cr, axis=1).sum()
    if defect > 1e-10:
        raise GeometryError(f"surface is not closed (vector-area defect {defect:.2e})")

    # degree-3 exact rule on each triangle for the cubic integrands
    bary = np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6],
    ])
    w = np.array([-27.0 / 48.0, 25.0 / 48.0, 25.0 / 48.0, 25.0 / 48.0])
    pts = np.einsum("qk,fkj->fqj", bary, np.stack([a, b, c], axis=1))  # (nf, 4, 3)

    xn = np.einsum("fqj,fj->fq", pts, cr)  # x·(2A n) at quadrature points
    vol = np.sum(w[None, :] * xn) / 2.0 / 3.0
    if vol < 0:
        raise GeometryError("surface orientation is inward (negative volume)")
    # centroid: ∫x_i dV = 1/4 ∮ x_i (x·n) dS
    cm = np.einsum("q,fqi,fq->i", w, pts, xn) / 2.0 / 4.0 / vol
    # second moments about the centroid: ∫x_i x_j dV = 1/5 ∮ x_i x_j (x·n) dS
    p = pts - cm
    xn_c = np.einsum("fqj,fj->fq", p, cr)
    second = np.einsum("q,fqi,fqj,fq->ij", w, p, p, xn_c) / 2.0 / 5.0
    inertia = density * (np.trace(second) * np.eye(3) - second)
    return density * vol, 0.5 * (inertia + inertia.T)


def body_distance(state: RigidState, domain: DomainConfig) -> float:
    """Minimum distance from the moved solid surface to the outer wall (≥ 0)."""
    mesh = domain.mesh
    ids = mesh.boundary_vertices(TAG_SOLID)
    y = mesh.vertices[ids]
    x = state.h[None, :] + y @ state.Q.T
    d = domain.outer_distance(x)
    return float(max(d.min(), 0.0))


# ---------------------------------------------------------------------------
# mesh file format
# ---------------------------------------------------------------------------

def write_mesh(mesh: Mesh, path: str) -> None:
    tag_names = {TAG_SOLID: "SOLID", TAG_OUTER: "OUTER"}
    with open(path, "w") as fh:
        fh.write(MESH_HEADER + "\n")
        fh.write(f"vertices {len(mesh.vertices)}\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        fh.write(f"tets {len(mesh.tets)}\n")
        for t in mesh.tets:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
        fh.write(f"facets {len(mesh.boundary_facets)}\n")
        for f, tg in zip(mesh.boundary_facets, mesh.facet_tags):
            fh.write(f"{f[0]} {f[1]} {f[2]} {tag_names[int(tg)]}\n")


def read_mesh(path: str) -> Mesh:
    tag_values = {"SOLID": TAG_SOLID, "OUTER": TAG_OUTER}
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MESH_HEADER:
        raise GeometryError(f"not a {MESH_HEADER!r} file: {path}")
    pos = 1

    def expect(section):
        nonlocal pos
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0] != section:
            raise GeometryError(f"expected '{section} <count>' at line {pos + 1} of {path}")
        pos += 1
        return int(parts[1])

    nv = expect("vertices")
    verts = np.array([[float(t) for t in lines[pos + i].split()] for i in range(nv)])
    pos += nv
    nt = expect("tets")
    tets = np.array([[int(t) for t in lines[pos + i].split()] for i in range(nt)], dtype=np.int64)
    pos += nt
    nf = expect("facets")
    facets = np.empty((nf, 3), dtype=np.int64)
    tags = np.empty(nf, dtype=np.int64)
    for i in range(nf):
        parts = lines[pos + i].split()
        facets[i] = [int(p) for p in parts[:3]]
        if parts[3] not in tag_values:
            raise GeometryError(f"unknown boundary tag {parts[3]!r} in {path}")
        tags[i] = tag_values[parts[3]]
    if verts.shape != (nv, 3):
        raise GeometryError("malformed vertex block")
    if tets.min(initial=0) < 0 or tets.max(initial=-1) >= nv or facets.max(initial=-1) >= nv:
        raise GeometryError("vertex index out of range")

    # area-weighted facet-average vertex normals for imported meshes
    mesh = Mesh(verts, tets, facets, tags).finalize()
    normals = np.full_like(verts, np.nan)
    acc = np.zeros_like(verts)
    np.add.at(acc, facets.ravel(),
              np.repeat(mesh.facet_normals * mesh.facet_areas[:, None], 3, axis=0))
    bnd = np.unique(facets)
    acc_n = np.linalg.norm(acc[bnd], axis=1)
    normals[bnd] = acc[bnd] / acc_n[:, None]
    mesh.vertex_normals = normals
    return mesh
