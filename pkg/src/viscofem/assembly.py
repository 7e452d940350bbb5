"""Assembly of the weak-form operators and load functionals.

Operators are scipy CSR matrices over interleaved vector dofs
(3*node + component):

* mass         M  : w'Mv  = rho * integral(w . v)
* elastic      K_E: w'Kv  = integral(2*mu*eps(w):eps(v) + lam*div(w)*div(v))
* deviatoric   K_V: w'Kv  = kappa * integral(dev(w):dev(v))
                  = kappa * integral(eps:eps - div*div/3)

Element loops are vectorized over all tets at once; reference basis
tables and element geometry are cached per (space, quadrature degree).
Default quadrature exactness is 2p for the bilinear forms and 2p+2 for
loads and error integrals.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fespace import FeSpace, quadrature, reference_basis, triangle_quadrature
from .mesh import BoundaryKind

_space_caches = weakref.WeakKeyDictionary()


def form_degree(space):
    return 2 * space.p


def load_degree(space):
    return 2 * space.p + 2


@dataclass
class LoadSpec:
    """Time-dependent body force f(x,t)->(n,3) [N/m^3] and boundary
    traction g(x,t,normal)->(n,3) [Pa] applied on the given tag labels
    (default: all Neumann-tagged facets)."""

    body_force: object = None
    traction: object = None
    traction_labels: tuple = None


class VolumeData:
    """Cached geometry and basis tables for one quadrature degree."""

    def __init__(self, space: FeSpace, degree: int):
        self.space = space
        self.rule = quadrature(degree)
        self.N, dN = reference_basis(space.p, self.rule.points)
        v = space.mesh.vertices[space.mesh.tets]  # (ne,4,3)
        jac = (v[:, 1:] - v[:, :1]).transpose(0, 2, 1)  # J[a,i] = dx_a/dxi_i
        det = np.linalg.det(jac)
        jinv = np.linalg.inv(jac)
        self.det = det
        # physical gradients: G[e,q,n,a] = sum_i dN[q,n,i] * Jinv[e,i,a]
        self.G = np.einsum("qni,eia->eqna", dN, jinv)
        self.wdet = self.rule.weights[None, :] * (det[:, None])
        self.points = np.einsum("qv,eva->eqa", self.rule.points, v)
        cd = space.cell_dofs
        self.vdofs = (3 * cd[:, :, None] + np.arange(3)).reshape(len(cd), -1)

    # -- discrete field evaluation at the quadrature points ------------

    def cell_values(self, u):
        return u.reshape(-1, 3)[self.space.cell_dofs]  # (ne, nloc, 3)

    def value(self, u):
        return np.einsum("qn,ena->eqa", self.N, self.cell_values(u))

    def gradient(self, u):
        """grad[e,q,a,i] = d u_a / d x_i."""
        return np.einsum("eqni,ena->eqai", self.G, self.cell_values(u))

    def integrate(self, density):
        """Integrate a (ne, nq) density over the mesh."""
        return float(np.sum(self.wdet * density))


class FacetData:
    """Cached facet quadrature tables for a set of boundary facets."""

    def __init__(self, space: FeSpace, degree: int, facets):
        self.space = space
        self.facets = np.asarray(facets, dtype=np.int64)
        rule = triangle_quadrature(degree)
        mesh = space.mesh
        nq = len(rule.weights)
        nloc = len(space.ref_nodes)
        self.N = np.empty((len(self.facets), nq, nloc))
        dn_ref = np.empty((len(self.facets), nq, nloc, 3))
        # group facets by local-slot signature: only a handful of distinct
        # barycentric embeddings exist, evaluate the basis once per group
        sig = {}
        for i, f in enumerate(self.facets):
            sig.setdefault(tuple(space.facet_local[f]), []).append(i)
        for key, idxs in sig.items():
            bar = space.facet_barycentric_in_owner(self.facets[idxs[0]], rule.points)
            vals, grads = reference_basis(space.p, bar)
            self.N[idxs] = vals
            dn_ref[idxs] = grads
        owners_all = mesh.facet_owner[self.facets]
        vo = mesh.vertices[mesh.tets[owners_all]]
        jinv = np.linalg.inv((vo[:, 1:] - vo[:, :1]).transpose(0, 2, 1))
        # physical basis gradients of the owner element at the facet points
        self.G = np.einsum("fqni,fia->fqna", dn_ref, jinv)
        tri = mesh.vertices[mesh.boundary_facets[self.facets]]
        self.points = np.einsum("qv,fva->fqa", rule.points, tri)
        cr = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        areas = 0.5 * np.linalg.norm(cr, axis=1)
        self.normals = cr / (2.0 * areas)[:, None]
        # reference weights sum to 1/2; physical scale factor is 2*area
        self.warea = rule.weights[None, :] * (2.0 * areas)[:, None]
        owners = mesh.facet_owner[self.facets]
        self.cell_dofs = space.cell_dofs[owners]
        cd = self.cell_dofs
        self.vdofs = (3 * cd[:, :, None] + np.arange(3)).reshape(len(cd), -1)

    def value(self, u):
        return np.einsum("fqn,fna->fqa", self.N, u.reshape(-1, 3)[self.cell_dofs])

    def gradient(self, u):
        """grad[f,q,a,i] = d u_a / d x_i at the facet quadrature points,
        taken from the owning element."""
        return np.einsum(
            "fqni,fna->fqai", self.G, u.reshape(-1, 3)[self.cell_dofs]
        )


def volume_data(space: FeSpace, degree=None) -> VolumeData:
    degree = form_degree(space) if degree is None else int(degree)
    cache = _space_caches.setdefault(space, {})
    key = ("vol", degree)
    if key not in cache:
        cache[key] = VolumeData(space, degree)
    return cache[key]


def facet_data(space: FeSpace, degree=None, labels=None) -> FacetData:
    degree = load_degree(space) if degree is None else int(degree)
    if labels is None:
        facets = space.mesh.facets_with_kind(BoundaryKind.NEUMANN)
        key_labels = ("<neumann>",)
    else:
        labels = (labels,) if isinstance(labels, str) else tuple(labels)
        facets = np.concatenate(
            [space.mesh.facets_with_label(lb) for lb in labels]
        ) if labels else np.array([], dtype=np.int64)
        key_labels = labels
    cache = _space_caches.setdefault(space, {})
    key = ("facet", degree, key_labels)
    if key not in cache:
        cache[key] = FacetData(space, degree, facets)
    return cache[key]


def _scatter(space, vdofs, dense):
    ne, nld = dense.shape[:2]
    rows = np.repeat(vdofs, nld, axis=1).ravel()
    cols = np.tile(vdofs, (1, nld)).ravel()
    mat = sp.coo_matrix(
        (dense.reshape(ne, nld * nld).ravel(), (rows, cols)),
        shape=(space.n_dofs, space.n_dofs),
    )
    return mat.tocsr()


def assemble_mass(space: FeSpace, rho, degree=None):
    """Vector mass matrix with density rho."""
    if rho <= 0:
        raise ValueError("density must be positive")
    vd = volume_data(space, degree)
    nn = np.einsum("eq,qi,qj->eij", vd.wdet, vd.N, vd.N)
    dense = rho * np.einsum("eij,ab->eiajb", nn, np.eye(3))
    nld = 3 * nn.shape[1]
    return _scatter(space, vd.vdofs, dense.reshape(-1, nld, nld))


def assemble_elastic(space: FeSpace, mu, lam, degree=None):
    """Hooke stiffness: 2*mu*eps:eps + lam*div*div."""
    if mu <= 0 or lam < 0:
        raise ValueError("need mu > 0 and lam >= 0")
    vd = volume_data(space, degree)
    gw = vd.G * vd.wdet[:, :, None, None]
    gg = np.einsum("eqik,eqjk->eij", gw, vd.G)
    cross = np.einsum("eqja,eqib->eiajb", gw, vd.G)
    div = np.einsum("eqia,eqjb->eiajb", gw, vd.G)
    dense = mu * (np.einsum("eij,ab->eiajb", gg, np.eye(3)) + cross) + lam * div
    nld = 3 * gg.shape[1]
    return _scatter(space, vd.vdofs, dense.reshape(-1, nld, nld))


def assemble_deviatoric(space: FeSpace, kappa, degree=None):
    """Deviatoric-strain stiffness: kappa * (eps:eps - div*div/3)."""
    if kappa <= 0:
        raise ValueError("arm modulus must be positive")
    vd = volume_data(space, degree)
    gw = vd.G * vd.wdet[:, :, None, None]
    gg = np.einsum("eqik,eqjk->eij", gw, vd.G)
    cross = np.einsum("eqja,eqib->eiajb", gw, vd.G)
    div = np.einsum("eqia,eqjb->eiajb", gw, vd.G)
    dense = kappa * (
        0.5 * (np.einsum("eij,ab->eiajb", gg, np.eye(3)) + cross) - div / 3.0
    )
    nld = 3 * gg.shape[1]
    return _scatter(space, vd.vdofs, dense.reshape(-1, nld, nld))


def _eval_traction(fn, x, t, normals):
    flat = x.reshape(-1, 3)
    nrm = np.repeat(normals, x.shape[1], axis=0)
    try:
        vals = fn(flat, t, nrm)
    except TypeError:
        vals = fn(flat, t)
    return np.asarray(vals, dtype=float).reshape(x.shape)


def assemble_volume_load(space: FeSpace, body_force, t, degree=None):
    vd = volume_data(space, degree if degree is not None else load_degree(space))
    out = np.zeros(space.n_dofs)
    if body_force is None:
        return out
    f = np.asarray(body_force(vd.points.reshape(-1, 3), t), dtype=float)
    f = f.reshape(vd.points.shape)
    contrib = np.einsum("eq,qn,eqa->ena", vd.wdet, vd.N, f)
    np.add.at(out, vd.vdofs, contrib.reshape(len(contrib), -1))
    return out


def assemble_traction_load(space: FeSpace, traction, t, degree=None, labels=None):
    out = np.zeros(space.n_dofs)
    if traction is None:
        return out
    fd = facet_data(space, degree, labels)
    if len(fd.facets) == 0:
        return out
    g = _eval_traction(traction, fd.points, t, fd.normals)
    contrib = np.einsum("fq,fqn,fqa->fna", fd.warea, fd.N, g)
    np.add.at(out, fd.vdofs, contrib.reshape(len(contrib), -1))
    return out


def assemble_load(space: FeSpace, loads: LoadSpec, t, degree=None):
    """Load vector (f, v) + (g, v)_Gamma_N at a fixed time."""
    out = assemble_volume_load(space, loads.body_force, t, degree)
    out += assemble_traction_load(
        space, loads.traction, t, degree, loads.traction_labels
    )
    return out


# -- stress evaluation ----------------------------------------------------


def stress_from_gradients(grad_u0, grads_uve, mu, lam, kappas):
    """Total stress from displacement and per-arm internal-field gradients.

    grad arrays have layout [..., a, i] = d u_a / d x_i.
    """
    eps = 0.5 * (grad_u0 + np.swapaxes(grad_u0, -1, -2))
    tr = np.trace(eps, axis1=-2, axis2=-1)
    sigma = 2.0 * mu * eps
    idx = np.arange(3)
    sigma[..., idx, idx] += lam * tr[..., None]
    for kappa, g in zip(kappas, grads_uve):
        e = 0.5 * (g + np.swapaxes(g, -1, -2))
        trv = np.trace(e, axis1=-2, axis2=-1)
        dev = e.copy()
        dev[..., idx, idx] -= trv[..., None] / 3.0
        sigma += kappa * dev
    return sigma


def recover_nodal_stress(space: FeSpace, material, u0, uve):
    """Elementwise stress averaged to the scalar dofs (one 3x3 per node)."""
    nodes = np.array([np.array(a) / space.p for a in space.ref_nodes])
    _, dN = reference_basis(space.p, nodes)
    v = space.mesh.vertices[space.mesh.tets]
    jinv = np.linalg.inv((v[:, 1:] - v[:, :1]).transpose(0, 2, 1))
    G = np.einsum("qni,eia->eqna", dN, jinv)

    def grad_at_nodes(u):
        ue = u.reshape(-1, 3)[space.cell_dofs]
        return np.einsum("eqni,ena->eqai", G, ue)

    sigma = stress_from_gradients(
        grad_at_nodes(u0),
        [grad_at_nodes(u) for u in uve],
        material.mu,
        material.lam,
        [arm.kappa for arm in material.arms],
    )
    out = np.zeros((space.n_scalar_dofs, 3, 3))
    count = np.zeros(space.n_scalar_dofs)
    np.add.at(out, space.cell_dofs, sigma)
    np.add.at(count, space.cell_dofs, 1.0)
    return out / count[:, None, None]


def von_mises(sigma):
    """Von Mises equivalent stress of (..., 3, 3) stress tensors."""
    tr = np.trace(sigma, axis1=-2, axis2=-1)
    dev = sigma.copy()
    idx = np.arange(3)
    dev[..., idx, idx] -= tr[..., None] / 3.0
    return np.sqrt(1.5 * np.sum(dev * dev, axis=(-2, -1)))
