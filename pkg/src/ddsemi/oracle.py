"""Ground-truth generators for cross-checking the solver stack.

The dense brute-force path recomputes residuals and Jacobians on tiny
meshes by per-element loops with its own basis-function derivation, so it
shares no assembly code with the sparse path it validates. The monolithic
full-domain solve provides the reference fields for error curves, with an
on-disk cache keyed by a content hash of the configuration.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .assembly import DEFAULT_DEGREE, Assembler, FieldVector
from .problems import P_LAPLACE
from .quadrature import quadrature_rule
from .subdomain import sparse_newton

DENSE_NODE_LIMIT = 60


class TooLarge(ValueError):
    """Dense brute-force oracle is restricted to tiny meshes."""


@dataclass
class MonolithicSolution:
    """Full-domain discrete solution plus Newton statistics."""

    field: FieldVector  # coefficients over the global free dofs
    newton_iterations: int
    residual_norm: float

    def restrict(self, decomp, side):
        """View of the solution in one subdomain's local layout."""
        dm = decomp.side_dofmap(side)
        return FieldVector(decomp.restrict(self.field.data, side), dm.n_interior)

    def trace(self, decomp):
        """Interface coefficients of the solution (primal)."""
        from .subdomain import InterfaceVector

        gdof = decomp.global_dofmap().dof_of_node[decomp.interface_nodes]
        return InterfaceVector(self.field.data[gdof].copy())


def _cache_key(prob, mesh, degree, newton_rtol):
    blob = "|".join([prob.name, repr(mesh.width), repr(mesh.height), repr(mesh.h),
                     str(degree), repr(newton_rtol)])
    return hashlib.sha256(blob.encode()).hexdigest()


def _cache_read(path, key, n):
    try:
        with open(path, "rb") as f:
            header, payload = f.read().split(b"\n", 1)
        meta = json.loads(header)
        if meta.get("key") != key or meta.get("n") != n:
            return None
        data = np.frombuffer(payload, dtype="<f8")
        if data.shape[0] != n:
            return None
        return np.array(data)
    except (OSError, ValueError, json.JSONDecodeError):
        return None


def _cache_write(path, key, meta, data):
    header = dict(meta)
    header["key"] = key
    header["n"] = int(data.shape[0])
    blob = json.dumps(header, sort_keys=True).encode() + b"\n" + \
        np.ascontiguousarray(data, dtype="<f8").tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def solve_monolithic(prob, mesh, degree=DEFAULT_DEGREE, newton_rtol=1e-12,
                     newton_max=50, cache_dir=None):
    """Newton solve of the full-domain problem over all free nodes.

    With ``cache_dir`` set and a named problem, coefficients are cached on
    disk (header + little-endian float64 payload, written atomically).
    """
    dofmap = mesh_global_dofmap(mesh)
    asm = Assembler(mesh, np.arange(mesh.n_triangles), dofmap, degree)
    tol = newton_rtol * max(1.0, float(np.linalg.norm(
        asm.residual(np.zeros(dofmap.n_dofs), prob))))

    key = None
    path = None
    if cache_dir is not None and prob.name:
        key = _cache_key(prob, mesh, degree, newton_rtol)
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"ref-{key[:16]}.bin")
        cached = _cache_read(path, key, dofmap.n_dofs)
        if cached is not None:
            res = float(np.linalg.norm(asm.residual(cached, prob)))
            if res <= tol:
                return MonolithicSolution(FieldVector(cached, dofmap.n_dofs), 0, res)

    u, iters, rnorm = sparse_newton(
        lambda v: asm.residual(v, prob),
        lambda v: asm.jacobian(v, prob),
        np.zeros(dofmap.n_dofs), tol, newton_max)
    if path is not None:
        _cache_write(path, key, {"width": mesh.width, "height": mesh.height,
                                 "h": mesh.h, "problem": prob.name}, u)
    return MonolithicSolution(FieldVector(u, dofmap.n_dofs), iters, rnorm)


def mesh_global_dofmap(mesh):
    """Dof map over all non-boundary nodes (no interface partition)."""
    from .mesh import _make_dofmap

    return _make_dofmap(mesh.n_nodes, mesh.free_nodes, np.empty(0, dtype=np.int64))


class DenseOracle:
    """Per-element dense reimplementation of the assembly operators.

    Basis gradients come from inverting each element's linear-geometry
    matrix rather than the edge-rotation formula of the sparse path.
    """

    def __init__(self, prob, mesh, dofmap, tris=None, degree=DEFAULT_DEGREE):
        if mesh.n_nodes > DENSE_NODE_LIMIT:
            raise TooLarge(f"dense oracle limited to {DENSE_NODE_LIMIT} nodes "
                           f"(got {mesh.n_nodes})")
        self.prob = prob
        self.mesh = mesh
        self.dofmap = dofmap
        self.tris = np.arange(mesh.n_triangles) if tris is None else np.asarray(tris)
        self.rule = quadrature_rule(degree)
        self.n = dofmap.n_dofs

    def _elements(self):
        for tri in self.mesh.triangles[self.tris]:
            pts = self.mesh.nodes[tri]
            # rows of C are the coefficients (a, b, c) of phi_i = a + b x + c y
            vander = np.column_stack([np.ones(3), pts[:, 0], pts[:, 1]])
            coeffs = np.linalg.inv(vander).T  # (3, 3): basis i -> (a, b, c)
            area = 0.5 * abs(np.linalg.det(vander))
            dofs = self.dofmap.dof_of_node[tri]
            yield pts, coeffs, area, dofs

    def _quad_points(self, pts):
        ref = self.rule.points
        xq = pts[0, 0] + ref[:, 0] * (pts[1, 0] - pts[0, 0]) + ref[:, 1] * (pts[2, 0] - pts[0, 0])
        yq = pts[0, 1] + ref[:, 0] * (pts[1, 1] - pts[0, 1]) + ref[:, 1] * (pts[2, 1] - pts[0, 1])
        return xq, yq

    def _values(self, u_full, tri_dofs):
        vals = np.zeros(3)
        for i, d in enumerate(tri_dofs):
            if d >= 0:
                vals[i] = u_full[d]
        return vals

    def residual(self, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros(self.n)
        w = self.rule.weights
        for pts, coeffs, area, dofs in self._elements():
            uloc = self._values(u, dofs)
            grad_u = uloc @ coeffs[:, 1:]
            xq, yq = self._quad_points(pts)
            phi = np.array([coeffs[i, 0] + coeffs[i, 1] * xq + coeffs[i, 2] * yq
                            for i in range(3)])
            uq = uloc @ phi
            if self.prob.kind == P_LAPLACE:
                a_elem = np.sqrt(grad_u @ grad_u + self.prob.grad_eps ** 2)
                alpha_int = area * a_elem
            else:
                aq = np.broadcast_to(np.asarray(self.prob.alpha(xq, yq), float), xq.shape)
                alpha_int = 2.0 * area * float(aq @ w)
            bq = np.broadcast_to(np.asarray(self.prob.beta(xq, yq, uq), float), xq.shape)
            fq = np.broadcast_to(np.asarray(self.prob.source(xq, yq), float), xq.shape)
            for i in range(3):
                if dofs[i] < 0:
                    continue
                flux = alpha_int * float(grad_u @ coeffs[i, 1:])
                react = 2.0 * area * float(((bq - fq) * phi[i]) @ w)
                out[dofs[i]] += flux + react
        return out

    def jacobian(self, w_field):
        w_field = np.asarray(w_field, dtype=float)
        out = np.zeros((self.n, self.n))
        w = self.rule.weights
        for pts, coeffs, area, dofs in self._elements():
            wloc = self._values(w_field, dofs)
            grad_w = wloc @ coeffs[:, 1:]
            xq, yq = self._quad_points(pts)
            phi = np.array([coeffs[i, 0] + coeffs[i, 1] * xq + coeffs[i, 2] * yq
                            for i in range(3)])
            wq = wloc @ phi
            if self.prob.kind == P_LAPLACE:
                a_elem = np.sqrt(grad_w @ grad_w + self.prob.grad_eps ** 2)
                dmat = a_elem * np.eye(2) + np.outer(grad_w, grad_w) / a_elem
            else:
                aq = np.broadcast_to(np.asarray(self.prob.alpha(xq, yq), float), xq.shape)
            byq = np.broadcast_to(np.asarray(self.prob.beta_y(xq, yq, wq), float), xq.shape)
            for i in range(3):
                if dofs[i] < 0:
                    continue
                for j in range(3):
                    if dofs[j] < 0:
                        continue
                    if self.prob.kind == P_LAPLACE:
                        stiff = area * float(coeffs[i, 1:] @ dmat @ coeffs[j, 1:])
                    else:
                        stiff = 2.0 * area * float(aq @ w) * float(coeffs[i, 1:] @ coeffs[j, 1:])
                    mass = 2.0 * area * float((byq * phi[i] * phi[j]) @ w)
                    out[dofs[i], dofs[j]] += stiff + mass
        return out

    def linear_steklov(self, m):
        """Affine interface action (S, c) of a *linear* problem.

        ``m`` is the interior block size; the map eta -> S @ eta + c equals
        the Schur-complement reduction of the subdomain system.
        """
        jac = self.jacobian(np.zeros(self.n))
        b = -self.residual(np.zeros(self.n))  # residual(u) = J u - b for linear problems
        jii = jac[:m, :m]
        jig = jac[:m, m:]
        jgi = jac[m:, :m]
        jgg = jac[m:, m:]
        schur = jgg - jgi @ np.linalg.solve(jii, jig)
        u0 = np.linalg.solve(jii, b[:m])
        const = jgi @ u0 - b[m:]
        return schur, const


def dense_brute_force(prob, mesh, dofmap, tris=None, degree=DEFAULT_DEGREE):
    """Dense equivalence oracle for the sparse assembly path."""
    return DenseOracle(prob, mesh, dofmap, tris, degree)


@dataclass
class FdReport:
    slope: float
    deltas: np.ndarray
    errors: np.ndarray


def fd_check(value_fn, derivative_fn, point, direction, deltas=(1e-3, 3e-4, 1e-4)):
    """Taylor-remainder slope of a (value, derivative) pair.

    Fits log ||G(p + d*h) - G(p) - d*G'(p)h|| against log d; a slope near 2
    confirms the derivative. Requires the map to be evaluable at the probe
    points.
    """
    point = np.asarray(point, dtype=float)
    direction = np.asarray(direction, dtype=float)
    base = np.asarray(value_fn(point), dtype=float)
    dval = np.asarray(derivative_fn(point, direction), dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    errors = np.empty_like(deltas)
    for i, d in enumerate(deltas):
        shifted = np.asarray(value_fn(point + d * direction), dtype=float)
        errors[i] = np.linalg.norm(shifted - base - d * dval)
    # remainders at rounding level carry no slope information: the
    # derivative is exact there (e.g. linear maps)
    tiny = 1e-13 * max(1.0, float(np.linalg.norm(base)))
    if np.all(errors <= tiny):
        return FdReport(2.0, deltas, errors)
    slope = float(np.polyfit(np.log(deltas), np.log(np.maximum(errors, tiny)), 1)[0])
    return FdReport(slope, deltas, errors)
