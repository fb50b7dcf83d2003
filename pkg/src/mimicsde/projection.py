"""Conditional-expectation coefficients and marginal-law comparison.

Given an Itô ensemble with recorded drivers, the mimicking coefficients are

    b(t, x)     = E[ beta(t)        | X(t) = x ]
    D(t, x)     = E[ xi(t) xi*(t)   | X(t) = x ]     (D = x_d * a)

estimated by kernel regression on a space lattice at selected time nodes.  The
product D is the stable object near the boundary; a is derived by division
away from x_d = 0 and by linear extrapolation onto the boundary layer, then
eigenvalue-floored so the rebuilt model is usable by the simulator and the
PDE solver.  Cells with too little occupancy are masked, never silently
interpolated from; the fill policy copies the nearest unmasked cell and
records the distance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sp_stats
from scipy.spatial import cKDTree

from .coeffs import CoefficientModel, RegularityBudget
from .sdesim import PathEnsemble

_CELL_CHUNK = 64


@dataclass(frozen=True)
class BinningSpec:
    """Lattice, kernel, and occupancy policy for the conditional-expectation estimate."""

    times: tuple[float, ...]
    edges: tuple  # one strictly increasing edge array per coordinate; x_d edges start at 0
    kernel: str = "box"
    bandwidth: tuple[float, ...] | None = None  # per coordinate; None = plug-in rule
    min_count: float = 20.0

    def __post_init__(self) -> None:
        if self.kernel not in ("box", "gaussian"):
            raise ValueError("kernel must be 'box' or 'gaussian'")
        if len(self.times) < 1:
            raise ValueError("need at least one time node")
        edges = tuple(np.asarray(e, dtype=float) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        for e in edges:
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("each edge array must be strictly increasing with >= 2 entries")
        if edges[-1][0] != 0.0:
            raise ValueError("x_d edges must start at 0")
        if self.bandwidth is not None and any(b <= 0 for b in self.bandwidth):
            raise ValueError("bandwidths must be positive")

    @property
    def d(self) -> int:
        return len(self.edges)

    @property
    def centers(self) -> tuple[np.ndarray, ...]:
        return tuple(0.5 * (e[:-1] + e[1:]) for e in self.edges)

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return tuple(e.size - 1 for e in self.edges)


@dataclass
class MimickedCoefficients:
    """Gridded estimates of b and D = x_d * a with occupancy accounting.

    ``mask`` is True where occupancy fell below the spec minimum; masked
    values are NaN until a fill policy replaces them.  ``clip`` and
    ``fill_distance`` are populated by :func:`build_mimicking_model`.
    """

    spec: BinningSpec
    b_hat: np.ndarray       # (K, *cells, d)
    d_hat: np.ndarray       # (K, *cells, d, d), symmetric
    occupancy: np.ndarray   # (K, *cells)
    mask: np.ndarray        # (K, *cells) bool
    bandwidths: np.ndarray  # (K, d) as used (zeros for box kernel)
    n_paths: int
    clip: np.ndarray = field(default=None)
    fill_distance: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.clip is None:
            self.clip = np.zeros_like(self.occupancy)
        if self.fill_distance is None:
            self.fill_distance = np.zeros_like(self.occupancy)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def masked_fraction(self) -> float:
        return float(self.mask.mean())


def _plugin_bandwidth(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    sd = x.std(axis=0, ddof=1)
    sd = np.maximum(sd, 1e-12)
    return 1.06 * sd * n ** (-1.0 / (d + 4))


def estimate_mimicking_coefficients(ens: PathEnsemble, spec: BinningSpec) -> MimickedCoefficients:
    """Kernel-regress recorded drivers on the state, per time node and cell.

    Box kernel: plain cell averages (exact tower property over full coverage).
    Gaussian kernel: Nadaraya-Watson weights at cell centers with per-
    coordinate bandwidths (plug-in rule when the spec leaves them unset).
    The estimated D is symmetrized; cells under the occupancy minimum are
    masked with NaN values.
    """
    if ens.drivers is None:
        raise ValueError("ensemble carries no driver records; simulate with record_drivers=True")
    d = ens.d
    if spec.d != d:
        raise ValueError("binning spec dimension does not match ensemble")
    cells = spec.cell_shape
    n_cells = int(np.prod(cells))
    k_times = len(spec.times)
    centers = spec.centers

    b_hat = np.full((k_times, n_cells, d), np.nan)
    d_hat = np.full((k_times, n_cells, d, d), np.nan)
    occupancy = np.zeros((k_times, n_cells))
    bandwidths = np.zeros((k_times, d))

    center_grid = np.stack(np.meshgrid(*centers, indexing="ij"), axis=-1).reshape(n_cells, d)

    for kt, t in enumerate(spec.times):
        node = ens.grid.node_index(t)
        x = ens.states[:, node, :]
        beta = ens.drivers.beta[:, node, :]
        s = ens.drivers.xi2[:, node, :, :]

        if spec.kernel == "box":
            idx = np.zeros(x.shape[0], dtype=np.int64)
            inside = np.ones(x.shape[0], dtype=bool)
            for j in range(d):
                cj = np.searchsorted(spec.edges[j], x[:, j], side="right") - 1
                inside &= (cj >= 0) & (cj < cells[j])
                idx = idx * cells[j] + np.clip(cj, 0, cells[j] - 1)
            idx = idx[inside]
            np.add.at(occupancy[kt], idx, 1.0)
            sb = np.zeros((n_cells, d))
            np.add.at(sb, idx, beta[inside])
            sd_ = np.zeros((n_cells, d, d))
            np.add.at(sd_, idx, s[inside])
            occ = occupancy[kt]
            good = occ >= max(spec.min_count, 1.0)
            b_hat[kt, good] = sb[good] / occ[good, None]
            d_hat[kt, good] = sd_[good] / occ[good, None, None]
        else:
            bw = (np.asarray(spec.bandwidth, dtype=float)
                  if spec.bandwidth is not None else _plugin_bandwidth(x))
            bandwidths[kt] = bw
            for lo in range(0, n_cells, _CELL_CHUNK):
                hi = min(lo + _CELL_CHUNK, n_cells)
                cc = center_grid[lo:hi]
                z2 = np.zeros((hi - lo, x.shape[0]))
                for j in range(d):
                    z2 += ((x[None, :, j] - cc[:, None, j]) / bw[j]) ** 2
                w = np.exp(-0.5 * z2)
                occ = w.sum(axis=1)
                occupancy[kt, lo:hi] = occ
                good = occ >= spec.min_count
                if np.any(good):
                    rows = np.where(good)[0]
                    b_hat[kt, lo + rows] = (w[rows] @ beta) / occ[rows, None]
                    d_hat[kt, lo + rows] = np.einsum("mn,nij->mij", w[rows], s) / occ[rows, None, None]

        d_hat[kt] = 0.5 * (d_hat[kt] + np.swapaxes(d_hat[kt], -1, -2))

    mask = occupancy < spec.min_count
    shape = (k_times, *cells)
    return MimickedCoefficients(
        spec=spec,
        b_hat=b_hat.reshape(shape + (d,)),
        d_hat=d_hat.reshape(shape + (d, d)),
        occupancy=occupancy.reshape(shape),
        mask=mask.reshape(shape),
        bandwidths=bandwidths,
        n_paths=ens.n_paths,
    )


def _fill_masked(mc: MimickedCoefficients) -> None:
    """Replace masked cells by their nearest unmasked neighbor (same time layer)."""
    d = mc.d
    cells = mc.spec.cell_shape
    n_cells = int(np.prod(cells))
    centers = np.stack(np.meshgrid(*mc.spec.centers, indexing="ij"), axis=-1).reshape(n_cells, d)
    for kt in range(len(mc.spec.times)):
        mask = mc.mask[kt].reshape(n_cells)
        if not mask.any():
            continue
        if mask.all():
            raise ValueError(f"every cell masked at time index {kt}; cannot fill")
        tree = cKDTree(centers[~mask])
        dist, nearest = tree.query(centers[mask])
        src = np.where(~mask)[0][nearest]
        dst = np.where(mask)[0]
        bf = mc.b_hat[kt].reshape(n_cells, d)
        df = mc.d_hat[kt].reshape(n_cells, d, d)
        bf[dst] = bf[src]
        df[dst] = df[src]
        mc.fill_distance[kt].reshape(n_cells)[dst] = dist


class _LatticeInterpolator:
    """Multilinear interpolation over (time, x-lattice) with edge clamping."""

    def __init__(self, times: np.ndarray, axes: Sequence[np.ndarray], values: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.values = values
        self.trailing = values.ndim - 1 - len(self.axes)

    @staticmethod
    def _bracket(ax: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if ax.size == 1:
            return np.zeros(v.shape, dtype=np.int64), np.zeros_like(v, dtype=float)
        i = np.clip(np.searchsorted(ax, v, side="right") - 1, 0, ax.size - 2)
        frac = (v - ax[i]) / (ax[i + 1] - ax[i])
        return i, np.clip(frac, 0.0, 1.0)

    def __call__(self, t, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        brackets = [self._bracket(self.times, t_arr)]
        brackets += [self._bracket(ax, x[:, j]) for j, ax in enumerate(self.axes)]
        n_axes = len(brackets)
        out = None
        for corner in range(1 << n_axes):
            w = np.ones(n)
            idx = []
            for a in range(n_axes):
                i, f = brackets[a]
                bit = (corner >> a) & 1
                size = self.times.size if a == 0 else self.axes[a - 1].size
                if bit:
                    w = w * f
                    idx.append(np.minimum(i + 1, size - 1))
                else:
                    w = w * (1.0 - f)
                    idx.append(i)
            vals = self.values[tuple(idx)]
            term = w.reshape((n,) + (1,) * self.trailing) * vals
            out = term if out is None else out + term
        return out


def build_mimicking_model(
    mc: MimickedCoefficients,
    max_masked_fraction: float = 0.5,
    delta_floor_scale: float = 1e-6,
    clip_budget: float | None = None,
    budget: RegularityBudget | None = None,
) -> CoefficientModel:
    """Turn gridded (b, D) estimates into an evaluable coefficient model.

    a = D / x_d at cell centers (all have x_d > 0); the boundary layer
    a(., x_d = 0) is linearly extrapolated from the two nearest center layers.
    Each node's a is made positive semi-definite by flooring eigenvalues at
    delta_floor_scale * trace/d, and the total eigenvalue shift per node is
    recorded in ``mc.clip`` (a model-quality metric; exceeding ``clip_budget``
    raises).  Evaluation is multilinear in (t, x) with edge clamping; the
    diffusion evaluator is sqrt(x_d^+) * Cholesky(a).
    """
    if mc.masked_fraction > max_masked_fraction:
        raise ValueError(
            f"masked fraction {mc.masked_fraction:.2f} exceeds cap {max_masked_fraction:.2f}")
    _fill_masked(mc)

    d = mc.d
    k_times = len(mc.spec.times)
    centers = mc.spec.centers
    xd_centers = centers[-1]
    if xd_centers.size < 2:
        raise ValueError("need at least two x_d layers to extrapolate onto the boundary")

    a_cells = mc.d_hat / xd_centers.reshape((1,) * 1 + (1,) * (d - 1) + (-1, 1, 1))
    b_cells = mc.b_hat

    # extrapolate the x_d = 0 layer from the two nearest center layers
    c1, c2 = xd_centers[0], xd_centers[1]
    w = c1 / (c2 - c1)
    a0 = a_cells[..., 0, :, :] * (1.0 + w) - a_cells[..., 1, :, :] * w
    b0 = b_cells[..., 0, :] * (1.0 + w) - b_cells[..., 1, :] * w
    a_grid = np.concatenate([a0[..., None, :, :], a_cells], axis=-3)
    b_grid = np.concatenate([b0[..., None, :], b_cells], axis=-2)

    # eigenvalue floor, recorded per node
    flat = a_grid.reshape(-1, d, d)
    flat = 0.5 * (flat + np.swapaxes(flat, -1, -2))
    eigval, eigvec = np.linalg.eigh(flat)
    trace = eigval.sum(axis=1)
    ref = max(float(np.mean(np.maximum(trace, 0.0))), 1e-300)
    floor = delta_floor_scale * np.maximum(trace, 0.1 * ref) / d
    clipped = np.maximum(eigval, floor[:, None])
    clip_mag = (clipped - eigval).sum(axis=1)
    a_grid = np.einsum("nik,nk,njk->nij", eigvec, clipped, eigvec).reshape(a_grid.shape)
    clip_nodes = clip_mag.reshape((k_times,) + tuple(c.size for c in centers[:-1]) + (xd_centers.size + 1,))
    mc.clip = clip_nodes[..., 1:]  # cell layers only; layer 0 is synthetic
    if clip_budget is not None and clip_mag.max() > clip_budget:
        raise ValueError(
            f"PSD clip magnitude {clip_mag.max():.3e} exceeds budget {clip_budget:.3e}; "
            "the estimate violates ellipticity too severely to trust")

    axes = list(centers[:-1]) + [np.concatenate([[0.0], xd_centers])]
    times = np.asarray(mc.spec.times, dtype=float)
    a_interp = _LatticeInterpolator(times, axes, a_grid)
    b_interp = _LatticeInterpolator(times, axes, b_grid)

    if budget is None:
        eig_min = float(np.linalg.eigvalsh(a_grid.reshape(-1, d, d)).min())
        nu = float(np.min(b_grid[..., 0, -1]))  # drift component d on the x_d = 0 layer
        budget = RegularityBudget(
            delta=max(0.5 * eig_min, 1e-12),
            K=float(max(np.abs(a_grid).max(), np.abs(b_grid).max(), 1.0) * 4.0),
            nu=max(0.8 * nu, 1e-12),
            alpha=0.5,
        )

    def c_eval(t, x):
        return np.zeros(np.asarray(x).shape[0])

    return CoefficientModel(
        d=d, a=lambda t, x: a_interp(t, x), b=lambda t, x: b_interp(t, x),
        c=c_eval, budget=budget, provenance="gridded",
        time_independent=(k_times == 1),
        name=f"mimicking(kernel={mc.spec.kernel},times={k_times},cells={mc.spec.cell_shape})",
    )


@dataclass(frozen=True)
class MarginalComparison:
    """Per-time marginal agreement: coordinate KS, sliced W1, test-function gaps."""

    entries: tuple[dict, ...]
    thresholds: dict

    @property
    def passed(self) -> bool:
        return all(e["passed"] for e in self.entries)

    @property
    def max_ks(self) -> float:
        return max(max(e["ks"]) for e in self.entries)

    def to_json(self) -> dict:
        return {"passed": self.passed, "thresholds": self.thresholds,
                "entries": list(self.entries)}


def compare_marginals(
    ens_a: PathEnsemble,
    ens_b: PathEnsemble,
    times: Sequence[float],
    g_list: Sequence[tuple[str, Callable]] = (),
    n_directions: int = 16,
    seed: int = 0,
    thresholds: dict | None = None,
) -> MarginalComparison:
    """Empirical one-dimensional-marginal agreement at shared comparison times.

    Per time: per-coordinate two-sample KS, sliced Wasserstein-1 along seeded
    random directions, and |E[g(A)] - E[g(B)]| gaps in units of the pooled
    standard error.  Both ensembles must contain every comparison time as a
    stored node.
    """
    thr = {"ks": 0.03, "gap_z": 3.0, "w1": None}
    if thresholds:
        thr.update(thresholds)
    d = ens_a.d
    if ens_b.d != d:
        raise ValueError("ensembles must share the state dimension")
    gen = np.random.default_rng(seed)
    dirs = gen.standard_normal((n_directions, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    entries = []
    for t in times:
        xa = ens_a.states_at(t)
        xb = ens_b.states_at(t)
        ks = [float(sp_stats.ks_2samp(xa[:, j], xb[:, j], method="asymp").statistic)
              for j in range(d)]
        w1 = float(np.mean([
            sp_stats.wasserstein_distance(xa @ u, xb @ u) for u in dirs
        ])) if n_directions > 0 else 0.0
        gaps = []
        for name, g in g_list:
            ga = np.asarray(g(xa), dtype=float)
            gb = np.asarray(g(xb), dtype=float)
            gap = float(abs(ga.mean() - gb.mean()))
            se = float(np.sqrt(ga.var(ddof=1) / ga.size + gb.var(ddof=1) / gb.size))
            gaps.append({"g": name, "gap": gap, "pooled_se": se,
                         "z": gap / se if se > 0 else 0.0})
        passed = all(k <= thr["ks"] for k in ks)
        if thr["w1"] is not None:
            passed = passed and w1 <= thr["w1"]
        passed = passed and all(g["z"] <= thr["gap_z"] for g in gaps)
        entries.append({"t": float(t), "ks": ks, "sliced_w1": w1,
                        "gaps": gaps, "n_a": xa.shape[0], "n_b": xb.shape[0],
                        "passed": bool(passed)})
    return MarginalComparison(entries=tuple(entries), thresholds=thr)


def same_law_ks_quantile(
    x: np.ndarray, y: np.ndarray, n_boot: int = 200, q: float = 0.99, seed: int = 0
) -> float:
    """Permutation quantile of the two-sample KS statistic under the same-law null."""
    pool = np.concatenate([np.asarray(x, dtype=float), np.asarray(y, dtype=float)])
    nx = len(x)
    gen = np.random.default_rng(seed)
    stats = np.empty(n_boot)
    for b in range(n_boot):
        perm = gen.permutation(pool)
        stats[b] = sp_stats.ks_2samp(perm[:nx], perm[nx:], method="asymp").statistic
    return float(np.quantile(stats, q))


def save_mimicked(mc: MimickedCoefficients, csv_path, sidecar_path=None) -> None:
    """Line-oriented CSV of per-node estimates plus a JSON lattice sidecar."""
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(csv_path.suffix + ".meta.json")
    d = mc.d
    cells = mc.spec.cell_shape
    centers = mc.spec.centers
    header = (["t_index"] + [f"cell_{j+1}" for j in range(d)]
              + [f"x_{j+1}" for j in range(d)] + ["occupancy"]
              + [f"b_{j+1}" for j in range(d)]
              + [f"D_{i+1}{j+1}" for i in range(d) for j in range(d)]
              + ["clip"])
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for kt in range(len(mc.spec.times)):
            for multi in np.ndindex(*cells):
                row = [str(kt)] + [str(i) for i in multi]
                row += [repr(float(centers[j][multi[j]])) for j in range(d)]
                row += [repr(float(mc.occupancy[(kt, *multi)]))]
                row += [repr(float(v)) for v in np.atleast_1d(mc.b_hat[(kt, *multi)])]
                row += [repr(float(v)) for v in mc.d_hat[(kt, *multi)].ravel()]
                row += [repr(float(mc.clip[(kt, *multi)]))]
                writer.writerow(row)
    meta = {
        "d": d,
        "times": [float(t) for t in mc.spec.times],
        "edges": [[float(v) for v in e] for e in mc.spec.edges],
        "kernel": mc.spec.kernel,
        "bandwidth": list(mc.spec.bandwidth) if mc.spec.bandwidth else None,
        "bandwidths_used": mc.bandwidths.tolist(),
        "min_count": mc.spec.min_count,
        "n_paths": mc.n_paths,
    }
    with open(sidecar_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mimicked(csv_path, sidecar_path=None) -> MimickedCoefficients:
    """Rebuild :class:`MimickedCoefficients` from the CSV + sidecar pair."""
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(csv_path.suffix + ".meta.json")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    spec = BinningSpec(
        times=tuple(meta["times"]),
        edges=tuple(np.asarray(e) for e in meta["edges"]),
        kernel=meta["kernel"],
        bandwidth=tuple(meta["bandwidth"]) if meta["bandwidth"] else None,
        min_count=meta["min_count"],
    )
    d = spec.d
    cells = spec.cell_shape
    k_times = len(spec.times)
    shape = (k_times, *cells)
    b_hat = np.full(shape + (d,), np.nan)
    d_hat = np.full(shape + (d, d), np.nan)
    occupancy = np.zeros(shape)
    clip = np.zeros(shape)
    with open(csv_path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            kt = int(row[0])
            multi = tuple(int(v) for v in row[1 : 1 + d])
            pos = 1 + 2 * d
            occupancy[(kt, *multi)] = float(row[pos])
            pos += 1
            b_hat[(kt, *multi)] = [float(v) for v in row[pos : pos + d]]
            pos += d
            d_hat[(kt, *multi)] = np.array([float(v) for v in row[pos : pos + d * d]]).reshape(d, d)
            pos += d * d
            clip[(kt, *multi)] = float(row[pos])
    mask = occupancy < spec.min_count
    return MimickedCoefficients(
        spec=spec, b_hat=b_hat, d_hat=d_hat, occupancy=occupancy, mask=mask,
        bandwidths=np.asarray(meta.get("bandwidths_used", np.zeros((k_times, d)))),
        n_paths=int(meta.get("n_paths", 0)), clip=clip,
    )
