"""Synthetic terrains and Gaussian-process elevation maps.

Terrains are dense height grids used both as simulation ground truth and as
the source of noisy elevation observations. Elevation is estimated with a
zero-mean GP whose covariance is a fixed-weight mixture of RBF kernels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy import linalg, ndimage

STYLES = ("bumpy", "wavy", "hilly", "flat-rough")


class ConfigurationError(ValueError):
    """Invalid terrain, kernel or model configuration."""


class GPFitError(RuntimeError):
    """Kernel matrix could not be factorized even after jitter escalation."""


# ---------------------------------------------------------------------------
# Terrain grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TerrainSpec:
    style: str = "hilly"
    extent: tuple[float, float] = (10.0, 10.0)
    resolution: tuple[int, int] = (50, 50)
    height_band: tuple[float, float] = (0.0, 0.7)
    seed: int = 0
    origin: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class TerrainGrid:
    """Row-major height matrix; ``heights[j, i]`` is the cell at column i, row j.

    Heights are attached to cell centres, so the grid covers
    ``[origin, origin + extent]`` and queries are bilinear between centres.
    """

    origin: np.ndarray
    extent: np.ndarray
    resolution: tuple[int, int]
    heights: np.ndarray
    seed: int = 0
    style: str = "custom"

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=float)
        nx, ny = self.resolution
        if h.shape != (ny, nx):
            raise ConfigurationError(f"heights shape {h.shape} != (ny, nx) = {(ny, nx)}")
        if not np.all(np.isfinite(h)):
            raise ConfigurationError("heights must be finite")
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "extent", np.asarray(self.extent, dtype=float))

    @property
    def spacing(self) -> np.ndarray:
        return self.extent / np.asarray(self.resolution, dtype=float)

    @property
    def n_cells(self) -> int:
        return self.resolution[0] * self.resolution[1]

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.resolution
        dx, dy = self.spacing
        xs = self.origin[0] + (np.arange(nx) + 0.5) * dx
        ys = self.origin[1] + (np.arange(ny) + 0.5) * dy
        return xs, ys

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) array of centres in row-major order (matches ``heights.ravel()``)."""
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def contains(self, xy) -> np.ndarray | bool:
        xy = np.asarray(xy, dtype=float)
        lo, hi = self.origin, self.origin + self.extent
        inside = np.all((xy >= lo - 1e-12) & (xy <= hi + 1e-12), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def height_at(self, xy) -> np.ndarray | float:
        """Bilinear height at arbitrary planar points, clamped to the outer cell centres."""
        xy = np.asarray(xy, dtype=float)
        single = xy.ndim == 1
        pts = np.atleast_2d(xy)
        nx, ny = self.resolution
        u = (pts[:, 0] - self.origin[0]) / self.spacing[0] - 0.5
        v = (pts[:, 1] - self.origin[1]) / self.spacing[1] - 0.5
        u = np.clip(u, 0.0, nx - 1)
        v = np.clip(v, 0.0, ny - 1)
        i0 = np.minimum(np.floor(u).astype(int), max(nx - 2, 0))
        j0 = np.minimum(np.floor(v).astype(int), max(ny - 2, 0))
        fu, fv = u - i0, v - j0
        h = self.heights
        i1, j1 = np.minimum(i0 + 1, nx - 1), np.minimum(j0 + 1, ny - 1)
        out = (
            h[j0, i0] * (1 - fu) * (1 - fv)
            + h[j0, i1] * fu * (1 - fv)
            + h[j1, i0] * (1 - fu) * fv
            + h[j1, i1] * fu * fv
        )
        return float(out[0]) if single else out

    def metadata(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "extent": self.extent.tolist(),
            "resolution": list(self.resolution),
            "seed": int(self.seed),
            "style": self.style,
            "height_min": float(self.heights.min()),
            "height_max": float(self.heights.max()),
        }

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.json`` (metadata) and ``<stem>.csv`` (height matrix)."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        meta_path, csv_path = stem.with_suffix(".json"), stem.with_suffix(".csv")
        meta = self.metadata() | {"heights_csv": csv_path.name}
        meta_path.write_text(json.dumps(meta, indent=2) + "\n")
        np.savetxt(csv_path, self.heights, delimiter=",", fmt="%.10g")
        return meta_path, csv_path

    @classmethod
    def load(cls, path: str | Path) -> "TerrainGrid":
        path = Path(path)
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text())
        heights = np.loadtxt(meta_path.parent / meta["heights_csv"], delimiter=",", ndmin=2)
        return cls(
            origin=np.array(meta["origin"]),
            extent=np.array(meta["extent"]),
            resolution=tuple(meta["resolution"]),
            heights=heights,
            seed=meta.get("seed", 0),
            style=meta.get("style", "custom"),
        )


# (wavelength range in m, number of sinusoids, noise smoothing in m, noise weight)
_STYLE_RECIPES = {
    "bumpy": ((1.5, 4.0), 10, 0.35, 0.45),
    "wavy": ((4.0, 9.0), 4, 0.6, 0.2),
    "hilly": ((6.0, 16.0), 5, 1.5, 0.15),
    "flat-rough": ((2.0, 5.0), 3, 0.3, 0.7),
}


def generate_terrain(spec: TerrainSpec) -> TerrainGrid:
    """Seeded sum of sinusoids plus low-pass noise, rescaled onto the height band."""
    if spec.style not in STYLES:
        raise ConfigurationError(f"unknown style {spec.style!r}; expected one of {STYLES}")
    extent = np.asarray(spec.extent, dtype=float)
    nx, ny = (int(r) for r in spec.resolution)
    if extent.shape != (2,) or np.any(extent <= 0) or not np.all(np.isfinite(extent)):
        raise ConfigurationError(f"extent must be two positive numbers, got {spec.extent}")
    if nx < 8 or ny < 8:
        raise ConfigurationError(f"resolution must be >= 8 per axis, got {spec.resolution}")
    lo, hi = (float(b) for b in spec.height_band)
    if hi < lo:
        raise ConfigurationError(f"height band {spec.height_band} is reversed")

    rng = np.random.default_rng(spec.seed)
    (wl_lo, wl_hi), n_waves, smooth_m, noise_weight = _STYLE_RECIPES[spec.style]
    xs = (np.arange(nx) + 0.5) * extent[0] / nx
    ys = (np.arange(ny) + 0.5) * extent[1] / ny
    gx, gy = np.meshgrid(xs, ys)

    field_ = np.zeros((ny, nx))
    for _ in range(n_waves):
        wavelength = rng.uniform(wl_lo, wl_hi)
        heading = rng.uniform(0.0, np.pi) if spec.style != "wavy" else rng.normal(0.3, 0.15)
        phase = rng.uniform(0.0, 2 * np.pi)
        k = 2 * np.pi / wavelength
        amp = rng.uniform(0.5, 1.0)
        field_ += amp * np.sin(k * (np.cos(heading) * gx + np.sin(heading) * gy) + phase)
    field_ /= max(np.abs(field_).max(), 1e-12)

    noise = rng.standard_normal((ny, nx))
    sigma_cells = (smooth_m * nx / extent[0], smooth_m * ny / extent[1])
    noise = ndimage.gaussian_filter(noise, sigma=(sigma_cells[1], sigma_cells[0]), mode="wrap")
    noise /= max(np.abs(noise).max(), 1e-12)
    field_ = (1 - noise_weight) * field_ + noise_weight * noise

    span = field_.max() - field_.min()
    unit = (field_ - field_.min()) / span if span > 0 else np.zeros_like(field_)
    heights = np.clip(lo + (hi - lo) * unit, lo, hi)
    return TerrainGrid(
        origin=np.asarray(spec.origin, dtype=float),
        extent=extent,
        resolution=(nx, ny),
        heights=heights,
        seed=spec.seed,
        style=spec.style,
    )


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


class Observation(NamedTuple):
    xi: np.ndarray
    z: float


@dataclass(frozen=True)
class Observations:
    """Column-oriented observation set: locations ``xi`` (n, 2) and elevations ``z`` (n,)."""

    xi: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        z = np.atleast_1d(np.asarray(self.z, dtype=float))
        if xi.shape != (z.shape[0], 2):
            raise ConfigurationError(f"xi shape {xi.shape} does not match z length {z.shape[0]}")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "z", z)

    def __len__(self) -> int:
        return self.z.shape[0]

    def __iter__(self) -> Iterator[Observation]:
        for xi, z in zip(self.xi, self.z):
            yield Observation(xi, float(z))

    def __getitem__(self, idx) -> "Observations":
        return Observations(self.xi[idx], self.z[idx])

    @classmethod
    def from_list(cls, items: Sequence[Observation]) -> "Observations":
        return cls(np.array([o.xi for o in items], dtype=float).reshape(-1, 2), [o.z for o in items])

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "z"])
            for (x, y), z in zip(self.xi, self.z):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(z))])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "Observations":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :2], data[:, 2])


def sample_observations(grid: TerrainGrid, n: int, noise_std: float, seed: int) -> Observations:
    """Sample ``n`` distinct cell centres and observe their heights with Gaussian noise."""
    if n > grid.n_cells:
        raise ConfigurationError(f"cannot sample {n} distinct cells from {grid.n_cells}")
    if n < 0 or noise_std < 0:
        raise ConfigurationError("n and noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    idx = rng.choice(grid.n_cells, size=n, replace=False)
    z = grid.heights.ravel()[idx]
    if noise_std > 0:
        z = z + rng.normal(0.0, noise_std, size=n)
    return Observations(grid.cell_centers()[idx], z)


def held_out_observations(grid: TerrainGrid, used: Observations, n: int, noise_std: float, seed: int) -> Observations:
    """Observe ``n`` cells that do not appear in ``used`` (a test set disjoint from train and calibration)."""
    centers = grid.cell_centers()
    taken = {(float(a), float(b)) for a, b in used.xi}
    free = np.array([i for i, (a, b) in enumerate(centers) if (float(a), float(b)) not in taken])
    if n > free.size:
        raise ConfigurationError(f"only {free.size} unobserved cells left, asked for {n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(free, size=n, replace=False))
    z = grid.heights.ravel()[idx]
    if noise_std > 0:
        z = z + rng.normal(0.0, noise_std, size=n)
    return Observations(centers[idx], z)


def split_observations(obs: Observations, train_fraction: float = 0.7, seed: int = 0):
    """Uniformly random train/calibration split (490/210 for 700 points)."""
    n = len(obs)
    n_train = int(round(train_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return obs[np.sort(perm[:n_train])], obs[np.sort(perm[n_train:])]


# ---------------------------------------------------------------------------
# Kernels and GP regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelConfig:
    variant: str = "mixture-rbf"
    sigma_f2: float = 0.05
    length_scales: tuple[float, ...] = (0.5, 1.5, 4.0)
    weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        ws = tuple(float(v) for v in np.atleast_1d(self.weights))
        object.__setattr__(self, "length_scales", ls)
        object.__setattr__(self, "weights", ws)
        if self.variant not in ("single-rbf", "mixture-rbf"):
            raise ConfigurationError(f"unknown kernel variant {self.variant!r}")
        if len(ls) < 1 or len(ls) != len(ws):
            raise ConfigurationError("need matching, non-empty length_scales and weights")
        if self.variant == "single-rbf" and len(ls) != 1:
            raise ConfigurationError("single-rbf takes exactly one length scale")
        if min(ls) <= 0 or self.sigma_f2 <= 0:
            raise ConfigurationError("length scales and sigma_f2 must be positive")
        if min(ws) < 0 or abs(sum(ws) - 1.0) > 1e-9:
            raise ConfigurationError(f"weights must be non-negative and sum to 1, got {ws}")

    @classmethod
    def single(cls, length_scale: float, sigma_f2: float = 0.05) -> "KernelConfig":
        return cls("single-rbf", sigma_f2, (length_scale,), (1.0,))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "sigma_f2": self.sigma_f2,
            "length_scales": list(self.length_scales),
            "weights": list(self.weights),
        }


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kernel_matrix(cfg: KernelConfig, a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    r2 = _sqdist(a, b)
    out = np.zeros_like(r2)
    for ell, w in zip(cfg.length_scales, cfg.weights):
        out += w * np.exp(-0.5 * r2 / ell**2)
    return cfg.sigma_f2 * out


def kernel_eval(cfg: KernelConfig, xi_i, xi_j) -> float:
    return float(kernel_matrix(cfg, xi_i, xi_j)[0, 0])


@dataclass(frozen=True, eq=False)
class GPModel:
    train_inputs: np.ndarray
    train_targets: np.ndarray
    noise_var: float
    kernel: KernelConfig
    chol_factor: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    _lengths: np.ndarray = field(init=False, repr=False)
    _weights: np.ndarray = field(init=False, repr=False)
    _sq_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_sq_norms", (self.train_inputs**2).sum(axis=1))
        object.__setattr__(self, "_lengths", np.asarray(self.kernel.length_scales))
        object.__setattr__(self, "_weights", np.asarray(self.kernel.weights))


def fit_gp(obs: Observations, kernel: KernelConfig, noise_var: float) -> GPModel:
    """Cholesky-factorize ``K + noise_var I``, escalating diagonal jitter if needed."""
    if len(obs) < 2:
        raise ConfigurationError("fit_gp needs at least two observations")
    if noise_var <= 0:
        raise ConfigurationError("noise_var must be positive")
    X, Z = obs.xi, obs.z
    K = kernel_matrix(kernel, X, X)
    K = 0.5 * (K + K.T)
    n = len(obs)
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            L = linalg.cholesky(K + (noise_var + jitter) * np.eye(n), lower=True)
        except linalg.LinAlgError:
            continue
        alpha = linalg.cho_solve((L, True), Z)
        return GPModel(X.copy(), Z.copy(), float(noise_var), kernel, L, alpha, jitter)
    raise GPFitError("K + noise_var*I is not positive definite even with 1e-6 jitter")


def _cross(model: GPModel, q: np.ndarray):
    d = q[:, None, :] - model.train_inputs[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", d, d)
    inv_l2 = 1.0 / model._lengths**2
    parts = np.exp(-0.5 * r2[..., None] * inv_l2) * model._weights
    return d, parts, inv_l2


def gp_predict(model: GPModel, xi):
    """Posterior mean and variance at one point (2,) or a batch (n, 2)."""
    q = np.asarray(xi, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    _, parts, _ = _cross(model, q)
    kq = model.kernel.sigma_f2 * parts.sum(axis=-1)
    mean = kq @ model.alpha
    v = linalg.solve_triangular(model.chol_factor, kq.T, lower=True)
    var = np.maximum(model.kernel.sigma_f2 - np.einsum("ij,ij->j", v, v), 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def gp_mean(model: GPModel, xi) -> np.ndarray:
    q = np.atleast_2d(np.asarray(xi, dtype=float))
    _, parts, _ = _cross(model, q)
    return model.kernel.sigma_f2 * parts.sum(axis=-1) @ model.alpha


def gp_mean_and_gradient(model: GPModel, xi) -> tuple[np.ndarray, np.ndarray]:
    """Batched posterior mean (n,) and its analytic spatial gradient (n, 2)."""
    q = np.atleast_2d(np.asarray(xi, dtype=float))
    X = model.train_inputs
    # expanded form |q|^2 + |x|^2 - 2 q.x is much cheaper than pairwise differences
    r2 = np.maximum((q * q).sum(axis=1)[:, None] + model._sq_norms[None, :] - 2.0 * (q @ X.T), 0.0)
    sf2 = model.kernel.sigma_f2
    kq = np.zeros_like(r2)
    # d/dq exp(-|q-x|^2 / 2l^2) = -(q-x)/l^2 * exp(...)
    dk = np.zeros_like(r2)
    for ell, w in zip(model.kernel.length_scales, model.kernel.weights):
        e = np.exp(r2 * (-0.5 / ell**2))
        kq += w * e
        dk += (w / ell**2) * e
    mean = sf2 * (kq @ model.alpha)
    c = dk * model.alpha
    grad = -sf2 * (q * c.sum(axis=1)[:, None] - c @ X)
    return mean, grad


def gp_mean_gradient(model: GPModel, xi) -> np.ndarray:
    q = np.asarray(xi, dtype=float)
    _, grad = gp_mean_and_gradient(model, q)
    return grad[0] if q.ndim == 1 else grad


def save_gp(model: GPModel, path: str | Path) -> Path:
    """Store the training set and hyperparameters; loading refits deterministically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "kernel": model.kernel.to_dict(),
        "noise_var": model.noise_var,
        "jitter": model.jitter,
        "train_inputs": model.train_inputs.tolist(),
        "train_targets": model.train_targets.tolist(),
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_gp(path: str | Path) -> GPModel:
    doc = json.loads(Path(path).read_text())
    k = doc["kernel"]
    kernel = KernelConfig(k["variant"], k["sigma_f2"], tuple(k["length_scales"]), tuple(k["weights"]))
    obs = Observations(np.array(doc["train_inputs"], dtype=float), np.array(doc["train_targets"], dtype=float))
    return fit_gp(obs, kernel, float(doc["noise_var"]))
