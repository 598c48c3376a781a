"""End-to-end experiment pipeline and report generation.

Chains scene generation, centering, subspace and neighborhood preparation,
the latent fit, simplex scaling, GP endmember extraction, and the linear
baseline, then scores everything against the scene's ground truth.  Reports
are written as deterministic CSV (wall-clock timings go to a separate file
so the metrics file is byte-reproducible for fixed seeds).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import fcls, vca
from .core import center
from .embed import init_latents, lle_weights, pca_basis
from .gpregress import GpPredictor, extract_endmembers
from .metrics import align_columns, are, rnmse, sam
from .model import (
    LatentState,
    ModelContext,
    feature_dim,
    initial_state,
    latent_noise_scale,
    map_P,
    reconstruct,
    scg_optimize,
)
from .scaling import constrained_latents, fit_min_volume_simplex
from .scene import SceneRecipe, gamma_matrix, generate_scene

KNOWN_METHODS = ("fcll_gplvm", "vca_fcls")


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[stage: {stage}] {cause}")
        self.stage = stage
        self.__cause__ = cause


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one benchmark run needs."""

    recipe: SceneRecipe
    gamma: float = 1e3
    k: int | None = None  # LLE neighbors; defaults to R
    max_iter: int = 2000
    tol: float = 1e-8
    methods: tuple[str, ...] = KNOWN_METHODS
    mean_mode: str = "pca"
    baseline_seed: int = 0

    def __post_init__(self):
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class MethodResult:
    are: float
    rnmse: float
    sam_per_endmember: tuple[float, ...]
    permutation: tuple[int, ...]
    wall_clock: float

    def __post_init__(self):
        vals = (self.are, self.rnmse, *self.sam_per_endmember)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("metrics must be finite and nonnegative")


@dataclass(frozen=True)
class Report:
    methods: dict[str, MethodResult]
    pca_are: float
    llgplvm_are: float
    seed: int
    plot_data: dict = field(repr=False, default_factory=dict)


def parse_config(text: str) -> tuple[ExperimentConfig, str]:
    """Parse the flat key=value experiment format; returns (config, outdir)."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()

    def take(key, conv, default=None):
        if key in values:
            return conv(values.pop(key))
        if default is None:
            raise ValueError(f"missing required key {key!r}")
        return default

    model = take("model", str)
    r = take("r", int)
    gamma_coeffs = values.pop("gbm_gamma", None)
    gamma_m = None
    if model == "gbm":
        coeffs = (
            [float(v) for v in gamma_coeffs.split(",")]
            if gamma_coeffs
            else [0.0] * (r * (r - 1) // 2)
        )
        gamma_m = gamma_matrix(r, coeffs)
    recipe = SceneRecipe(
        model=model,
        R=r,
        L=take("l", int),
        N=take("n", int),
        sigma2=take("sigma2", float),
        seed=take("seed", int),
        amax=take("amax", float, 1.0),
        gamma=gamma_m,
    )
    config = ExperimentConfig(
        recipe=recipe,
        gamma=take("gamma", float, 1e3),
        k=take("k", int, recipe.R),
        max_iter=take("max_iter", int, 2000),
        tol=take("tol", float, 1e-8),
        methods=tuple(take("methods", str, ",".join(KNOWN_METHODS)).split(",")),
        mean_mode=take("mean_mode", str, "pca"),
        baseline_seed=take("baseline_seed", int, 0),
    )
    outdir = values.pop("out", ".")
    if values:
        raise ValueError(f"unknown config keys: {sorted(values)}")
    return config, outdir


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, exc) from exc
            return False

    return _Ctx()


def run_pipeline(config: ExperimentConfig) -> Report:
    """Run the configured methods on a freshly generated scene."""
    recipe = config.recipe
    R = recipe.R
    k = config.k or R

    with _stage("gen"):
        scene = generate_scene(recipe)
        Y = scene.image.pixels
        A_true = scene.abundances.values
        M_true = scene.endmembers

    with _stage("center"):
        centered, mean = center(scene.image)
        Yc = centered.pixels

    with _stage("reduce"):
        pbar = pca_basis(Yc, feature_dim(R))
        lle = lle_weights(Yc, K=k)
        x0 = init_latents(Yc, pbar.basis[:, : R - 1])
        basis_rm1 = pbar.basis[:, : R - 1]
        pca_recon = (Yc @ basis_rm1) @ basis_rm1.T + mean
        pca_are = are(Y, pca_recon)

    results: dict[str, MethodResult] = {}
    plot_data: dict = {"pca_scores": Yc @ basis_rm1}
    llgplvm_are = np.nan

    if "fcll_gplvm" in config.methods:
        t0 = time.perf_counter()
        with _stage("fit"):
            ctx = ModelContext(Yc=Yc, pbar=pbar, lle=lle, gamma=config.gamma)
            state, fit_report = scg_optimize(
                initial_state(ctx, x0), ctx, max_iter=config.max_iter, tol=config.tol
            )
            Phat = map_P(state, ctx)
            llgplvm_are = are(Y, reconstruct(state, Phat) + mean)
        with _stage("scale"):
            simplex = fit_min_volume_simplex(
                state.X[:, : R - 1],
                noise_scale=latent_noise_scale(state, pbar.basis),
            )
            Xc, v_r = constrained_latents(simplex)
            cstate = LatentState(X=Xc, U=state.U, s2=state.s2, sigma2=state.sigma2)
        with _stage("endmembers"):
            pred = GpPredictor.from_fit(
                cstate, ctx, v_r, mean, mean_mode=config.mean_mode
            )
            endm = extract_endmembers(pred)
        with _stage("metrics"):
            perm = align_columns(M_true, endm)
            sams = tuple(
                sam(M_true.spectra[:, r], endm.spectra[:, perm[r]]) for r in range(R)
            )
            abund = simplex.abundances.values[:, perm]
            results["fcll_gplvm"] = MethodResult(
                are=are(Y, reconstruct(cstate, Phat) + mean),
                rnmse=rnmse(A_true, abund),
                sam_per_endmember=sams,
                permutation=perm,
                wall_clock=time.perf_counter() - t0,
            )
            plot_data.update(
                latents=state.X[:, : R - 1],
                vertices=simplex.vertices,
                fit_trace=fit_report.trace,
            )

    if "vca_fcls" in config.methods:
        t0 = time.perf_counter()
        with _stage("baseline"):
            endm_vca = vca(scene.image, R, seed=config.baseline_seed)
            abund_vca = fcls(scene.image, endm_vca)
            perm = align_columns(M_true, endm_vca)
            sams = tuple(
                sam(M_true.spectra[:, r], endm_vca.spectra[:, perm[r]])
                for r in range(R)
            )
            recon = abund_vca.values @ endm_vca.spectra.T
            results["vca_fcls"] = MethodResult(
                are=are(Y, recon),
                rnmse=rnmse(A_true, abund_vca.values[:, perm]),
                sam_per_endmember=sams,
                permutation=perm,
                wall_clock=time.perf_counter() - t0,
            )

    return Report(
        methods=results,
        pca_are=pca_are,
        llgplvm_are=float(llgplvm_are),
        seed=recipe.seed,
        plot_data=plot_data,
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def report_csv(report: Report, include_timing: bool = False) -> str:
    """Render the report as CSV.  Timing is excluded by default so that the
    bytes are reproducible for identical configs and seeds."""
    R = max((len(m.sam_per_endmember) for m in report.methods.values()), default=0)
    ncols = 3 + R + 1 + int(include_timing)

    def row(cells):
        cells = list(cells) + [""] * (ncols - len(cells))
        return ",".join(cells)

    header = ["method", "are", "rnmse"]
    header += [f"sam_{r + 1}" for r in range(R)]
    header += ["permutation"]
    if include_timing:
        header += ["wall_clock_s"]
    lines = [row(header)]
    lines.append(row(["pca_r_minus_1", _fmt(report.pca_are)]))
    if np.isfinite(report.llgplvm_are):
        lines.append(row(["ll_gplvm", _fmt(report.llgplvm_are)]))
    for name in sorted(report.methods):
        m = report.methods[name]
        cells = [name, _fmt(m.are), _fmt(m.rnmse)]
        cells += [_fmt(s) for s in m.sam_per_endmember]
        cells += ["|".join(str(p) for p in m.permutation)]
        if include_timing:
            cells += [f"{m.wall_clock:.3f}"]
        lines.append(row(cells))
    return "\n".join(lines) + "\n"


def timing_csv(report: Report) -> str:
    lines = ["method,wall_clock_s"]
    for name in sorted(report.methods):
        lines.append(f"{name},{report.methods[name].wall_clock:.3f}")
    return "\n".join(lines) + "\n"


def plot_data_csv(report: Report) -> str:
    """Flat CSV of the latent cloud, PCA scores, and simplex vertices."""
    lines = ["kind,index,c1,c2,c3"]

    def emit(kind, arr):
        arr = np.atleast_2d(np.asarray(arr, float))
        for i, row in enumerate(arr):
            cells = [_fmt(v) for v in row[:3]]
            cells += [""] * (3 - len(cells))
            lines.append(f"{kind},{i},{cells[0]},{cells[1]},{cells[2]}")

    for kind in ("pca_scores", "latents", "vertices"):
        if kind in report.plot_data:
            arr = report.plot_data[kind]
            emit(kind, arr.T if kind == "vertices" else arr)
    return "\n".join(lines) + "\n"
