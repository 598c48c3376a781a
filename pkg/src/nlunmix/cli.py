"""Command-line interface.

Each subcommand reads a stage directory and writes the next one, so the
pipeline can be driven end to end or stage by stage.  Matrices travel in
the package's binary format (see core.save_matrix); recipes and stage
metadata are flat key=value text files.
"""
from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .baselines import fcls, vca
from .core import HyperImage, center, load_matrix, save_matrix
from .embed import LleWeights, PcaBasis, init_latents, lle_weights, pca_basis
from .gpregress import GpPredictor, confidence95, extract_endmembers
from .model import (
    LatentState,
    ModelContext,
    feature_dim,
    initial_state,
    latent_noise_scale,
    map_P,
    scg_optimize,
)
from .scaling import constrained_latents, fit_min_volume_simplex
from .scene import SceneRecipe, gamma_matrix, generate_scene


def _write_kv(path: Path, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={v}\n")


def _read_kv(path: Path) -> dict:
    out = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def _recipe_to_kv(recipe: SceneRecipe) -> dict:
    kv = {
        "model": recipe.model,
        "r": recipe.R,
        "l": recipe.L,
        "n": recipe.N,
        "sigma2": format(recipe.sigma2, ".17g"),
        "amax": format(recipe.amax, ".17g"),
        "seed": recipe.seed,
    }
    if recipe.model == "gbm":
        pairs = []
        R = recipe.R
        for i in range(R):
            for j in range(i + 1, R):
                pairs.append(format(recipe.gamma[i, j], ".17g"))
        kv["gbm_gamma"] = ",".join(pairs)
    return kv


def cmd_gen(args) -> None:
    gamma = None
    if args.model == "gbm":
        gamma = gamma_matrix(args.r, [float(v) for v in args.gbm_gamma.split(",")])
    recipe = SceneRecipe(
        model=args.model,
        R=args.r,
        L=args.l,
        N=args.n,
        sigma2=args.sigma2,
        seed=args.seed,
        amax=args.amax,
        gamma=gamma,
    )
    scene = generate_scene(recipe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(scene.image.pixels, out / "image.nlm")
    save_matrix(scene.abundances.values, out / "abundances.nlm")
    save_matrix(scene.endmembers.spectra, out / "endmembers.nlm")
    _write_kv(out / "recipe.txt", _recipe_to_kv(recipe))
    print(f"wrote scene ({recipe.N}x{recipe.L}, model={recipe.model}) to {out}")


def _save_lambda_csv(path: Path, lle: LleWeights) -> None:
    with open(path, "w") as fh:
        fh.write("i,j,weight\n")
        for i in range(lle.n_pixels):
            for j, w in zip(lle.neighbors[i], lle.weights[i]):
                fh.write(f"{i},{j},{format(w, '.17g')}\n")


def _load_lambda_csv(path: Path, n: int, k: int) -> LleWeights:
    neighbors = np.empty((n, k), dtype=np.int64)
    weights = np.empty((n, k))
    counts = np.zeros(n, dtype=int)
    with open(path) as fh:
        fh.readline()
        for line in fh:
            i_s, j_s, w_s = line.strip().split(",")
            i = int(i_s)
            neighbors[i, counts[i]] = int(j_s)
            weights[i, counts[i]] = float(w_s)
            counts[i] += 1
    if not np.all(counts == k):
        raise ValueError(f"{path}: expected exactly {k} weights per pixel")
    return LleWeights(neighbors=neighbors, weights=weights)


def cmd_reduce(args) -> None:
    indir = Path(args.indir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pixels = load_matrix(indir / "image.nlm")
    recipe_path = indir / "recipe.txt"
    if args.r is not None:
        R = args.r
    elif recipe_path.exists():
        R = int(_read_kv(recipe_path)["r"])
    else:
        raise ValueError("pass --r when the input has no recipe.txt")
    k = args.k if args.k is not None else R
    img = HyperImage(pixels)
    centered, mean = center(img)
    D = feature_dim(R)
    pbar = pca_basis(centered.pixels, D)
    lle = lle_weights(centered.pixels, K=k)
    x0 = init_latents(centered.pixels, pbar.basis[:, : R - 1])
    save_matrix(pbar.basis, out / "pbar.nlm")
    save_matrix(pbar.eigenvalues.reshape(-1, 1), out / "eigenvalues.nlm")
    save_matrix(centered.pixels, out / "yc.nlm")
    save_matrix(mean.reshape(-1, 1), out / "mean.nlm")
    save_matrix(x0, out / "x0.nlm")
    _save_lambda_csv(out / "lambda.csv", lle)
    _write_kv(
        out / "meta.txt",
        {
            "r": R,
            "k": k,
            "residual_variance": format(pbar.residual_variance, ".17g"),
        },
    )
    print(f"wrote basis, weights, and starting latents to {out}")


def _load_init_dir(indir: Path):
    meta = _read_kv(indir / "meta.txt")
    R, k = int(meta["r"]), int(meta["k"])
    Yc = load_matrix(indir / "yc.nlm")
    basis = load_matrix(indir / "pbar.nlm")
    evals = load_matrix(indir / "eigenvalues.nlm").ravel()
    pbar = PcaBasis(
        basis=basis,
        eigenvalues=evals,
        residual_variance=float(meta["residual_variance"]),
    )
    lle = _load_lambda_csv(indir / "lambda.csv", Yc.shape[0], k)
    mean = load_matrix(indir / "mean.nlm").ravel()
    return meta, R, Yc, pbar, lle, mean


def cmd_fit(args) -> None:
    indir = Path(args.indir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta, R, Yc, pbar, lle, mean = _load_init_dir(indir)
    x0 = load_matrix(indir / "x0.nlm")
    ctx = ModelContext(Yc=Yc, pbar=pbar, lle=lle, gamma=args.gamma)
    state, report = scg_optimize(
        initial_state(ctx, x0), ctx, max_iter=args.max_iter, tol=args.tol
    )
    phat = map_P(state, ctx)
    save_matrix(state.X, out / "xhat.nlm")
    save_matrix(state.U, out / "uhat.nlm")
    save_matrix(np.array([[state.s2]]), out / "s2.nlm")
    save_matrix(np.array([[state.sigma2]]), out / "sigma2.nlm")
    save_matrix(phat, out / "phat.nlm")
    with open(out / "trace.csv", "w") as fh:
        fh.write("iteration,neg_log_posterior\n")
        for i, v in enumerate(report.trace):
            fh.write(f"{i},{format(v, '.17g')}\n")
    # carry the context forward so later stages are self-contained
    for name in ("yc.nlm", "pbar.nlm", "eigenvalues.nlm", "mean.nlm"):
        (out / name).write_bytes((indir / name).read_bytes())
    _write_kv(
        out / "meta.txt",
        dict(
            meta,
            gamma=format(args.gamma, ".17g"),
            converged=report.converged,
            iterations=report.iterations,
            grad_norm=format(report.grad_norm, ".17g"),
        ),
    )
    print(
        f"fit finished: {report.iterations} iterations, converged={report.converged}, "
        f"objective {report.trace[-1]:.6g}"
    )


def cmd_scale(args) -> None:
    indir = Path(args.indir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _read_kv(indir / "meta.txt")
    R = int(meta["r"])
    X = load_matrix(indir / "xhat.nlm")
    noise_scale = None
    if not args.rigid:
        state = LatentState(
            X=X,
            U=load_matrix(indir / "uhat.nlm"),
            s2=float(load_matrix(indir / "s2.nlm")[0, 0]),
            sigma2=float(load_matrix(indir / "sigma2.nlm")[0, 0]),
        )
        noise_scale = latent_noise_scale(state, load_matrix(indir / "pbar.nlm"))
    fit = fit_min_volume_simplex(X[:, : R - 1], noise_scale=noise_scale)
    Xc, v_r = constrained_latents(fit)
    save_matrix(fit.abundances.values, out / "abundances.nlm")
    save_matrix(fit.vertices, out / "v_r_minus1.nlm")
    save_matrix(v_r, out / "v_r.nlm")
    save_matrix(Xc, out / "xc.nlm")
    for name in (
        "yc.nlm",
        "pbar.nlm",
        "eigenvalues.nlm",
        "mean.nlm",
        "uhat.nlm",
        "s2.nlm",
        "sigma2.nlm",
        "phat.nlm",
    ):
        (out / name).write_bytes((indir / name).read_bytes())
    _write_kv(out / "meta.txt", meta)
    print(f"wrote abundances and vertex maps (volume {fit.volume:.6g}) to {out}")


def cmd_endmembers(args) -> None:
    indir = Path(args.indir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _read_kv(indir / "meta.txt")
    R = int(meta["r"])
    Yc = load_matrix(indir / "yc.nlm")
    basis = load_matrix(indir / "pbar.nlm")
    evals = load_matrix(indir / "eigenvalues.nlm").ravel()
    pbar = PcaBasis(
        basis=basis,
        eigenvalues=evals,
        residual_variance=float(meta["residual_variance"]),
    )
    mean = load_matrix(indir / "mean.nlm").ravel()
    Xc = load_matrix(indir / "xc.nlm")
    U = load_matrix(indir / "uhat.nlm")
    s2 = float(load_matrix(indir / "s2.nlm")[0, 0])
    sigma2 = float(load_matrix(indir / "sigma2.nlm")[0, 0])
    v_r = load_matrix(indir / "v_r.nlm")
    state = LatentState(X=Xc, U=U, s2=s2, sigma2=sigma2)
    if args.mean_mode == "pca":
        P = pbar.basis
    else:
        P = load_matrix(indir / "phat.nlm")
    pred = GpPredictor(
        state=state, spectral_map=P, v_r=v_r, mean_spectrum=mean, Yc=Yc
    )
    endm = extract_endmembers(pred)
    lo, hi = confidence95(endm)
    save_matrix(endm.spectra, out / "endmembers.nlm")
    with open(out / "endmembers.csv", "w") as fh:
        cols = ["band"]
        for r in range(R):
            cols += [f"mean_{r + 1}", f"var_{r + 1}", f"lo95_{r + 1}", f"hi95_{r + 1}"]
        fh.write(",".join(cols) + "\n")
        for b in range(endm.spectra.shape[0]):
            cells = [str(b)]
            for r in range(R):
                cells += [
                    format(endm.spectra[b, r], ".17g"),
                    format(endm.band_variance[b, r], ".17g"),
                    format(lo[b, r], ".17g"),
                    format(hi[b, r], ".17g"),
                ]
            fh.write(",".join(cells) + "\n")
    print(f"wrote {R} endmember spectra with confidence bands to {out}")


def cmd_baseline(args) -> None:
    indir = Path(args.indir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pixels = load_matrix(indir / "image.nlm")
    img = HyperImage(pixels)
    endm = vca(img, args.r, seed=args.seed)
    abund = fcls(img, endm)
    save_matrix(endm.spectra, out / "vca_endmembers.nlm")
    save_matrix(abund.values, out / "fcls_abundances.nlm")
    print(f"wrote VCA endmembers and FCLS abundances to {out}")


def _resolve_config(path_arg: str) -> str:
    p = Path(path_arg)
    if p.exists():
        return p.read_text()
    builtin = resources.files("nlunmix").joinpath("configs", path_arg)
    if builtin.is_file():
        return builtin.read_text()
    raise FileNotFoundError(
        f"no config file {path_arg!r} (and no shipped config of that name)"
    )


def cmd_pipeline(args) -> None:
    text = _resolve_config(args.config)
    config, outdir = pl.parse_config(text)
    if args.out:
        outdir = args.out
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    report = pl.run_pipeline(config)
    (out / "report.csv").write_text(pl.report_csv(report))
    (out / "timing.csv").write_text(pl.timing_csv(report))
    (out / "plot_data.csv").write_text(pl.plot_data_csv(report))
    print(pl.report_csv(report, include_timing=True), end="")
    print(f"wrote report.csv, timing.csv, plot_data.csv to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlunmix",
        description="Unsupervised nonlinear spectral unmixing toolbox",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene")
    p.add_argument("--model", choices=("lmm", "fm", "gbm"), required=True)
    p.add_argument("--n", type=int, default=2500)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--l", type=int, default=160)
    p.add_argument("--sigma2", type=float, default=1e-4)
    p.add_argument("--amax", type=float, default=1.0)
    p.add_argument("--gbm-gamma", default="0.9,0.5,0.3")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("reduce", help="center, PCA basis, LLE weights, latent init")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--r", type=int, default=None, help="endmember count (default: recipe.txt)")
    p.add_argument("--k", type=int, default=None, help="LLE neighbors (default: R)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("fit", help="maximize the latent posterior")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--gamma", type=float, default=1e3)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scale", help="minimum-volume simplex scaling")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument(
        "--rigid",
        action="store_true",
        help="skip the noise-adaptive containment refinement",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("endmembers", help="GP endmember extraction")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--mean-mode", choices=("pca", "map"), default="pca")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_endmembers)

    p = sub.add_parser("baseline", help="VCA + FCLS linear baseline")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("pipeline", help="full benchmark run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's out dir")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except pl.PipelineError as exc:
        print(f"nlunmix: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        stage = getattr(args, "command", "cli")
        print(f"nlunmix: [stage: {stage}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
