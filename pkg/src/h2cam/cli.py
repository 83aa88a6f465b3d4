"""Command-line interface: ``h2cam <command> ...``.

Every command reads JSON configuration and writes deterministic files, so
rerunning with the same inputs reproduces the outputs byte for byte.  Run
times go to stderr only.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path


from . import bench
from .core import (H2CamError, WavelengthGrid, load_cube, save_cube, save_image, save_preview, write_json)
from .metasurface import MetasurfaceDesign, SplitSpec, build_design, default_splits, library_from_source
from .optics import OpticalConfig, build_psf_stack, far_field_powers, render_irradiance
from .reconstruct import ReconConfig, reconstruct_pipeline
from .sensor import SensorConfig, SensorFrame, crop_subimages, expose

log = logging.getLogger("h2cam")


# ------------------------------------------------------------------ configs

def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def splits_from_config(cfg: dict) -> list[SplitSpec]:
    """``splits`` is either a list of split dicts or ``{"count", "spacing_mm"}``."""
    s = cfg.get("splits", {})
    if isinstance(s, list):
        return [SplitSpec.from_dict(d) for d in s]
    return default_splits(int(s.get("count", 9)), float(s.get("spacing_mm", 2.0)), s.get("power_ratios"))


def grid_from_config(cfg: dict) -> WavelengthGrid:
    w = cfg.get("wavelengths")
    if not w:
        return WavelengthGrid.uniform()
    if "centers_nm" in w:
        return WavelengthGrid.from_dict(w)
    return WavelengthGrid.uniform(float(w.get("lambda_low_nm", 600.0)), float(w.get("lambda_high_nm", 700.0)),
                                  int(w.get("num_bands", 11)))


def optics_from_config(cfg: dict) -> OpticalConfig:
    """Optical configuration from a design config or design metadata."""
    return OpticalConfig.from_dict(cfg.get("optics", {}), splits_from_config(cfg), grid_from_config(cfg))


def load_design_and_optics(path) -> tuple[MetasurfaceDesign, OpticalConfig]:
    design = MetasurfaceDesign.load(path)
    meta = design.metadata()
    optics = OpticalConfig.from_dict(meta.get("optics", {}), design.splits, grid_from_config(meta))
    return design, optics


def _base(path) -> Path:
    """Design paths may be given with or without an extension."""
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".raw") else p


# ----------------------------------------------------------------- commands

def cmd_design(args) -> None:
    cfg = _read_json(args.config)
    splits = splits_from_config(cfg)
    grid = grid_from_config(cfg)
    library = library_from_source(cfg.get("library", {"kind": "synthetic"}), Path(args.config).parent)
    g = cfg.get("grid", {"rows": 1024, "cols": 1024})
    optics = OpticalConfig.from_dict(cfg.get("optics", {}), splits, grid)
    design = build_design(
        splits, library,
        pitch_w=float(cfg.get("pitch_nm", 400.0)),
        grid_shape=(int(g["rows"]), int(g["cols"])),
        focal_s=float(cfg.get("focal_s_mm", 50.0)),
        lambda_c=float(cfg.get("lambda_c_nm", grid.lambda_c)),
        seed=int(cfg.get("seed", 0)),
        extra={"optics": optics.to_dict(), "wavelengths": grid.to_dict()},
    )
    out = _base(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    design.save(out)
    log.info("design %dx%d written to %s.{json,raw,assign.raw}", *design.grid_shape, out)


def cmd_farfield(args) -> None:
    design, _ = load_design_and_optics(_base(args.design))
    library = library_from_source(design.library_source, _base(args.design).parent)
    report = far_field_powers(design, library, args.wavelength, pad=args.pad, window_lobes=args.window_lobes,
                              aperture=args.aperture)
    rows = report.rows(design.splits)
    _write_rows(args.out, rows)
    log.info("far field at %.1f nm: residual %.4f", args.wavelength, report.residual)


def cmd_psf(args) -> None:
    cfg = _read_json(args.config)
    optics = optics_from_config(cfg)
    stack = build_psf_stack(optics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, split in enumerate(optics.splits):
        for b, lam in enumerate(optics.grid.array):
            name = f"kernel_s{split.index}_b{b:02d}.raw"
            save_image(stack.kernels[i, b], out / name, {"split": split.index, "wavelength_nm": float(lam)})
            entries.append({"file": name, "split": split.index, "wavelength_nm": float(lam),
                            "sensor_row": int(stack.placement[i, b, 0]), "sensor_col": int(stack.placement[i, b, 1]),
                            "center_row": float(stack.centers[i, b, 0]), "center_col": float(stack.centers[i, b, 1])})
    save_image(stack.base, out / "lens_psf.raw")
    write_json(out / "stack.json", {"kernels": entries, "weights": [float(w) for w in stack.weights],
                                    "optics": optics.to_dict(), "wavelengths": optics.grid.to_dict()})
    log.info("%d kernels written to %s", len(entries), out)


def cmd_scene(args) -> None:
    spec_cfg = _read_json(args.spec)
    if args.design:
        _, optics = load_design_and_optics(_base(args.design))
    else:
        optics = OpticalConfig()
    margin = spec_cfg.get("margin", "auto")
    if margin == "auto":
        margin = bench.scene_margin(optics)
    spec = bench.SceneSpec(spec_cfg["kind"], shape=optics.scene_shape, grid=optics.grid, margin=int(margin),
                           seed=int(spec_cfg.get("seed", 0)), params=spec_cfg.get("params", {}))
    cube = bench.generate_scene(spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_cube(cube, args.out)
    log.info("%s scene %dx%dx%d written to %s", spec.kind, cube.height, cube.width, cube.grid.num_bands, args.out)


def cmd_simulate(args) -> None:
    _, optics = load_design_and_optics(_base(args.design))
    scene = load_cube(args.scene)
    sensor_cfg = _read_json(args.sensor)
    auto = sensor_cfg.pop("auto_exposure", None)
    sensor = SensorConfig.from_dict(sensor_cfg)
    stack = build_psf_stack(optics)
    irr = render_irradiance(scene, stack, optics)
    if auto:
        t = bench.auto_exposure(irr, optics, sensor, int(auto.get("split", 1)), float(auto.get("fill", 0.8)))
        sensor = replace(sensor, exposure=t)
    frame = expose(irr, sensor, optics.grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame = SensorFrame(frame.image, frame.config, frame.saturation_mask,
                        {"design": _base(args.design).name, "scene": Path(args.scene).name})
    frame.save(out)
    subs, _ = crop_subimages(frame, optics)
    for i, sub in enumerate(subs, start=1):
        save_image(sub, out.with_name(f"{out.stem}_sub{i}.raw"), {"split": i})
    log.info("frame %s: exposure %.6g s, %.2f%% saturated", out, sensor.exposure,
             100 * frame.saturation_mask.mean())


def cmd_reconstruct(args) -> None:
    _, optics = load_design_and_optics(_base(args.design))
    frame = SensorFrame.load(args.frame)
    recon = ReconConfig(**_read_json(args.recon)) if args.recon else ReconConfig()
    res = reconstruct_pipeline(frame, optics, recon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(res.cube, out / "cube.raw")
    save_image(res.hdr, out / "hdr.raw", {"kind": "fused"})
    save_image(res.hdr_from_cube, out / "hdr_from_cube.raw", {"kind": "band sum of cube"})
    save_preview(res.hdr, out / "hdr_preview.png")
    for b, lam in enumerate(optics.grid.array):
        save_preview(res.cube.bands[b], out / f"band_{int(round(lam))}nm_preview.png")
    d = res.diagnostics
    rows = [{"band": b, "wavelength_nm": float(lam), "condition_proxy": d["condition_proxy"][b],
             "saturated_fraction_split1": d["saturated_fraction"][0]}
            for b, lam in enumerate(optics.grid.array)]
    _write_rows(out / "diagnostics.csv", rows)
    if "objective" in d:
        _write_rows(out / "cg_history.csv", [{"iteration": k, "objective": o, "residual": r}
                                             for k, (o, r) in enumerate(zip(d["objective"], d["residual"]))])
    write_json(out / "diagnostics.json", {
        "recon": recon.to_dict(), "iterations": d.get("iterations", 0),
        "unfilled_pixels": d["unfilled_pixels"], "saturated_fraction": d["saturated_fraction"]})
    log.info("reconstruction written to %s (%s iterations)", out, d.get("iterations", 0))


def cmd_bench(args) -> None:
    recon = ReconConfig(**_read_json(args.recon)) if getattr(args, "recon", None) else ReconConfig()
    if args.experiment == "ablate":
        params = _read_json(args.scene) if args.scene else {}
        spec = bench.SceneSpec(params.get("kind", "gaussian-peaks"), params=params.get("params", {}))
        report = bench.ablate_subimages(spec, counts=tuple(args.counts), seeds=tuple(args.seeds), recon=recon,
                                        renormalize=not args.no_renormalize)
    elif args.experiment == "resolution":
        rep = bench.spectral_resolution_test(recon=recon, noise=not args.noiseless, seed=args.seeds[0])
        report = rep.to_report()
    elif args.experiment == "hdr":
        reps = [bench.hdr_range_test(args.dynamic_range, seed=s) for s in args.seeds]
        report = bench.ExperimentReport("hdr", rows=[r.row() for r in reps], seeds=list(args.seeds),
                                        summary={"min_fused_db": min(r.fused_db for r in reps),
                                                 "max_subimage_db": max(max(r.subimage_db) for r in reps)})
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(args.experiment)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    report.to_json(out.with_suffix(".json"))
    log.info("%s report written to %s", report.name, out)


def cmd_plot(args) -> None:
    """Reduce a bench report to plain x/y series."""
    with open(args.input, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise H2CamError(f"{args.input} has no rows")
    cols = rows[0].keys()
    if "count" in cols:
        series = [{"x_count": r["count"], "psnr_db": r["psnr_db"], "ssim": r["ssim"], "sam_rad": r["sam_rad"]}
                  for r in rows if r["seed"] == "median"]
    elif "separation_nm" in cols:
        series = [{"x_separation_nm": r["separation_nm"], "resolved_fraction": r["resolved_fraction"]} for r in rows]
    elif "fused_db" in cols:
        series = [{"x_seed": r["seed"], "fused_db": r["fused_db"], "max_subimage_db": r["max_subimage_db"]}
                  for r in rows]
    else:
        raise H2CamError(f"{args.input} is not a bench report")
    _write_rows(args.out, series)


def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    report = bench.ExperimentReport("rows", rows=rows)
    report.to_csv(path)


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="h2cam", description="Snapshot HDR + spectral camera simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="build a metasurface design from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output base path (writes .json, .raw, .assign.raw)")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("farfield", help="far-field power fractions of a design")
    p.add_argument("--design", required=True)
    p.add_argument("--lambda", dest="wavelength", type=float, default=650.0, help="wavelength in nm")
    p.add_argument("--pad", type=int, default=2)
    p.add_argument("--window-lobes", type=int, default=3)
    p.add_argument("--aperture", choices=("circle", "square"), default="circle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_farfield)

    p = sub.add_parser("psf", help="dump per-split, per-band PSF kernels")
    p.add_argument("--config", required=True, help="design config (splits, wavelengths, optics)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("scene", help="generate a synthetic scene cube")
    p.add_argument("--spec", required=True, help="JSON with kind, seed, margin ('auto' or px), params")
    p.add_argument("--design", help="design whose optics set the scene size and wavelength grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("simulate", help="render and expose a scene through a design")
    p.add_argument("--scene", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--sensor", required=True, help="sensor JSON; optional auto_exposure {split, fill}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="recover the HDR image and spectral cube from a frame")
    p.add_argument("--frame", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--recon", help="reconstruction JSON (ReconConfig fields)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("bench", help="experiments")
    bsub = p.add_subparsers(dest="experiment", required=True)
    for name in ("ablate", "resolution", "hdr"):
        b = bsub.add_parser(name)
        b.add_argument("--out", required=True)
        b.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
        b.add_argument("--recon", help="reconstruction JSON")
        b.set_defaults(func=cmd_bench)
        if name == "ablate":
            b.add_argument("--counts", type=int, nargs="+", default=[1, 2, 9])
            b.add_argument("--scene", help="scene JSON (kind, params)")
            b.add_argument("--no-renormalize", action="store_true",
                           help="keep the truncated power schedule instead of rescaling it")
        elif name == "resolution":
            b.add_argument("--noiseless", action="store_true")
        else:
            b.add_argument("--dynamic-range", type=float, default=60.0)
    b = bsub.add_parser("plot", help="turn a bench report into x/y series CSV")
    b.add_argument("--input", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    try:
        args.func(args)
    except (H2CamError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"h2cam: error: {exc}", file=sys.stderr)
        return 2
    log.info("done in %.2f s", time.perf_counter() - t0)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
