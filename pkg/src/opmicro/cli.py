"""``opmicro`` command line: one subcommand per pipeline, TOML configs, JSON reports.

Exit status is 0 on success, 2 for invalid input or configuration and 3
for numerical failures (unstable simulation, singular systems).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, chsim
from .fieldstore import AnalysisReport, FieldError, FrameStack, file_digest, load_field, load_stack, save_stack

log = logging.getLogger("opmicro")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    """Config value of the wrong type or an unknown key; the message carries its path."""


# --- configuration ------------------------------------------------------------


def _toml_load(path) -> dict:
    import tomli

    with open(path, "rb") as fh:
        return tomli.load(fh)


def defaults() -> dict:
    with resources.files("opmicro").joinpath("data/defaults.toml").open("rb") as fh:
        import tomli

        return tomli.load(fh)


def _check_type(path: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config error at {path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def load_config(path, section: str) -> dict:
    """Defaults for ``section`` overlaid with the same table from ``path`` (if given)."""
    base = defaults()
    cfg = dict(base[section])
    if path is None:
        return cfg
    user = _toml_load(path)
    for key, val in user.items():
        if key == "version":
            continue
        if key not in base or not isinstance(base[key], dict):
            raise ConfigError(f"config error at {key}: unknown table")
        if key != section:
            continue
        if not isinstance(val, dict):
            raise ConfigError(f"config error at {key}: expected a table")
        for k, v in val.items():
            if k not in base[section]:
                raise ConfigError(f"config error at {section}.{k}: unknown key")
            cfg[k] = _check_type(f"{section}.{k}", base[section][k], v)
    return cfg


# --- report helpers -----------------------------------------------------------


def report_schema() -> dict:
    return json.loads(resources.files("opmicro").joinpath("data/report.schema.json").read_text())


def validate_report(d: dict) -> None:
    import jsonschema

    jsonschema.validate(d, report_schema())


def _write_report(path, kind, payload, *, inputs, config, seed, command, outputs=()):
    rep = AnalysisReport.build(kind, payload, inputs=inputs, config=config, seed=seed, command=command,
                               version=__version__, outputs={Path(p).name: file_digest(p) for p in outputs})
    validate_report(rep.to_dict())
    rep.write(path)
    log.info("wrote %s", path)
    return rep


def _report_beside(stack_path: Path) -> Path:
    name = stack_path.name[:-4] if stack_path.name.endswith(".npy") else stack_path.name
    return stack_path.with_name(name + ".report.json")


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    return path


def _npy_path(p) -> Path:
    p = Path(p)
    return p if p.suffix == ".npy" else p.with_name(p.name + ".npy")


# --- subcommands --------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, "simulate")
    params = chsim.ChParams(omega=cfg["omega"], kappa=cfg["kappa"], grid=tuple(int(g) for g in cfg["grid"]),
                            domain_length=cfg["domain_length"], dt=cfg["dt"], n_frames=cfg["n_frames"],
                            frame_stride=cfg["frame_stride"], c_floor=cfg["c_floor"], c_mean=cfg["c_mean"],
                            ic_amplitude=cfg["ic_amplitude"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stacks = chsim.make_dataset(params, cfg["n_realizations"], args.seed)
    written = []
    for r, st in enumerate(stacks):
        written.append(save_stack(st, out / f"stack_{r:03d}.npy", cfg["precision"]))
    payload = {"params": params.to_dict(), "n_realizations": len(stacks), "total_time": params.total_time,
               "files": [p.name for p in written]}
    _write_report(out / "manifest.json", "simulation", payload, inputs=[args.config] if args.config else [],
                  config=cfg, seed=args.seed, command="simulate", outputs=written)
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from .noisegen import NoiseSpec, corrupt

    cfg = load_config(args.spec, "corrupt")
    spec = NoiseSpec(cfg["family"], cfg["gaussian_rel"], cfg["poisson_lambda"], cfg["impulse_p"],
                     None if cfg["post_median"] == "auto" else bool(cfg["post_median"] == "on"),
                     tuple(cfg["clip"]) if cfg["clip"] else None)
    st = load_stack(args.inp)
    noisy = corrupt(st, spec, args.seed)
    out = save_stack(noisy, _npy_path(args.out), cfg["precision"])
    _write_report(_report_beside(out), "corruption", {"noise": spec.to_dict(), "shape": list(st.data.shape)},
                  inputs=[args.inp] + ([args.spec] if args.spec else []), config=cfg, seed=args.seed,
                  command="corrupt", outputs=[out])
    return EXIT_OK


def _denoiser_spec(cfg):
    from .denoise import DEFAULTS, DenoiserSpec

    rename = {"size": "median_size", "window": "temporal_window"}
    params = {k: cfg[rename.get(k, k)] for k in DEFAULTS[cfg["kind"]]} if cfg["kind"] in DEFAULTS else {}
    return DenoiserSpec(cfg["kind"], params)


def cmd_denoise(args) -> int:
    from .denoise import denoise_stack

    cfg = load_config(args.spec, "denoise")
    st = load_stack(args.inp)
    inputs = [args.inp] + ([args.spec] if args.spec else [])
    if args.import_stack:
        # externally denoised data enters the pipeline unchanged
        ext = load_stack(args.import_stack)
        if ext.data.shape != st.data.shape:
            raise FieldError(f"imported stack shape {ext.data.shape} differs from input {st.data.shape}")
        result, payload = ext, {"denoiser": {"kind": "imported", "source": Path(args.import_stack).name}}
        inputs.append(args.import_stack)
    else:
        spec = _denoiser_spec(cfg)
        result, payload = denoise_stack(st, spec, args.seed), {"denoiser": spec.to_dict()}
    out = save_stack(result, _npy_path(args.out), cfg["precision"])
    _write_report(_report_beside(out), "denoise", payload, inputs=inputs, config=cfg, seed=args.seed,
                  command="denoise", outputs=[out])
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .imetrics import stack_metrics

    cfg = load_config(args.config, "metrics")
    ref, test = load_stack(args.ref), load_stack(args.test)
    m = stack_metrics(ref, test, cfg["data_range"] or None)
    _write_report(Path(args.out), "metrics", m, inputs=[args.ref, args.test], config=cfg, seed=args.seed,
                  command="metrics")
    return EXIT_OK


def cmd_recover(args) -> int:
    from .legendre import MaterialModel
    from .recover import ShootingProblem, bootstrap_recovery, levenberg_marquardt

    cfg = load_config(args.config, "recover")
    st = load_stack(args.data)
    ny, nx = st.shape
    length = cfg["domain_length"]
    if length <= 0:
        if st.pixel_size is None:
            raise ConfigError("config error at recover.domain_length: stack has no pixel size; set it explicitly")
        length = st.pixel_size * nx
    params = chsim.ChParams(kappa=cfg["kappa"], grid=(nx, ny), domain_length=length, dt=cfg["dt"],
                            n_frames=st.n_frames)
    model0 = MaterialModel.zeros(cfg["degree"], physical_prior=cfg["physical_prior"])
    indices = [int(i) for i in cfg["indices"]] or None
    problem = ShootingProblem.from_stack(st, params, model0, indices, cfg["n_snapshots"], reg_lambda=cfg["reg_lambda"])
    lm_kw = dict(max_iter=cfg["max_iter"], gtol=cfg["gtol"], xtol=cfg["xtol"], ftol=cfg["ftol"],
                 max_step=cfg["max_step"], rel_step=cfg["fd_rel_step"])
    res = levenberg_marquardt(problem, **lm_kw)
    if cfg["bootstrap"] > 0:
        res = bootstrap_recovery(problem, cfg["bootstrap"], args.seed, base=res, **lm_kw)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    curves = res.curves()
    keys = [k for k in ("c", "mu_h", "D", "mu_h_std", "D_std") if k in curves]
    csv_path = _write_csv(out.with_suffix(".csv"), keys, zip(*(curves[k] for k in keys)))
    payload = res.to_dict()
    payload["snapshot_times"] = problem.times.tolist()
    payload["pairs"] = [list(p) for p in problem.pairs]
    _write_report(out, "recovery", payload, inputs=[args.data] + ([args.config] if args.config else []),
                  config=cfg, seed=args.seed, command="recover", outputs=[csv_path])
    return EXIT_OK


def cmd_stxm(args) -> int:
    from . import stxm

    cfg = load_config(args.config, "stxm")
    mode = args.mode or cfg["mode"]
    n_boot = cfg["bootstrap"] if args.bootstrap is None else args.bootstrap
    st = load_stack(args.stack)
    energies = st.meta.get("energies", st.times.tolist())
    spec = stxm.SpectralStack(np.asarray(energies, dtype=np.float64), st.gray(), st.meta.get("kind", "intensity"))
    inputs = [args.stack]
    payload = {"od_convention": stxm.OD_CONVENTION, "mode": mode, "input_kind": spec.kind}
    if spec.kind == "intensity":
        if cfg["align"]:
            ref = cfg["reference_index"] % spec.energies.size
            spec, shifts = stxm.align_stack(spec, ref, cfg["upsample"])
            payload["shifts"] = [list(map(float, s)) for s in shifts]
        spec = stxm.optical_density(spec)
    if spec.kind == "optical_density":
        spec, ok = stxm.pre_edge_normalize(spec, cfg["pre_edge"], cfg["normalize"])
        payload["pre_edge_ok_fraction"] = float(ok.mean())
    refs = None
    if args.refs:
        refs = stxm.ReferenceSpectra.from_csv(args.refs)
        inputs.append(args.refs)
    if mode == "two-energy":
        i706, i713 = (spec.index_of(e) for e in stxm.TWO_ENERGIES)
        comp = stxm.composition_two_energy(spec.images[i706], spec.images[i713])
    elif mode == "nnls":
        if refs is None:
            raise stxm.StxmError("nnls mode needs --refs")
        comp = stxm.composition_nnls(spec, refs)
    else:
        raise stxm.StxmError(f"unknown mode {mode!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [save_stack(FrameStack(comp.X[None], value_range=(0.0, 1.0)), out / "composition.npy", "float64"),
               save_stack(FrameStack(comp.valid[None].astype(np.float64)), out / "valid.npy", "float64")]
    payload.update({"valid_fraction": float(comp.valid.mean()),
                    "mean_X": float(comp.X[comp.valid].mean()) if comp.valid.any() else None})
    if n_boot > 0:
        if refs is None:
            raise stxm.StxmError("bootstrap needs --refs")
        sigma, mean = stxm.bootstrap_sigma_x(spec, refs, n_boot, cfg["strategy"], args.seed, mask=comp.valid)
        written.append(save_stack(FrameStack(np.nan_to_num(sigma)[None]), out / "sigma_x.npy", "float64"))
        payload.update({"bootstrap": n_boot, "strategy": cfg["strategy"], "mean_sigma_x": mean})
    _write_report(out / "report.json", "stxm", payload, inputs=inputs + ([args.config] if args.config else []),
                  config=cfg, seed=args.seed, command="stxm", outputs=written)
    return EXIT_OK


def _region_masks(spec: dict | None, shape) -> dict:
    if not spec:
        return {"all": np.ones(shape, bool)}
    out = {}
    for name, (r0, r1, c0, c1) in sorted(spec.items()):
        m = np.zeros(shape, bool)
        m[r0:r1, c0:c1] = True
        out[name] = m
    return out


def cmd_neutron(args) -> int:
    from . import neutron as nt

    cfg = load_config(args.config, "neutron")
    split_d = json.loads(Path(args.split).read_text())
    geom = json.loads(Path(args.geom).read_text())
    st = load_stack(args.intensity)
    ob, dc = load_field(args.ob), load_field(args.dc)
    center = geom.get("center_px", [0.0, 0.0])
    center = (float(center), 0.0) if np.isscalar(center) else tuple(float(v) for v in center)
    rs = nt.RadiographSet(st, ob.data, dc.data, geom.get("px_per_cm", nt.PX_PER_CM), geom.get("radius_cm", 1.0),
                          center)
    crop = geom.get("crop")
    crop_sl = (slice(*crop[0]), slice(*crop[1])) if crop else None
    T = nt.normalize_transmission(rs, crop_sl)
    if split_d.get("even"):
        split = nt.HalfCycleSplit.even(T.n_frames, split_d.get("first", "charge"))
    else:
        split = nt.HalfCycleSplit(tuple(split_d["starts"]), T.n_frames, split_d.get("first", "charge"))
    x0 = crop[1][0] if crop else 0
    thick = nt.thickness_profile(rs, T.shape[1], x0)
    delta = nt.delta_attenuation(T, split, thick)
    regions = _region_masks(geom.get("regions"), delta.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [save_stack(delta, out / "delta_sigma.npy", "float64")]
    rows = []
    for k, ((a, b), label) in enumerate(zip(split.boundaries, split.labels)):
        for name, mask in regions.items():
            res = nt.active_fraction(delta.gray()[b - 1], mask, cfg["window_fraction"])
            win = res.window or (-1, -1)
            rows.append((k, label, name, b - 1, res.fraction, int(res.flagged), win[0], win[1]))
    written.append(_write_csv(out / "active_fraction.csv",
                              ["half_cycle", "label", "region", "frame", "fraction", "flagged", "window_lo", "window_hi"],
                              rows))
    prof_rows = []
    for k, (a, b) in enumerate(split.boundaries):
        mean, std = nt.depth_profile(delta.gray()[b - 1], cfg["depth_axis"])
        prof_rows += [(k, i, float(m), float(s)) for i, (m, s) in enumerate(zip(mean, std))]
    written.append(_write_csv(out / "depth_profile.csv", ["half_cycle", "position", "mean", "std"], prof_rows))
    payload = {"half_cycles": [{"start": a, "end": b, "label": lab} for (a, b), lab in zip(split.boundaries, split.labels)],
               "activity": [dict(zip(["half_cycle", "label", "region", "frame", "fraction", "flagged", "window_lo",
                                      "window_hi"], r)) for r in rows],
               "sign_convention": "ln(T/T_ref)/thickness", "local_variability": nt.local_variability(delta)}
    _write_report(out / "report.json", "neutron", payload,
                  inputs=[args.intensity, args.ob, args.dc, args.split, args.geom], config=cfg, seed=args.seed,
                  command="neutron", outputs=written)
    return EXIT_OK


def cmd_optical(args) -> int:
    from . import optical as op

    cfg = load_config(args.config, "optical")
    st = load_stack(args.video)
    lab = op.rgb_to_lab(st.data)
    T = lab.frames.shape[0]
    if cfg["clusters"] != 4:
        raise ConfigError("config error at optical.clusters: phase assignment needs exactly 4 clusters")
    # one fit over all pixels: background, blue, red and gold
    km = op.kmeans_lab(lab, 4, args.seed)
    ids = op.assign_phase_ids(km.centers)
    raw = np.zeros(km.labels.shape, dtype=np.int64)
    for cl, code in ids.items():
        raw[km.labels == cl] = code
    inputs = [args.video] + ([args.config] if args.config else [])
    if args.mask:
        labels2d = np.load(args.mask, allow_pickle=False)
        if labels2d.shape != lab.frames.shape[1:3] or not np.issubdtype(labels2d.dtype, np.integer):
            raise op.OpticalError("expert mask must be an integer label image of the frame shape")
        table = op.segment_particles(labels2d, 0, cfg["min_area"], cfg["pixel_size"])
        inputs.append(args.mask)
    else:
        fg = (raw != op.BACKGROUND).any(axis=0)
        table = op.segment_particles(fg.astype(int), 0, cfg["min_area"], cfg["pixel_size"])
    mask = table.label_image > 0
    if not mask.any():
        raise op.OpticalError("no particles found")
    phases = op.classify_phases(raw, mask, tuple(cfg["solid_solution"]))
    soc = op.soc_estimate(phases)
    conc = op.particle_concentration(table, phases)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [save_stack(FrameStack(phases.labels.astype(np.float64)), out / "phases.npy", "float32")]
    written.append(_write_csv(out / "soc.csv", ["frame", "soc"], [(t, float(s)) for t, s in enumerate(soc)]))
    rows = table.rows()
    hdr = list(rows[0]) if rows else ["id"]
    written.append(_write_csv(out / "particles.csv", hdr, [[r[k] for k in hdr] for r in rows]))
    payload = {"n_frames": T, "n_particles": len(table), "soc": soc.tolist(),
               "phase_centers_lab": km.centers.tolist(),
               "phase_of_cluster": {str(k): op.PHASE_NAMES[v] for k, v in ids.items()}}
    if len(table) >= 3:
        payload["size_fit"] = op.size_distribution(table).to_dict()
    frame = cfg["kde_frame"] % T
    cbar = conc[frame]
    try:
        g = op.kde_grid(cbar, table.char_size, n_grid=cfg["kde_grid"])
    except op.OpticalError as exc:
        log.warning("population density skipped: %s", exc)
        payload["kde"] = {"frame": frame, "skipped": str(exc)}
    else:
        CC, VV = np.meshgrid(g.c, g.size, indexing="ij")
        written.append(_write_csv(out / "kde.csv", ["c_mean", "char_size", "density"],
                                  zip(CC.ravel().tolist(), VV.ravel().tolist(), g.density.ravel().tolist())))
        payload["kde"] = {"frame": frame, "integral": g.integral(), "bandwidth": g.bandwidth.tolist()}
    _write_report(out / "report.json", "optical", payload, inputs=inputs, config=cfg, seed=args.seed,
                  command="optical", outputs=written)
    return EXIT_OK


def cmd_report(args) -> int:
    entries = []
    for p in args.inputs:
        d = json.loads(Path(p).read_text())
        validate_report(d)
        entries.append({"file": Path(p).name, "kind": d["kind"], "config_digest": d["provenance"]["config_digest"],
                        "seed": d["provenance"]["seed"]})
    _write_report(Path(args.out), "summary", {"reports": entries}, inputs=args.inputs, config={}, seed=args.seed,
                  command="report")
    return EXIT_OK


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on worker threads (default: $OPMICRO_THREADS or 1)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="opmicro", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate Cahn-Hilliard trajectories")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("corrupt", parents=[common], help="add synthetic noise to a stack")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("denoise", parents=[common], help="denoise a stack")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--spec")
    s.add_argument("--import", dest="import_stack", help="use an externally denoised stack instead")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("metrics", parents=[common], help="PSNR/SSIM/MSE between two stacks")
    s.add_argument("--ref", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("recover", parents=[common], help="recover mu_h(c) and D(c) from a trajectory")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="result JSON path (a CSV of curves is written beside it)")
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("stxm", parents=[common], help="STXM composition maps")
    s.add_argument("--stack", required=True)
    s.add_argument("--refs")
    s.add_argument("--mode", choices=["two-energy", "nnls"])
    s.add_argument("--bootstrap", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stxm)

    s = sub.add_parser("neutron", parents=[common], help="neutron radiography attenuation analysis")
    s.add_argument("--intensity", required=True)
    s.add_argument("--ob", required=True)
    s.add_argument("--dc", required=True)
    s.add_argument("--split", required=True, help="JSON with 'starts' (or 'even': true) and 'first'")
    s.add_argument("--geom", required=True, help="JSON with px_per_cm, radius_cm, center_px, crop, regions")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_neutron)

    s = sub.add_parser("optical", parents=[common], help="optical phase maps, SOC and particle statistics")
    s.add_argument("--video", required=True)
    s.add_argument("--mask", help="integer particle label image (NPY) replacing automatic segmentation")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_optical)

    s = sub.add_parser("report", parents=[common], help="validate reports and write a summary")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _threads(arg) -> int:
    if arg is not None:
        n = arg
    else:
        try:
            n = int(os.environ.get("OPMICRO_THREADS", "1"))
        except ValueError:
            raise ConfigError("OPMICRO_THREADS must be an integer") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    import jsonschema

    from .denoise import SingularSystemError
    from .recover import RecoveryError

    try:
        chsim.FFT_WORKERS = _threads(args.threads)
        with np.errstate(over="ignore"):
            return args.func(args)
    except (chsim.SimulationError, SingularSystemError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, RecoveryError, jsonschema.ValidationError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
