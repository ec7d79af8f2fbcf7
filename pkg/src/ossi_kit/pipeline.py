"""Pipeline stages behind the command-line front end.

Each stage reads materialized config plus artifact directories, writes
OST/CSV/JSON/PNG files into its own directory and records every file it
read in a :class:`StageIO`, which the CLI turns into a manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .bloch import (GradientMode, Isochromat, SampleTime, SequenceParams, ernst_angle,
                    duality_deviation, frequency_response, simulate_isochromat,
                    spoiled_gre_signal)
from .dictionary import ParamGrid, build_dictionary, grid_values, match_voxels
from .encoding import CoilMaps, EncodingOp
from .errors import DimensionMismatchError, InvalidParameterError
from .ost import read_ost, write_ost
from .phantom import make_coil_maps, make_phantom, reference_phantom_spec, synthesize_kspace
from .png import overlay, write_png
from .recon import (AdmmParams, ManifoldParams, PatchConfig, admm_tensor_lr, cg_sense,
                    data_shared_init, lowrank_pgm, ossimm, patch_lr_plus_sparse, zero_filled)
from .sampling import RotationSchedule, SpiralSpec, cartesian_vd_mask, spiral_schedule

__all__ = ["StageIO", "sha256_file", "sequence_from_config", "grid_from_config", "run_simulate",
           "run_dict_build", "run_dict_match", "run_phantom", "run_sample", "run_recon",
           "run_analyze"]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class StageIO:
    """Output directory of a stage plus the input files it consumed."""

    out_dir: str
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def read(self, path):
        """Record and return ``path``; missing files raise FileNotFoundError."""
        path = os.path.abspath(path)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"missing input {path}")
        self.inputs[path] = sha256_file(path)
        return path

    def read_ost(self, path) -> np.ndarray:
        return read_ost(self.read(path))

    def read_json(self, path) -> dict:
        with open(self.read(path), encoding="utf-8") as fh:
            return json.load(fh)

    def write_ost(self, name, arr):
        write_ost(self.path(name), arr)

    def write_json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# config helpers
# ---------------------------------------------------------------------------

def sequence_from_config(cfg: dict) -> SequenceParams:
    s = cfg["sequence"]
    return SequenceParams(s["tr_ms"], s["te_ms"], s["n_c"], s["flip_deg"], s["psi_b_deg"],
                          GradientMode(s["gradient_mode"]))


def _sample_time(cfg: dict) -> SampleTime:
    return SampleTime(cfg["sequence"]["sample_time"])


def _values(r: dict) -> np.ndarray:
    return grid_values(r["start"], r["stop"], r["step"])


def grid_from_config(dcfg: dict) -> ParamGrid:
    return ParamGrid(dcfg["t1_fixed_ms"], _values(dcfg["t2_ms"]), _values(dcfg["r2s_hz"]),
                     _values(dcfg["f0_hz"]))


def _dictionary(cfg: dict, io: StageIO, dict_dir: str | None):
    """Dictionary rebuilt from a stored description, or from the config."""
    if dict_dir is not None:
        meta = io.read_json(os.path.join(dict_dir, "dictionary.json"))
        g = meta["grid"]
        grid = ParamGrid(g["t1_fixed_ms"], np.array(g["t2_values_ms"]),
                         np.array(g["r2s_values_hz"]), np.array(g["f0_values_hz"]))
        s = meta["sequence"]
        seq = SequenceParams(s["tr_ms"], s["te_ms"], s["n_c"], s["flip_deg"], s["psi_b_deg"],
                             GradientMode(s["gradient_mode"]))
        return build_dictionary(grid, seq, sample_time=SampleTime(s["sample_time"]))
    return build_dictionary(grid_from_config(cfg["dictionary"]), sequence_from_config(cfg),
                            sample_time=_sample_time(cfg))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def run_simulate(cfg: dict, io: StageIO) -> dict:
    """Signal cycle, GRE reference, frequency response and duality check."""
    seq = sequence_from_config(cfg)
    st = _sample_time(cfg)
    sim = cfg["simulate"]
    iso = Isochromat(sim["t1_ms"], sim["t2_ms"], sim["f0_hz"], sim["m0"])
    cycle = simulate_isochromat(seq, iso, sample_time=st).samples
    ernst = ernst_angle(seq.tr_ms, iso.t1_ms)
    gre = abs(spoiled_gre_signal(seq.replace(gradient_mode=GradientMode.SPOILED, flip_deg=ernst),
                                 iso))
    io.write_ost("cycle.ost", cycle)
    io.write_csv("cycle.csv", ["n", "real", "imag", "magnitude", "phase_deg", "gre_ernst"],
                 [[n, _fmt(c.real), _fmt(c.imag), _fmt(abs(c)), _fmt(np.degrees(np.angle(c))),
                   _fmt(gre)] for n, c in enumerate(cycle)])
    f0 = _values(sim["f0_grid_hz"])
    resp = frequency_response(seq, f0, iso, sample_time=st)
    io.write_csv("freq_response.csv", ["f0_hz", "n", "real", "imag", "magnitude"],
                 [[_fmt(f), n, _fmt(c.real), _fmt(c.imag), _fmt(abs(c))]
                  for f, row in zip(f0, resp) for n, c in enumerate(row)])
    dev = duality_deviation(seq, iso, sim["duality_f0_hz"])
    report = {"f0_hz": sim["duality_f0_hz"], "max_relative_deviation": dev,
              "tolerance": 1e-5, "passed": bool(dev < 1e-5),
              "mean_magnitude": float(np.mean(np.abs(cycle))), "gre_ernst_magnitude": gre,
              "ernst_angle_deg": ernst}
    io.write_json("duality.json", report)
    return report


# ---------------------------------------------------------------------------
# dictionary
# ---------------------------------------------------------------------------

def run_dict_build(cfg: dict, io: StageIO) -> dict:
    seq = sequence_from_config(cfg)
    d = build_dictionary(grid_from_config(cfg["dictionary"]), seq, sample_time=_sample_time(cfg))
    io.write_ost("dictionary.ost", d.atoms)
    io.write_csv("params.csv", ["k", "t2_ms", "t2p_ms", "r2s_hz", "f0_hz", "norm"],
                 [[k, _fmt(d.t2[k]), _fmt(d.t2p[k]), _fmt(d.r2s[k]), _fmt(d.f0[k]),
                   _fmt(d.atom_norms[k])] for k in range(d.n_atoms)])
    meta = {"grid": d.grid.to_dict(), "n_atoms": d.n_atoms,
            "sequence": dict(cfg["sequence"]), "axis_order": "(n_c, atom)"}
    io.write_json("dictionary.json", meta)
    return {"n_atoms": d.n_atoms}


def _match_mask(images, mask=None):
    mag = analysis.combine_l2(images)
    keep = mag > 0.1 * mag.max(axis=(0, 1), keepdims=True)
    if mask is not None:
        keep &= np.asarray(mask, bool)[..., None]
    return keep


def _write_maps(io: StageIO, maps: dict):
    for key in ("m0", "f0", "r2s", "t2p", "t2", "residual"):
        io.write_ost(f"{key}.ost", maps[key])


def run_dict_match(cfg: dict, io: StageIO, recon_dir: str, dict_dir: str | None) -> dict:
    """Per-voxel, per-frame matching of a reconstructed series."""
    images = io.read_ost(os.path.join(recon_dir, "images.ost")).astype(complex)
    d = _dictionary(cfg, io, dict_dir)
    if images.ndim != 4 or images.shape[2] != d.atoms.shape[0]:
        raise DimensionMismatchError(
            f"images {images.shape} do not fit dictionary n_c={d.atoms.shape[0]}")
    keep = _match_mask(images)
    V = np.moveaxis(images, 2, -1)[keep]
    idx, m0, res, _ = match_voxels(V, d)
    shape = keep.shape
    maps = {k: np.zeros(shape, complex if k == "m0" else float)
            for k in ("m0", "f0", "r2s", "t2p", "t2", "residual")}
    maps["m0"][keep] = m0
    maps["residual"][keep] = res
    for k, src in (("f0", d.f0), ("r2s", d.r2s), ("t2p", d.t2p), ("t2", d.t2)):
        maps[k][keep] = src[idx]
    _write_maps(io, maps)
    io.write_ost("match_mask.ost", keep)
    return {"matched_voxels": int(keep.sum())}


# ---------------------------------------------------------------------------
# phantom and sampling
# ---------------------------------------------------------------------------

def run_phantom(cfg: dict, io: StageIO) -> dict:
    p = cfg["phantom"]
    seed = cfg["seeds"]["phantom"]
    spec = reference_phantom_spec(p["t_s"], seed, p["n_coils"], p["nx"], p["ny"],
                                  p["frame_period_s"], p["target_tsnr_db"])
    spec.seq = sequence_from_config(cfg)
    spec.sample_time = _sample_time(cfg)
    gt = make_phantom(spec)
    coils = make_coil_maps(p["nx"], p["ny"], p["n_coils"], seed=seed, mask=gt.mask)
    io.write_ost("truth.ost", gt.images)
    io.write_ost("mask.ost", gt.mask)
    io.write_ost("roi.ost", gt.roi)
    io.write_ost("coils.ost", coils.maps)
    io.write_ost("m0.ost", gt.m0)
    io.write_ost("r2s.ost", gt.r2s_t)
    io.write_ost("f0.ost", gt.f0_t)
    io.write_csv("reference.csv", ["frame", "task", "reference"],
                 [[k, _fmt(a), _fmt(b)] for k, (a, b) in enumerate(zip(gt.task, gt.reference))])
    meta = {"shape": list(gt.images.shape), "axis_order": "(x, y, fast, slow)",
            "regions": [r.to_dict() for r in spec.regions],
            "activation_roi": spec.activation_roi.to_dict(),
            "target_tsnr_db": p["target_tsnr_db"], "frame_period_s": p["frame_period_s"]}
    io.write_json("phantom.json", meta)
    return {"shape": list(gt.images.shape), "voxels": int(gt.mask.sum())}


@dataclass
class _Truth:
    """The parts of a ground truth that noise synthesis needs."""

    images: np.ndarray
    mask: np.ndarray
    reference: np.ndarray


def _read_reference(io: StageIO, phantom_dir: str) -> np.ndarray:
    with open(io.read(os.path.join(phantom_dir, "reference.csv")), encoding="utf-8") as fh:
        return np.array([float(r["reference"]) for r in csv.DictReader(fh)])


def _coils(io: StageIO, d: str) -> CoilMaps:
    maps = io.read_ost(os.path.join(d, "coils.ost")).astype(complex)
    return CoilMaps(maps, np.ones(maps.shape[1:], bool))


def run_sample(cfg: dict, io: StageIO, phantom_dir: str) -> dict:
    truth = io.read_ost(os.path.join(phantom_dir, "truth.ost")).astype(complex)
    mask = io.read_ost(os.path.join(phantom_dir, "mask.ost"))
    ref = _read_reference(io, phantom_dir)
    coils = _coils(io, phantom_dir)
    nx, ny, n_c, t_s = truth.shape
    if n_c != cfg["sequence"]["n_c"]:
        raise DimensionMismatchError(
            f"phantom has n_c={n_c} but the config sequence has n_c={cfg['sequence']['n_c']}")
    s = cfg["sampling"]
    enc = cfg["encoding"]
    meta = {"kind": s["kind"], "n_c": n_c, "t_s": t_s, "nx": nx, "ny": ny}
    if s["kind"] == "spiral":
        sp = dict(s["spiral"])
        sp["matrix_n"] = sp["matrix_n"] or nx
        spec = SpiralSpec(**sp)
        sched = spiral_schedule(spec, RotationSchedule(s["rotation"], n_c, spec.n_i), t_s)
        op = EncodingOp(coils, n_c, t_s, traj=sched.traj, width=enc["width"],
                        oversampling=enc["oversampling"])
        io.write_ost("traj.ost", sched.traj)
        acc = sched.acceleration
    else:
        if s["kind"] == "full":
            m = np.ones((ny, n_c, t_s), bool)
            acc = 1.0
        else:
            sched = cartesian_vd_mask(ny, s["accel"], s["center_lines"], cfg["seeds"]["sampling"],
                                      n_c, t_s, s["power"], s["memory"])
            m, acc = sched.mask, sched.acceleration
        op = EncodingOp(coils, n_c, t_s, mask=m[None])
        io.write_ost("mask.ost", m)
    target = cfg["phantom"]["target_tsnr_db"]
    y, sigma = synthesize_kspace(_Truth(truth, mask, ref), op, target_tsnr_db=target,
                                 seed=cfg["seeds"]["noise"])
    io.write_ost("kspace.ost", y)
    io.write_ost("coils.ost", coils.maps)
    meta.update(sigma=sigma, acceleration=float(acc), width=enc["width"],
                oversampling=enc["oversampling"],
                kspace_axis_order="(coil, x, y, fast, slow)" if op.mode == "cartesian"
                else "(coil, sample, fast, slow)")
    io.write_json("sampling.json", meta)
    return {"sigma": sigma, "acceleration": float(acc)}


def load_operator(io: StageIO, sample_dir: str):
    """``(y, op, meta)`` from a sample directory."""
    meta = io.read_json(os.path.join(sample_dir, "sampling.json"))
    coils = _coils(io, sample_dir)
    y = io.read_ost(os.path.join(sample_dir, "kspace.ost")).astype(complex)
    n_c, t_s = meta["n_c"], meta["t_s"]
    if meta["kind"] == "spiral":
        traj = io.read_ost(os.path.join(sample_dir, "traj.ost")).astype(complex)
        op = EncodingOp(coils, n_c, t_s, traj=traj, width=meta["width"],
                        oversampling=meta["oversampling"])
    else:
        m = io.read_ost(os.path.join(sample_dir, "mask.ost"))
        op = EncodingOp(coils, n_c, t_s, mask=m[None])
    if y.shape != op.data_shape:
        raise DimensionMismatchError(
            f"k-space {y.shape} does not match the operator data shape {op.data_shape}")
    return y, op, meta


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def _patch_admm(cfg: dict):
    sol = cfg["solver"]
    p = sol["patch"]
    patch = PatchConfig(tuple(p["patch_dims"]), p["t_s_block"], p["overlap_discard"],
                        p["cycle_spin"], cfg["seeds"]["solver"])
    a = sol["admm"]
    admm = AdmmParams(tuple(a["lambdas"]), a["lambda_scale"], a["rho"], a["r"], a["outer_S"],
                      a["inner_T"], a["cg_iters"])
    return patch, admm


def _cg_reg(c: dict):
    if c["reg"] == "none":
        return None
    if c["reg"] == "quadratic":
        return ("quadratic", c["alpha"])
    return ("huber", c["alpha"], c["delta"])


def reconstruct(cfg: dict, y, op: EncodingOp, method: str, dictionary=None):
    """Dispatch one reconstruction method with config parameters."""
    sol = cfg["solver"]
    win = sol["init_window"]
    if method == "cgsense":
        c = sol["cgsense"]
        return cg_sense(y, op, _cg_reg(c), c["iters"])
    if method in ("tensor-lr", "mllr", "gtlr"):
        patch, admm = _patch_admm(cfg)
        variant = {"tensor-lr": "patch"}.get(method, method)
        return admm_tensor_lr(y, op, patch, admm, variant, init_window=win)
    if method == "lps":
        patch, admm = _patch_admm(cfg)
        return patch_lr_plus_sparse(y, op, patch, admm, sol["lps"]["mu"], init_window=win)
    if method == "lowrank":
        c = sol["lowrank"]
        return lowrank_pgm(y, op, c["alpha"], c["iters"], target_rank=c["target_rank"])
    if method == "ossimm":
        m = sol["manifold"]
        if m["init"] == "tensor-lr":
            patch, admm = _patch_admm(cfg)
            x0 = admm_tensor_lr(y, op, patch, admm, init_window=win).images
        else:
            x0 = data_shared_init(y, op, win)
        mp = ManifoldParams(m["beta"], m["outer_iters"], m["cg_iters"], m["kappa"])
        return ossimm(y, op, dictionary, mp, x0=x0, init_window=win)
    raise InvalidParameterError(f"unknown method {method!r}")


def run_recon(cfg: dict, io: StageIO, sample_dir: str, method: str,
              dict_dir: str | None = None) -> dict:
    y, op, meta = load_operator(io, sample_dir)
    d = _dictionary(cfg, io, dict_dir) if method == "ossimm" else None
    if d is not None and d.atoms.shape[0] != op.n_c:
        raise DimensionMismatchError(
            f"dictionary n_c={d.atoms.shape[0]} does not match data n_c={op.n_c}")
    res = reconstruct(cfg, y, op, method, d)
    io.write_ost("images.ost", res.images)
    io.write_ost("zero_filled.ost", zero_filled(y, op))
    for name, comp in res.components.items():
        io.write_ost(f"component_{name}.ost", comp)
    if res.param_maps is not None:
        _write_maps(io, res.param_maps)
    io.write_json("diagnostics.json", {"method": method, "objective_trace": res.objective_trace,
                                       "diagnostics": res.diagnostics})
    return {"method": method, "shape": list(res.images.shape)}


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------

def run_analyze(cfg: dict, io: StageIO, phantom_dir: str, recon_dir: str) -> dict:
    """Image-quality, activation and quantification metrics plus heatmaps."""
    a = cfg["analysis"]
    truth = io.read_ost(os.path.join(phantom_dir, "truth.ost")).astype(complex)
    mask = io.read_ost(os.path.join(phantom_dir, "mask.ost"))
    roi = io.read_ost(os.path.join(phantom_dir, "roi.ost"))
    ref = _read_reference(io, phantom_dir)
    images = io.read_ost(os.path.join(recon_dir, "images.ost")).astype(complex)
    if images.shape != truth.shape:
        raise DimensionMismatchError(
            f"reconstruction shape {images.shape} does not match truth shape {truth.shape}")
    comb = analysis.combine_l2(images)
    metrics = {
        "nrmsd_before": analysis.nrmsd(images, truth, mask),
        "nrmsd_after": analysis.nrmsd(comb, analysis.combine_l2(truth), mask),
    }
    zf_path = os.path.join(recon_dir, "zero_filled.ost")
    if os.path.isfile(zf_path):
        zf = io.read_ost(zf_path).astype(complex)
        metrics["nrmsd_after_zero_filled"] = analysis.nrmsd(
            analysis.combine_l2(zf), analysis.combine_l2(truth), mask)
    det = analysis.detrend(comb, a["n_detrend"]) if a["n_detrend"] else comb
    tsnr = analysis.tsnr_map(det, ref)
    metrics["tsnr_db"] = float(20 * np.log10(np.mean(tsnr[mask])))
    act = analysis.correlation_activation(det, ref, a["threshold"], a["discard_frames"],
                                          a["cluster_min"], region=roi, mask=mask)
    corr = act.correlation_map
    metrics["auc"] = analysis.roc_auc(corr, roi, mask=mask).auc
    metrics["active_in_roi"] = act.count_in_region
    metrics["active_total"] = int(act.activation_mask.sum())
    r2s_path = os.path.join(recon_dir, "r2s.ost")
    maps = {}
    if os.path.isfile(r2s_path):
        maps["r2s"] = io.read_ost(r2s_path).astype(float)
        maps["f0"] = io.read_ost(os.path.join(recon_dir, "f0.ost")).astype(float)
        r2s_t = io.read_ost(os.path.join(phantom_dir, "r2s.ost")).astype(float)
        f0_t = io.read_ost(os.path.join(phantom_dir, "f0.ost")).astype(float)
        if maps["r2s"].shape != r2s_t.shape:
            raise DimensionMismatchError(
                f"R2* map shape {maps['r2s'].shape} does not match truth shape {r2s_t.shape}")
        m3 = np.broadcast_to(mask[..., None], r2s_t.shape)
        metrics["r2s_rmse_hz"] = analysis.rmse(maps["r2s"], r2s_t, m3)
        metrics["f0_rmse_hz"] = analysis.rmse(maps["f0"], f0_t, m3)
    io.write_csv("metrics.csv", ["metric", "value"],
                 [[k, _fmt(v) if isinstance(v, float) else v] for k, v in metrics.items()])
    mean_mag = comb.mean(axis=-1)
    write_png(io.path("magnitude.png"), mean_mag)
    write_png(io.path("activation.png"), overlay(mean_mag, act.activation_mask))
    write_png(io.path("tsnr.png"), np.where(mask, tsnr, 0.0), colormap="viridis")
    write_png(io.path("correlation.png"), np.where(mask, corr, 0.0), colormap="viridis",
              vmin=-1.0, vmax=1.0)
    for k, v in maps.items():
        write_png(io.path(f"{k}.png"), np.where(mask, v.mean(axis=-1), 0.0), colormap="viridis")
    return metrics
