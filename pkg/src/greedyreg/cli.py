"""Command line driver.

Each stage reads its inputs from and writes its outputs to files, and ``run``
simply chains the stage functions, so a stage invoked on its own produces the
same bytes as the corresponding part of ``run``.

Exit codes: 0 success, 1 usage error, 2 I/O or file-format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as rio
from .affine import register_affine
from .core import (DisplacementField, LandmarkSet, RegistrationError, RegistrationParams,
                   ScalarImage, default_params)
from .diffeo import greedy_register
from .evaluation import aggregate, score_pair
from .preprocess import PreprocessedPair, Provenance, prepare_pair
from .stains import load_stain_matrix
from .warp import TotalTransform, map_landmarks, warp_image, warp_image_affine

log = logging.getLogger("greedyreg")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3

FIXED_PGM = "fixed.pgm"
MOVING_PGM = "moving.pgm"
MASK_PGM = "mask.pgm"
PREP_TXT = "prep.txt"
AFFINE_TXT = "affine.txt"
FIELD_FILE = "field.df2d"
WARPED_PGM = "warped.pgm"
WARPED_CSV = "landmarks_warped.csv"
SCORES_CSV = "scores.csv"
MANIFEST_TXT = "manifest.txt"
SCORE_HEADER = ["pair_id", "median_rtre", "robustness"]
SWEEP_HEADER = ["sigma_s", "sigma_t", "avg_median_rtre", "avg_robustness", "status"]
FAILED_CELL = math.inf


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


# --- provenance sidecar -----------------------------------------------------------

def write_prep(path, pair: PreprocessedPair) -> None:
    p = pair.provenance
    h, w = pair.shape
    rio.write_kv(path, {
        "k": pair.k,
        "resample_factor": p.resample_factor,
        "fixed_offset_x": p.fixed_offset[0], "fixed_offset_y": p.fixed_offset[1],
        "moving_offset_x": p.moving_offset[0], "moving_offset_y": p.moving_offset[1],
        "fixed_width": p.fixed_size[0], "fixed_height": p.fixed_size[1],
        "moving_width": p.moving_size[0], "moving_height": p.moving_size[1],
        "working_width": w, "working_height": h,
    })


def read_prep(path) -> tuple[int, Provenance]:
    kv = rio.read_kv(path)
    try:
        g = {key: int(value) for key, value in kv.items()}
        prov = Provenance(g["resample_factor"],
                          (g["fixed_offset_x"], g["fixed_offset_y"]),
                          (g["moving_offset_x"], g["moving_offset_y"]),
                          (g["fixed_width"], g["fixed_height"]),
                          (g["moving_width"], g["moving_height"]))
        return g["k"], prov
    except (KeyError, ValueError) as exc:
        raise rio.FormatError(f"{path}: bad provenance record ({exc})") from None


def _read_scalar(path) -> ScalarImage:
    img = rio.read_image(path)
    if not isinstance(img, ScalarImage):
        raise rio.FormatError(f"{path}: expected a grayscale image")
    return img


def load_pair(prep_dir) -> PreprocessedPair:
    prep_dir = Path(prep_dir)
    k, prov = read_prep(prep_dir / PREP_TXT)
    fixed = _read_scalar(prep_dir / FIXED_PGM)
    moving = _read_scalar(prep_dir / MOVING_PGM)
    mask = _read_scalar(prep_dir / MASK_PGM).data > 0.5
    if not (fixed.shape == moving.shape == mask.shape):
        raise rio.FormatError(f"{prep_dir}: preprocessed rasters differ in size")
    return PreprocessedPair(fixed, moving, mask, k, prov)


# --- stages -------------------------------------------------------------------------

def stage_preprocess(fixed_path, moving_path, out_dir, params: RegistrationParams,
                     deconv=(False, False), stain_matrix_path=None) -> PreprocessedPair:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stains = load_stain_matrix(stain_matrix_path) if any(deconv) else None
    pair = prepare_pair(rio.read_image(fixed_path), rio.read_image(moving_path), params,
                        deconv, stains)
    rio.write_image(out_dir / FIXED_PGM, pair.fixed)
    rio.write_image(out_dir / MOVING_PGM, pair.moving)
    rio.write_image(out_dir / MASK_PGM, ScalarImage(pair.mask.astype(np.float64)))
    write_prep(out_dir / PREP_TXT, pair)
    return pair


def stage_affine(prep_dir, params: RegistrationParams, out=None):
    pair = load_pair(prep_dir)
    result = register_affine(pair, params)
    rio.write_affine(out or Path(prep_dir) / AFFINE_TXT, result.transform)
    log.info("affine: init %.6f -> final %.6f (%d evaluations)",
             result.init_value, result.final_value, result.n_evals)
    return result


def stage_diffeo(prep_dir, params: RegistrationParams, affine_path=None, out=None):
    prep_dir = Path(prep_dir)
    pair = load_pair(prep_dir)
    A = rio.read_affine(affine_path or prep_dir / AFFINE_TXT)
    resampled = warp_image_affine(pair.moving, A)
    result = greedy_register(pair.fixed, resampled, params, k=pair.k)
    if not result.min_jacobian > 0:
        log.warning("field is not diffeomorphic: min Jacobian determinant %.4g", result.min_jacobian)
    rio.write_field(out or prep_dir / FIELD_FILE, result.field)
    return result


def apply_image(image: ScalarImage, A, fld: DisplacementField) -> ScalarImage:
    """Affine resampling followed by the field warp, as the pipeline does."""
    return warp_image(warp_image_affine(image, A, shape=fld.shape), fld)


def apply_landmarks(points: LandmarkSet, A, fld: DisplacementField,
                    prov: Provenance | None = None) -> LandmarkSet:
    """Map fixed-image landmarks to moving-image positions.

    With a provenance record the points are in input-image pixels; without one
    they are in working-frame pixels.
    """
    if len(points) == 0:
        return points
    pts = points.points if prov is None else prov.to_working(points.points, "fixed")
    mapped = map_landmarks(LandmarkSet(pts), TotalTransform(A, fld)).points
    if prov is not None:
        mapped = prov.from_working(mapped, "moving")
    return LandmarkSet(mapped)


def stage_evaluate(target_path, warped_path, initial_path, size, out, pair_id="pair"):
    score = score_pair(rio.read_landmarks(target_path), rio.read_landmarks(initial_path),
                       rio.read_landmarks(warped_path), *size)
    with rio.atomic_write(out, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        writer.writerow([pair_id, _fmt(score.median_rtre), _fmt(score.robustness)])
    return score


@dataclass
class RunManifest:
    pair_id: str
    fixed: str
    moving: str
    fixed_landmarks: str | None
    moving_landmarks: str | None
    out_dir: str
    params: RegistrationParams
    outputs: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)

    def record(self) -> dict:
        rec = {"pair_id": self.pair_id, "fixed": self.fixed, "moving": self.moving,
               "fixed_landmarks": self.fixed_landmarks or "",
               "moving_landmarks": self.moving_landmarks or "", "out_dir": self.out_dir}
        for key, value in asdict(self.params).items():
            if isinstance(value, tuple):
                value = "x".join(str(v) for v in value)
            rec[f"param.{key}"] = value
        rec.update({f"output.{k}": v for k, v in self.outputs.items()})
        rec.update({f"time.{k}": f"{v:.3f}" for k, v in self.wall_times.items()})
        return rec


def stage_run(fixed_path, moving_path, out_dir, params: RegistrationParams,
              fixed_landmarks=None, moving_landmarks=None, deconv=(False, False),
              stain_matrix_path=None, pair_id="pair"):
    out_dir = Path(out_dir)
    for p in (fixed_path, moving_path, fixed_landmarks, moving_landmarks):
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"input not found: {p}")
    manifest = RunManifest(pair_id, str(fixed_path), str(moving_path),
                           fixed_landmarks and str(fixed_landmarks),
                           moving_landmarks and str(moving_landmarks), str(out_dir), params)
    clock = time.perf_counter

    t = clock()
    stage_preprocess(fixed_path, moving_path, out_dir, params, deconv, stain_matrix_path)
    manifest.wall_times["preprocess"] = clock() - t
    manifest.outputs.update(prep=str(out_dir / PREP_TXT), fixed=str(out_dir / FIXED_PGM),
                            moving=str(out_dir / MOVING_PGM), mask=str(out_dir / MASK_PGM))

    t = clock()
    stage_affine(out_dir, params)
    manifest.wall_times["affine"] = clock() - t
    manifest.outputs["affine"] = str(out_dir / AFFINE_TXT)

    t = clock()
    stage_diffeo(out_dir, params)
    manifest.wall_times["diffeo"] = clock() - t
    manifest.outputs["field"] = str(out_dir / FIELD_FILE)

    t = clock()
    A = rio.read_affine(out_dir / AFFINE_TXT)
    fld = rio.read_field(out_dir / FIELD_FILE)
    pair = load_pair(out_dir)
    rio.write_image(out_dir / WARPED_PGM, apply_image(pair.moving, A, fld))
    manifest.outputs["warped"] = str(out_dir / WARPED_PGM)
    summary = None
    if fixed_landmarks is not None:
        _, prov = read_prep(out_dir / PREP_TXT)
        rio.write_landmarks(out_dir / WARPED_CSV,
                            apply_landmarks(rio.read_landmarks(fixed_landmarks), A, fld, prov))
        manifest.outputs["landmarks_warped"] = str(out_dir / WARPED_CSV)
        if moving_landmarks is not None:
            score = stage_evaluate(moving_landmarks, out_dir / WARPED_CSV, fixed_landmarks,
                                   prov.moving_size, out_dir / SCORES_CSV, pair_id)
            manifest.outputs["scores"] = str(out_dir / SCORES_CSV)
            summary = aggregate([score])
    manifest.wall_times["apply_evaluate"] = clock() - t

    rio.write_kv(out_dir / MANIFEST_TXT, manifest.record())
    return manifest, summary


# --- argument handling ---------------------------------------------------------------

def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers separated by 'x', got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _roles(text: str) -> tuple[bool, bool]:
    roles = {r.strip() for r in text.split(",") if r.strip()}
    unknown = roles - {"fixed", "moving"}
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown image role(s): {sorted(unknown)}")
    return "fixed" in roles, "moving" in roles


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    return w, h


def _add_params(p: argparse.ArgumentParser) -> None:
    d = default_params()
    g = p.add_argument_group("registration parameters")
    g.add_argument("--sigma-s", type=float, default=d.sigma_s, help="update field smoothing (px)")
    g.add_argument("--sigma-t", type=float, default=d.sigma_t, help="total field smoothing (px)")
    g.add_argument("--iters", type=_int_list, default=d.iters_per_level,
                   help="iterations per level, coarse to fine (default 100x50x10)")
    g.add_argument("--levels", type=_int_list, default=d.pyramid_factors,
                   help="pyramid factors, coarse to fine (default 4x2x1)")
    g.add_argument("--ncc-scale", type=float, default=d.ncc_scale,
                   help="NCC kernel size is min(width, height) / this")
    g.add_argument("--factor", type=int, default=d.resample_factor,
                   help="input downsampling factor")
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--candidates", type=int, default=d.n_candidates,
                   help="brute-force rigid candidates")
    g.add_argument("--epsilon-max", type=float, default=d.epsilon_max,
                   help="largest per-iteration update (px)")


def _add_prep_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--deconv-dab", type=_roles, default=(False, False), metavar="ROLES",
                   help="remove the DAB stain from 'fixed', 'moving' or 'fixed,moving'")
    p.add_argument("--stain-matrix", type=Path, help="9-number stain matrix file")


def params_from_args(args) -> RegistrationParams:
    try:
        return RegistrationParams(sigma_s=args.sigma_s, sigma_t=args.sigma_t,
                                  iters_per_level=args.iters, ncc_scale=args.ncc_scale,
                                  epsilon_max=args.epsilon_max, seed=args.seed,
                                  n_candidates=args.candidates, pyramid_factors=args.levels,
                                  resample_factor=args.factor)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _image_size(args) -> tuple[int, int]:
    if args.size is not None:
        return args.size
    if args.image is not None:
        img = rio.read_image(args.image)
        return img.width, img.height
    raise UsageError("evaluate needs --size WxH or --image")


def cmd_preprocess(args) -> int:
    stage_preprocess(args.fixed, args.moving, args.out_dir, params_from_args(args),
                     args.deconv_dab, args.stain_matrix)
    return 0


def cmd_affine(args) -> int:
    result = stage_affine(args.prep_dir, params_from_args(args), args.out)
    print(f"init_value={_fmt(result.init_value)} final_value={_fmt(result.final_value)}")
    return 0


def cmd_diffeo(args) -> int:
    result = stage_diffeo(args.prep_dir, params_from_args(args), args.affine, args.out)
    print("per_level_values=" + ",".join(_fmt(v) for v in result.per_level_values)
          + f" min_jacobian={_fmt(result.min_jacobian)}")
    return 0 if result.min_jacobian > 0 else EXIT_NUMERIC


def cmd_apply(args) -> int:
    A = rio.read_affine(args.affine)
    if args.field is not None:
        fld = rio.read_field(args.field)
    else:
        fld = None
    if args.image is not None:
        img = rio.read_image(args.image)
        if not isinstance(img, ScalarImage):
            raise UsageError("apply --image expects a grayscale working-frame image")
        if fld is None:
            fld = DisplacementField.zeros(img.width, img.height)
        rio.write_image(args.out, apply_image(img, A, fld))
    else:
        prov = read_prep(args.prep)[1] if args.prep is not None else None
        if fld is None:
            raise UsageError("apply --landmarks needs --field")
        rio.write_landmarks(args.out, apply_landmarks(rio.read_landmarks(args.landmarks), A, fld, prov))
    return 0


def cmd_evaluate(args) -> int:
    score = stage_evaluate(args.target, args.warped, args.initial, _image_size(args),
                           args.out, args.pair_id)
    print(aggregate([score]).line())
    return 0


def cmd_run(args) -> int:
    if args.moving_landmarks is not None and args.fixed_landmarks is None:
        raise UsageError("--moving-landmarks needs --fixed-landmarks")
    _, summary = stage_run(args.fixed, args.moving, args.out_dir, params_from_args(args),
                           args.fixed_landmarks, args.moving_landmarks, args.deconv_dab,
                           args.stain_matrix, args.pair_id)
    if summary is not None:
        print(summary.line())
    return 0


def _read_pair_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"pair_id", "fixed", "moving", "fixed_landmarks", "moving_landmarks"}
    if not rows or not need <= set(rows[0]):
        raise rio.FormatError(f"{path}: manifest needs columns {sorted(need)}")
    base = Path(path).parent
    for row in rows:
        for key in need - {"pair_id"}:
            row[key] = str(base / row[key])
    return rows


def _run_cell(task):
    pair, out_dir, params, deconv, stain_matrix = task
    _, summary = stage_run(pair["fixed"], pair["moving"], out_dir, params,
                           pair["fixed_landmarks"], pair["moving_landmarks"], deconv,
                           stain_matrix, pair["pair_id"])
    return summary


def stage_sweep(pairs, sigmas_s, sigmas_t, base: RegistrationParams, work_dir, out,
                deconv=(False, False), stain_matrix=None, jobs: int = 1) -> list[list]:
    work_dir = Path(work_dir)
    rows = []
    for ss in sigmas_s:
        for st in sigmas_t:
            status = 0
            try:
                params = replace(base, sigma_s=ss, sigma_t=st)
                tasks = [(p, work_dir / f"s{ss:g}_t{st:g}" / p["pair_id"], params, deconv, stain_matrix)
                         for p in pairs]
                if jobs > 1:
                    with ProcessPoolExecutor(max_workers=jobs) as pool:
                        summaries = list(pool.map(_run_cell, tasks))
                else:
                    summaries = [_run_cell(t) for t in tasks]
                medians = [s.avg_median_rtre for s in summaries]
                robust = [s.avg_robustness for s in summaries]
                row = [ss, st, float(np.mean(medians)), float(np.mean(robust)), 0]
            except Exception as exc:  # a failed cell must not stop the sweep
                status = _exit_code(exc)
                log.error("sweep cell sigma_s=%g sigma_t=%g failed: %s", ss, st, exc)
                row = [ss, st, FAILED_CELL, FAILED_CELL, status]
            rows.append(row)
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    with rio.atomic_write(out, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for ss, st, med, rob, status in rows:
            writer.writerow([_fmt(ss), _fmt(st), _fmt(med), _fmt(rob), status])
    return rows


def cmd_sweep(args) -> int:
    pairs = _read_pair_manifest(args.manifest)
    rows = stage_sweep(pairs, args.sigmas_s, args.sigmas_t, params_from_args(args),
                       args.work_dir, args.out, args.deconv_dab, args.stain_matrix, args.jobs)
    best = rows[0]
    print(f"best sigma_s={best[0]:g} sigma_t={best[1]:g} avg_median_rtre={_fmt(best[2])}")
    return 0 if all(r[4] == 0 for r in rows) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="greedyreg", description="Two-stage greedy registration of image pairs.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="build the padded working pair")
    p.add_argument("--fixed", required=True, type=Path)
    p.add_argument("--moving", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    _add_prep_inputs(p)
    _add_params(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("affine", help="brute-force + L-BFGS affine stage")
    p.add_argument("--prep-dir", required=True, type=Path)
    p.add_argument("--out", type=Path, help="default: PREP_DIR/affine.txt")
    _add_params(p)
    p.set_defaults(func=cmd_affine)

    p = sub.add_parser("diffeo", help="greedy deformable stage")
    p.add_argument("--prep-dir", required=True, type=Path)
    p.add_argument("--affine", type=Path, help="default: PREP_DIR/affine.txt")
    p.add_argument("--out", type=Path, help="default: PREP_DIR/field.df2d")
    _add_params(p)
    p.set_defaults(func=cmd_diffeo)

    p = sub.add_parser("apply", help="warp an image or map landmarks")
    p.add_argument("--affine", required=True, type=Path)
    p.add_argument("--field", type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path, help="working-frame grayscale image to warp")
    src.add_argument("--landmarks", type=Path, help="fixed-image landmark CSV to map")
    p.add_argument("--prep", type=Path, help="prep.txt; landmarks are then in input-image pixels")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("evaluate", help="TRE / rTRE scoring of one pair")
    p.add_argument("--target", required=True, type=Path, help="reference landmarks in the moving image")
    p.add_argument("--warped", required=True, type=Path, help="registered landmark positions")
    p.add_argument("--initial", required=True, type=Path, help="landmark positions before registration")
    p.add_argument("--size", type=_size, help="WxH of the image the landmarks live in")
    p.add_argument("--image", type=Path, help="read WxH from this image instead")
    p.add_argument("--pair-id", default="pair")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full pipeline for one pair")
    p.add_argument("--fixed", required=True, type=Path)
    p.add_argument("--moving", required=True, type=Path)
    p.add_argument("--fixed-landmarks", type=Path)
    p.add_argument("--moving-landmarks", type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--pair-id", default="pair")
    _add_prep_inputs(p)
    _add_params(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid search over sigma_s x sigma_t")
    p.add_argument("--manifest", required=True, type=Path,
                   help="CSV: pair_id,fixed,moving,fixed_landmarks,moving_landmarks")
    p.add_argument("--sigmas-s", required=True, type=_float_list)
    p.add_argument("--sigmas-t", required=True, type=_float_list)
    p.add_argument("--work-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--jobs", type=int, default=1, help="pairs registered concurrently")
    _add_prep_inputs(p)
    _add_params(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (RegistrationError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, rio.FormatError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, RegistrationError, OSError, ValueError, FloatingPointError) as exc:
        print(f"greedyreg: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
