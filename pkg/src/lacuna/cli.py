"""Command-line entry point: ``lacuna <subcommand> --config run.json``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, sub_seed
from .errors import ConfigError, DataError, GradcheckFailure, LacunaError, NumericalError
from .evaluation import MetricsReport, connected_components
from .phantom import BurdenCategory, PhantomSample, burden_from_count
from .pipeline import StageModel, ScanSet, infer_volume, postprocess, scanset_from_volumes
from .preproc import BrainMasks
from .tensor import load_checkpoint, save_checkpoint
from .volio import Volume3D, load_nifti, reorient_to_ras, save_nifti

log = logging.getLogger("lacuna")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

# montage gray levels
PGM_PRED, PGM_GT, PGM_BOTH = 160, 255, 210


# file helpers -------------------------------------------------------------

def write_atomic(path: Path, content: str | bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(content, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, mode) as f:
        f.write(content)
    os.replace(tmp, path)
    return path


def write_json(path: Path, obj) -> Path:
    return write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Run:
    """Collects step timings and outputs for the run manifest."""

    def __init__(self, command: str, cfg: RunConfig, out_dir: Path):
        self.command, self.cfg, self.out_dir = command, cfg, out_dir
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []

    @contextmanager
    def step(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 4)

    def output(self, path: Path) -> Path:
        self.outputs.append(str(path.relative_to(self.out_dir)))
        return path

    def manifest(self) -> dict:
        return {
            "tool": "lacuna",
            "version": __version__,
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "timings_s": self.timings,
            "outputs": sorted(self.outputs),
            "effective_config": self.cfg.to_dict(),
        }

    def finish(self) -> Path:
        return write_json(self.out_dir / "manifest.json", self.manifest())


# scan directories ---------------------------------------------------------

def masks_label_volume(masks: BrainMasks) -> Volume3D:
    """Single label volume: 1 brain tissue, 2 CSF."""
    data = masks.brain_bool.astype(np.float32)
    data[masks.csf_bool] = 2
    return masks.brain.with_data(data)


def masks_from_label_volume(vol: Volume3D) -> BrainMasks:
    return BrainMasks(vol.with_data(vol.data >= 1), vol.with_data(np.rint(vol.data) == 2))


def write_phantom(sample: PhantomSample, directory: Path, run: Run) -> None:
    vols = {
        "t1": sample.t1, "flair": sample.flair, "lacune_mask": sample.lacune_mask,
        "atlas": sample.region_atlas, "masks": masks_label_volume(sample.masks),
    }
    for name, vol in vols.items():
        run.output(save_nifti(vol, directory / f"{name}.nii"))
    meta = {
        "seed": sample.seed,
        "true_count": sample.true_count,
        "true_category": sample.true_category.label,
        "lacune_centres_vox": [list(map(float, c)) for c in sample.lacune_centres],
        "mimic_voxels": int(np.count_nonzero(sample.mimic_mask.data)),
    }
    run.output(write_json(directory / "meta.json", meta))


def _category_from_label(label: str) -> BurdenCategory:
    for c in BurdenCategory:
        if c.label == label:
            return c
    raise DataError(f"unknown burden label {label!r}")


def load_scan(scan_id: str, t1: Path, flair: Path, masks: Path, atlas: Path, lacune_mask: Path | None = None,
              bias_order: int = 1, category: BurdenCategory | None = None) -> ScanSet:
    vols = [reorient_to_ras(load_nifti(p)) for p in (t1, flair, masks, atlas)]
    lac = reorient_to_ras(load_nifti(lacune_mask)) if lacune_mask else None
    if lac is not None and category is None:
        category = burden_from_count(len(connected_components(lac)))
    return scanset_from_volumes(scan_id, vols[0], vols[1], masks_from_label_volume(vols[2]), vols[3],
                                lac, category, bias_order)


def load_phantom_dir(directory: Path, bias_order: int = 1) -> ScanSet:
    if not (directory / "t1.nii").exists():
        raise DataError(f"{directory} is not a phantom directory (missing t1.nii)")
    lac = directory / "lacune_mask.nii"
    category = None
    if (directory / "meta.json").exists():
        category = _category_from_label(json.loads((directory / "meta.json").read_text())["true_category"])
    return load_scan(directory.name, directory / "t1.nii", directory / "flair.nii", directory / "masks.nii",
                     directory / "atlas.nii", lac if lac.exists() else None, bias_order, category)


def load_scans_dir(root: Path, bias_order: int) -> list[ScanSet]:
    if not root.is_dir():
        raise DataError(f"scans directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if (p / "t1.nii").exists())
    if not dirs:
        raise DataError(f"no phantom directories found under {root}")
    return [load_phantom_dir(d, bias_order) for d in dirs]


def cohort_scans(cfg: RunConfig) -> list[ScanSet]:
    from .experiment import build_cohort

    if "scans_dir" in cfg.paths:
        return load_scans_dir(Path(cfg.paths["scans_dir"]), cfg.bias_order)
    return build_cohort(cfg)


def load_models(directory: Path) -> tuple[StageModel, StageModel]:
    try:
        m1 = StageModel.from_checkpoint(load_checkpoint(directory / "stage1"))
        m2 = StageModel.from_checkpoint(load_checkpoint(directory / "stage2"))
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {e}") from e
    return m1, m2


# PGM montage --------------------------------------------------------------

def montage_slices(reference: np.ndarray, n: int = 3) -> list[int]:
    """Axial slices with the most reference voxels (ties to the lower index)."""
    per_z = reference.reshape(-1, reference.shape[2]).sum(axis=0)
    order = np.lexsort((np.arange(len(per_z)), -per_z))
    return sorted(int(z) for z in order[:n])


def render_montage(anatomy: np.ndarray, pred: np.ndarray, gt: np.ndarray | None, slices: list[int]) -> bytes:
    """Binary PGM of axial slices side by side; anatomy in 0..120, overlays above."""
    lo, hi = np.percentile(anatomy, [1, 99])
    base = np.clip((anatomy - lo) / max(hi - lo, 1e-9), 0, 1) * 120
    tiles = []
    for z in slices:
        tile = base[:, :, z].copy()
        p = pred[:, :, z] > 0
        g = gt[:, :, z] > 0 if gt is not None else np.zeros_like(p)
        tile[p & ~g] = PGM_PRED
        tile[g & ~p] = PGM_GT
        tile[p & g] = PGM_BOTH
        # rows = anterior-posterior flipped so anterior is up
        tiles.append(np.flipud(tile.T))
    img = np.concatenate(tiles, axis=1).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


# subcommands --------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, run: Run) -> int:
    from .experiment import cohort_samples

    with run.step("generate"):
        samples = cohort_samples(cfg)
    with run.step("write"):
        index = []
        for s in samples:
            name = f"ph{s.seed:020d}"
            write_phantom(s, run.out_dir / "scans" / name, run)
            index.append({"id": name, "seed": s.seed, "true_count": s.true_count,
                          "true_category": s.true_category.label})
        run.output(write_json(run.out_dir / "cohort.json", index))
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig, run: Run) -> int:
    with run.step("load"):
        scans = _input_scans(args, cfg)
    with run.step("write"):
        for s in scans:
            d = run.out_dir / "preprocessed" / s.id
            for name in ("t1", "flair", "diff"):
                run.output(save_nifti(s.volume(getattr(s, name)), d / f"{name}.nii"))
    return EXIT_OK


def _input_scans(args, cfg: RunConfig) -> list[ScanSet]:
    paths = cfg.paths
    if "phantom_dir" in paths:
        return [load_phantom_dir(Path(paths["phantom_dir"]), cfg.bias_order)]
    if "t1" in paths:
        missing = [k for k in ("flair", "masks", "atlas") if k not in paths]
        if missing:
            raise ConfigError(f"--t1 also needs {missing}")
        lac = Path(paths["lacune_mask"]) if "lacune_mask" in paths else None
        return [load_scan(Path(paths["t1"]).name.split(".")[0], Path(paths["t1"]), Path(paths["flair"]),
                          Path(paths["masks"]), Path(paths["atlas"]), lac, cfg.bias_order)]
    return cohort_scans(cfg)


def cmd_train(args, cfg: RunConfig, run: Run) -> int:
    from .experiment import train_models

    with run.step("cohort"):
        scans = cohort_scans(cfg)
    with run.step("train"):
        m1, m2 = train_models(cfg, scans, cfg.loss.segmentation, "train")
    ck = run.out_dir / "checkpoints"
    for m in (m1, m2):
        d = save_checkpoint(m.to_checkpoint(), ck / f"stage{m.stage}")
        run.output(d / "manifest.json")
        for name in m.params:
            run.output(d / f"{name}.f32")
    run.output(write_json(run.out_dir / "loss_history.json", {"stage1": m1.history, "stage2": m2.history}))
    return EXIT_OK


def _checkpoint_dir(cfg: RunConfig) -> Path:
    if "checkpoint_dir" not in cfg.paths:
        raise ConfigError("a checkpoint directory is required (--checkpoint-dir or paths.checkpoint_dir)")
    return Path(cfg.paths["checkpoint_dir"])


def cmd_infer(args, cfg: RunConfig, run: Run) -> int:
    with run.step("load"):
        m1, m2 = load_models(_checkpoint_dir(cfg))
        scans = _input_scans(args, cfg)
    pp = cfg.postprocess
    for scan in scans:
        out = run.out_dir / scan.id if len(scans) > 1 else run.out_dir
        with run.step(f"infer:{scan.id}"):
            res = infer_volume(m1, m2, scan)
            mask, comps = postprocess(res.prob, pp.threshold, pp.min_component_voxels, pp.connectivity)
        run.output(save_nifti(res.prob, out / "prob.nii"))
        run.output(save_nifti(scan.volume(mask.astype(np.float32)), out / "pred_mask.nii"))
        summary = {
            "id": scan.id,
            "burden": res.burden.label,
            "class_probs": [float(p) for p in res.class_probs],
            "component_count": len(comps),
            "component_centroids": [list(map(float, c.centroid_mm)) for c in comps.components],
        }
        run.output(write_json(out / "result.json", summary))
        reference = scan.lacune_mask if scan.lacune_mask is not None else mask
        pgm = render_montage(scan.t1, mask, scan.lacune_mask, montage_slices(reference))
        run.output(write_atomic(out / "montage.pgm", pgm))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, run: Run) -> int:
    from .experiment import evaluate_scan

    with run.step("load"):
        m1, m2 = load_models(_checkpoint_dir(cfg))
        scans = _input_scans(args, cfg)
    unlabelled = [s.id for s in scans if s.lacune_mask is None or s.true_category is None]
    if unlabelled:
        raise DataError(f"eval needs annotated scans; missing labels for {unlabelled[:3]}")
    with run.step("evaluate"):
        report = MetricsReport.from_scans([evaluate_scan(cfg, m1, m2, s)[0] for s in scans])
    run.output(write_atomic(run.out_dir / "metrics.json", report.to_json() + "\n"))
    run.output(write_atomic(run.out_dir / "confusion.csv", report.confusion_csv()))
    return EXIT_OK


def cmd_crossval(args, cfg: RunConfig, run: Run) -> int:
    from .experiment import run_crossval

    with run.step("cohort"):
        scans = cohort_scans(cfg)
    with run.step("crossval"):
        result = run_crossval(cfg, scans)
    out = run.out_dir
    run.output(write_json(out / "folds.json", result.folds))
    fold_sens = {}
    for variant, report in result.reports.items():
        run.output(write_atomic(out / f"metrics_{variant}.json", report.to_json() + "\n"))
        run.output(write_atomic(out / f"confusion_{variant}.csv", report.confusion_csv()))
        fold_sens[variant] = report.per_fold_sensitivity
    run.output(write_json(out / "fold_sensitivity.json", fold_sens))
    if result.comparison is not None:
        run.output(write_json(out / "comparison.json", result.comparison.to_dict()))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig, run: Run) -> int:
    from .tensor.gradcheck import run_gradcheck

    with run.step("gradcheck"):
        results = run_gradcheck(trials=args.trials, seed=sub_seed(cfg.seed, "gradcheck"))
    rows = [{"name": r.name, "trials": r.trials, "max_rel_error": r.max_rel_error,
             "tolerance": r.tolerance, "passed": r.passed} for r in results]
    run.output(write_json(run.out_dir / "gradcheck.json", rows))
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']:<18} max rel err {r['max_rel_error']:.2e}"
              f" (tol {r['tolerance']:.0e})")
    failed = [r["name"] for r in rows if not r["passed"]]
    if failed:
        run.finish()
        raise GradcheckFailure(f"gradient checks failed: {failed}")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a phantom cohort as NIfTI files"),
    "preprocess": (cmd_preprocess, "bias-correct and normalize scans, write network input channels"),
    "train": (cmd_train, "train both network stages"),
    "infer": (cmd_infer, "run the trained pipeline on one scan or a cohort"),
    "eval": (cmd_eval, "instance and burden metrics for annotated scans"),
    "crossval": (cmd_crossval, "stratified k-fold comparison of the segmentation losses"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
}

PATH_FLAGS = ("t1", "flair", "masks", "atlas", "lacune_mask", "phantom_dir", "checkpoint_dir", "scans_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lacuna", description="Lacune detection and burden scoring on 3D MRI.")
    parser.add_argument("--version", action="version", version=f"lacuna {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="run config JSON (a run manifest is accepted too)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out-dir", type=Path, default=Path("lacuna_out"))
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("preprocess", "train", "infer", "eval", "crossval"):
            for flag in PATH_FLAGS:
                p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=Path)
        if name == "gradcheck":
            p.add_argument("--trials", type=int, default=20)
    return parser


def effective_config(args) -> RunConfig:
    cfg = load_config(args.config).with_overrides(seed=args.seed)
    overrides = {f: str(getattr(args, f)) for f in PATH_FLAGS if getattr(args, f, None) is not None}
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "paths": {**cfg.paths, **overrides}})
    return cfg


def _thread_limit():
    n = os.environ.get("LACUNA_THREADS")
    if not n:
        return nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise ConfigError(f"LACUNA_THREADS must be an integer, got {n!r}") from None
    if limit < 1:
        raise ConfigError("LACUNA_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        with _thread_limit():
            run = Run(args.command, cfg, args.out_dir)
            args.out_dir.mkdir(parents=True, exist_ok=True)
            code = COMMANDS[args.command][0](args, cfg, run)
            run.finish()
        return code
    except ConfigError as e:
        print(f"lacuna: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"lacuna: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"lacuna: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LacunaError as e:
        print(f"lacuna: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
