"""End-to-end orchestration with content-hashed stage caching."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import stages
from .cade import CadeModelConfig, CadeTrainConfig
from .cadi import CadiModelConfig, CadiTrainConfig
from .config import ConfigError, build, format_flat, read_flat, to_flat
from .phantom import PhantomSpec, generate_cohort
from .preprocess import derive_seed, preprocess_manifest
from .data import load_manifest

log = logging.getLogger(__name__)

STAGES = (
    "generate",
    "preprocess",
    "train-cade",
    "infer",
    "extract-rois",
    "train-cadi",
    "classify",
    "evaluate",
    "fuse",
    "report",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class CohortConfig:
    n_cases: int = 103
    views_per_case: int = 2
    split: tuple[float, float, float] = (0.6, 0.1, 0.3)


@dataclass(frozen=True)
class PreprocessConfig:
    sigma: float = 2.0
    augment: bool = True
    quantize_percentile: Optional[float] = None
    seed: int = 0


@dataclass(frozen=True)
class PostprocessConfig:
    threshold: float = 0.5
    k: int = 3
    min_area: Optional[int] = None  # None: 0.05% of the image area


@dataclass(frozen=True)
class EvalConfig:
    dsc_threshold: float = 0.5
    split: str = "test"
    panels: int = 8


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    cache: bool = True
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    cade_model: CadeModelConfig = field(default_factory=CadeModelConfig)
    cade_train: CadeTrainConfig = field(default_factory=CadeTrainConfig.desk)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    cadi_model: CadiModelConfig = field(default_factory=CadiModelConfig)
    cadi_train: CadiTrainConfig = field(default_factory=CadiTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self) -> dict[str, dict[str, str]]:
        """Flat key/value view per config prefix."""
        return {
            "phantom": to_flat(self.phantom, "phantom"),
            "cohort": to_flat(self.cohort, "cohort"),
            "preprocess": to_flat(self.preprocess, "preprocess"),
            "cade": {**to_flat(self.cade_model, "cade"), **to_flat(self.cade_train, "cade")},
            "postprocess": to_flat(self.postprocess, "postprocess"),
            "cadi": {**to_flat(self.cadi_model, "cadi"), **to_flat(self.cadi_train, "cadi")},
            "eval": to_flat(self.eval, "eval"),
        }

    def flat(self) -> dict[str, str]:
        out = {"seed": str(self.seed)}
        for sec in self.sections().values():
            out.update(sec)
        return out


_SECTIONS = {
    "phantom": (PhantomSpec,),
    "cohort": (CohortConfig,),
    "preprocess": (PreprocessConfig,),
    "cade": (CadeModelConfig, CadeTrainConfig),
    "postprocess": (PostprocessConfig,),
    "cadi": (CadiModelConfig, CadiTrainConfig),
    "eval": (EvalConfig,),
}


def pipeline_config_from_flat(values: dict[str, str], seed: Optional[int] = None, out_dir: Optional[str] = None) -> PipelineConfig:
    """Resolve a flat config; unset stage seeds derive from the global seed."""
    known_top = {"seed", "out_dir", "cache"}
    for key in values:
        prefix = key.split(".", 1)[0] if "." in key else None
        if prefix is None and key not in known_top:
            raise ConfigError(f"unknown key {key!r}")
        if prefix is not None and prefix not in _SECTIONS:
            raise ConfigError(f"unknown section in key {key!r}")
    for prefix, classes in _SECTIONS.items():
        names = set()
        for cls in classes:
            names |= set(cls.__dataclass_fields__)
        for key in values:
            if key.startswith(prefix + ".") and key[len(prefix) + 1:] not in names:
                raise ConfigError(f"unknown key {key!r}")

    g_seed = int(values.get("seed", "0")) if seed is None else int(seed)

    def seeded(prefix, cls, base=None):
        base = dict(base or {})
        if "seed" in cls.__dataclass_fields__ and f"{prefix}.seed" not in values:
            base["seed"] = derive_seed(g_seed, prefix) & 0x7FFFFFFF
        return build(cls, values, prefix, base=base, strict=False)

    desk = CadeTrainConfig.desk()
    cache = values.get("cache", "true").lower() not in ("0", "false", "no", "off")
    return PipelineConfig(
        seed=g_seed,
        out_dir=out_dir if out_dir is not None else values.get("out_dir", "runs/default"),
        cache=cache,
        phantom=seeded("phantom", PhantomSpec),
        cohort=build(CohortConfig, values, "cohort", strict=False),
        preprocess=seeded("preprocess", PreprocessConfig),
        cade_model=build(CadeModelConfig, values, "cade", strict=False),
        cade_train=seeded("cade", CadeTrainConfig, base={k: getattr(desk, k) for k in ("learning_rate", "batch_size", "epochs", "optimizer")}),
        postprocess=build(PostprocessConfig, values, "postprocess", strict=False),
        cadi_model=build(CadiModelConfig, values, "cadi", strict=False),
        cadi_train=seeded("cadi", CadiTrainConfig),
        eval=build(EvalConfig, values, "eval", strict=False),
    )


def load_pipeline_config(path=None, seed=None, out_dir=None) -> PipelineConfig:
    values = read_flat(path) if path is not None else {}
    return pipeline_config_from_flat(values, seed=seed, out_dir=out_dir)


# -- caching ---------------------------------------------------------------

def _sha(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def directory_digest(path: Path, exclude=("stage.json", "config.txt")) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name not in exclude):
        h.update(f.relative_to(path).as_posix().encode("utf-8"))
        h.update(b"\0")
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


@dataclass
class StageResult:
    name: str
    key: str
    digest: str
    cached: bool
    seconds: float


# stage -> (config sections it reads, upstream stages)
_GRAPH = {
    "generate": (("phantom", "cohort"), ()),
    "preprocess": (("preprocess",), ("generate",)),
    "train-cade": (("cade",), ("preprocess",)),
    "infer": (("eval",), ("train-cade", "preprocess")),
    "extract-rois": (("postprocess", "eval"), ("infer", "preprocess")),
    "train-cadi": (("cadi",), ("extract-rois",)),
    "classify": (("eval",), ("train-cadi", "extract-rois")),
    "evaluate": (("eval", "postprocess"), ("classify", "infer", "preprocess")),
    "fuse": (("eval",), ("evaluate", "classify", "preprocess")),
    "report": (("eval", "postprocess"), ("evaluate", "fuse", "infer", "preprocess")),
}


class Pipeline:
    def __init__(self, cfg: PipelineConfig, log_fn: Callable[[str], None] = print):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.results: dict[str, StageResult] = {}
        self.log = log_fn

    def stage_dir(self, name: str) -> Path:
        return self.out / name

    def stage_key(self, name: str) -> str:
        sections, upstream = _GRAPH[name]
        secs = self.cfg.sections()
        own = {k: v for s in sections for k, v in secs[s].items()}
        parts = [name, json.dumps(own, sort_keys=True)]
        for u in upstream:
            parts += [u, self.results[u].key, self.results[u].digest]
        return _sha(*parts)

    def run_stage(self, name: str, fn: Callable[[Path], None]) -> StageResult:
        key = self.stage_key(name)
        d = self.stage_dir(name)
        meta = d / "stage.json"
        start = time.perf_counter()
        if self.cfg.cache and meta.is_file():
            info = json.loads(meta.read_text(encoding="utf-8"))
            if info.get("key") == key:
                (d / "config.txt").write_text(format_flat(self.cfg.flat()), encoding="utf-8")
                res = StageResult(name, key, info["digest"], True, 0.0)
                self.results[name] = res
                self.log(f"[{name}] cached")
                return res
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        try:
            fn(d)
        except Exception as exc:
            raise StageError(name, exc) from exc
        digest = directory_digest(d)
        (d / "config.txt").write_text(format_flat(self.cfg.flat()), encoding="utf-8")
        meta.write_text(json.dumps({"stage": name, "key": key, "digest": digest}, indent=2) + "\n", encoding="utf-8")
        res = StageResult(name, key, digest, False, time.perf_counter() - start)
        self.results[name] = res
        self.log(f"[{name}] done in {res.seconds:.1f}s")
        return res

    def run(self) -> dict[str, StageResult]:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(format_flat(cfg.flat()), encoding="utf-8")
        d = self.stage_dir
        pp = cfg.postprocess
        ev = cfg.eval

        self.run_stage("generate", lambda o: generate_cohort(
            cfg.phantom, cfg.cohort.n_cases, cfg.cohort.views_per_case, cfg.cohort.split, o))
        self.run_stage("preprocess", lambda o: preprocess_manifest(
            load_manifest(d("generate") / "manifest.csv"), o,
            sigma=cfg.preprocess.sigma, augment=cfg.preprocess.augment,
            quantize_percentile=cfg.preprocess.quantize_percentile,
            seed=cfg.preprocess.seed))
        manifest = d("preprocess") / "manifest.csv"
        self.run_stage("train-cade", lambda o: stages.train_cade_stage(
            manifest, cfg.cade_model, cfg.cade_train, o / "cade.pt"))
        self.run_stage("infer", lambda o: stages.infer_stage(
            d("train-cade") / "cade.pt", manifest, o, split=ev.split))

        def extract(o: Path):
            stages.extract_detected_rois(manifest, o / "detected", maps_dir=d("infer") / "maps",
                                         threshold=pp.threshold, k=pp.k, min_area=pp.min_area, split=ev.split)
            stages.extract_truth_rois(manifest, o / "truth")
        self.run_stage("extract-rois", extract)

        truth = d("extract-rois") / "truth"
        self.run_stage("train-cadi", lambda o: stages.train_cadi_stage(
            truth, truth / "labels.csv", cfg.cadi_model, cfg.cadi_train, o / "cadi.pt"))

        def classify(o: Path):
            ckpt = d("train-cadi") / "cadi.pt"
            stages.classify_stage(ckpt, d("extract-rois") / "detected", o / "predictions.csv")
            split_of = {Path(r["roi"]).name: r["split"] for r in stages.read_csv(truth / "labels.csv")}
            ann = o / "annotated"
            ann.mkdir()
            for f in sorted((truth / "rois").glob("*.png")):
                if split_of.get(f.name) == ev.split:
                    shutil.copyfile(f, ann / f.name)
            stages.classify_stage(ckpt, ann, o / "annotated_predictions.csv")
            shutil.rmtree(ann)
        self.run_stage("classify", classify)

        self.run_stage("evaluate", lambda o: stages.evaluate_stage(
            d("classify"), manifest, o / "report.json", maps_dir=d("infer") / "maps", dsc_threshold=ev.dsc_threshold,
            threshold=pp.threshold, k=pp.k, min_area=pp.min_area, split=ev.split))

        def fuse(o: Path):
            stages.fuse_stage(d("evaluate") / "accepted_predictions.csv", manifest, o / "cade.json", ev.split, "cade")
            stages.fuse_stage(d("classify") / "annotated_predictions.csv", manifest, o / "annotated.json", ev.split, "annotated")
        self.run_stage("fuse", fuse)

        self.run_stage("report", lambda o: stages.report_stage(
            d("evaluate") / "report.json", [d("fuse") / "annotated.json", d("fuse") / "cade.json"], o,
            manifest_path=manifest, pred_dir=d("infer"), n_panels=ev.panels,
            threshold=pp.threshold, k=pp.k, min_area=pp.min_area, split=ev.split))
        return self.results


def run_pipeline(cfg: PipelineConfig, log_fn: Callable[[str], None] = print) -> dict[str, StageResult]:
    return Pipeline(cfg, log_fn).run()


def smoke_config(out_dir: str, seed: int = 0, cache: bool = True) -> PipelineConfig:
    """Tiny end-to-end run: 8 cases, 64x64 phantoms, 2 epochs per model."""
    values = {
        "phantom.width": "64",
        "phantom.height": "64",
        "cohort.n_cases": "8",
        "cohort.split": "0.5, 0.25, 0.25",
        "cade.epochs": "2",
        "cadi.epochs": "2",
        "cadi.lr_step_epochs": "1",
        "eval.panels": "2",
        "cache": "true" if cache else "false",
    }
    return pipeline_config_from_flat(values, seed=seed, out_dir=out_dir)
