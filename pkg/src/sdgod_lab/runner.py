"""Experiment orchestration: data, corruption suites, ablation training arms, evaluation, reports."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .corruptions import (SEVERITIES, AugmentConfig, CorruptionType, augment_train, corrupt_dataset,
                          load_png, parse_corruption, to_uint8, write_suite)
from .crfi import ProjectionHead, build_bundle, crfi_total
from .data import PromptTemplates, SynthConfig, generate_dataset, load_dataset, save_dataset, select_regions
from .detector import (AUG, ORI, DetectorConfig, RpnLossPair, ToyDetector, cprm_mix, cprm_refine,
                       detector_config_dict, load_checkpoint, save_checkpoint, total_loss)
from .metrics import CosineSimReport, MpcReport, cosine_report, dataset_map
from .structures import BoxF
from .text_embed import EmbeddingProvider

log = logging.getLogger(__name__)

MODES = ("baseline", "crfi", "crfi_cprm")


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "crfi_cprm"
    alpha: float = 0.01
    tau: float = 0.1
    iterations: int = 2000
    batch_size: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup: int = 100
    crop_size: int = 32
    log_every: int = 0
    # data
    n_train: int = 200
    n_test: int = 100
    image_size: int = 64
    n_categories: int = 3
    # corruption suite
    corruptions: tuple = tuple(c.value for c in CorruptionType)
    severities: tuple = SEVERITIES
    # text embeddings
    embed_mode: str = "pseudo"
    embed_dim: int = 64
    embed_offset: float = 0.3
    embed_path: str = ""
    # evaluation
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    cosine_severity: int = 5
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    prompts: PromptTemplates = field(default_factory=PromptTemplates)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        self.corruptions = tuple(parse_corruption(c).value for c in self.corruptions)
        self.severities = tuple(int(s) for s in self.severities)
        self.detector.n_classes = self.n_categories

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def synth(self, n_images) -> SynthConfig:
        return SynthConfig(n_images=n_images, image_size=self.image_size, n_categories=self.n_categories,
                           seed=stream_seed(self.seed, "data"))


_SECTIONS = {"run": None, "detector": "detector", "augment": "augment", "prompts": "prompts"}


def _coerce(text, default):
    text = text.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(t) for t in items)
    return text


def _flat(obj):
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            continue
        out[f.name] = ", ".join(map(str, v)) if isinstance(v, tuple) else str(v)
    return out


def config_to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = _flat(cfg)
    cp["detector"] = _flat(cfg.detector)
    cp["augment"] = _flat(cfg.augment)
    cp["prompts"] = _flat(cfg.prompts)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def config_from_ini(text: str, **overrides) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    unknown = set(cp.sections()) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    parts = {"detector": DetectorConfig(), "augment": AugmentConfig(), "prompts": PromptTemplates()}
    for section, attr in _SECTIONS.items():
        if attr is None or not cp.has_section(section):
            continue
        obj = parts[attr]
        kw = {}
        for key, value in cp[section].items():
            if not hasattr(obj, key):
                raise ValueError(f"unknown key {section}.{key}")
            kw[key] = _coerce(value, getattr(obj, key))
        parts[attr] = dataclasses.replace(obj, **kw)
    base = RunConfig()
    kw = {}
    if cp.has_section("run"):
        for key, value in cp["run"].items():
            if key in parts or not hasattr(base, key):
                raise ValueError(f"unknown key run.{key}")
            kw[key] = _coerce(value, getattr(base, key))
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**kw, **parts)


def load_config(path=None, **overrides) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return config_from_ini(text, **overrides)


# ------------------------------------------------------------------- seeds


def stream_seed(master: int, label: str) -> int:
    """A 63-bit seed for the named stream; arms sharing a master seed share every stream."""
    digest = hashlib.sha256(f"{int(master)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def stream(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, label))


# ------------------------------------------------------------------ training


@dataclass
class Trainer:
    cfg: RunConfig
    model: ToyDetector
    head: ProjectionHead
    provider: EmbeddingProvider
    category_names: list

    @classmethod
    def create(cls, cfg: RunConfig, category_names=None):
        init = stream(cfg.seed, "init")
        model = ToyDetector(cfg.detector, init)
        # the head is drawn after the detector so every arm starts from the same detector weights
        head = ProjectionHead(cfg.detector.channels[-1], cfg.embed_dim, init)
        provider = make_provider(cfg)
        names = list(category_names) if category_names else SynthConfig(
            n_categories=cfg.n_categories).category_names
        return cls(cfg, model, head, provider, names)

    def parameters(self):
        params = self.model.parameters()
        if self.cfg.mode != "baseline":
            params = params + self.head.parameters()
        return params

    def step_losses(self, batch, step_seed, proposals=None):
        """Forward pass of one training step; returns (total, components, proposals used).

        ``proposals`` (per view) may be passed back in to hold the stop-gradient
        proposal stage fixed, e.g. for finite-difference checks.
        """
        cfg = self.cfg
        m = self.model
        images = np.stack([s.image for s in batch])
        gt_boxes = [s.boxes for s in batch]
        gt_labels = [s.labels for s in batch]
        h, w = images.shape[1:3]
        sub = [np.random.default_rng([step_seed, k]) for k in range(4)]
        comps = {}
        feats = {ORI: m.backbone(images)}
        anchors = m.anchors_for(feats[ORI], h, w)
        props = {} if proposals is None else dict(proposals)
        if cfg.mode == "crfi_cprm":
            aug_seeds = np.random.default_rng([step_seed, 9]).integers(0, 2 ** 31, size=len(batch))
            aug_images = np.stack([augment_train(im, int(sd), cfg.augment) for im, sd in zip(images, aug_seeds)])
            feats[AUG] = m.backbone(aug_images)
            p_ori, l_ori = m.rpn_forward(feats[ORI], anchors, gt_boxes, (h, w), sub[0], ORI, tag="rpn_ori")
            p_aug, l_aug = m.rpn_forward(feats[AUG], anchors, gt_boxes, (h, w), sub[1], AUG, tag="rpn_aug")
            l_rpn = cprm_refine(RpnLossPair(l_ori, l_aug))
            comps.update(rpn_ori=l_ori.item(), rpn_aug=l_aug.item(), cprm=l_rpn.item())
            props.setdefault("mixed", [cprm_mix(a, b) for a, b in zip(p_ori, p_aug)])
            l_roi = m.roi_forward(feats, props["mixed"], gt_boxes, gt_labels, sub[2])
        else:
            p_ori, l_rpn = m.rpn_forward(feats[ORI], anchors, gt_boxes, (h, w), sub[0], ORI, tag="rpn")
            comps["rpn"] = l_rpn.item()
            props.setdefault("ori", p_ori)
            l_roi = m.roi_forward({ORI: feats[ORI]}, props["ori"], gt_boxes, gt_labels, sub[2])
            if cfg.mode == "crfi":
                aug_seeds = np.random.default_rng([step_seed, 9]).integers(0, 2 ** 31, size=len(batch))
                aug_images = np.stack([augment_train(im, int(sd), cfg.augment)
                                       for im, sd in zip(images, aug_seeds)])
        comps["roi"] = l_roi.item()
        l_crfi = None
        if cfg.mode != "baseline":
            sel = select_regions(batch, cfg.crop_size, seed=int(sub[3].integers(2 ** 31)),
                                 category_names=self.category_names, templates=cfg.prompts)
            aug_obj, aug_bg = sel.recrop(aug_images)
            bundle = build_bundle(m.backbone, self.head, self.provider, sel, aug_obj, aug_bg)
            parts = {}
            l_crfi = crfi_total(bundle, cfg.tau, parts)
            comps["crfi"] = l_crfi.item()
            comps.update({f"crfi_{k}": v for k, v in parts.items()})
        total = total_loss(l_roi, l_rpn, l_crfi, cfg.alpha if l_crfi is not None else 0.0)
        comps = {"total": total.item(), **comps}
        return total, comps, props


def make_provider(cfg: RunConfig) -> EmbeddingProvider:
    if cfg.embed_mode == "file":
        return EmbeddingProvider.from_file(cfg.embed_path, templates=cfg.prompts)
    return EmbeddingProvider("pseudo", dim=cfg.embed_dim, seed=stream_seed(cfg.seed, "text") % 2 ** 32,
                             offset_scale=cfg.embed_offset, templates=cfg.prompts)


def log_columns(mode):
    cols = ["iteration", "lr", "total"]
    cols += ["rpn_ori", "rpn_aug", "cprm"] if mode == "crfi_cprm" else ["rpn"]
    cols += ["roi"]
    if mode != "baseline":
        cols += ["crfi", "crfi_img", "crfi_text_obj", "crfi_text_bg"]
    return cols


def _batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]


def train(cfg: RunConfig, train_ds, category_names=None, run_dir=None):
    """Train one arm; returns (trainer, log rows).  Deterministic for a fixed config."""
    if not train_ds:
        raise ValueError("training set is empty")
    trainer = Trainer.create(cfg, category_names)
    opt = G.SGD(trainer.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    batches = _batches(len(train_ds), min(cfg.batch_size, len(train_ds)), stream(cfg.seed, "sampling"))
    step_seeds = stream(cfg.seed, "augment")
    rows = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        idx = next(batches)
        batch = [train_ds[i] for i in idx]
        step_seed = int(step_seeds.integers(2 ** 62))
        lr = cfg.lr * min(1.0, (it + 1) / cfg.warmup) if cfg.warmup > 0 else cfg.lr
        total, comps, _ = trainer.step_losses(batch, step_seed)
        if not all(np.isfinite(v) for v in comps.values()):
            _dump_divergence(run_dir, it, comps, idx, trainer)
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {comps}")
        G.backward(total)
        opt.step(lr=lr)
        rows.append({"iteration": it, "lr": lr, **comps})
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.info("%s it %d total %.4f (%.1fs)", cfg.mode, it + 1, comps["total"], time.perf_counter() - t0)
    return trainer, rows


def _dump_divergence(run_dir, it, comps, idx, trainer):
    if run_dir is None:
        return
    doc = {"iteration": it, "losses": {k: repr(v) for k, v in comps.items()},
           "batch": [int(i) for i in idx],
           "param_norms": {k: float(np.linalg.norm(v.data)) for k, v in trainer.model.params.items()},
           "finite_params": {k: bool(np.isfinite(v.data).all()) for k, v in trainer.model.params.items()}}
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / "diverged.json").write_text(json.dumps(doc, indent=1))


def write_log(path, mode, rows):
    cols = log_columns(mode)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ----------------------------------------------------------------- evaluation


def quantize(ds):
    """Round-trip images through 8 bits, exactly as a PNG suite on disk stores them."""
    return [s.with_image(to_uint8(s.image).astype(np.float64) / 255.0) for s in ds]


def build_suite(test_ds, cfg: RunConfig):
    """In-memory corruption suite {(corruption, severity): samples}, quantized like the PNG suite."""
    seed = stream_seed(cfg.seed, "corrupt") % 2 ** 32
    return {(c, s): quantize(corrupt_dataset(test_ds, c, s, seed))
            for c in cfg.corruptions for s in cfg.severities}


def detect_all(model, samples, cfg: RunConfig, chunk=50):
    out = []
    for i in range(0, len(samples), chunk):
        imgs = np.stack([s.image for s in samples[i:i + chunk]])
        out.extend(model.detect_batch(imgs, cfg.score_thresh, cfg.nms_iou))
    return out


def detections_to_json(samples, detections):
    return [{"image_id": int(s.image_id), "bbox": [float(v) for v in box], "category_id": int(k),
             "score": float(score)} for s, dets in zip(samples, detections) for box, k, score in dets]


def detections_from_json(records, samples):
    by_id = {int(s.image_id): [] for s in samples}
    for r in records:
        by_id[int(r["image_id"])].append((BoxF(*r["bbox"]), int(r["category_id"]), float(r["score"])))
    return [by_id[int(s.image_id)] for s in samples]


def evaluate(model, test_ds, suite, cfg: RunConfig, workers=1):
    """(MpcReport, CosineSimReport, detections per domain) for one trained model."""
    clean = quantize(test_ds)
    n_cls = cfg.n_categories

    def run(key):
        dets = detect_all(model, suite[key], cfg)
        return key, dets, dataset_map(dets, suite[key], n_cls)

    keys = [(c, s) for c in cfg.corruptions for s in cfg.severities]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, keys))
    else:
        results = [run(k) for k in keys]
    clean_dets = detect_all(model, clean, cfg)
    detections = {"clean": clean_dets}
    P = np.zeros((len(cfg.corruptions), len(cfg.severities)))
    for (c, s), dets, value in results:
        P[cfg.corruptions.index(c), cfg.severities.index(s)] = value
        detections[f"{c}/{s}"] = dets
    report = MpcReport(P, list(cfg.corruptions), list(cfg.severities), dataset_map(clean_dets, clean, n_cls))
    sev = cfg.cosine_severity
    cos = cosine_report(model.pooled_features, clean,
                        {c: suite[(c, sev)] for c in cfg.corruptions if (c, sev) in suite}, sev)
    return report, cos, detections


def recompute_report(run_dir, test_ds, cfg: RunConfig) -> MpcReport:
    """Rebuild the mPC report from persisted detection files alone."""
    det_dir = Path(run_dir) / "detections"

    def score(name):
        records = json.loads((det_dir / name).read_text())
        return dataset_map(detections_from_json(records, test_ds), test_ds, cfg.n_categories)

    P = [[score(f"{c}_{s}.json") for s in cfg.severities] for c in cfg.corruptions]
    return MpcReport(P, list(cfg.corruptions), list(cfg.severities), score("clean.json"))


@dataclass
class ArmResult:
    seed: int
    mode: str
    report: MpcReport
    cosine: CosineSimReport
    train_seconds: float
    eval_seconds: float


def run_ablation(cfg: RunConfig, seeds, modes=MODES, progress=None):
    """Every arm on every seed, in memory; arms of one seed share data, suite and initial detector."""
    results = []
    for seed in seeds:
        scfg = cfg.replace(seed=seed)
        train_ds = generate_dataset(scfg.synth(scfg.n_train))
        test_ds = generate_dataset(scfg.synth(scfg.n_test), start_index=scfg.n_train)
        suite = build_suite(test_ds, scfg)
        for mode in modes:
            acfg = scfg.replace(mode=mode)
            t0 = time.perf_counter()
            trainer, _ = train(acfg, train_ds)
            t1 = time.perf_counter()
            report, cos, _ = evaluate(trainer.model, test_ds, suite, acfg)
            res = ArmResult(seed, mode, report, cos, t1 - t0, time.perf_counter() - t1)
            results.append(res)
            if progress:
                progress(res)
    return results


# ------------------------------------------------------------------ commands


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_gen_data(cfg: RunConfig, out):
    out = Path(out)
    train_ds = generate_dataset(cfg.synth(cfg.n_train))
    test_ds = generate_dataset(cfg.synth(cfg.n_test), start_index=cfg.n_train)
    names = cfg.synth(1).category_names
    save_dataset(train_ds, out, "train", names)
    save_dataset(test_ds, out, "test", names)
    (out / "config.ini").write_text(config_to_ini(cfg))
    return {"train": len(train_ds), "test": len(test_ds), "out": str(out)}


def cmd_corrupt(cfg: RunConfig, data_dir, out):
    test_ds, _ = load_dataset(_require(data_dir, "dataset"), "test")
    seed = stream_seed(cfg.seed, "corrupt") % 2 ** 32
    manifest = write_suite(test_ds, out, seed, list(cfg.corruptions), cfg.severities)
    return {"cells": len(manifest["cells"]), "images": len(test_ds), "out": str(out)}


def load_suite(suite_dir, test_ds, cfg: RunConfig):
    suite_dir = _require(suite_dir, "corruption suite")
    suite = {}
    for c in cfg.corruptions:
        for s in cfg.severities:
            cell = suite_dir / c / str(s)
            suite[(c, s)] = [t.with_image(load_png(cell / f"{t.image_id}.png")) for t in test_ds]
    return suite


def cmd_train(cfg: RunConfig, data_dir, out):
    train_ds, names = load_dataset(_require(data_dir, "dataset"), "train")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_to_ini(cfg))
    trainer, rows = train(cfg, train_ds, names, run_dir=out)
    write_log(out / "loss_log.csv", cfg.mode, rows)
    params = trainer.model.state_dict()
    if cfg.mode != "baseline":
        params.update({k: v.data.copy() for k, v in trainer.head.named_parameters().items()})
    save_checkpoint(out / "checkpoint.json", params, {"detector": detector_config_dict(cfg.detector),
                                                      "mode": cfg.mode, "seed": cfg.seed})
    digest = hashlib.sha256((out / "checkpoint.json").read_bytes()).hexdigest()
    return {"run_dir": str(out), "iterations": len(rows), "final_loss": rows[-1]["total"] if rows else None,
            "checkpoint_sha256": digest}


def load_model(run_dir, cfg: RunConfig) -> ToyDetector:
    weights, meta = load_checkpoint(_require(Path(run_dir) / "checkpoint.json", "checkpoint"))
    dcfg = DetectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["detector"].items()})
    model = ToyDetector(dcfg, np.random.default_rng(0))
    model.load_state_dict(weights)
    return model


def write_eval(run_dir, report: MpcReport, cos: CosineSimReport, detections, samples_by_domain):
    run_dir = Path(run_dir)
    det_dir = run_dir / "detections"
    det_dir.mkdir(parents=True, exist_ok=True)
    for name, dets in detections.items():
        fname = name.replace("/", "_") + ".json"
        (det_dir / fname).write_text(json.dumps(detections_to_json(samples_by_domain[name], dets)))
    (run_dir / "mpc.json").write_text(report.to_json())
    (run_dir / "mpc.csv").write_text(report.to_csv())
    (run_dir / "cosine.json").write_text(cos.to_json())
    (run_dir / "cosine.csv").write_text(cos.to_csv())


def cmd_eval(cfg: RunConfig, run_dir, data_dir, suite_dir, workers=1):
    test_ds, _ = load_dataset(_require(data_dir, "dataset"), "test")
    run_cfg = load_config(_require(Path(run_dir) / "config.ini", "run config"))
    run_cfg = run_cfg.replace(corruptions=cfg.corruptions, severities=cfg.severities)
    model = load_model(run_dir, run_cfg)
    suite = load_suite(suite_dir, test_ds, run_cfg)
    report, cos, dets = evaluate(model, test_ds, suite, run_cfg, workers)
    domains = {"clean": quantize(test_ds), **{f"{c}/{s}": v for (c, s), v in suite.items()}}
    write_eval(run_dir, report, cos, dets, domains)
    return {"run_dir": str(run_dir), "clean_map": report.clean_map, "mpc": report.mpc}


# -------------------------------------------------------------------- report


@dataclass
class ReportRow:
    name: str
    mode: str
    clean_map: float
    mpc: float
    per_corruption: dict


def rows_from_runs(run_dirs):
    rows = []
    for d in run_dirs:
        d = Path(d)
        report = MpcReport.from_json(_require(d / "mpc.json", "mPC report").read_text())
        mode = load_config(d / "config.ini").mode if (d / "config.ini").exists() else ""
        rows.append(ReportRow(d.name, mode, report.clean_map, report.mpc, report.per_corruption()))
    return rows


def order_rows(rows):
    """Ablation arms first in baseline, crfi, crfi_cprm order; anything else after, as given."""
    rank = {m: i for i, m in enumerate(MODES)}
    return sorted(rows, key=lambda r: rank.get(r.mode, len(MODES)))


def format_table(rows, fmt="markdown"):
    rows = order_rows(rows)
    base = next((r for r in rows if r.mode == "baseline"), None)
    corr = list(rows[0].per_corruption) if rows else []
    header = ["run", "mode", "clean"] + corr + ["mPC"] + (["delta_mPC"] if base else [])
    body = []
    for r in rows:
        line = [r.name, r.mode, f"{r.clean_map:.1f}"] + [f"{r.per_corruption.get(c, float('nan')):.1f}"
                                                          for c in corr] + [f"{r.mpc:.1f}"]
        if base:
            line.append(f"{r.mpc - base.mpc:+.1f}")
        body.append(line)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(b) + " |" for b in body]
    return "\n".join(lines) + "\n"


def cmd_report(run_dirs, out=None, fmt="markdown"):
    rows = rows_from_runs(run_dirs)
    if not rows:
        raise ValueError("no runs to report")
    text = format_table(rows, fmt)
    if out:
        Path(out).write_text(text)
    return text
