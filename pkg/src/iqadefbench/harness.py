"""Campaign orchestration: non-adaptive, adaptive, certified and adversarial-training runs.

A campaign lives in one output directory::

    records.json          ingested source records (SI, CF, MOS)
    selection.json        cluster-stratified subset
    presets/<attack>.json strength presets
    adv/manifest.json     adversarial images + manifest
    records_<case>.csv    evaluation records (deterministic, no timings)
    timings_<case>.csv    per-record defense wall time
    run_metadata.json     seeds, versions, decisions

Tasks are independent and run on a thread pool; results are sorted before
writing so the record files do not depend on the worker count. Finished
tasks are journaled, and an interrupted run resumes from the journal.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence


from . import __version__
from .attacks import (ATTACKS, AttackSpec, StrengthPresets, calibrate_strengths, default_presets,
                      default_spec, run_attack, train_uap)
from .certified import (QualityClassBinning, SmoothingConfig, certify_median_delta,
                        smooth_classify_certify)
from .core import Image, MetricModel, load_png, metric_from_id
from .dataset import (AdversarialManifest, cluster_and_sample, entry_seed,
                      generate_adversarial_dataset, ingest, make_synthetic_corpus,
                      read_dataset_records, write_dataset_records)
from .errors import ConfigurationError
from .evaluation import (CertRecord, EvaluationRecord, parse_records, records_to_csv, write_records,
                         write_timings)
from .measures import psnr, ssim
from .purification import DEFENSES, DIFFERENTIABLE, DefenseSpec, compose, defense_grid, purify
from .training import LabeledSample, TrainingConfig, adversarial_train, save_checkpoint

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
CASES = ("non_adaptive", "adaptive", "certified", "adv_training")
STRENGTHS = ("weak", "medium", "strong")

DECISIONS = {
    "dispersion": "± is the population standard deviation across attack x strength x metric cell means",
    "weighting": "each attack x strength x metric cell has equal weight in averages",
    "psnr_clamp": "PSNR is clamped at 40 dB, so Q_score <= 2",
    "label_penalty": "adversarial-training labels: y * SSIM(x, x_adv) or y * (1 - LPIPS), clipped to label range",
    "timing": "Mean Time is the per-image wall time of the defense call only",
    "classification_score": "classification smoothing scores an image by the midpoint of its certified class",
    "stochastic_adaptive": "adaptive attacks see one fixed realization of a stochastic defense per image "
                           "unless stochastic_mode=resample; evaluation draws a fresh realization",
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    source_dir: Optional[str] = None
    mos_table: Optional[str] = None
    k: int = 10
    per_cluster: int = 1
    synthetic_n: int = 0
    synthetic_size: int = 64
    synthetic_seed: int = 0


@dataclass
class AttackConfig:
    attack: str
    strengths: list = field(default_factory=lambda: ["medium"])
    varied_param: Optional[dict] = None
    grid: Optional[list] = None
    fixed: dict = field(default_factory=dict)


@dataclass
class DefenseConfig:
    name: str
    params: Optional[list] = None


@dataclass
class SmoothingVariant:
    id: str
    kind: str = "classification"
    sigma: float = 0.12
    n0: int = 100
    n: int = 1000
    alpha: float = 0.001
    epsilon_cert: float = 0.05
    segments: int = 10
    denoiser: Optional[dict] = None


@dataclass
class TrainingCampaign:
    epsilons: list = field(default_factory=lambda: [2, 4, 8])
    penalties: list = field(default_factory=lambda: ["ssim"])
    epochs: int = 3
    batch_size: int = 8
    learning_rate: float = 3e-3
    train_fraction: float = 0.5
    label_low: float = 1.0
    label_high: float = 5.0


@dataclass
class CampaignConfig:
    case: str = "non_adaptive"
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1
    metrics: list = field(default_factory=lambda: ["toy-7"])
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attacks: list = field(default_factory=lambda: [AttackConfig("ifgsm")])
    defenses: list = field(default_factory=lambda: [DefenseConfig("none"), DefenseConfig("flip")])
    smoothing: list = field(default_factory=list)
    training: TrainingCampaign = field(default_factory=TrainingCampaign)
    stochastic_mode: str = "fixed"
    calibration_images: int = 3
    uap_epochs: int = 20
    version: int = CONFIG_VERSION

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        bad = []

        def build(kls, data, prefix):
            if not isinstance(data, dict):
                bad.append(prefix or "<root>")
                return None
            names = {f.name for f in fields(kls)}
            unknown = [k for k in data if k not in names]
            bad.extend(f"{prefix}{k}" for k in unknown)
            kwargs = {k: v for k, v in data.items() if k in names}
            try:
                return kls(**kwargs)
            except TypeError as exc:
                bad.append(f"{prefix}: {exc}")
                return None

        top = dict(d)
        nested = {
            "dataset": (DatasetConfig, False),
            "training": (TrainingCampaign, False),
            "attacks": (AttackConfig, True),
            "defenses": (DefenseConfig, True),
            "smoothing": (SmoothingVariant, True),
        }
        for key, (kls, many) in nested.items():
            if key not in top:
                continue
            if many:
                if not isinstance(top[key], list):
                    bad.append(key)
                    top.pop(key)
                    continue
                top[key] = [build(kls, item, f"{key}[{i}].") for i, item in enumerate(top[key])]
            else:
                top[key] = build(kls, top[key], f"{key}.")
        cfg = build(cls, top, "")
        if bad or cfg is None:
            raise ConfigurationError(f"invalid campaign config: {bad}", fields=bad)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        bad = []
        if self.version != CONFIG_VERSION:
            bad.append("version")
        if self.case not in CASES:
            bad.append("case")
        if self.workers < 1:
            bad.append("workers")
        if self.stochastic_mode not in ("fixed", "resample"):
            bad.append("stochastic_mode")
        if not self.metrics:
            bad.append("metrics")
        for i, a in enumerate(self.attacks):
            if a.attack not in ATTACKS:
                bad.append(f"attacks[{i}].attack")
            if any(s not in STRENGTHS for s in a.strengths):
                bad.append(f"attacks[{i}].strengths")
        for i, dcfg in enumerate(self.defenses):
            if dcfg.name not in DEFENSES or dcfg.name == "external":
                bad.append(f"defenses[{i}].name")
        for i, s in enumerate(self.smoothing):
            if s.kind not in ("classification", "regression"):
                bad.append(f"smoothing[{i}].kind")
        if self.case == "certified" and not self.smoothing:
            bad.append("smoothing")
        if bad:
            raise ConfigurationError(f"invalid campaign config: {bad}", fields=bad)
        if self.case == "adaptive":
            for dcfg in self.defenses:
                if dcfg.name not in DEFENSES:
                    continue
                if dcfg.name not in DIFFERENTIABLE:
                    raise ConfigurationError(
                        f"defense {dcfg.name!r} is not differentiable and cannot be attacked adaptively",
                        fields=[f"defenses.{dcfg.name}"])


def load_config(path, overrides: Sequence[str] = ()) -> CampaignConfig:
    d = json.loads(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like key=value", fields=[item])
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return CampaignConfig.from_dict(d)


# ---------------------------------------------------------------------------
# shared state


class Campaign:
    """Resolved resources for one config: metrics, selection, presets, manifest."""

    def __init__(self, cfg: CampaignConfig):
        self.cfg = cfg
        self.out = cfg.out
        self.out.mkdir(parents=True, exist_ok=True)
        self._metrics = None
        self._images = {}
        self._selection = None
        self._lock = threading.Lock()

    # metrics -------------------------------------------------------------
    @property
    def metrics(self) -> list:
        if self._metrics is None:
            self._metrics = [metric_from_id(m) for m in self.cfg.metrics]
        return self._metrics

    def metric(self, metric_id: str) -> MetricModel:
        for m in self.metrics:
            if m.identifier == metric_id:
                return m
        raise ConfigurationError(f"metric {metric_id!r} not in campaign", fields=["metrics"])

    # dataset -------------------------------------------------------------
    def ingest(self) -> list:
        ds = self.cfg.dataset
        source, mos = ds.source_dir, ds.mos_table
        if source is None:
            if ds.synthetic_n <= 0:
                raise ConfigurationError("dataset needs source_dir or synthetic_n > 0",
                                         fields=["dataset.source_dir", "dataset.synthetic_n"])
            source = str(self.out / "source")
            mos = str(make_synthetic_corpus(source, ds.synthetic_n, ds.synthetic_size, ds.synthetic_seed))
        exceptions = []
        records = ingest(source, mos or str(Path(source) / "mos.csv"), exceptions)
        write_dataset_records(self.out / "records.json", records)
        (self.out / "ingest_exceptions.json").write_text(json.dumps(exceptions, indent=1) + "\n")
        return records

    def cluster(self) -> list:
        path = self.out / "records.json"
        records = read_dataset_records(path) if path.exists() else self.ingest()
        ds = self.cfg.dataset
        selected = cluster_and_sample(records, ds.k, ds.per_cluster, self.cfg.seed)
        write_dataset_records(self.out / "selection.json", selected)
        self._selection = None
        return selected

    @property
    def selection(self) -> list:
        if self._selection is None:
            path = self.out / "selection.json"
            if not path.exists():
                self.cluster()
            self._selection = sorted(read_dataset_records(path), key=lambda r: r.image_id)
        return self._selection

    def image(self, image_id: str) -> Image:
        with self._lock:
            if image_id not in self._images:
                rec = {r.image_id: r for r in self.selection}[image_id]
                self._images[image_id] = rec.load()
            return self._images[image_id]

    def mos(self) -> dict:
        return {r.image_id: r.mos for r in self.selection}

    # presets -------------------------------------------------------------
    def preset_path(self, attack: str) -> Path:
        return self.out / "presets" / f"{attack}.json"

    def calibrate(self) -> list:
        out = []
        calib = [self.image(r.image_id) for r in self.selection[: self.cfg.calibration_images]]
        for acfg in self.cfg.attacks:
            base = default_spec(acfg.attack, **acfg.fixed)
            if acfg.varied_param is not None:
                v = acfg.varied_param
                preset = StrengthPresets(acfg.attack, base.with_value(v["weak"]),
                                         base.with_value(v["medium"]), base.with_value(v["strong"]))
            elif acfg.grid is not None:
                preset = calibrate_strengths(acfg.attack, self.metrics[0], calib, acfg.grid, base=base)
            else:
                preset = default_presets(acfg.attack, **acfg.fixed)
            self.preset_path(acfg.attack).parent.mkdir(parents=True, exist_ok=True)
            preset.save(self.preset_path(acfg.attack))
            out.append(preset)
        return out

    @property
    def presets(self) -> list:
        if not all(self.preset_path(a.attack).exists() for a in self.cfg.attacks):
            self.calibrate()
        return [StrengthPresets.load(self.preset_path(a.attack)) for a in self.cfg.attacks]

    # manifest ------------------------------------------------------------
    def generate(self) -> AdversarialManifest:
        strengths = sorted({s for a in self.cfg.attacks for s in a.strengths}, key=STRENGTHS.index)
        return generate_adversarial_dataset(self.selection, self.metrics, self.presets, self.out / "adv",
                                            strengths, self.cfg.seed, uap_epochs=self.cfg.uap_epochs)

    @property
    def manifest(self) -> AdversarialManifest:
        path = self.out / "adv" / "manifest.json"
        if not path.exists():
            return self.generate()
        return AdversarialManifest.load(path)

    def wanted_entries(self) -> list:
        wanted = {(a.attack, s) for a in self.cfg.attacks for s in a.strengths}
        metrics = set(self.cfg.metrics)
        ids = {r.image_id for r in self.selection}
        return [e for e in self.manifest.ok_entries()
                if (e.attack_id, e.strength) in wanted and e.metric_id in metrics and e.image_id in ids]

    def defenses(self) -> list:
        specs = []
        for dcfg in self.cfg.defenses:
            specs.extend(defense_grid(dcfg.name, dcfg.params))
        return specs


# ---------------------------------------------------------------------------
# task runner


def _run_tasks(tasks: list, fn: Callable, workers: int, journal: Optional[Path], record_cls) -> list:
    """Evaluate ``fn`` on every task, skipping keys already journaled."""
    done = {}
    if journal is not None and journal.exists():
        text = journal.read_text()
        if text.strip():
            for r in parse_records(text):
                done[r.key] = r
    header_needed = journal is not None and (not journal.exists() or not journal.read_text().strip())
    todo = [t for t in tasks if t[0] not in done]
    results = list(done.values())
    lock = threading.Lock()

    def emit(recs):
        with lock:
            results.extend(recs)
            if journal is not None and recs:
                nonlocal header_needed
                text = records_to_csv(recs, with_time=True)
                lines = text.splitlines(keepends=True)
                with journal.open("a") as fh:
                    fh.writelines(lines if header_needed else lines[2:])
                header_needed = False

    if workers <= 1:
        for key, payload in todo:
            emit(fn(payload))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, payload) for _, payload in todo]
            for fut in as_completed(futures):
                emit(fut.result())
    return sorted(results, key=lambda r: r.key)


def _finish(c: Campaign, case: str, records: list, journal: Path) -> list:
    write_records(c.out / f"records_{case}.csv", records)
    write_timings(c.out / f"timings_{case}.csv", records)
    if journal.exists():
        journal.unlink()
    write_run_metadata(c, case, len(records))
    return records


def write_run_metadata(c: Campaign, case: str, n_records: int) -> Path:
    path = c.out / "run_metadata.json"
    meta = json.loads(path.read_text()) if path.exists() else {}
    meta.update({
        "version": __version__,
        "config_version": CONFIG_VERSION,
        "config": c.cfg.to_dict(),
        "decisions": DECISIONS,
    })
    meta.setdefault("runs", {})[case] = {"records": n_records, "seed": c.cfg.seed}
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def _timed_purify(spec: DefenseSpec, x: Image, seed: int):
    t0 = time.perf_counter()
    out = purify(spec, x, seed)
    return out, (time.perf_counter() - t0) * 1000.0


def _evaluate(c: Campaign, case, m, spec, image_id, attack_id, strength, x, adv, seed_clean, seed_adv):
    """Apply the defense to source and adversarial images and score everything."""
    def_adv, ms = _timed_purify(spec, adv, seed_adv)
    def_clean = purify(spec, x, seed_clean)
    return EvaluationRecord(
        metric_id=m.identifier, attack_id=attack_id, strength=strength, defense_id=spec.identifier,
        defense_name=spec.name, defense_param="" if spec.param is None else f"{spec.param:g}", case=case,
        image_id=image_id, mos=c.mos()[image_id], diam=m.diam,
        score_source=m.score(x), score_adv=m.score(adv), score_def_adv=m.score(def_adv),
        score_def_clean=m.score(def_clean), q_ssim=ssim(def_adv, x), q_psnr=psnr(def_adv, x),
        seed=seed_adv, wall_time_ms=ms,
    )


# ---------------------------------------------------------------------------
# cases


def run_non_adaptive(cfg: CampaignConfig) -> list:
    c = Campaign(cfg)
    entries = c.wanted_entries()
    root = c.out / "adv"
    defenses = c.defenses()
    tasks = []
    for e in entries:
        for spec in defenses:
            key = ("non_adaptive", spec.identifier, e.metric_id, e.attack_id, e.strength, e.image_id)
            tasks.append((key, (e, spec)))

    def work(payload):
        e, spec = payload
        m = c.metric(e.metric_id)
        x = c.image(e.image_id)
        adv = load_png(root / e.path)
        s_clean = entry_seed(cfg.seed, "defense", spec.identifier, e.image_id)
        s_adv = entry_seed(cfg.seed, "defense", spec.identifier, *e.key)
        return [_evaluate(c, "non_adaptive", m, spec, e.image_id, e.attack_id, e.strength, x, adv, s_clean, s_adv)]

    journal = c.out / "records_non_adaptive.journal"
    return _finish(c, "non_adaptive", _run_tasks(tasks, work, cfg.workers, journal, EvaluationRecord), journal)


def run_adaptive(cfg: CampaignConfig) -> list:
    c = Campaign(cfg)
    defenses = c.defenses()
    for spec in defenses:
        if not spec.differentiable:
            raise ConfigurationError(f"defense {spec.name!r} is not differentiable and cannot be attacked adaptively",
                                     fields=[f"defenses.{spec.name}"])
    presets = {p.attack: p for p in c.presets}
    selection = c.selection
    resample = cfg.stochastic_mode == "resample"
    uap_cache = {}
    uap_lock = threading.Lock()
    tasks = []
    for acfg in cfg.attacks:
        for strength in acfg.strengths:
            for m in c.metrics:
                for spec in defenses:
                    for r in selection:
                        key = ("adaptive", spec.identifier, m.identifier, acfg.attack, strength, r.image_id)
                        tasks.append((key, (acfg.attack, strength, m, spec, r.image_id)))

    def work(payload):
        attack, strength, m, spec, image_id = payload
        x = c.image(image_id)
        attack_seed = entry_seed(cfg.seed, image_id, attack, m.identifier, strength)
        defense_seed = entry_seed(cfg.seed, "adaptive-attack", spec.identifier, image_id)
        g = compose(m, spec, defense_seed, resample=resample)
        aspec = presets[attack].get(strength)
        aspec = AttackSpec(**{**asdict(aspec), "seed": attack_seed})
        pert = None
        if attack == "uap":
            ck = (m.identifier, spec.identifier, strength)
            with uap_lock:
                if ck not in uap_cache:
                    train = [c.image(r.image_id) for r in selection]
                    uap_cache[ck] = train_uap(g, train, aspec.varied_param_value, cfg.uap_epochs,
                                              entry_seed(cfg.seed, "uap", *ck))
                pert = uap_cache[ck]
        adv = Image.from_uint8(run_attack(aspec, g, x, pert).adversarial.to_uint8())
        s_clean = entry_seed(cfg.seed, "defense", spec.identifier, image_id)
        s_adv = entry_seed(cfg.seed, "defense", spec.identifier, image_id, attack, m.identifier, strength)
        return [_evaluate(c, "adaptive", m, spec, image_id, attack, strength, x, adv, s_clean, s_adv)]

    journal = c.out / "records_adaptive.journal"
    return _finish(c, "adaptive", _run_tasks(tasks, work, cfg.workers, journal, EvaluationRecord), journal)


def smoothing_config(v: SmoothingVariant, seed: int) -> SmoothingConfig:
    den = None
    if v.denoiser:
        den = DefenseSpec(v.denoiser["name"], v.denoiser.get("param"))
    return SmoothingConfig(v.sigma, v.n0, v.n, v.alpha, v.epsilon_cert, den, seed)


def _certify(m: MetricModel, x: Image, v: SmoothingVariant, seed: int):
    """(smoothed score, result) for one image under one smoothing variant."""
    scfg = smoothing_config(v, seed)
    if v.kind == "classification":
        b = QualityClassBinning.for_metric(m, v.segments)
        res = smooth_classify_certify(m, x, b, scfg)
        return b.class_score(int(res.class_or_score)), res
    res = certify_median_delta(m, x, scfg)
    return float(res.class_or_score), res


def run_certified(cfg: CampaignConfig) -> list:
    c = Campaign(cfg)
    entries = c.wanted_entries()
    root = c.out / "adv"
    clean_cache = {}
    cache_lock = threading.Lock()
    tasks = []
    for v in cfg.smoothing:
        for e in entries:
            key = (v.id, e.metric_id, e.attack_id, e.strength, e.image_id)
            tasks.append((key, (v, e)))

    def clean(v, m, image_id):
        ck = (v.id, m.identifier, image_id)
        with cache_lock:
            if ck in clean_cache:
                return clean_cache[ck]
        val = _certify(m, c.image(image_id), v, entry_seed(cfg.seed, "cert", *ck))[0]
        with cache_lock:
            clean_cache[ck] = val
        return val

    def work(payload):
        v, e = payload
        m = c.metric(e.metric_id)
        adv = load_png(root / e.path)
        seed = entry_seed(cfg.seed, "cert", v.id, *e.key)
        t0 = time.perf_counter()
        s_adv, res = _certify(m, adv, v, seed)
        ms = (time.perf_counter() - t0) * 1000.0
        return [CertRecord(
            metric_id=e.metric_id, attack_id=e.attack_id, strength=e.strength, defense_id=v.id, kind=v.kind,
            image_id=e.image_id, mos=c.mos()[e.image_id], diam=m.diam,
            smoothed_clean=clean(v, m, e.image_id), smoothed_adv=s_adv,
            radius=float("nan") if res.certified_radius is None else res.certified_radius,
            abstained=int(res.abstained),
            relative_delta=float("nan") if res.certified_relative_delta is None else res.certified_relative_delta,
            samples=res.samples_used, sigma=v.sigma, alpha=v.alpha, seed=seed, wall_time_ms=ms,
        )]

    journal = c.out / "records_certified.journal"
    return _finish(c, "certified", _run_tasks(tasks, work, cfg.workers, journal, CertRecord), journal)


def run_adv_training(cfg: CampaignConfig) -> list:
    """Train one robust copy per (epsilon, penalty) and evaluate it under white-box attack."""
    c = Campaign(cfg)
    tc = cfg.training
    selection = c.selection
    n_train = max(1, int(round(len(selection) * tc.train_fraction)))
    train_recs, eval_recs = selection[:n_train], selection[n_train:] or selection
    presets = {p.attack: p for p in c.presets}
    records = []
    for m in c.metrics:
        data = [LabeledSample(c.image(r.image_id), r.mos) for r in train_recs]
        for penalty in tc.penalties:
            for eps in tc.epsilons:
                tcfg = TrainingConfig(epsilon=eps / 255, penalty=penalty, epochs=tc.epochs,
                                      batch_size=tc.batch_size, learning_rate=tc.learning_rate,
                                      label_low=tc.label_low, label_high=tc.label_high,
                                      seed=entry_seed(cfg.seed, "train", m.identifier, penalty, eps))
                robust = adversarial_train(m, data, tcfg)
                save_checkpoint(robust, tcfg, c.out / "checkpoints" / f"{m.identifier}-{penalty}-{eps}.pt")
                spec = DefenseSpec("none", label=f"advtrain-{penalty}-{eps:g}")
                for acfg in cfg.attacks:
                    for strength in acfg.strengths:
                        aspec = presets[acfg.attack].get(strength)
                        for r in eval_recs:
                            x = c.image(r.image_id)
                            seed = entry_seed(cfg.seed, r.image_id, acfg.attack, m.identifier, strength)
                            pert = None
                            if acfg.attack == "uap":
                                pert = train_uap(robust, [c.image(q.image_id) for q in eval_recs],
                                                 aspec.varied_param_value, cfg.uap_epochs, seed)
                            adv = run_attack(AttackSpec(**{**asdict(aspec), "seed": seed}), robust, x, pert).adversarial
                            rec = _evaluate(c, "adv_training", robust, spec, r.image_id, acfg.attack, strength,
                                            x, adv, seed, seed)
                            rec.metric_id = m.identifier
                            rec.defense_name = f"advtrain-{penalty}"
                            rec.defense_param = f"{eps:g}"
                            records.append(rec)
    records.sort(key=lambda r: r.key)
    journal = c.out / "records_adv_training.journal"
    return _finish(c, "adv_training", records, journal)


def run_case(cfg: CampaignConfig) -> list:
    return {
        "non_adaptive": run_non_adaptive,
        "adaptive": run_adaptive,
        "certified": run_certified,
        "adv_training": run_adv_training,
    }[cfg.case](cfg)
