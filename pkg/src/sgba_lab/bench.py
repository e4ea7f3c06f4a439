"""Experiment orchestration: resumable stages, model zoo, reports.

Every command runs a subset of one pipeline whose stages communicate only
through on-disk artifacts under the output directory:

    zoo/                    checkpoints (benign_*, badnets_*, sgba_*, shadow_*)
    scapegoats.{npz,json}   per-class benign triggers from one clean model
    variance_profile.json   benign per-layer average variance
    reports/                inspection reports, thresholds, detector, scores
    plots/                  variance panels, mask heatmaps, poison previews
    bench_state.json        config hash, completed stages, stage timings

A stage is skipped when the state file marks it complete under the same
config hash; running against a directory whose hash differs is refused so
configurations cannot mix. Model training and per-model inspections fan out
over a process pool; results are keyed by model id, so scheduling order
never affects artifact content.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attack, datasets, inspectors, modelkit, plots, reversal
from .attack import PoisonPolicy, ScapegoatSet, VarianceLimit
from .config import ExperimentConfig, with_overrides
from .inspectors import ModelPopulation, ShadowOpts
from .reversal import ReversalSettings, SearchRegion
from .zoo import ModelZoo

DETECTORS = ("nc", "nc-cutting", "nc-hollow", "variance", "mntd")


class BenchError(RuntimeError):
    pass


def resolve_dataset_name(cfg: ExperimentConfig) -> str:
    """Resolve ``auto`` to mnist when its files are on disk, else synthetic."""
    if cfg.dataset != "auto":
        return cfg.dataset
    root = datasets.resolve_data_root(cfg.data_root)
    mnist_dir = root / "mnist"
    if mnist_dir.exists() and any(mnist_dir.glob("train-images-idx3-ubyte*")):
        return "mnist"
    return "synthetic"


def load_bench_dataset(cfg: ExperimentConfig):
    name = resolve_dataset_name(cfg)
    kwargs = {}
    if name == "synthetic":
        kwargs = {"n_train": cfg.synthetic_train, "n_test": cfg.synthetic_test}
    return datasets.load_dataset(name, cfg.seed, cfg.subsample,
                                 data_root=cfg.data_root, **kwargs)


def reversal_settings(cfg: ExperimentConfig, **overrides) -> ReversalSettings:
    r = cfg.reversal
    kwargs = dict(lr=r.lr, batch_size=r.batch_size, init_cost=r.init_cost,
                  patience=r.patience, efficacy_threshold=r.efficacy_threshold,
                  eval_every=r.eval_every, eval_max=r.eval_max,
                  cutting_stride=r.cutting_stride,
                  cutting_stride_factor=r.cutting_stride_factor,
                  refine_top=r.cutting_refine_top,
                  refine_budget=r.cutting_refine_budget)
    kwargs.update(overrides)
    return ReversalSettings(**kwargs)


def shadow_opts(cfg: ExperimentConfig) -> ShadowOpts:
    m = cfg.mntd
    return ShadowOpts(
        subsample_range=m.shadow_subsample,
        epochs_range=m.shadow_epochs,
        sgba_epochs_range=m.shadow_sgba_epochs,
        blend_alpha=m.blend_alpha,
        sgba_fraction_range=cfg.poison_fraction_range,
        part_size_range=cfg.part_size_range,
        single_part_label_rule=cfg.single_part_label_rule,
        lr=cfg.lr, batch_size=cfg.batch_size,
        dropout_conv=cfg.dropout_conv, dropout_fc=cfg.dropout_fc,
    )


# ---------------------------------------------------------------------------
# worker tasks (top-level for pickling; dataset cached per process)
# ---------------------------------------------------------------------------

_WORKER_CACHE: dict = {}


def _worker_dataset(cfg: ExperimentConfig):
    key = cfg.config_hash()
    if key not in _WORKER_CACHE:
        import torch
        torch.set_num_threads(1)
        _WORKER_CACHE[key] = load_bench_dataset(cfg)
    return _WORKER_CACHE[key]


def _holdout_images(cfg: ExperimentConfig, data) -> np.ndarray:
    return datasets.defender_holdout(data, cfg.holdout_fraction).train_images


def _rebuild_cfg(cfg_dict: dict) -> ExperimentConfig:
    from . import config as config_mod
    return config_mod.from_dict(cfg_dict)


def _train_zoo_model(args) -> tuple[str, dict]:
    cfg_dict, kind, model_id, seed = args
    cfg = _rebuild_cfg(cfg_dict)
    paths = BenchPaths(Path(cfg.out_dir))
    zoo = ModelZoo(paths.zoo)
    if zoo.exists(model_id):
        return model_id, zoo.manifest(model_id)["metrics"]
    data = _worker_dataset(cfg)
    holdout = datasets.defender_holdout(data, cfg.holdout_fraction)
    rng = np.random.default_rng(seed)

    if kind == "benign":
        record = modelkit.build_model(modelkit.ARCH_FOR_DATASET[data.name], seed,
                                      cfg.dropout_conv, cfg.dropout_fc)
        record = modelkit.train(record, data.train_images, data.train_labels,
                                epochs=cfg.epochs_benign, lr=cfg.lr, seed=seed,
                                batch_size=cfg.batch_size, provenance="benign")
    elif kind == "badnets":
        target = int(rng.integers(0, data.num_classes))
        patch = attack.default_badnets_patch(data.input_shape, cfg.badnets_patch_size)
        images, labels, manifest = attack.build_badnets_set(
            data, patch, target, cfg.badnets_fraction, seed,
            exclude_indices=_holdout_positions(data, holdout))
        record = modelkit.build_model(modelkit.ARCH_FOR_DATASET[data.name], seed,
                                      cfg.dropout_conv, cfg.dropout_fc)
        record = modelkit.train(record, images, labels, epochs=cfg.epochs_badnets,
                                lr=cfg.lr, seed=seed, batch_size=cfg.batch_size,
                                provenance="badnets")
        record.extra["target_class"] = target
        record.extra["poison_counts"] = manifest.counts()
        stamped = patch.apply(data.test_images)
        keep = data.test_labels != target
        record.metrics["attack_success_rate"] = float(
            (modelkit.predict(record, stamped[keep]) == target).mean())
    elif kind == "sgba":
        scapegoats = ScapegoatSet.load(paths.scapegoats)
        profile = json.loads(paths.variance_profile.read_text())
        limit = VarianceLimit(np.array(profile["baseline"]), cfg.variance_coefficient)
        target = int(rng.integers(0, data.num_classes))
        spec = attack.make_trigger(scapegoats, target, cfg.part_size_range,
                                   seed, data.input_shape)
        policy = PoisonPolicy(float(rng.uniform(*cfg.poison_fraction_range)), seed,
                              single_part_label_rule=cfg.single_part_label_rule)
        images, labels, manifest = attack.build_poisoned_set(
            data, spec, scapegoats, policy,
            exclude_indices=_holdout_positions(data, holdout))
        record = attack.train_sgba(
            modelkit.ARCH_FOR_DATASET[data.name], images, labels, limit,
            loss_threshold=profile["loss_threshold"], max_epochs=cfg.epochs_sgba_max,
            seed=seed, lr=cfg.lr, batch_size=cfg.batch_size,
            dropout_conv=cfg.dropout_conv, dropout_fc=cfg.dropout_fc)
        record.extra["target_class"] = target
        record.extra["trigger_spec"] = spec.to_json()
        record.extra["poison_fraction"] = policy.total_poison_fraction
        record.extra["poison_counts"] = manifest.counts()
        record.metrics["attack_success_rate"] = attack.attack_success_rate(
            record, data.test_images, data.test_labels, spec, "both")
        record.metrics["part_a_to_target"] = attack.attack_success_rate(
            record, data.test_images, data.test_labels, spec, "a")
        record.metrics["part_b_to_target"] = attack.attack_success_rate(
            record, data.test_images, data.test_labels, spec, "b")
    elif kind.startswith("shadow_"):
        shadow_kind = kind.split("_", 1)[1]
        scapegoats = limit = None
        if shadow_kind == "sgba":
            scapegoats = ScapegoatSet.load(paths.scapegoats)
            profile = json.loads(paths.variance_profile.read_text())
            limit = VarianceLimit(np.array(profile["baseline"]), cfg.variance_coefficient)
        record = None
        for attempt in range(2):
            try:
                record = inspectors.train_one_shadow(
                    shadow_kind, data, seed + attempt * 7919,
                    scapegoats, limit, shadow_opts(cfg))
                break
            except RuntimeError:
                continue
        if record is None:
            return model_id, {"skipped": True}
    else:
        raise BenchError(f"unknown training kind {kind!r}")

    record.metrics["clean_accuracy"] = modelkit.evaluate(
        record, data.test_images, data.test_labels)
    zoo.add(record, model_id, config_hash=cfg.config_hash())
    return model_id, record.metrics


def _holdout_positions(data, holdout) -> np.ndarray:
    return np.searchsorted(data.train_indices, holdout.train_indices)


def _inspect_nc_task(args) -> tuple[str, dict]:
    cfg_dict, model_id, region_kind, threshold = args
    cfg = _rebuild_cfg(cfg_dict)
    paths = BenchPaths(Path(cfg.out_dir))
    report_path = paths.reports / f"nc_{region_kind}_{model_id}.json"
    if report_path.exists():
        return model_id, json.loads(report_path.read_text())
    data = _worker_dataset(cfg)
    holdout = _holdout_images(cfg, data)
    zoo = ModelZoo(paths.zoo)
    record = zoo.get(model_id)

    if region_kind == "full":
        region = SearchRegion.full()
        budget = cfg.reversal.budget
        settings = reversal_settings(cfg)
    else:
        base = json.loads((paths.reports / f"nc_full_{model_id}.json").read_text())
        box = tuple(base["flagged_box"])
        if region_kind == "cutting":
            region = reversal.cutting_region_from_box(box, cfg.reversal.cutting_scale)
            budget = cfg.reversal.cutting_budget
            settings = reversal_settings(cfg)
        else:
            region = reversal.hollow_region_from_box(box, cfg.reversal.hollow_scale)
            budget = cfg.reversal.budget
            settings = reversal_settings(cfg)

    report = reversal.inspect_nc(record, holdout, region, threshold,
                                 budget=budget, seed=cfg.seed + 17, settings=settings)
    blob = report.to_json()
    blob["model_id"] = model_id
    if report.flagged_box is not None:
        blob["flagged_box"] = list(report.flagged_box)
    report_path.write_text(json.dumps(blob, indent=1, sort_keys=True))
    if report.masks is not None:
        plots.save_mask_heatmap(report.masks[report.flagged_class],
                                paths.plots / f"nc_{region_kind}_{model_id}_mask.png")
    return model_id, blob


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class BenchPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def zoo(self) -> Path: return self.root / "zoo"

    @property
    def scapegoats(self) -> Path: return self.root / "scapegoats"

    @property
    def variance_profile(self) -> Path: return self.root / "variance_profile.json"

    @property
    def reports(self) -> Path: return self.root / "reports"

    @property
    def plots(self) -> Path: return self.root / "plots"

    @property
    def state(self) -> Path: return self.root / "bench_state.json"

    @property
    def detector(self) -> Path: return self.root / "reports" / "meta_detector"

    def make(self) -> None:
        for p in (self.root, self.zoo, self.reports, self.plots):
            p.mkdir(parents=True, exist_ok=True)


class BenchPipeline:
    """Stage runner with config-hash-guarded resume."""

    def __init__(self, cfg: ExperimentConfig, resume: bool = True):
        resolved = resolve_dataset_name(cfg)
        if resolved != cfg.dataset:
            cfg = with_overrides(cfg, dataset=resolved)
        self.cfg = cfg
        self.paths = BenchPaths(Path(cfg.out_dir))
        self.paths.make()
        self.resume = resume
        self._pool: ProcessPoolExecutor | None = None
        self.state = self._open_state()

    # -- state ----------------------------------------------------------
    def _open_state(self) -> dict:
        hash_ = self.cfg.config_hash()
        if self.paths.state.exists():
            state = json.loads(self.paths.state.read_text())
            if state["config_hash"] != hash_:
                raise BenchError(
                    f"output dir {self.paths.root} holds results for config "
                    f"{state['config_hash']}, current config is {hash_}; "
                    "refusing to mix configurations")
            if not self.resume:
                raise BenchError(
                    f"output dir {self.paths.root} already has bench state; "
                    "pass resume=True (--resume) or use a fresh directory")
            return state
        state = {"config_hash": hash_, "completed": {}, "timings": {}}
        self._write_state(state)
        return state

    def _write_state(self, state: dict | None = None) -> None:
        self.paths.state.write_text(json.dumps(state or self.state, indent=1,
                                               sort_keys=True))

    def _stage(self, name: str, fn) -> None:
        if self.state["completed"].get(name):
            return
        started = time.time()
        fn()
        self.state["completed"][name] = True
        self.state["timings"][name] = round(time.time() - started, 2)
        self._write_state()

    # -- infrastructure --------------------------------------------------
    @property
    def zoo(self) -> ModelZoo:
        return ModelZoo(self.paths.zoo)

    def _map(self, fn, tasks: list) -> list:
        """Run tasks on the worker pool (or inline when workers <= 1)."""
        if self.cfg.workers <= 1 or len(tasks) <= 1:
            import torch
            threads = torch.get_num_threads()
            results = [fn(t) for t in tasks]
            torch.set_num_threads(threads)
            return results
        if self._pool is None:
            import multiprocessing as mp
            self._pool = ProcessPoolExecutor(
                max_workers=self.cfg.workers, mp_context=mp.get_context("spawn"))
        return list(self._pool.map(fn, tasks))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _cfg_dict(self) -> dict:
        return self.cfg.to_dict()

    # -- stages -----------------------------------------------------------
    def model_ids(self, kind: str) -> list[str]:
        counts = {"benign": self.cfg.n_benign, "badnets": self.cfg.n_badnets,
                  "sgba": self.cfg.n_sgba}
        base = {"benign": 0, "badnets": 20000, "sgba": 30000}[kind]
        return [f"{kind}_{i:03d}" for i in range(counts[kind])], \
               [self.cfg.seed + base + i for i in range(counts[kind])]

    def stage_benign(self) -> None:
        ids, seeds = self.model_ids("benign")
        tasks = [(self._cfg_dict(), "benign", mid, seed)
                 for mid, seed in zip(ids, seeds) if not self.zoo.exists(mid)]
        self._map(_train_zoo_model, tasks)

    def stage_scapegoats(self) -> None:
        if self.paths.scapegoats.with_suffix(".json").exists():
            return
        data = load_bench_dataset(self.cfg)
        holdout = _holdout_images(self.cfg, data)
        source_id = "benign_000"
        record = self.zoo.get(source_id)
        settings = reversal_settings(self.cfg)
        scapegoats = attack.derive_scapegoats(
            record, holdout, self.cfg.seed + 5000,
            budget=self.cfg.reversal.scapegoat_budget, settings=settings)
        scapegoats = ScapegoatSet(scapegoats.triggers, scapegoats.seed, source_id)
        scapegoats.save(self.paths.scapegoats)
        for cls, trig in scapegoats.triggers.items():
            plots.save_mask_heatmap(trig.mask,
                                    self.paths.plots / f"scapegoat_mask_{cls}.png")

    def stage_variance_profile(self) -> None:
        if self.paths.variance_profile.exists():
            return
        ids, _ = self.model_ids("benign")
        records = [self.zoo.get(mid) for mid in ids]
        profile = attack.benign_variance_profile(
            records, normalize=not self.cfg.profile_sum_not_mean)
        losses = [r.metrics["final_train_loss"] for r in records]
        blob = {
            "baseline": [float(v) for v in profile],
            "layers": records[0].module.weight_layer_names(),
            "n_models": len(records),
            "loss_threshold": float(np.mean(losses)) * self.cfg.loss_threshold_factor,
        }
        self.paths.variance_profile.write_text(json.dumps(blob, indent=1, sort_keys=True))

    def stage_badnets(self) -> None:
        ids, seeds = self.model_ids("badnets")
        tasks = [(self._cfg_dict(), "badnets", mid, seed)
                 for mid, seed in zip(ids, seeds) if not self.zoo.exists(mid)]
        self._map(_train_zoo_model, tasks)

    def stage_sgba(self) -> None:
        ids, seeds = self.model_ids("sgba")
        tasks = [(self._cfg_dict(), "sgba", mid, seed)
                 for mid, seed in zip(ids, seeds) if not self.zoo.exists(mid)]
        self._map(_train_zoo_model, tasks)

    def nc_eval_ids(self) -> list[str]:
        benign_ids, _ = self.model_ids("benign")
        badnets_ids, _ = self.model_ids("badnets")
        sgba_ids, _ = self.model_ids("sgba")
        return benign_ids[:self.cfg.n_nc_benign] + badnets_ids + sgba_ids

    def stage_nc_full(self) -> None:
        tasks = [(self._cfg_dict(), mid, "full", 2.0) for mid in self.nc_eval_ids()
                 if not (self.paths.reports / f"nc_full_{mid}.json").exists()]
        self._map(_inspect_nc_task, tasks)

    def stage_calibrate(self) -> None:
        out = self.paths.reports / "nc_threshold.json"
        if out.exists():
            return
        benign_ids, _ = self.model_ids("benign")
        badnets_ids, _ = self.model_ids("badnets")
        benign_idx = [self._nc_index("full", mid) for mid in benign_ids[:self.cfg.n_nc_benign]]
        badnets_idx = [self._nc_index("full", mid) for mid in badnets_ids]
        threshold = reversal.calibrate_threshold(benign_idx, badnets_idx)
        out.write_text(json.dumps({
            "threshold": threshold,
            "benign_indices": benign_idx,
            "badnets_indices": badnets_idx,
        }, indent=1, sort_keys=True))

    def _nc_index(self, region: str, model_id: str) -> float:
        blob = json.loads((self.paths.reports / f"nc_{region}_{model_id}.json").read_text())
        return blob["anomaly_index"]

    def stage_nc_clipped(self) -> None:
        sgba_ids, _ = self.model_ids("sgba")
        threshold = self.nc_threshold()
        tasks = []
        for region in ("cutting", "hollow"):
            tasks += [(self._cfg_dict(), mid, region, threshold) for mid in sgba_ids
                      if not (self.paths.reports / f"nc_{region}_{mid}.json").exists()]
        self._map(_inspect_nc_task, tasks)

    def nc_threshold(self) -> float:
        return json.loads((self.paths.reports / "nc_threshold.json").read_text())["threshold"]

    def shadow_plan(self) -> list[tuple[str, str, int]]:
        m = self.cfg.mntd
        kinds = []
        kinds += [("shadow_benign", i) for i in range(m.n_shadow_benign)]
        malicious = ("trojM", "trojB", "sgba")
        for i in range(m.n_shadow_malicious):
            kinds.append((f"shadow_{malicious[i % 3]}", i))
        plan = []
        for j, (kind, i) in enumerate(kinds):
            plan.append((kind, f"{kind}_{i:03d}", self.cfg.seed + 50000 + j))
        return plan

    def stage_shadows(self) -> None:
        tasks = [(self._cfg_dict(), kind, mid, seed)
                 for kind, mid, seed in self.shadow_plan() if not self.zoo.exists(mid)]
        self._map(_train_zoo_model, tasks)

    def stage_detector(self) -> None:
        if self.paths.detector.with_suffix(".json").exists():
            return
        zoo = self.zoo
        benign, malicious = [], []
        for kind, mid, _ in self.shadow_plan():
            if not zoo.exists(mid):
                continue
            record = zoo.get(mid)
            (benign if kind == "shadow_benign" else malicious).append(record)
        detector = inspectors.train_meta_detector(
            ModelPopulation(benign, "benign"), ModelPopulation(malicious, "malicious"),
            mode=self.cfg.mntd.mode, K=self.cfg.mntd.K, epochs=self.cfg.mntd.epochs,
            seed=self.cfg.seed + 90000, lr=self.cfg.mntd.lr,
            ensemble=self.cfg.mntd.ensemble, val_fraction=self.cfg.mntd.val_fraction)
        detector.save(self.paths.detector)

    def stage_mntd_scores(self) -> None:
        out = self.paths.reports / "mntd_scores.json"
        if out.exists():
            return
        detector = inspectors.MetaDetector.load(self.paths.detector)
        rows = {}
        for mid in self.nc_eval_ids():
            outcome = inspectors.score_model(detector, self.zoo.get(mid))
            rows[mid] = {"score": outcome.score, "verdict": bool(outcome.verdict)}
        out.write_text(json.dumps({
            "threshold": detector.threshold, "scores": rows,
        }, indent=1, sort_keys=True))
        plots.save_score_scatter(
            {mid: rows[mid]["score"] for mid in rows},
            {mid: self.zoo.manifest(mid)["provenance"] for mid in rows},
            detector.threshold, self.paths.plots / "mntd_scores.png")

    def stage_variance_report(self) -> None:
        out = self.paths.reports / "variance_gap.json"
        if out.exists():
            return
        benign_ids, _ = self.model_ids("benign")
        benign_pop = ModelPopulation([self.zoo.get(m) for m in benign_ids], "benign")
        blob = {}
        for kind in ("badnets", "sgba"):
            ids, _ = self.model_ids(kind)
            if not ids:
                continue
            pop = ModelPopulation([self.zoo.get(m) for m in ids], "malicious")
            blob[kind] = inspectors.variance_gap_report(benign_pop, pop)
            plots.save_variance_panels(
                benign_pop.variance_samples(), pop.variance_samples(),
                benign_pop.records[0].module.weight_layer_names(), kind,
                self.paths.plots / f"variance_{kind}.png")
        out.write_text(json.dumps(blob, indent=1, sort_keys=True))

    def stage_report(self) -> None:
        report = build_report(self.cfg, self.paths)
        (self.paths.reports / "report.json").write_text(
            json.dumps(report, indent=1, sort_keys=True))
        write_report_csv(report, self.paths.reports / "report.csv")

    # -- drivers ----------------------------------------------------------
    def run_attack_prereqs(self) -> None:
        self._stage("benign", self.stage_benign)
        self._stage("scapegoats", self.stage_scapegoats)
        self._stage("variance_profile", self.stage_variance_profile)

    def run_all(self) -> dict:
        try:
            self.run_attack_prereqs()
            self._stage("badnets", self.stage_badnets)
            self._stage("sgba", self.stage_sgba)
            self._stage("nc_full", self.stage_nc_full)
            self._stage("calibrate", self.stage_calibrate)
            self._stage("nc_clipped", self.stage_nc_clipped)
            self._stage("shadows", self.stage_shadows)
            self._stage("detector", self.stage_detector)
            self._stage("mntd_scores", self.stage_mntd_scores)
            self._stage("variance_report", self.stage_variance_report)
            self._stage("report", self.stage_report)
        finally:
            self.close()
        return json.loads((self.paths.reports / "report.json").read_text())


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

def variance_inspection(record, baseline: np.ndarray, coefficient: float) -> dict:
    """Per-model weight-variance verdict: flag when any layer exceeds w * baseline."""
    ratios = modelkit.layer_weight_variance(record) / baseline
    score = float(ratios.max())
    return {"score": score, "verdict": bool(score > coefficient),
            "layer_ratios": [float(r) for r in ratios]}


def build_report(cfg: ExperimentConfig, paths: BenchPaths) -> dict:
    zoo = ModelZoo(paths.zoo)
    threshold = json.loads((paths.reports / "nc_threshold.json").read_text())
    mntd = json.loads((paths.reports / "mntd_scores.json").read_text())
    profile = json.loads(paths.variance_profile.read_text())
    baseline = np.array(profile["baseline"])

    rows = []
    pipeline_ids = []
    for kind in ("benign", "badnets", "sgba"):
        count = {"benign": cfg.n_benign, "badnets": cfg.n_badnets, "sgba": cfg.n_sgba}[kind]
        pipeline_ids += [f"{kind}_{i:03d}" for i in range(count)]
    nc_eval = set()
    for kind, n in (("benign", cfg.n_nc_benign), ("badnets", cfg.n_badnets),
                    ("sgba", cfg.n_sgba)):
        nc_eval |= {f"{kind}_{i:03d}" for i in range(n)}

    for mid in pipeline_ids:
        manifest = zoo.manifest(mid)
        row = {
            "model_id": mid,
            "provenance": manifest["provenance"],
            "clean_accuracy": manifest["metrics"].get("clean_accuracy"),
            "attack_success_rate": manifest["metrics"].get("attack_success_rate"),
            "part_a_to_target": manifest["metrics"].get("part_a_to_target"),
            "part_b_to_target": manifest["metrics"].get("part_b_to_target"),
            "target_class": manifest.get("extra", {}).get("target_class"),
        }
        record = zoo.get(mid)
        vinsp = variance_inspection(record, baseline, cfg.variance_coefficient)
        row["variance_score"] = vinsp["score"]
        row["variance_verdict"] = vinsp["verdict"]
        if mid in nc_eval:
            for region in ("full", "cutting", "hollow"):
                path = paths.reports / f"nc_{region}_{mid}.json"
                if path.exists():
                    blob = json.loads(path.read_text())
                    row[f"nc_{region}_index"] = blob["anomaly_index"]
                    row[f"nc_{region}_verdict"] = blob["anomaly_index"] > threshold["threshold"]
        if mid in mntd["scores"]:
            row["mntd_score"] = mntd["scores"][mid]["score"]
            row["mntd_verdict"] = mntd["scores"][mid]["verdict"]
        rows.append(row)

    aggregates = compute_aggregates(rows)
    return {
        "config_hash": cfg.config_hash(),
        "dataset": cfg.dataset,
        "nc_threshold": threshold["threshold"],
        "mntd_threshold": mntd["threshold"],
        "rows": rows,
        "aggregates": aggregates,
        "variance_gap": json.loads((paths.reports / "variance_gap.json").read_text()),
    }


def compute_aggregates(rows: list[dict]) -> dict:
    """Detection rate per malicious provenance and false-positive rate on benign.

    DR: fraction of backdoored models flagged malicious; FPR: fraction of
    benign models wrongly flagged. Recomputable from the report rows.
    """
    detectors = {
        "nc": "nc_full_verdict",
        "nc-cutting": "nc_cutting_verdict",
        "nc-hollow": "nc_hollow_verdict",
        "variance": "variance_verdict",
        "mntd": "mntd_verdict",
    }
    out: dict = {}
    for det, key in detectors.items():
        entry: dict = {}
        for prov in ("benign", "badnets", "sgba"):
            flags = [row[key] for row in rows
                     if row["provenance"] == prov and key in row and row[key] is not None]
            if not flags:
                continue
            rate = float(np.mean(flags))
            entry["fpr" if prov == "benign" else f"dr_{prov}"] = rate
            entry[f"n_{prov}"] = len(flags)
        if entry:
            out[det] = entry
    benign_acc = [r["clean_accuracy"] for r in rows if r["provenance"] == "benign"]
    out["clean_accuracy_benign_mean"] = float(np.mean(benign_acc)) if benign_acc else None
    for prov in ("badnets", "sgba"):
        accs = [r["clean_accuracy"] for r in rows if r["provenance"] == prov]
        asrs = [r["attack_success_rate"] for r in rows if r["provenance"] == prov]
        if accs:
            out[f"clean_accuracy_{prov}_mean"] = float(np.mean(accs))
            out[f"asr_{prov}_mean"] = float(np.mean(asrs))
    sgba_idx = [r.get("nc_full_index") for r in rows if r["provenance"] == "sgba"]
    sgba_idx = [v for v in sgba_idx if v is not None]
    if sgba_idx:
        out["nc_sgba_index_mean"] = float(np.mean(sgba_idx))
    for region in ("cutting", "hollow"):
        vals = [r.get(f"nc_{region}_index") for r in rows if r["provenance"] == "sgba"]
        vals = [v for v in vals if v is not None]
        if vals:
            out[f"nc_{region}_sgba_index_mean"] = float(np.mean(vals))
    return out


def write_report_csv(report: dict, path: Path) -> None:
    rows = report["rows"]
    keys: list[str] = []
    for row in rows:
        for key in row:
            if key not in keys:
                keys.append(key)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train_clean(cfg: ExperimentConfig, resume: bool = True) -> list[str]:
    pipe = BenchPipeline(cfg, resume)
    try:
        pipe._stage("benign", pipe.stage_benign)
    finally:
        pipe.close()
    return pipe.model_ids("benign")[0]


def cmd_reverse(cfg: ExperimentConfig, model_id: str = "benign_000",
                resume: bool = True) -> Path:
    pipe = BenchPipeline(cfg, resume)
    try:
        pipe._stage("benign", pipe.stage_benign)
        if model_id != "benign_000":
            raise BenchError("scapegoats are derived from benign_000 in this pipeline")
        pipe._stage("scapegoats", pipe.stage_scapegoats)
    finally:
        pipe.close()
    return pipe.paths.scapegoats.with_suffix(".npz")


def cmd_attack(cfg: ExperimentConfig, resume: bool = True) -> list[str]:
    pipe = BenchPipeline(cfg, resume)
    try:
        pipe.run_attack_prereqs()
        pipe._stage("badnets", pipe.stage_badnets)
        pipe._stage("sgba", pipe.stage_sgba)
    finally:
        pipe.close()
    return pipe.model_ids("badnets")[0] + pipe.model_ids("sgba")[0]


def cmd_inspect(cfg: ExperimentConfig, detector: str,
                model_ids: list[str] | None = None, resume: bool = True) -> dict:
    if detector not in DETECTORS:
        raise BenchError(f"unknown detector {detector!r}; choose from {DETECTORS}")
    pipe = BenchPipeline(cfg, resume)
    try:
        if len(pipe.zoo) == 0:
            raise BenchError("model zoo is empty; run train-clean/attack first")
        pipe.run_attack_prereqs()
        pipe._stage("badnets", pipe.stage_badnets)
        pipe._stage("sgba", pipe.stage_sgba)
        if detector in ("nc", "nc-cutting", "nc-hollow"):
            pipe._stage("nc_full", pipe.stage_nc_full)
            pipe._stage("calibrate", pipe.stage_calibrate)
            if detector != "nc":
                pipe._stage("nc_clipped", pipe.stage_nc_clipped)
            region = {"nc": "full", "nc-cutting": "cutting", "nc-hollow": "hollow"}[detector]
            ids = model_ids or (pipe.nc_eval_ids() if region == "full"
                                else pipe.model_ids("sgba")[0])
            out = {}
            for mid in ids:
                path = pipe.paths.reports / f"nc_{region}_{mid}.json"
                if not path.exists():
                    pipe._map(_inspect_nc_task,
                              [(pipe._cfg_dict(), mid, region, pipe.nc_threshold())])
                out[mid] = json.loads(path.read_text())
            return out
        if detector == "variance":
            pipe._stage("variance_report", pipe.stage_variance_report)
            return json.loads((pipe.paths.reports / "variance_gap.json").read_text())
        pipe._stage("shadows", pipe.stage_shadows)
        pipe._stage("detector", pipe.stage_detector)
        pipe._stage("mntd_scores", pipe.stage_mntd_scores)
        return json.loads((pipe.paths.reports / "mntd_scores.json").read_text())
    finally:
        pipe.close()


def cmd_bench(cfg: ExperimentConfig, resume: bool = True) -> dict:
    return BenchPipeline(cfg, resume).run_all()
