"""ML-based model inspection: weight statistics and a query-set meta-detector.

Two complementary detectors over populations of trained models:

- :func:`variance_gap_report` compares per-layer weight-variance
  distributions between benign and malicious populations (backdoor training
  tends to inflate later-layer variances unless the attacker clamps them);
- a lightweight meta-detector scores a model from its outputs on a small
  set of optimized query images. In ``robust`` mode the binary classifier
  stays frozen at random initialization and only the query images train,
  which resists gradient-aware adaptive attackers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import attack, modelkit
from .attack import PoisonPolicy, ScapegoatSet, VarianceLimit
from .modelkit import ModelRecord, layer_weight_variance, to_batch_tensor

SHADOW_KINDS = ("benign", "trojM", "trojB", "sgba")


@dataclass
class ModelPopulation:
    records: list[ModelRecord]
    label: str                      # benign | malicious

    def __post_init__(self):
        if self.label not in ("benign", "malicious"):
            raise ValueError(f"population label must be benign/malicious, got {self.label!r}")
        archs = {rec.arch.name for rec in self.records}
        if len(archs) > 1:
            raise ValueError(f"mixed architectures in population: {sorted(archs)}")
        for rec in self.records:
            expect_benign = self.label == "benign"
            if (rec.provenance == "benign") != expect_benign:
                raise ValueError(
                    f"record provenance {rec.provenance!r} inconsistent with "
                    f"population label {self.label!r}")

    def __len__(self) -> int:
        return len(self.records)

    def variance_samples(self) -> np.ndarray:
        """(n_models, n_layers) per-layer weight variances."""
        return np.stack([layer_weight_variance(rec) for rec in self.records])


# ---------------------------------------------------------------------------
# shadow zoo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShadowOpts:
    """Randomization ranges for shadow-model training (jumbo style)."""

    subsample_range: tuple[float, float] = (0.6, 1.0)
    epochs_range: tuple[int, int] = (3, 8)          # inclusive
    sgba_epochs_range: tuple[int, int] = (8, 12)
    patch_fraction_range: tuple[float, float] = (0.1, 0.3)
    blend_fraction_range: tuple[float, float] = (0.05, 0.15)
    blend_alpha: float = 0.2
    sgba_fraction_range: tuple[float, float] = (0.2, 0.3)
    part_size_range: tuple[int, ...] = (3, 4, 5)
    single_part_label_rule: str = "uniform"
    lr: float = 1e-3
    batch_size: int = 64
    dropout_conv: float = 0.5
    dropout_fc: float = 0.5


def train_one_shadow(kind: str, data, seed: int,
                     scapegoats: ScapegoatSet | None = None,
                     limit: VarianceLimit | None = None,
                     opts: ShadowOpts = ShadowOpts()) -> ModelRecord:
    """Train a single shadow model of the given kind, fully seeded.

    ``sgba`` shadows require ``scapegoats`` and ``limit``. Trigger geometry,
    poison fractions, subsample and epoch count are all drawn from ``opts``
    ranges using ``seed``.
    """
    if kind not in SHADOW_KINDS:
        raise ValueError(f"unknown shadow kind {kind!r}")
    rng = np.random.default_rng(seed)
    sub_frac = float(rng.uniform(*opts.subsample_range))
    keep = rng.permutation(data.n_train)[:max(1, int(round(sub_frac * data.n_train)))]
    images = data.train_images[keep]
    labels = data.train_labels[keep]
    target = int(rng.integers(0, data.num_classes))
    epochs = int(rng.integers(opts.epochs_range[0], opts.epochs_range[1] + 1))
    arch = modelkit.ARCH_FOR_DATASET[data.name]
    hook = None

    if kind == "benign":
        pass
    elif kind == "trojM":
        size = int(rng.integers(2, 6))
        H, W, C = data.input_shape
        rect = (int(rng.integers(0, H - size + 1)), int(rng.integers(0, W - size + 1)),
                size, size)
        value = float(rng.uniform(0.7, 1.0))
        patch = attack.BadnetsPatch(np.ones((size, size), dtype=np.float32),
                                    np.full((size, size, C), value, dtype=np.float32),
                                    rect)
        frac = float(rng.uniform(*opts.patch_fraction_range))
        k = max(1, int(round(frac * len(labels))))
        idx = rng.permutation(len(labels))[:k]
        images = np.array(images, copy=True)
        labels = np.array(labels, copy=True)
        images[idx] = patch.apply(images[idx])
        labels[idx] = target
    elif kind == "trojB":
        trig = rng.uniform(0.0, 1.0, size=data.input_shape).astype(np.float32)
        frac = float(rng.uniform(*opts.blend_fraction_range))
        k = max(1, int(round(frac * len(labels))))
        idx = rng.permutation(len(labels))[:k]
        images = np.array(images, copy=True)
        labels = np.array(labels, copy=True)
        images[idx] = (1.0 - opts.blend_alpha) * images[idx] + opts.blend_alpha * trig
        labels[idx] = target
    else:  # sgba
        if scapegoats is None or limit is None:
            raise ValueError("sgba shadows need scapegoats and a variance limit")
        spec = attack.make_trigger(scapegoats, target, opts.part_size_range,
                                   seed, data.input_shape)
        policy = PoisonPolicy(float(rng.uniform(*opts.sgba_fraction_range)), seed,
                              single_part_label_rule=opts.single_part_label_rule)
        sub_handle = data.subset(keep)
        images, labels, _ = attack.build_poisoned_set(sub_handle, spec, scapegoats, policy)
        epochs = int(rng.integers(opts.sgba_epochs_range[0], opts.sgba_epochs_range[1] + 1))
        hook = attack.make_variance_clip_hook(limit)

    record = modelkit.build_model(arch, seed, dropout_conv=opts.dropout_conv,
                                  dropout_fc=opts.dropout_fc)
    record = modelkit.train(record, images, labels, epochs=epochs, lr=opts.lr,
                            seed=seed, step_hook=hook, batch_size=opts.batch_size,
                            provenance="benign" if kind == "benign" else kind)
    if hook is not None:
        hook(record.module)
    record.extra["shadow_kind"] = kind
    record.extra["shadow_target"] = target
    return record


def build_shadow_zoo(data, counts: dict[str, int], seed: int,
                     scapegoats: ScapegoatSet | None = None,
                     limit: VarianceLimit | None = None,
                     opts: ShadowOpts = ShadowOpts(),
                     zoo=None) -> tuple[ModelPopulation, ModelPopulation]:
    """Train benign and malicious shadow populations.

    ``counts`` maps shadow kinds to counts; malicious kinds must total at
    least one. A shadow whose training diverges is retried once with a fresh
    seed, then skipped with a warning. Models are persisted when a ``zoo``
    registry is given.
    """
    unknown = set(counts) - set(SHADOW_KINDS)
    if unknown:
        raise ValueError(f"unknown shadow kinds: {sorted(unknown)}")
    malicious_total = sum(v for k, v in counts.items() if k != "benign")
    if counts.get("benign", 0) < 1 or malicious_total < 1:
        raise ValueError("need at least one benign and one malicious shadow")

    benign, malicious = [], []
    task_seed = seed
    for kind in SHADOW_KINDS:
        for i in range(counts.get(kind, 0)):
            record = None
            for attempt in range(2):
                try:
                    record = train_one_shadow(kind, data, task_seed + attempt * 7919,
                                              scapegoats, limit, opts)
                    break
                except RuntimeError as err:
                    warnings.warn(f"shadow {kind} seed {task_seed} attempt {attempt}: {err}")
            task_seed += 1
            if record is None:
                continue
            if zoo is not None:
                zoo.add(record, f"shadow_{kind}_{task_seed - 1}")
            (benign if kind == "benign" else malicious).append(record)
    return (ModelPopulation(benign, "benign"),
            ModelPopulation(malicious, "malicious"))


# ---------------------------------------------------------------------------
# weight-variance gap
# ---------------------------------------------------------------------------

def variance_gap_report(benign: ModelPopulation,
                        malicious: ModelPopulation) -> list[dict]:
    """Per-layer medians, gaps, and a rank-based separation statistic.

    ``auc`` is the probability a random malicious layer variance exceeds a
    random benign one (Mann-Whitney U scaled to [0, 1]); ``p_value`` is the
    one-sided test that malicious variances are greater.
    """
    from scipy.stats import mannwhitneyu

    if len(benign) == 0 or len(malicious) == 0:
        raise ValueError("populations must be non-empty")
    if benign.records[0].arch.name != malicious.records[0].arch.name:
        raise ValueError("architecture mismatch between populations")
    layer_names = benign.records[0].module.weight_layer_names()
    vb = benign.variance_samples()
    vm = malicious.variance_samples()
    report = []
    for i, name in enumerate(layer_names):
        if np.all(vm[:, i] == vm[0, i]) and np.all(vb[:, i] == vb[0, i]) \
                and vm[0, i] == vb[0, i]:
            auc, p = 0.5, 1.0
        else:
            stat, p = mannwhitneyu(vm[:, i], vb[:, i], alternative="greater")
            auc = float(stat) / (len(vm) * len(vb))
        report.append({
            "layer": name,
            "median_benign": float(np.median(vb[:, i])),
            "median_malicious": float(np.median(vm[:, i])),
            "gap": float(np.median(vm[:, i]) - np.median(vb[:, i])),
            "auc": float(auc),
            "p_value": float(p),
        })
    return report


# ---------------------------------------------------------------------------
# meta-detector
# ---------------------------------------------------------------------------

@dataclass
class DetectorMember:
    query_set: np.ndarray        # (K, H, W, C) in [0, 1]
    weight: np.ndarray           # (K * num_classes,)
    bias: float
    initial_weight: np.ndarray   # classifier init, kept for isolation checks

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}_query": self.query_set, f"{prefix}_weight": self.weight,
                f"{prefix}_bias": np.array([self.bias]),
                f"{prefix}_init": self.initial_weight}


@dataclass
class MetaDetector:
    """Ensemble of query-set probes with linear scorers over softmax outputs."""

    members: list[DetectorMember]
    mode: str                    # full | robust
    threshold: float
    num_classes: int

    @property
    def query_set(self) -> np.ndarray:
        """Stacked query images across ensemble members."""
        return np.concatenate([m.query_set for m in self.members])

    def save(self, stem) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for i, m in enumerate(self.members):
            arrays.update(m.to_arrays(f"m{i}"))
        np.savez_compressed(stem.with_suffix(".npz"), **arrays)
        stem.with_suffix(".json").write_text(json.dumps({
            "mode": self.mode, "threshold": self.threshold,
            "num_classes": self.num_classes, "ensemble": len(self.members),
        }))

    @staticmethod
    def load(stem) -> "MetaDetector":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        blob = np.load(stem.with_suffix(".npz"))
        members = [DetectorMember(blob[f"m{i}_query"], blob[f"m{i}_weight"],
                                  float(blob[f"m{i}_bias"][0]), blob[f"m{i}_init"])
                   for i in range(meta["ensemble"])]
        return MetaDetector(members, meta["mode"], meta["threshold"],
                            meta["num_classes"])


@dataclass(frozen=True)
class DetectionOutcome:
    score: float
    verdict: bool                # True: flagged malicious
    threshold: float


@torch.no_grad()
def query_features(record: ModelRecord, query_set: np.ndarray) -> np.ndarray:
    """Concatenated softmax outputs of the model on the query images."""
    logits = record.module(to_batch_tensor(np.clip(query_set, 0.0, 1.0)))
    return torch.softmax(logits, dim=1).flatten().numpy()


def _member_score(member: DetectorMember, record: ModelRecord) -> float:
    feats = query_features(record, member.query_set)
    return float(feats @ member.weight + member.bias)


def _train_member(shadows: list[tuple[ModelRecord, int]], mode: str, K: int,
                  epochs: int, seed: int, num_classes: int,
                  input_shape: tuple[int, int, int], lr: float,
                  model_batch: int = 8) -> DetectorMember:
    gen = torch.Generator().manual_seed(seed)
    H, W, C = input_shape
    query = torch.rand((K, C, H, W), generator=gen).requires_grad_(True)
    weight = torch.randn((K * num_classes,), generator=gen) * 0.1
    initial_weight = weight.clone().numpy()
    bias = torch.zeros(())
    if mode == "full":
        weight.requires_grad_(True)
        bias.requires_grad_(True)
        params = [query, weight, bias]
    else:
        params = [query]
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    order = np.arange(len(shadows))
    for _ in range(epochs):
        rng.shuffle(order)
        for start in range(0, len(order), model_batch):
            chunk = order[start:start + model_batch]
            losses = []
            for i in chunk:
                record, label = shadows[i]
                feats = torch.softmax(record.module(query.clamp(0.0, 1.0)), dim=1).flatten()
                score = (feats * weight).sum() + bias
                losses.append(F.binary_cross_entropy_with_logits(
                    score, torch.tensor(float(label))))
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise RuntimeError("meta-detector training diverged (non-finite loss)")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return DetectorMember(
        query_set=np.transpose(query.detach().clamp(0.0, 1.0).numpy(), (0, 2, 3, 1)),
        weight=weight.detach().numpy(),
        bias=float(bias.detach()),
        initial_weight=initial_weight,
    )


def train_meta_detector(benign: ModelPopulation, malicious: ModelPopulation,
                        mode: str = "robust", K: int = 10, epochs: int = 40,
                        seed: int = 0, lr: float = 0.03, ensemble: int = 10,
                        val_fraction: float = 0.25) -> MetaDetector:
    """Optimize query images (and, in ``full`` mode, the classifier) on shadows.

    A validation slice of the shadows calibrates the decision threshold as
    the midpoint between benign and malicious median ensemble scores.
    """
    if mode not in ("full", "robust"):
        raise ValueError(f"mode must be full/robust, got {mode!r}")
    if K < 1:
        raise ValueError("need at least one query image")
    if len(benign) == 0 or len(malicious) == 0:
        raise ValueError("both shadow populations must be non-empty")
    labeled = [(rec, 0) for rec in benign.records] + [(rec, 1) for rec in malicious.records]
    num_classes = labeled[0][0].arch.num_classes
    input_shape = labeled[0][0].arch.input_shape

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labeled))
    n_val = max(2, int(round(val_fraction * len(labeled))))
    val = [labeled[i] for i in order[:n_val]]
    train_shadows = [labeled[i] for i in order[n_val:]]
    if not any(lab == 0 for _, lab in train_shadows) or \
       not any(lab == 1 for _, lab in train_shadows):
        raise ValueError("shadow split left a single-class training population")

    members = [_train_member(train_shadows, mode, K, epochs, seed + 31 * i,
                             num_classes, input_shape, lr)
               for i in range(ensemble)]

    val_scores: dict[int, list[float]] = {0: [], 1: []}
    for record, label in val:
        score = float(np.mean([_member_score(m, record) for m in members]))
        val_scores[label].append(score)
    threshold = (float(np.median(val_scores[0])) + float(np.median(val_scores[1]))) / 2.0
    return MetaDetector(members, mode, threshold, num_classes)


def score_model(detector: MetaDetector, record: ModelRecord) -> DetectionOutcome:
    """Mean ensemble score for one model, compared against the threshold."""
    if record.arch.num_classes != detector.num_classes:
        raise ValueError(
            f"model has {record.arch.num_classes} classes, detector expects "
            f"{detector.num_classes}")
    score = float(np.mean([_member_score(m, record) for m in detector.members]))
    return DetectionOutcome(score=score, verdict=score > detector.threshold,
                            threshold=detector.threshold)
