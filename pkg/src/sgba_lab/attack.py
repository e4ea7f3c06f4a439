"""The scapegoat attack: split triggers, poisoning, variance-limited training.

The attack hides a two-part real trigger behind a scapegoat: the benign
reversed trigger of the target class obtained from a clean model. Training
data is poisoned with (a) the full two-part trigger relabeled to the target,
(b) single parts relabeled away from the target so the backdoor only fires
when both parts are present, and (c) every class's benign trigger relabeled
to its own class so per-class reversal finds nothing unusual. During
training, each layer's weights are repeatedly clamped so their variance
cannot exceed a multiple of the benign-population average, hiding the model
from weight-statistics inspectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import modelkit
from .modelkit import ArchitectureId, ModelRecord, layer_weight_variance
from .reversal import (Rect, ReversalSettings, ReversedTrigger, SearchRegion,
                       reverse_trigger, stamp)


class ScapegoatError(RuntimeError):
    """A clean model failed to yield acceptable benign triggers."""


class PlacementError(RuntimeError):
    """No valid part placement exists for the given geometry."""


# ---------------------------------------------------------------------------
# trigger geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerPart:
    rect: Rect                # row, col, height, width
    pattern: np.ndarray       # (h, w, C) in [0, 1]

    def __post_init__(self):
        self.pattern.setflags(write=False)

    def full_mask(self, image_shape: tuple[int, int, int]) -> np.ndarray:
        """Binary mask of this part over the whole pixel grid."""
        mask = np.zeros(image_shape[:2], dtype=np.float32)
        r, c, h, w = self.rect
        mask[r:r + h, c:c + w] = 1.0
        return mask


@dataclass(frozen=True)
class TriggerSpec:
    part_a: TriggerPart
    part_b: TriggerPart
    target_class: int

    def parts(self) -> tuple[TriggerPart, TriggerPart]:
        return (self.part_a, self.part_b)

    def joint_box(self) -> Rect:
        """Tight bounding box of both parts."""
        rects = [self.part_a.rect, self.part_b.rect]
        r0 = min(r for r, _, _, _ in rects)
        c0 = min(c for _, c, _, _ in rects)
        r1 = max(r + h for r, _, h, _ in rects)
        c1 = max(c + w for _, c, _, w in rects)
        return (r0, c0, r1 - r0, c1 - c0)

    def to_json(self) -> dict:
        return {
            "target_class": self.target_class,
            "parts": [{"rect": list(p.rect), "pattern": p.pattern.tolist()}
                      for p in self.parts()],
        }

    @staticmethod
    def from_json(blob: dict) -> "TriggerSpec":
        parts = [TriggerPart(tuple(p["rect"]),
                             np.asarray(p["pattern"], dtype=np.float32))
                 for p in blob["parts"]]
        return TriggerSpec(parts[0], parts[1], int(blob["target_class"]))


def _rects_disjoint(a: Rect, b: Rect) -> bool:
    ra, ca, ha, wa = a
    rb, cb, hb, wb = b
    return ra + ha <= rb or rb + hb <= ra or ca + wa <= cb or cb + wb <= ca


def validate_placement(spec: TriggerSpec, scapegoat_box: Rect) -> bool:
    """True iff no scapegoat-box-sized window can cover both parts at once.

    Translation-invariant: holds exactly when the joint bounding box of the
    two parts exceeds the scapegoat box in height or in width.
    """
    _, _, jh, jw = spec.joint_box()
    _, _, bh, bw = scapegoat_box
    return jh > bh or jw > bw


def stamp_parts(images: np.ndarray, spec: TriggerSpec,
                parts: str = "both") -> np.ndarray:
    """Stamp the real trigger (or a single part) onto an image batch.

    ``parts`` is one of ``both``, ``a``, ``b``.
    """
    if parts not in ("both", "a", "b"):
        raise ValueError(f"parts must be both/a/b, got {parts!r}")
    out = np.array(images, dtype=np.float32, copy=True)
    selected = {"both": (spec.part_a, spec.part_b),
                "a": (spec.part_a,), "b": (spec.part_b,)}[parts]
    for part in selected:
        r, c, h, w = part.rect
        out[..., r:r + h, c:c + w, :] = part.pattern
    return out


# ---------------------------------------------------------------------------
# scapegoats
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScapegoatSet:
    """Per-class benign triggers reversed from one clean model.

    One set serves every target class: the scapegoat for target ``t`` is
    simply the entry for ``t``.
    """

    triggers: dict[int, ReversedTrigger]
    seed: int
    source_model: str = ""

    SUPPORT_THRESHOLD = 0.1

    def scapegoat(self, target: int) -> ReversedTrigger:
        return self.triggers[target]

    def scapegoat_box(self, target: int) -> Rect:
        """Tight bounding box of the target trigger's mask support."""
        mask = self.triggers[target].mask
        support = np.argwhere(mask > self.SUPPORT_THRESHOLD)
        if len(support) == 0:
            raise ScapegoatError(f"scapegoat mask for class {target} has empty support")
        r0, c0 = support.min(axis=0)
        r1, c1 = support.max(axis=0)
        return (int(r0), int(c0), int(r1 - r0 + 1), int(c1 - c0 + 1))

    def save(self, stem) -> None:
        import pathlib
        stem = pathlib.Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        meta = {"seed": self.seed, "source_model": self.source_model, "classes": {}}
        for cls, trig in self.triggers.items():
            arrays[f"mask_{cls}"] = trig.mask
            arrays[f"pattern_{cls}"] = trig.pattern
            meta["classes"][str(cls)] = {"l1_norm": trig.l1_norm, "efficacy": trig.efficacy}
        np.savez_compressed(stem.with_suffix(".npz"), **arrays)
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @staticmethod
    def load(stem) -> "ScapegoatSet":
        import pathlib
        stem = pathlib.Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        blob = np.load(stem.with_suffix(".npz"))
        triggers = {}
        for cls_s, info in meta["classes"].items():
            cls = int(cls_s)
            triggers[cls] = ReversedTrigger.make(
                cls, blob[f"mask_{cls}"], blob[f"pattern_{cls}"], info["efficacy"])
        return ScapegoatSet(triggers, meta["seed"], meta["source_model"])


def derive_scapegoats(clean_model: ModelRecord, holdout: np.ndarray, seed: int,
                      budget: int = 500,
                      settings: ReversalSettings = ReversalSettings(),
                      retries: int = 2) -> ScapegoatSet:
    """Reverse a benign trigger for every class of a clean model.

    Each class must reach the efficacy acceptance threshold; failed classes
    are retried with fresh seeds, and a persistent failure aborts since the
    clean model is then unusable as a scapegoat source.
    """
    if clean_model.provenance != "benign":
        raise ValueError("scapegoats must come from a benign model")
    triggers: dict[int, ReversedTrigger] = {}
    for cls in range(clean_model.arch.num_classes):
        best: ReversedTrigger | None = None
        for attempt in range(retries + 1):
            trig = reverse_trigger(clean_model, cls, holdout, SearchRegion.full(),
                                   budget, seed + 1000 * cls + attempt, settings)
            if best is None or trig.efficacy > best.efficacy:
                best = trig
            if best.passes(settings.efficacy_threshold):
                break
        if not best.passes(settings.efficacy_threshold):
            raise ScapegoatError(
                f"class {cls}: best efficacy {best.efficacy:.3f} below "
                f"{settings.efficacy_threshold} after {retries + 1} attempts")
        triggers[cls] = best
    return ScapegoatSet(triggers, seed)


def make_trigger(scapegoats: ScapegoatSet, target: int,
                 size_range: tuple[int, ...], seed: int,
                 image_shape: tuple[int, int, int],
                 max_attempts: int = 500) -> TriggerSpec:
    """Draw a two-part trigger whose parts defeat scapegoat-area coverage.

    Part side lengths come from ``size_range``; patterns are solid bright
    values with slight per-pixel jitter (high contrast against image
    content). Placements are rejection-sampled until the parts are disjoint
    and :func:`validate_placement` accepts them.
    """
    if not size_range:
        raise ValueError("size_range must be non-empty")
    rng = np.random.default_rng(seed)
    H, W, C = image_shape
    box = scapegoats.scapegoat_box(target)

    def draw_part() -> TriggerPart | None:
        h = int(rng.choice(size_range))
        w = int(rng.choice(size_range))
        if h > H or w > W:
            return None
        r = int(rng.integers(0, H - h + 1))
        c = int(rng.integers(0, W - w + 1))
        base = rng.uniform(0.75, 1.0)
        pattern = np.clip(base + rng.normal(0.0, 0.02, size=(h, w, C)), 0.0, 1.0)
        return TriggerPart((r, c, h, w), pattern.astype(np.float32))

    for _ in range(max_attempts):
        pa, pb = draw_part(), draw_part()
        if pa is None or pb is None:
            continue
        if not _rects_disjoint(pa.rect, pb.rect):
            continue
        spec = TriggerSpec(pa, pb, target)
        if validate_placement(spec, box):
            return spec
    raise PlacementError(
        f"no valid placement in {max_attempts} attempts "
        f"(sizes {size_range}, scapegoat box {box}, image {H}x{W})")


# ---------------------------------------------------------------------------
# poisoning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoisonPolicy:
    """Injection budget and relabeling rules.

    ``total_poison_fraction`` covers the real trigger, both single parts and
    every benign trigger together, split in (nearly) equal shares.
    ``single_part_label_rule`` is ``uniform`` (fresh non-target label per
    sample) or ``fixed`` (one non-target label per part, drawn once).
    """

    total_poison_fraction: float
    seed: int
    single_part_label_rule: str = "uniform"

    def __post_init__(self):
        if not (0.1 <= self.total_poison_fraction <= 0.4):
            raise ValueError(
                f"total_poison_fraction must be in [0.1, 0.4], got {self.total_poison_fraction}")
        if self.single_part_label_rule not in ("uniform", "fixed"):
            raise ValueError(f"unknown single_part_label_rule {self.single_part_label_rule!r}")


@dataclass
class PoisonManifest:
    """Which training index got which trigger kind, and how it was relabeled."""

    n_total: int
    entries: dict[int, tuple[str, int, int]] = field(default_factory=dict)
    # index -> (kind, original label, new label)

    def add(self, index: int, kind: str, original: int, new: int) -> None:
        if index in self.entries:
            raise ValueError(f"index {index} poisoned twice")
        self.entries[index] = (kind, original, new)

    def category_of(self, index: int) -> str:
        return self.entries.get(index, ("clean",))[0]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {"clean": self.n_total - len(self.entries)}
        for kind, _, _ in self.entries.values():
            out[kind] = out.get(kind, 0) + 1
        return out

    def poisoned_indices(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "n_total": self.n_total,
            "entries": {str(i): list(v) for i, v in sorted(self.entries.items())},
        }

    @staticmethod
    def from_json(blob: dict) -> "PoisonManifest":
        man = PoisonManifest(n_total=blob["n_total"])
        for i, (kind, orig, new) in blob["entries"].items():
            man.add(int(i), kind, int(orig), int(new))
        return man


def _stamp_scapegoat(images: np.ndarray, trig: ReversedTrigger) -> np.ndarray:
    return stamp(images, trig.mask, trig.pattern)


def build_poisoned_set(data, spec: TriggerSpec, scapegoats: ScapegoatSet,
                       policy: PoisonPolicy,
                       exclude_indices: np.ndarray | None = None):
    """Assemble the scapegoat-attack training set.

    Returns ``(images, labels, manifest)``. Categories, in nearly equal
    shares summing to the policy's total fraction:

    - ``real``: both parts stamped, relabeled to the target class;
    - ``part_a`` / ``part_b``: one part stamped, relabeled to a non-target
      class per the policy's rule;
    - ``benign_<c>``: class ``c``'s benign trigger stamped, relabeled to
      ``c`` (for the target class this is the scapegoat itself).

    ``exclude_indices`` (e.g. a defender holdout, as positions into the train
    split) are never poisoned, though they remain in the output as clean
    samples.
    """
    num_classes = data.num_classes
    images = np.array(data.train_images, dtype=np.float32, copy=True)
    labels = np.array(data.train_labels, copy=True)
    n = len(labels)
    kinds = ["real", "part_a", "part_b"] + [f"benign_{c}" for c in range(num_classes)]
    k_each = int(round(policy.total_poison_fraction * n / len(kinds)))
    if k_each == 0:
        raise ValueError(
            f"dataset too small: {n} samples give an empty share per trigger kind")

    rng = np.random.default_rng(policy.seed)
    eligible = np.arange(n)
    if exclude_indices is not None:
        eligible = np.setdiff1d(eligible, np.asarray(exclude_indices))
    if len(eligible) < k_each * len(kinds):
        raise ValueError("not enough unexcluded samples for the poison budget")
    order = rng.permutation(eligible)

    target = spec.target_class
    non_target = [c for c in range(num_classes) if c != target]
    if policy.single_part_label_rule == "fixed":
        fixed_a, fixed_b = rng.choice(non_target, size=2, replace=False)

    manifest = PoisonManifest(n_total=n)
    cursor = 0
    for kind in kinds:
        idx = order[cursor:cursor + k_each]
        cursor += k_each
        if kind == "real":
            images[idx] = stamp_parts(images[idx], spec, "both")
            new = np.full(len(idx), target, dtype=labels.dtype)
        elif kind in ("part_a", "part_b"):
            which = kind[-1]
            images[idx] = stamp_parts(images[idx], spec, which)
            if policy.single_part_label_rule == "fixed":
                lab = fixed_a if which == "a" else fixed_b
                new = np.full(len(idx), lab, dtype=labels.dtype)
            else:
                new = rng.choice(non_target, size=len(idx)).astype(labels.dtype)
        else:
            cls = int(kind.split("_", 1)[1])
            images[idx] = _stamp_scapegoat(images[idx], scapegoats.scapegoat(cls))
            new = np.full(len(idx), cls, dtype=labels.dtype)
        for i, nl in zip(idx, new):
            manifest.add(int(i), kind, int(labels[i]), int(nl))
        labels[idx] = new
    return images, labels, manifest


# ---------------------------------------------------------------------------
# BadNets baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BadnetsPatch:
    mask: np.ndarray       # (h, w) in [0, 1]
    pattern: np.ndarray    # (h, w, C) in [0, 1]
    rect: Rect

    def __post_init__(self):
        self.mask.setflags(write=False)
        self.pattern.setflags(write=False)

    def apply(self, images: np.ndarray) -> np.ndarray:
        out = np.array(images, dtype=np.float32, copy=True)
        r, c, h, w = self.rect
        m = self.mask[..., None]
        region = out[..., r:r + h, c:c + w, :]
        out[..., r:r + h, c:c + w, :] = (1.0 - m) * region + m * self.pattern
        return out


def default_badnets_patch(image_shape: tuple[int, int, int], size: int = 4) -> BadnetsPatch:
    """White square at the bottom-right corner, the classic baseline trigger."""
    H, W, C = image_shape
    rect = (H - size - 1, W - size - 1, size, size)
    return BadnetsPatch(np.ones((size, size), dtype=np.float32),
                        np.ones((size, size, C), dtype=np.float32), rect)


def build_badnets_set(data, patch: BadnetsPatch, target: int, fraction: float,
                      seed: int, exclude_indices: np.ndarray | None = None):
    """Single-patch poisoning: stamp, relabel to the target class."""
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"poison fraction must be in (0, 1), got {fraction}")
    images = np.array(data.train_images, dtype=np.float32, copy=True)
    labels = np.array(data.train_labels, copy=True)
    n = len(labels)
    k = int(round(fraction * n))
    if k == 0:
        raise ValueError("poison fraction rounds to zero samples")
    rng = np.random.default_rng(seed)
    eligible = np.arange(n)
    if exclude_indices is not None:
        eligible = np.setdiff1d(eligible, np.asarray(exclude_indices))
    idx = rng.permutation(eligible)[:k]
    images[idx] = patch.apply(images[idx])
    manifest = PoisonManifest(n_total=n)
    for i in idx:
        manifest.add(int(i), "badnets", int(labels[i]), int(target))
    labels[idx] = target
    return images, labels, manifest


# ---------------------------------------------------------------------------
# weight-variance limitation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceLimit:
    """Per-layer variance thresholds derived from benign models."""

    baseline: np.ndarray       # benign per-layer average variance
    coefficient: float         # >= 1

    def __post_init__(self):
        self.baseline.setflags(write=False)
        if self.coefficient < 1.0:
            raise ValueError(f"limitation coefficient must be >= 1, got {self.coefficient}")
        if np.any(self.baseline <= 0):
            raise ValueError("baseline variances must be strictly positive")

    @property
    def thresholds(self) -> np.ndarray:
        return self.coefficient * self.baseline

    @staticmethod
    def from_models(records: list[ModelRecord], coefficient: float,
                    normalize: bool = True) -> "VarianceLimit":
        return VarianceLimit(benign_variance_profile(records, normalize=normalize),
                             coefficient)


def benign_variance_profile(records: list[ModelRecord],
                            normalize: bool = True) -> np.ndarray:
    """Average per-layer weight variance over a benign population.

    ``normalize=False`` keeps the bare sum over models instead of the mean,
    for sensitivity checks.
    """
    if not records:
        raise ValueError("empty benign population")
    arch = records[0].arch.name
    for rec in records:
        if rec.arch.name != arch:
            raise ValueError(f"architecture mismatch: {rec.arch.name} vs {arch}")
    stacked = np.stack([layer_weight_variance(rec) for rec in records])
    return stacked.mean(axis=0) if normalize else stacked.sum(axis=0)


def clip_to_variance_limit(arrays, limit: VarianceLimit):
    """Clamp each layer's weights into [mean - sqrt(T_i), mean + sqrt(T_i)].

    The clamp is iterated to a fixpoint of the recomputed mean so the
    operation is exactly idempotent; every weight's squared difference from
    the pre-clip layer mean ends up at most the layer threshold, which
    also bounds the layer variance by the threshold.
    """
    thresholds = limit.thresholds
    if len(arrays) != len(thresholds):
        raise ValueError(f"{len(arrays)} layers vs {len(thresholds)} thresholds")
    out = []
    for arr, thr in zip(arrays, thresholds):
        cur = np.array(arr, dtype=np.float64, copy=True)
        radius = float(np.sqrt(thr))
        for _ in range(200):
            mu = cur.mean()
            nxt = np.clip(cur, mu - radius, mu + radius)
            if np.array_equal(nxt, cur):
                break
            cur = nxt
        out.append(cur.astype(arr.dtype))
    return out


def make_variance_clip_hook(limit: VarianceLimit):
    """Training step hook clamping weight layers to the variance limit."""
    radii = [float(r) for r in np.sqrt(limit.thresholds)]

    @torch.no_grad()
    def hook(module) -> None:
        names = module.weight_layer_names()
        if len(names) != len(radii):
            raise ValueError(f"{len(names)} layers vs {len(radii)} thresholds")
        for name, radius in zip(names, radii):
            weight = getattr(module, name).weight
            for _ in range(200):
                mu = weight.mean()
                before = weight.clone()
                weight.clamp_(mu - radius, mu + radius)
                if torch.equal(weight, before):
                    break

    return hook


def train_sgba(arch: ArchitectureId | str, images: np.ndarray, labels: np.ndarray,
               limit: VarianceLimit, loss_threshold: float, max_epochs: int,
               seed: int, lr: float = 1e-3, batch_size: int = 64,
               dropout_conv: float = 0.5, dropout_fc: float = 0.5) -> ModelRecord:
    """Train on a poisoned set with per-step variance clipping.

    Stops when the epoch-mean loss drops below ``loss_threshold`` or after
    ``max_epochs``; the clip hook runs after every optimizer step and once
    more at the end, so the returned weights satisfy the variance bound
    exactly.
    """
    record = modelkit.build_model(arch, seed, dropout_conv=dropout_conv,
                                  dropout_fc=dropout_fc)
    hook = make_variance_clip_hook(limit)
    record = modelkit.train(record, images, labels, epochs=max_epochs, lr=lr,
                            seed=seed, step_hook=hook, batch_size=batch_size,
                            loss_threshold=loss_threshold, provenance="sgba")
    hook(record.module)
    record.metrics["variance_thresholds"] = [float(t) for t in limit.thresholds]
    return record


def attack_success_rate(record: ModelRecord, test_images: np.ndarray,
                        test_labels: np.ndarray, spec: TriggerSpec,
                        parts: str = "both") -> float:
    """Fraction of non-target test inputs classified as the target once stamped."""
    keep = test_labels != spec.target_class
    if not keep.any():
        raise ValueError("no non-target samples in the evaluation set")
    stamped = stamp_parts(test_images[keep], spec, parts)
    preds = modelkit.predict(record, stamped)
    return float((preds == spec.target_class).mean())
