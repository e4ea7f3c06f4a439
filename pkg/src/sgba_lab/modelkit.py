"""Small CNN classifiers: architectures, seeded training, weight statistics.

The registered architectures follow the compact conv/pool/linear stacks
conventionally used for MNIST-, CIFAR10- and GTSRB-sized inputs. Layers
marked with a dropout flag are followed by a Dropout whose rate is
configurable (0.5 by default). The final Linear produces logits; softmax is
folded into the cross-entropy loss.

Training is bit-reproducible for a fixed (architecture, data, seed, machine)
tuple: parameter init and dropout draw from a forked torch RNG seeded
explicitly, and batch order comes from a dedicated numpy generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PROVENANCES = ("benign", "badnets", "sgba", "trojM", "trojB")


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # conv | maxpool | linear
    filters: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    activation: str | None = None   # relu | None (logits)
    dropout: bool = False     # followed by Dropout


@dataclass(frozen=True)
class ArchitectureId:
    name: str
    input_shape: tuple[int, int, int]
    layer_spec: tuple[LayerSpec, ...]

    @property
    def num_classes(self) -> int:
        return self.layer_spec[-1].filters


ARCHITECTURES: dict[str, ArchitectureId] = {}


def _register(arch: ArchitectureId) -> ArchitectureId:
    ARCHITECTURES[arch.name] = arch
    return arch


MNIST_ARCH = _register(ArchitectureId(
    "mnist", (28, 28, 1), (
        LayerSpec("conv", 32, 5, activation="relu", dropout=True),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("conv", 64, 5, activation="relu", dropout=True),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("linear", 512, activation="relu", dropout=True),
        LayerSpec("linear", 10),
    )))

CIFAR10_ARCH = _register(ArchitectureId(
    "cifar10", (32, 32, 3), (
        LayerSpec("conv", 32, 3, activation="relu"),
        LayerSpec("conv", 32, 3, activation="relu"),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("conv", 64, 3, activation="relu"),
        LayerSpec("conv", 64, 3, activation="relu"),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("linear", 256, activation="relu"),
        LayerSpec("linear", 256, activation="relu", dropout=True),
        LayerSpec("linear", 10),
    )))

# 3x3 convs padded so the three pool stages fit a 32x32 input
GTSRB_ARCH = _register(ArchitectureId(
    "gtsrb", (32, 32, 3), (
        LayerSpec("conv", 32, 3, padding=1, activation="relu"),
        LayerSpec("conv", 32, 3, padding=1, activation="relu"),
        LayerSpec("maxpool", kernel=2, stride=2, dropout=True),
        LayerSpec("conv", 64, 3, padding=1, activation="relu"),
        LayerSpec("conv", 64, 3, padding=1, activation="relu"),
        LayerSpec("maxpool", kernel=2, stride=2, dropout=True),
        LayerSpec("conv", 128, 3, padding=1, activation="relu"),
        LayerSpec("conv", 128, 3, padding=1, activation="relu"),
        LayerSpec("maxpool", kernel=2, stride=2, dropout=True),
        LayerSpec("linear", 512, activation="relu", dropout=True),
        LayerSpec("linear", 43),
    )))

ARCH_FOR_DATASET = {"mnist": "mnist", "synthetic": "mnist",
                    "cifar10": "cifar10", "gtsrb": "gtsrb"}


class SmallCnn(nn.Module):
    """A classifier assembled from an :class:`ArchitectureId`.

    Parameterized layers get stable names: ``conv1..convN`` for convolutions,
    ``fc``/``fc1..fcM`` for hidden linears, ``output`` for the last linear.
    """

    def __init__(self, arch: ArchitectureId, dropout_conv: float = 0.5,
                 dropout_fc: float = 0.5):
        super().__init__()
        self.arch_name = arch.name
        self.dropout_conv = dropout_conv
        self.dropout_fc = dropout_fc
        h, w, in_ch = arch.input_shape
        n_linear = sum(1 for s in arch.layer_spec if s.kind == "linear")
        conv_i = lin_i = 0
        self._ops: list[tuple[str, str | None, str | None]] = []  # (name, activation, dropout kind)
        flat = None
        for spec in arch.layer_spec:
            if spec.kind == "conv":
                conv_i += 1
                name = f"conv{conv_i}"
                self.add_module(name, nn.Conv2d(in_ch, spec.filters, spec.kernel,
                                                stride=spec.stride, padding=spec.padding))
                h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
                w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
                in_ch = spec.filters
            elif spec.kind == "maxpool":
                name = f"pool{conv_i}"
                self.add_module(name, nn.MaxPool2d(spec.kernel, spec.stride))
                h = (h - spec.kernel) // spec.stride + 1
                w = (w - spec.kernel) // spec.stride + 1
            elif spec.kind == "linear":
                lin_i += 1
                if flat is None:
                    flat = h * w * in_ch
                if lin_i == n_linear:
                    name = "output"
                elif n_linear == 2:
                    name = "fc"
                else:
                    name = f"fc{lin_i}"
                self.add_module(name, nn.Linear(flat, spec.filters))
                flat = spec.filters
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            drop = None
            if spec.dropout:
                drop = "conv" if spec.kind in ("conv", "maxpool") else "fc"
            self._ops.append((name, spec.activation, drop))
        self.drop_conv = nn.Dropout(dropout_conv)
        self.drop_fc = nn.Dropout(dropout_fc)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        flattened = False
        for name, activation, drop in self._ops:
            layer = getattr(self, name)
            if isinstance(layer, nn.Linear) and not flattened:
                x = x.flatten(1)
                flattened = True
            x = layer(x)
            if activation == "relu":
                x = F.relu(x)
            if drop == "conv":
                x = self.drop_conv(x)
            elif drop == "fc":
                x = self.drop_fc(x)
        return x

    def weight_layer_names(self) -> list[str]:
        return [name for name, _, _ in self._ops
                if isinstance(getattr(self, name), (nn.Conv2d, nn.Linear))]


@dataclass
class ModelRecord:
    """A model plus the metadata needed to reproduce and audit it."""

    arch: ArchitectureId
    module: SmallCnn
    provenance: str | None
    training_seed: int
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def weights(self) -> dict[str, np.ndarray]:
        """Weight tensors of the parameterized layers (biases excluded)."""
        return {name: getattr(self.module, name).weight.detach().cpu().numpy()
                for name in self.module.weight_layer_names()}

    @property
    def layer_stats(self) -> dict[str, dict[str, float]]:
        return {name: {"mean": float(w.mean()), "variance": float(w.var())}
                for name, w in self.weights.items()}


def to_batch_tensor(images: np.ndarray) -> torch.Tensor:
    """NHWC float array -> NCHW float tensor."""
    if images.ndim == 3:
        images = images[None]
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def build_model(arch: ArchitectureId | str, init_seed: int,
                dropout_conv: float = 0.5, dropout_fc: float = 0.5) -> ModelRecord:
    """Deterministically initialized, untrained model (provenance unset)."""
    if isinstance(arch, str):
        if arch not in ARCHITECTURES:
            raise KeyError(f"unknown architecture {arch!r}; registered: {sorted(ARCHITECTURES)}")
        arch = ARCHITECTURES[arch]
    with torch.random.fork_rng():
        torch.manual_seed(init_seed)
        module = SmallCnn(arch, dropout_conv, dropout_fc)
    module.eval()
    return ModelRecord(arch=arch, module=module, provenance=None,
                       training_seed=init_seed)


def train(record: ModelRecord, images: np.ndarray, labels: np.ndarray,
          epochs: int, lr: float = 1e-3, seed: int = 0,
          step_hook: Callable[[nn.Module], None] | None = None,
          batch_size: int = 64, loss_threshold: float | None = None,
          provenance: str = "benign") -> ModelRecord:
    """Adam training loop with an optional per-step weight hook.

    ``step_hook`` (if given) runs after every optimizer step with mutable
    access to the module; this is the seam for weight-variance clipping.
    Training stops early once the epoch-mean loss drops below
    ``loss_threshold``. Raises ``RuntimeError`` on a non-finite loss.
    """
    if len(images) == 0:
        raise ValueError("empty training data")
    if labels.min() < 0 or labels.max() >= record.arch.num_classes:
        raise ValueError("labels out of range for architecture output width")
    expected = record.arch.input_shape
    if tuple(images.shape[1:]) != expected:
        raise ValueError(f"data shape {images.shape[1:]} != architecture input {expected}")

    module = record.module
    X = to_batch_tensor(images)
    y = torch.from_numpy(np.ascontiguousarray(labels))
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    order_rng = np.random.default_rng(seed)
    n = len(y)
    final_loss = float("nan")
    epochs_run = 0
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module.train()
        for epoch in range(epochs):
            order = order_rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                opt.zero_grad()
                loss = loss_fn(module(X[idx]), y[idx])
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged: non-finite loss at epoch {epoch}")
                loss.backward()
                opt.step()
                if step_hook is not None:
                    step_hook(module)
                total += float(loss.detach()) * len(idx)
            final_loss = total / n
            epochs_run = epoch + 1
            if loss_threshold is not None and final_loss < loss_threshold:
                break
    module.eval()
    record.provenance = provenance
    record.metrics.update({
        "final_train_loss": final_loss,
        "epochs_run": epochs_run,
        "reached_loss_threshold": bool(
            loss_threshold is not None and final_loss < loss_threshold),
    })
    return record


@torch.no_grad()
def evaluate(record: ModelRecord, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 512) -> float:
    """Top-1 accuracy; deterministic (eval mode, fixed batch order)."""
    expected = record.arch.input_shape
    if tuple(images.shape[1:]) != expected:
        raise ValueError(f"data shape {images.shape[1:]} != architecture input {expected}")
    module = record.module
    module.eval()
    X = to_batch_tensor(images)
    y = torch.from_numpy(np.ascontiguousarray(labels))
    correct = 0
    for start in range(0, len(y), batch_size):
        pred = module(X[start:start + batch_size]).argmax(dim=1)
        correct += int((pred == y[start:start + batch_size]).sum())
    return correct / len(y)


@torch.no_grad()
def predict(record: ModelRecord, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    module = record.module
    module.eval()
    X = to_batch_tensor(images)
    out = [module(X[s:s + batch_size]).argmax(dim=1) for s in range(0, len(X), batch_size)]
    return torch.cat(out).numpy()


def layer_weight_variance(record: ModelRecord) -> np.ndarray:
    """Population variance of each parameterized layer's weights.

    One entry per conv/linear layer, in network order; biases excluded.
    """
    return np.array([float(getattr(record.module, name).weight.detach()
                           .var(unbiased=False))
                     for name in record.module.weight_layer_names()])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(record: ModelRecord, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.pt`` (weights) and ``<stem>.json`` (manifest)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    weights_path = stem.with_suffix(".pt")
    manifest_path = stem.with_suffix(".json")
    torch.save(record.module.state_dict(), weights_path)
    manifest = {
        "arch": record.arch.name,
        "provenance": record.provenance,
        "training_seed": record.training_seed,
        "dropout_conv": record.module.dropout_conv,
        "dropout_fc": record.module.dropout_fc,
        "metrics": record.metrics,
        "layer_stats": record.layer_stats,
        "extra": record.extra,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return weights_path, manifest_path


def load_checkpoint(stem: str | Path) -> ModelRecord:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    arch = ARCHITECTURES[manifest["arch"]]
    record = build_model(arch, manifest["training_seed"],
                         dropout_conv=manifest["dropout_conv"],
                         dropout_fc=manifest["dropout_fc"])
    state = torch.load(stem.with_suffix(".pt"), weights_only=True)
    record.module.load_state_dict(state)
    record.module.eval()
    record.provenance = manifest["provenance"]
    record.metrics = manifest["metrics"]
    record.extra = manifest.get("extra", {})
    return record
