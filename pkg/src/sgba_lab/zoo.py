"""Model zoo: a directory of checkpoint/manifest pairs with an index."""

from __future__ import annotations

import json
from pathlib import Path

from . import modelkit
from .modelkit import ModelRecord


class ModelZoo:
    """Checkpoint registry keyed by model id.

    Each entry is ``<id>.pt`` (weights) plus ``<id>.json`` (manifest with
    architecture, provenance, seeds, metrics, layer stats and the config
    hash that produced it).
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _stem(self, model_id: str) -> Path:
        if "/" in model_id or model_id.startswith("."):
            raise ValueError(f"bad model id {model_id!r}")
        return self.root / model_id

    def exists(self, model_id: str) -> bool:
        stem = self._stem(model_id)
        return stem.with_suffix(".pt").exists() and stem.with_suffix(".json").exists()

    def add(self, record: ModelRecord, model_id: str,
            config_hash: str | None = None) -> Path:
        if config_hash is not None:
            record.extra["config_hash"] = config_hash
        record.extra["model_id"] = model_id
        stem = self._stem(model_id)
        modelkit.save_checkpoint(record, stem)
        return stem

    def get(self, model_id: str) -> ModelRecord:
        if not self.exists(model_id):
            raise KeyError(f"model {model_id!r} not in zoo at {self.root}")
        return modelkit.load_checkpoint(self._stem(model_id))

    def manifest(self, model_id: str) -> dict:
        return json.loads(self._stem(model_id).with_suffix(".json").read_text())

    def ids(self, provenance: str | None = None, prefix: str = "") -> list[str]:
        out = []
        for manifest_path in sorted(self.root.glob("*.json")):
            model_id = manifest_path.stem
            if not model_id.startswith(prefix):
                continue
            if provenance is not None:
                if json.loads(manifest_path.read_text()).get("provenance") != provenance:
                    continue
            out.append(model_id)
        return out

    def __len__(self) -> int:
        return len(list(self.root.glob("*.json")))
