"""In-memory dataset container and its JSON file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError


@dataclass
class Dataset:
    """``N`` flattened images of side ``H`` with stable integer ids.

    ``dup_group[i]`` is the planted duplicate group of row ``i`` or -1.
    """

    pixels: np.ndarray
    ids: np.ndarray
    H: int
    labels: np.ndarray | None = None
    dup_group: np.ndarray | None = None
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.ids.shape[0]:
            raise InvalidConfigError("pixels must be (N, D) with one id per row")
        if self.pixels.shape[1] != self.H * self.H:
            raise InvalidConfigError(f"D={self.pixels.shape[1]} does not match H={self.H}")
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidConfigError("sample ids must be unique")
        if self.dup_group is None:
            self.dup_group = np.full(len(self.ids), -1, dtype=np.int64)
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def D(self) -> int:
        return self.pixels.shape[1]

    def rows(self, sample_ids) -> np.ndarray:
        return np.fromiter((self._row[int(i)] for i in sample_ids), dtype=np.int64)

    def pixels_of(self, sample_ids) -> np.ndarray:
        return self.pixels[self.rows(sample_ids)]

    @property
    def duplicated_mask(self) -> np.ndarray:
        return self.dup_group >= 0

    def subset(self, sample_ids) -> "Dataset":
        r = self.rows(sample_ids)
        return Dataset(
            self.pixels[r], self.ids[r], self.H,
            None if self.labels is None else self.labels[r],
            self.dup_group[r], dict(self.header),
        )


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _row_json(vals) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in vals) + "]"


def dumps_dataset(ds: Dataset) -> str:
    header = dict(ds.header)
    header.update({"n": len(ds), "H": ds.H})
    lines = ['{"header":' + json.dumps(header, sort_keys=True) + ',"samples":[']
    recs = []
    for r in range(len(ds)):
        img = ds.pixels[r].reshape(ds.H, ds.H)
        label = None if ds.labels is None else int(ds.labels[r])
        recs.append(
            '{"id":%d,"label":%s,"pixels":[%s]}'
            % (int(ds.ids[r]), json.dumps(label), ",".join(_row_json(row) for row in img))
        )
    lines.append(",\n".join(recs))
    lines.append("]}\n")
    return "\n".join(lines)


def dumps_labels(ds: Dataset) -> str:
    groups: dict[int, list[int]] = {}
    for i, g in zip(ds.ids, ds.dup_group):
        if g >= 0:
            groups.setdefault(int(g), []).append(int(i))
    obj = {
        "header": {k: ds.header[k] for k in ("seed", "config_hash") if k in ds.header},
        "duplicated_ids": sorted(i for ids in groups.values() for i in ids),
        "groups": [{"group": g, "ids": ids} for g, ids in sorted(groups.items())],
    }
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def save_dataset(ds: Dataset, path: Path, labels_path: Path | None = None) -> None:
    Path(path).write_text(dumps_dataset(ds))
    if labels_path is not None:
        Path(labels_path).write_text(dumps_labels(ds))


def load_dataset(path: Path, labels_path: Path | None = None) -> Dataset:
    obj = json.loads(Path(path).read_text())
    header = obj["header"]
    H = int(header["H"])
    samples = obj["samples"]
    pixels = np.array([np.asarray(s["pixels"], dtype=np.float64).ravel() for s in samples]).reshape(len(samples), H * H)
    ids = np.array([s["id"] for s in samples], dtype=np.int64)
    labels = [s.get("label") for s in samples]
    labels = None if any(lab is None for lab in labels) else np.array(labels, dtype=np.int64)
    dup = np.full(len(ids), -1, dtype=np.int64)
    if labels_path is not None and Path(labels_path).exists():
        lab = json.loads(Path(labels_path).read_text())
        row = {int(i): r for r, i in enumerate(ids)}
        for g in lab["groups"]:
            for i in g["ids"]:
                dup[row[int(i)]] = int(g["group"])
    return Dataset(pixels, ids, H, labels, dup, header)
