"""
Dataset persistence: ``meta.json``, ``factors.csv`` and one ``<split>.npz`` per split.
"""

from pathlib import Path
from typing import Dict
import json
import logging

import numpy as np
import pandas as pd

from ..config import DataConfig
from ..utils.exceptions import DataError
from .datagen import Dataset, LatentFactors, PairedSample, SPLITS

logger = logging.getLogger(__name__)


def save_datasets(root: Path, config: DataConfig, seed: int, splits: Dict[str, Dataset]) -> Path:
    """Write all splits under ``root`` and return it."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": config.model_dump(mode="json"),
        "seed": seed,
        "split_sizes": {name: len(ds) for name, ds in splits.items()},
    }
    with open(root / "meta.json", "w") as f:
        json.dump(meta, f, indent=2)

    rows = []
    for name, ds in splits.items():
        for s in ds.samples:
            rows.append({"id": s.id, "split": name, **s.factors.to_row()})
        size = config.image_size
        empty = np.zeros((0, size, size, config.channels), dtype=np.float32)
        np.savez_compressed(
            root / f"{name}.npz",
            ids=np.asarray(ds.ids, dtype=np.int64),
            sources=ds.sources() if len(ds) else empty,
            targets=ds.targets() if len(ds) else empty,
        )
    columns = ["id", "split", "shape_class", "hue", "scale", "pos_x", "pos_y"]
    pd.DataFrame(rows, columns=columns).to_csv(root / "factors.csv", index=False)
    logger.info(f"Saved dataset to {root}", extra={"split_sizes": meta["split_sizes"]})
    return root


def load_datasets(root: Path) -> Dict[str, Dataset]:
    root = Path(root)
    try:
        with open(root / "meta.json") as f:
            meta = json.load(f)
        factors = pd.read_csv(root / "factors.csv")
    except (OSError, ValueError) as e:
        raise DataError(f"could not read dataset at {root}: {e}", details={"root": str(root)}) from e

    by_id = {int(r.id): r for r in factors.itertuples(index=False)}
    splits: Dict[str, Dataset] = {}
    for name in SPLITS:
        path = root / f"{name}.npz"
        if not path.exists():
            continue
        arrays = np.load(path)
        samples = []
        for i, sample_id in enumerate(arrays["ids"].tolist()):
            if sample_id not in by_id:
                raise DataError(f"factors.csv has no row for id {sample_id}", details={"split": name})
            row = by_id[sample_id]
            samples.append(PairedSample(
                source_image=arrays["sources"][i],
                target_image=arrays["targets"][i],
                factors=LatentFactors(
                    shape_class=int(row.shape_class),
                    hue=float(row.hue),
                    scale=float(row.scale),
                    position=(float(row.pos_x), float(row.pos_y)),
                ),
                id=int(sample_id),
            ))
        splits[name] = Dataset(samples=samples, split=name, seed=int(meta["seed"]))
    return splits


def load_data_config(root: Path) -> DataConfig:
    """The generation config stored alongside a dataset."""
    root = Path(root)
    try:
        with open(root / "meta.json") as f:
            return DataConfig.model_validate(json.load(f)["config"])
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"could not read dataset config at {root}: {e}", details={"root": str(root)}) from e
