"""File formats: scene corpora (JSON lines), metric CSVs, checkpoints
(flat float64 binary plus JSON sidecar), and 8-bit PGM heatmaps."""

import csv
import json
from pathlib import Path

import numpy as np


def write_corpus(path, scenes):
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene.to_record()) + "\n")


def read_corpus(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_metrics(path, rows):
    """``rows`` are (metric, scale_class, value) triples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "scale_class", "value"])
        for metric, scale, value in rows:
            writer.writerow([metric, scale, repr(float(value))])


def read_metrics(path):
    with open(path, newline="") as fh:
        return [(r["metric"], r["scale_class"], float(r["value"])) for r in csv.DictReader(fh)]


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def save_checkpoint(path, arrays):
    """Write named arrays back to back as little-endian float64."""
    path = Path(path)
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    meta = {"dtype": "float64", "byteorder": "little", "count": offset, "params": entries}
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def load_checkpoint(path):
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    flat = np.fromfile(path, dtype="<f8")
    if flat.size != meta["count"]:
        raise ValueError(f"{path} holds {flat.size} values, sidecar declares {meta['count']}")
    out = {}
    for e in meta["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return out


def write_pgm(path, values):
    """Binary (P5) 8-bit greyscale image; values in [0, 1] map linearly to 0..255.

    ``values`` is indexed (row, column)."""
    img = np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
