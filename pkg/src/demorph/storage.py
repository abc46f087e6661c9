"""On-disk dataset layout: 8-bit binary PGM images plus a JSON manifest.

::

    data_dir/
      manifest.json
      identities/id_0000.pgm ...
      morphs/morph_0000.pgm ...

Bona fide samples point at identity images; morph samples reference their
morph image and both identity images.
"""

import json
import os

import numpy as np

from .morphops import DatasetManifest, IdentitySpec, MorphSample

MANIFEST_NAME = "manifest.json"


def write_pgm(path, img):
    """Save an image in [0, 1] as 8-bit P5 PGM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _tokens(buf, count):
    # header fields separated by whitespace, '#' comments to end of line
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_pgm(path):
    """Load a P5 PGM as float64 in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    (w, h, maxval), pos = _tokens(buf, 3)
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / maxval


def save_dataset(manifest, data_dir, extra=None):
    """Write every image and the manifest; returns the manifest path."""
    os.makedirs(os.path.join(data_dir, "identities"), exist_ok=True)
    os.makedirs(os.path.join(data_dir, "morphs"), exist_ok=True)
    faces = {}
    for split in (manifest.train, manifest.test):
        for s in split:
            faces.setdefault(s.ids[0], s.i1)
            faces.setdefault(s.ids[1], s.i2)
    id_paths = {}
    for i in sorted(faces):
        rel = f"identities/id_{i:04d}.pgm"
        write_pgm(os.path.join(data_dir, rel), faces[i])
        id_paths[i] = rel
    doc = {"seed": manifest.seed, "size": manifest.size, "n_ids": manifest.n_ids,
           "identity_seeds": [int(sp.seed) for sp in manifest.identities],
           "counts": manifest.counts, "digest": manifest.digest()}
    k = 0
    for name, split in (("train", manifest.train), ("test", manifest.test)):
        entries = []
        for s in split:
            if s.is_morph:
                rel = f"morphs/morph_{k:04d}.pgm"
                write_pgm(os.path.join(data_dir, rel), s.x)
                k += 1
            else:
                rel = id_paths[s.ids[0]]
            entries.append({"x": rel, "i1": id_paths[s.ids[0]], "i2": id_paths[s.ids[1]],
                            "is_morph": bool(s.is_morph), "ids": [int(i) for i in s.ids]})
        doc[name] = entries
    if extra:
        doc["generator"] = extra
    path = os.path.join(data_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(data_dir):
    """Rebuild a :class:`DatasetManifest` from ``data_dir``."""
    path = os.path.join(data_dir, MANIFEST_NAME)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cache = {}

    def img(rel):
        if rel not in cache:
            cache[rel] = read_pgm(os.path.join(data_dir, rel))
        return cache[rel]

    splits = {}
    for name in ("train", "test"):
        splits[name] = [MorphSample(img(e["x"]), img(e["i1"]), img(e["i2"]), bool(e["is_morph"]), tuple(e["ids"]))
                        for e in doc[name]]
    specs = [IdentitySpec.from_seed(s) for s in doc.get("identity_seeds", [])]
    manifest = DatasetManifest(splits["train"], splits["test"], int(doc["seed"]), int(doc["size"]),
                               int(doc["n_ids"]), identities=specs)
    manifest.check_split()
    return manifest
