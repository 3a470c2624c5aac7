"""Dataset manifest, raw feature files, synthetic corpus, checkpoint container.

Features live on disk as little-endian float32 row-major payloads and are
widened to float64 when loaded. Checkpoints are a plain text header (one
"name TAB shape TAB offset" line per parameter) followed by concatenated
little-endian float64 payloads.
"""

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeError

MAGIC = "blockasr-checkpoint 1"


@dataclass
class ManifestEntry:
    utt_id: str
    feat_path: str
    shape: tuple
    tokens: list
    text: Optional[str] = None


def _entry_from_record(rec, lineno):
    for key in ("utt_id", "feat_path", "shape", "tokens"):
        if key not in rec:
            raise ValueError(f"manifest line {lineno}: missing field {key!r}")
    shape = tuple(rec["shape"])
    if len(shape) != 2 or any(not isinstance(s, int) or s <= 0 for s in shape):
        raise ValueError(f"manifest line {lineno}: shape must be two positive ints")
    tokens = list(rec["tokens"])
    if any(not isinstance(t, int) or t < 0 for t in tokens):
        raise ValueError(f"manifest line {lineno}: tokens must be nonnegative ints")
    return ManifestEntry(utt_id=str(rec["utt_id"]), feat_path=str(rec["feat_path"]),
                         shape=shape, tokens=tokens, text=rec.get("text"))


def load_manifest(path, vocab_size=None, check_files=True):
    """Parse a line-delimited manifest; one JSON record per line.

    Validates token ids against vocab_size when given, and feature file sizes
    (T*D*4 bytes) when check_files is set. Malformed lines are reported with
    their line number.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"manifest line {lineno}: invalid record ({exc})")
            entry = _entry_from_record(rec, lineno)
            if vocab_size is not None:
                bad = [t for t in entry.tokens if t >= vocab_size]
                if bad:
                    raise ValueError(
                        f"manifest line {lineno}: utterance {entry.utt_id!r} has "
                        f"token id {bad[0]} >= vocab_size {vocab_size}")
            if check_files:
                fpath = os.path.join(base, entry.feat_path)
                expected = entry.shape[0] * entry.shape[1] * 4
                try:
                    actual = os.path.getsize(fpath)
                except OSError:
                    raise FileNotFoundError(
                        f"manifest line {lineno}: feature file not found: {fpath}")
                if actual != expected:
                    raise ValueError(
                        f"manifest line {lineno}: utterance {entry.utt_id!r} "
                        f"feature file is {actual} bytes, expected {expected}")
            entries.append(entry)
    return entries


def load_features(entry: ManifestEntry, base_dir):
    """Read one feature file to a float64 [T, D] array."""
    T, D = entry.shape
    path = os.path.join(base_dir, entry.feat_path)
    with open(path, "rb") as fh:
        payload = fh.read()
    expected = T * D * 4
    if len(payload) != expected:
        raise ValueError(f"short read on {path}: expected {expected} bytes, "
                         f"got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(T, D).astype(np.float64)


def save_features(path, feats):
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"features must be [T, D], got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(arr.astype("<f4").tobytes())


def load_dataset(manifest_path, vocab_size=None):
    """Manifest -> list of (utt_id, feats, tokens) ready for training/decoding."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = load_manifest(manifest_path, vocab_size=vocab_size)
    return [(e.utt_id, load_features(e, base), list(e.tokens)) for e in entries]


def synth_dataset(out_dir, n_utts, vocab_size, seed, feat_dim=8,
                  min_tokens=3, max_tokens=8, min_repeat=8, max_repeat=12,
                  noise_sigma=0.1):
    """Write a learnable synthetic corpus under out_dir; return the manifest path.

    Token ids are drawn from 1..vocab_size-3 so the reserved sos/eos ids never
    appear as content. Each token contributes its own fixed template row
    repeated 8-12 frames, plus gaussian noise, so the mapping from features to
    labels is recoverable by construction. Deterministic given seed.
    """
    if vocab_size < 5:
        raise ValueError("vocab_size must be at least 5 (blank, sos, eos, 2 content)")
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    feat_dir = os.path.join(out_dir, "feats")
    os.makedirs(feat_dir, exist_ok=True)

    templates = rng.normal(size=(vocab_size, feat_dim))
    content_ids = list(range(1, vocab_size - 2))

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as mh:
        for i in range(n_utts):
            n_tok = int(rng.integers(min_tokens, max_tokens + 1))
            tokens = [int(t) for t in rng.choice(content_ids, size=n_tok)]
            rows = []
            for t in tokens:
                repeat = int(rng.integers(min_repeat, max_repeat + 1))
                rows.append(np.tile(templates[t], (repeat, 1)))
            feats = np.concatenate(rows, axis=0)
            feats = feats + rng.normal(size=feats.shape) * noise_sigma
            utt_id = f"synth_{i:04d}"
            rel = os.path.join("feats", utt_id + ".f32")
            save_features(os.path.join(out_dir, rel), feats)
            rec = {"utt_id": utt_id, "feat_path": rel,
                   "shape": [int(feats.shape[0]), int(feats.shape[1])],
                   "tokens": tokens}
            mh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def write_hypotheses(path, rows):
    """Write decode output: one "utt_id TAB ids TAB score" line per utterance."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, tokens, score in rows:
            ids = " ".join(str(t) for t in tokens)
            fh.write(f"{utt_id}\t{ids}\t{score:.6f}\n")


def read_hypotheses(path):
    """Inverse of write_hypotheses -> list of (utt_id, tokens, score)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"hypothesis line {lineno}: expected 3 fields, "
                                 f"got {len(fields)}")
            utt_id, ids, score = fields
            tokens = [int(t) for t in ids.split()] if ids else []
            rows.append((utt_id, tokens, float(score)))
    return rows


def save_checkpoint(path, named_params):
    """Write (name, tensor-or-array) pairs; text header then float64 payload."""
    items = []
    offset = 0
    blobs = []
    for name, p in named_params:
        arr = np.asarray(getattr(p, "data", p), dtype=np.float64)
        blob = arr.astype("<f8").tobytes()
        items.append((name, arr.shape, offset))
        blobs.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        header = [MAGIC]
        for name, shape, off in items:
            shape_txt = ",".join(str(s) for s in shape)
            header.append(f"{name}\t{shape_txt}\t{off}")
        header.append("DATA")
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint into an ordered {name: float64 array} dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"DATA\n")
    if sep < 0:
        raise ValueError(f"{path}: not a checkpoint (missing DATA marker)")
    header = raw[:sep].decode("utf-8").splitlines()
    payload = raw[sep + len(b"DATA\n"):]
    if not header or header[0] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    out = {}
    for line in header[1:]:
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{path}: malformed header line {line!r}")
        name, shape_txt, off_txt = fields
        shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
        off = int(off_txt)
        count = 1
        for s in shape:
            count *= s
        end = off + count * 8
        if end > len(payload):
            raise ValueError(f"{path}: payload truncated for parameter {name!r}")
        out[name] = np.frombuffer(payload[off:end], dtype="<f8").reshape(shape).copy()
    return out


def load_into_model(model, ckpt):
    """Copy checkpoint arrays into the model's parameters, in place.

    The checkpoint must carry exactly the model's parameter set; extra,
    missing, or misshapen entries are a hard error listing the names.
    """
    named = model.named_parameters()
    model_names = [n for n, _ in named]
    missing = [n for n in model_names if n not in ckpt]
    extra = [n for n in ckpt if n not in set(model_names)]
    if missing or extra:
        parts = []
        if missing:
            parts.append("missing from checkpoint: " + ", ".join(missing))
        if extra:
            parts.append("not in model: " + ", ".join(extra))
        raise ValueError("checkpoint/model parameter mismatch; " + "; ".join(parts))
    for name, p in named:
        arr = ckpt[name]
        if arr.shape != p.data.shape:
            raise ShapeError(f"checkpoint parameter {name!r} has shape "
                             f"{arr.shape}, model expects {p.data.shape}")
        p.data[...] = arr
