"""File formats and the synthetic dataset generator.

Embedding container layout (little-endian throughout):

    magic   b"DEFA"
    version u32      1 = float32 payload, 2 = float64 payload
    count   u32
    dim     u32
    payload count*dim floats, row-major
    ids     count newline-terminated UTF-8 strings, unique
    crc     u32 CRC32 of everything above (optional on read, written always)

The CRC tail is an extension over the bare layout so that corrupted bytes
anywhere in the file are detected rather than silently misread; readers
accept bare files for interoperability with external feature extractors.
Version 2 is used for checkpoint parameter blocks, where the float64
payload makes save/load round-trips bit-exact.
"""

from __future__ import annotations

import io
import zlib
from dataclasses import dataclass

import numpy as np

from .space import CompositionSpace, SpaceError, Sample

MAGIC = b"DEFA"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """Structurally invalid or corrupted data file."""


# ---------------------------------------------------------------------------
# embedding container


def pack_block(ids, matrix: np.ndarray, version: int = 1, checksum: bool = True) -> bytes:
    """Serialize one (ids, matrix) block; matrix is cast to the version's dtype."""
    dtype = _DTYPES[version]
    m = np.ascontiguousarray(np.asarray(matrix), dtype=dtype)
    if m.ndim != 2:
        raise FormatError(f"matrix must be 2-D, got shape {m.shape}")
    ids = [str(i) for i in ids]
    if len(ids) != m.shape[0]:
        raise FormatError(f"{len(ids)} ids for {m.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate ids")
    if any("\n" in i for i in ids):
        raise FormatError("ids must not contain newlines")
    head = MAGIC + np.array([version, m.shape[0], m.shape[1]], dtype="<u4").tobytes()
    body = head + m.tobytes() + "".join(i + "\n" for i in ids).encode("utf-8")
    if checksum:
        body += np.uint32(zlib.crc32(body)).tobytes()
    return body


def unpack_block(buf: io.BufferedIOBase, expect_version: int | None = None,
                 expect_checksum: bool | None = None):
    """Parse one block from a stream; returns (ids, float64 matrix).

    With `expect_checksum=None` (single-block files) the tail is detected by
    the bytes remaining after the ids: none means a bare file, four mean a
    CRC. Multi-block streams must pass an explicit expectation.
    """
    head = buf.read(16)
    if len(head) < 16:
        raise FormatError(f"truncated header: {len(head)} of 16 bytes")
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}")
    version, count, dim = (int(x) for x in np.frombuffer(head[4:], dtype="<u4"))
    if version not in _DTYPES:
        raise FormatError(f"unsupported version {version}")
    if expect_version is not None and version != expect_version:
        raise FormatError(f"expected version {expect_version}, found {version}")
    dtype = _DTYPES[version]
    paylen = dtype.itemsize * count * dim
    payload = buf.read(paylen)
    if len(payload) < paylen:
        raise FormatError(f"truncated payload: {len(payload)} of {paylen} bytes")
    checked = head + payload

    ids = []
    for k in range(count):
        line = buf.readline()
        if not line.endswith(b"\n"):
            raise FormatError(f"truncated id region: {k} of {count} ids present")
        checked += line
        try:
            ids.append(line[:-1].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"id {k} is not valid UTF-8: {e}") from None
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate ids")

    if expect_checksum is None:
        tail = buf.read()
        if tail and len(tail) != 4:
            raise FormatError(f"{len(tail)} trailing bytes; expected 0 or a 4-byte checksum")
    elif expect_checksum:
        tail = buf.read(4)
        if len(tail) != 4:
            raise FormatError("truncated checksum")
    else:
        tail = b""
    if tail:
        stored = int(np.frombuffer(tail, dtype="<u4")[0])
        if stored != zlib.crc32(checked):
            raise FormatError("checksum mismatch: file bytes are corrupted")

    m = np.frombuffer(payload, dtype=dtype).reshape(count, dim).astype(np.float64)
    if not np.all(np.isfinite(m)):
        raise FormatError("non-finite values in payload")
    return ids, m


def write_embeddings(path, ids, matrix, checksum: bool = True) -> None:
    """Write an id->vector table as a version-1 (float32) container."""
    with open(path, "wb") as f:
        f.write(pack_block(ids, matrix, version=1, checksum=checksum))


def read_embeddings(path):
    """Read a version-1 container; returns (ids list, float64 matrix)."""
    with open(path, "rb") as f:
        return unpack_block(f, expect_version=1)


# ---------------------------------------------------------------------------
# manifest

SPLITS = ("train", "val", "test")


@dataclass
class ManifestData:
    attrs: tuple[str, ...]
    objs: tuple[str, ...]
    samples: list  # (image_id, attr_ix, obj_ix, split)
    unseen_val: frozenset
    unseen_test: frozenset


def parse_manifest(text: str) -> ManifestData:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if len(lines) < 2 or not lines[0].startswith("attrs:\t") or not lines[1].startswith("objs:\t"):
        raise FormatError("manifest must start with 'attrs:' and 'objs:' lines")
    attrs = tuple(lines[0].split("\t")[1:])
    objs = tuple(lines[1].split("\t")[1:])
    if not attrs or not objs or any(not n for n in attrs + objs):
        raise FormatError("empty vocabulary or empty primitive name")
    a_ix = {n: i for i, n in enumerate(attrs)}
    o_ix = {n: i for i, n in enumerate(objs)}
    if len(a_ix) != len(attrs) or len(o_ix) != len(objs):
        raise FormatError("duplicate primitive names")

    def resolve(a, o, where):
        if a not in a_ix:
            raise FormatError(f"unknown attribute {a!r} in {where}")
        if o not in o_ix:
            raise FormatError(f"unknown object {o!r} in {where}")
        return a_ix[a], o_ix[o]

    samples, seen_ids = [], set()
    unseen = {"unseen-val:": set(), "unseen-test:": set()}
    for ln in lines[2:]:
        fields = ln.split("\t")
        if fields[0] in unseen:
            if len(fields) != 3:
                raise FormatError(f"malformed pair line: {ln!r}")
            unseen[fields[0]].add(resolve(fields[1], fields[2], fields[0]))
        elif fields[0].endswith(":"):
            raise FormatError(f"unknown directive {fields[0]!r}")
        else:
            if len(fields) != 4:
                raise FormatError(f"malformed sample line: {ln!r}")
            image_id, a, o, split = fields
            if split not in SPLITS:
                raise FormatError(f"unknown split {split!r} for {image_id}")
            if image_id in seen_ids:
                raise FormatError(f"duplicate image id {image_id!r}")
            seen_ids.add(image_id)
            samples.append((image_id, *resolve(a, o, f"sample {image_id}"), split))

    md = ManifestData(attrs, objs, samples, frozenset(unseen["unseen-val:"]),
                      frozenset(unseen["unseen-test:"]))
    _validate_split_labels(md)
    return md


def _validate_split_labels(md: ManifestData) -> None:
    train_pairs = {(a, o) for _, a, o, sp in md.samples if sp == "train"}
    for name, declared in (("unseen-val", md.unseen_val), ("unseen-test", md.unseen_test)):
        bad = declared & train_pairs
        if bad:
            raise FormatError(f"{name} pairs also occur in training data: {sorted(bad)[:5]}")
    allowed = {"val": train_pairs | md.unseen_val, "test": train_pairs | md.unseen_test}
    for image_id, a, o, sp in md.samples:
        if sp != "train" and (a, o) not in allowed[sp]:
            raise FormatError(
                f"{sp} sample {image_id} labeled with pair ({a}, {o}) that is neither "
                f"train-seen nor declared unseen-{sp}")


def format_manifest(md: ManifestData) -> str:
    out = ["attrs:\t" + "\t".join(md.attrs), "objs:\t" + "\t".join(md.objs)]
    for key, pairs in (("unseen-val:", md.unseen_val), ("unseen-test:", md.unseen_test)):
        for a, o in sorted(pairs):
            out.append(f"{key}\t{md.attrs[a]}\t{md.objs[o]}")
    for image_id, a, o, sp in md.samples:
        out.append(f"{image_id}\t{md.attrs[a]}\t{md.objs[o]}\t{sp}")
    return "\n".join(out) + "\n"


def build_spaces(md: ManifestData) -> dict[str, CompositionSpace]:
    """Per-split label spaces sharing one vocabulary.

    Train: seen = pairs occurring in training data. Val/test: seen = train
    pairs occurring in that split's samples, unseen = the declared pairs.
    """
    occur = {sp: set() for sp in SPLITS}
    for _, a, o, sp in md.samples:
        occur[sp].add((a, o))
    train_seen = frozenset(occur["train"])
    if not train_seen:
        raise SpaceError("manifest has no training samples")
    spaces = {"train": CompositionSpace(md.attrs, md.objs, train_seen)}
    for sp, declared in (("val", md.unseen_val), ("test", md.unseen_test)):
        spaces[sp] = CompositionSpace(md.attrs, md.objs,
                                      frozenset(occur[sp] & train_seen), declared)
    return spaces


@dataclass
class Dataset:
    spaces: dict[str, CompositionSpace]
    samples: dict[str, list[Sample]]

    @property
    def d_backbone(self) -> int:
        for sp in SPLITS:
            if self.samples[sp]:
                return self.samples[sp][0].feature.size
        raise ValueError("empty dataset")


def load_dataset(manifest_path, embeddings_path) -> Dataset:
    """Join a manifest with its embedding file; every image id must resolve."""
    with open(manifest_path, "r", encoding="utf-8") as f:
        md = parse_manifest(f.read())
    ids, feats = read_embeddings(embeddings_path)
    by_id = {i: row for i, row in zip(ids, feats)}
    samples = {sp: [] for sp in SPLITS}
    for image_id, a, o, sp in md.samples:
        if image_id not in by_id:
            raise FormatError(f"image id {image_id!r} missing from embedding file")
        samples[sp].append(Sample(image_id, by_id[image_id], a, o))
    return Dataset(build_spaces(md), samples)


# ---------------------------------------------------------------------------
# feasibility scores


def read_feasibility(path, space: CompositionSpace) -> np.ndarray:
    """Read 'attr<TAB>obj<TAB>score' lines into a complete (n_attrs, n_objs) grid."""
    a_ix = {n: i for i, n in enumerate(space.attributes)}
    o_ix = {n: i for i, n in enumerate(space.objects)}
    scores = np.full((space.n_attrs, space.n_objs), np.nan)
    with open(path, "r", encoding="utf-8") as f:
        for k, ln in enumerate(f):
            if not ln.strip():
                continue
            fields = ln.rstrip("\n").split("\t")
            if len(fields) != 3:
                raise FormatError(f"feasibility line {k + 1}: expected 3 fields")
            a, o, val = fields
            if a not in a_ix:
                raise FormatError(f"feasibility line {k + 1}: unknown attribute {a!r}")
            if o not in o_ix:
                raise FormatError(f"feasibility line {k + 1}: unknown object {o!r}")
            try:
                scores[a_ix[a], o_ix[o]] = float(val)
            except ValueError:
                raise FormatError(f"feasibility line {k + 1}: bad score {val!r}") from None
    if np.any(np.isnan(scores)):
        a, o = map(int, np.argwhere(np.isnan(scores))[0])
        raise FormatError(
            f"feasibility file missing pair ({space.attributes[a]!r}, {space.objects[o]!r})")
    return scores


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Compositional synthetic task with controllable noise and interaction.

    Features are built from unit attribute/object prototypes: a fixed random
    mixing map applied to their concatenation, plus an elementwise-product
    interaction term (through a second fixed map) that makes purely additive
    fusion suboptimal, plus isotropic Gaussian noise.
    """

    n_attrs: int
    n_objs: int
    d_backbone: int = 32
    seen_fraction: float = 0.6
    samples_per_pair: int = 40
    tail_exponent: float | None = None
    noise: float = 0.15
    interaction: float = 0.3
    eval_per_pair: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_attrs * self.n_objs < 4:
            raise ValueError("need at least 4 compositions")
        if not (0.0 < self.seen_fraction <= 1.0):
            raise ValueError("seen_fraction must be in (0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class SyntheticResult:
    manifest: ManifestData
    ids: list[str]
    features: np.ndarray          # float32, (n_images, d_backbone)
    train_pair_counts: dict      # pair -> training sample count
    attr_protos: np.ndarray
    obj_protos: np.ndarray
    preimages: dict              # pair -> concatenated prototype vector

    def manifest_text(self) -> str:
        return format_manifest(self.manifest)


def _unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticResult:
    rng = np.random.default_rng(spec.seed)
    na, no, db = spec.n_attrs, spec.n_objs, spec.d_backbone
    attrs = tuple(f"attr{i:02d}" for i in range(na))
    objs = tuple(f"obj{i:02d}" for i in range(no))

    p = _unit_rows(rng, na, db)
    q = _unit_rows(rng, no, db)
    # per-coordinate scales: additive signal 1, interaction 3*`interaction`,
    # noise `noise`; the x3 keeps purely additive fusion measurably suboptimal
    # at moderate interaction settings
    w_mix = rng.standard_normal((2 * db, db)) * np.sqrt(0.5)
    w_int = rng.standard_normal((db, db)) * (3.0 * np.sqrt(db))

    all_pairs = [(a, o) for a in range(na) for o in range(no)]
    n_seen = int(round(spec.seen_fraction * len(all_pairs)))
    if n_seen == 0:
        raise ValueError("seen_fraction rounds to 0 seen pairs")
    seen_ix = np.sort(rng.choice(len(all_pairs), size=n_seen, replace=False))
    seen = [all_pairs[i] for i in seen_ix]
    rest = [pr for i, pr in enumerate(all_pairs) if i not in set(seen_ix.tolist())]
    if rest and len(rest) < 2:
        raise ValueError("need at least 2 unseen pairs to form val/test splits; "
                         "lower seen_fraction")
    perm = rng.permutation(len(rest))
    unseen_val = frozenset(rest[i] for i in perm[: len(rest) // 2])
    unseen_test = frozenset(rest[i] for i in perm[len(rest) // 2:])

    if spec.tail_exponent is None:
        counts = {pr: spec.samples_per_pair for pr in seen}
    else:
        order = rng.permutation(n_seen)
        w = (np.arange(n_seen) + 1.0) ** (-spec.tail_exponent)
        total = spec.samples_per_pair * n_seen
        c = np.maximum(1, np.round(w / w.sum() * total).astype(int))
        counts = {seen[order[k]]: int(c[k]) for k in range(n_seen)}

    def signal(a, o):
        pre = np.concatenate([p[a], q[o]])
        return pre @ w_mix + spec.interaction * ((p[a] * q[o]) @ w_int), pre

    preimages = {}
    sig = {}
    for a, o in all_pairs:
        sig[(a, o)], preimages[(a, o)] = signal(a, o)

    ids, feat_rows, entries = [], [], []
    counter = 0

    def emit(pair, split, n):
        nonlocal counter
        noise = rng.standard_normal((n, db)) * spec.noise
        for k in range(n):
            ids.append(f"syn{counter:06d}")
            feat_rows.append(sig[pair] + noise[k])
            entries.append((ids[-1], pair[0], pair[1], split))
            counter += 1

    for pr in seen:
        emit(pr, "train", counts[pr])
    for pr in seen + sorted(unseen_val):
        emit(pr, "val", spec.eval_per_pair)
    for pr in seen + sorted(unseen_test):
        emit(pr, "test", spec.eval_per_pair)

    md = ManifestData(attrs, objs, entries, unseen_val, unseen_test)
    feats = np.asarray(feat_rows, dtype=np.float32)
    return SyntheticResult(md, ids, feats, counts, p, q, preimages)


def save_synthetic(result: SyntheticResult, embeddings_path, manifest_path) -> None:
    write_embeddings(embeddings_path, result.ids, result.features)
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write(result.manifest_text())
