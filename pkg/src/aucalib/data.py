"""Dataset model, on-disk formats, folds, and a synthetic generator.

Storage is deliberately plain: a CSV manifest that can be read in an
editor, frame images either in a small binary tensor container (CSNT)
or as PGM files. The synthetic generator plants per-identity "attribute
bias" patterns that imitate AU activation signatures, which is exactly
the confound one-frame calibration is meant to cancel.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ManifestError(ValueError):
    """Malformed manifest file; message names the offending row."""


class ContainerError(ValueError):
    """Malformed CSNT tensor container."""


# -- CSNT tensor container ----------------------------------------------
#
# magic "CSNT" | version u16 | entry count u32
# per entry: name length u16, ASCII name, rank u8, dims u32 each,
#            payload f32 little-endian, crc32 of payload u32

CSNT_MAGIC = b"CSNT"
CSNT_VERSION = 1


def write_container(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blob = bytearray()
    blob += CSNT_MAGIC
    blob += struct.pack("<HI", CSNT_VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("ascii")  # raises UnicodeEncodeError for non-ASCII
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        payload = arr.tobytes()
        blob += struct.pack("<H", len(raw)) + raw
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += payload
        blob += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    path.write_bytes(bytes(blob))


def read_container(path) -> dict[str, np.ndarray]:
    """Entries come back float64 in file order; every payload is CRC-checked."""
    path = Path(path)
    blob = path.read_bytes()
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise ContainerError(f"{path.name}: truncated at byte {off}")
        piece = view[off:off + n]
        off += n
        return piece

    if bytes(take(4)) != CSNT_MAGIC:
        raise ContainerError(f"{path.name}: bad magic")
    version, count = struct.unpack("<HI", take(6))
    if version != CSNT_VERSION:
        raise ContainerError(f"{path.name}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("ascii")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = bytes(take(4 * n_elem))
        (crc,) = struct.unpack("<I", take(4))
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ContainerError(f"{path.name}: checksum mismatch for {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    if off != len(view):
        raise ContainerError(f"{path.name}: {len(view) - off} trailing bytes")
    return out


# -- PGM images ----------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Binary P5, maxval 255, mapped linearly to [0, 1]."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def write_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError("PGM writer expects a single-channel image")
    h, w = img.shape
    body = np.rint(img * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + body)


# -- manifest --------------------------------------------------------------

@dataclass(frozen=True)
class FrameRecord:
    participant: str
    frame: int
    image: str
    intensities: tuple[int, ...]
    is_reference: bool = False

    @property
    def label_sum(self) -> int:
        return sum(self.intensities)


@dataclass
class DatasetManifest:
    au_names: tuple[str, ...]
    records: list[FrameRecord]
    root: Path
    note: str = ""
    _containers: dict[str, dict[str, np.ndarray]] = field(
        default_factory=dict, repr=False, compare=False)

    def participants(self) -> list[str]:
        return sorted({r.participant for r in self.records})

    def records_for(self, pid: str) -> list[FrameRecord]:
        rows = [r for r in self.records if r.participant == pid]
        if not rows:
            raise KeyError(f"no participant {pid!r}")
        return sorted(rows, key=lambda r: r.frame)

    def label_matrix(self, records: list[FrameRecord] | None = None) -> np.ndarray:
        rows = self.records if records is None else records
        return np.array([r.intensities for r in rows], dtype=np.int64)

    def load_image(self, record: FrameRecord) -> np.ndarray:
        """Image as (1, H, W) float64."""
        ref = record.image
        if "#" in ref:
            file_part, entry = ref.split("#", 1)
            container = self._container(file_part)
            if entry not in container:
                raise ManifestError(f"container entry {entry!r} missing in {file_part}")
            img = container[entry]
        elif ref.endswith(".pgm"):
            img = read_pgm(self.root / ref)
        else:
            raise ManifestError(f"unrecognized image reference {ref!r}")
        if img.ndim == 2:
            img = img[None, :, :]
        return img

    def load_batch(self, records: list[FrameRecord]) -> np.ndarray:
        return np.stack([self.load_image(r) for r in records], axis=0)

    def _container(self, rel: str) -> dict[str, np.ndarray]:
        if rel not in self._containers:
            full = self.root / rel
            if not full.exists():
                raise ManifestError(f"container file {rel!r} not found under {self.root}")
            self._containers[rel] = read_container(full)
        return self._containers[rel]


MANIFEST_FIXED_COLUMNS = ("participant", "frame", "image", "ref")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    note_lines: list[str] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    body_start = 0
    for line in lines:
        if line.startswith("#"):
            note_lines.append(line[1:].strip())
            body_start += 1
        else:
            break
    reader = csv.reader(lines[body_start:])
    rows = [row for row in reader if row]
    if not rows:
        raise ManifestError(f"{path.name}: empty manifest")
    header = rows[0]
    if tuple(header[:4]) != MANIFEST_FIXED_COLUMNS:
        raise ManifestError(
            f"{path.name}: header must start with {','.join(MANIFEST_FIXED_COLUMNS)}")
    au_cols = header[4:]
    if not au_cols or not all(c.startswith("au_") for c in au_cols):
        raise ManifestError(f"{path.name}: AU columns must be named au_<NAME>")
    au_names = tuple(c[3:] for c in au_cols)

    records: list[FrameRecord] = []
    seen: set[tuple[str, int]] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{path.name} row {lineno}"
        if len(row) != len(header):
            raise ManifestError(f"{where}: expected {len(header)} columns, got {len(row)}")
        pid = row[0].strip()
        if not pid:
            raise ManifestError(f"{where}: empty participant id")
        try:
            frame = int(row[1])
        except ValueError:
            raise ManifestError(f"{where}: frame id {row[1]!r} is not an integer")
        ref_flag = row[3].strip()
        if ref_flag not in ("0", "1"):
            raise ManifestError(f"{where}: ref must be 0 or 1, got {ref_flag!r}")
        intensities = []
        for col, cell in zip(au_cols, row[4:]):
            try:
                v = int(cell)
            except ValueError:
                raise ManifestError(f"{where}: {col} value {cell!r} is not an integer")
            if not 0 <= v <= 5:
                raise ManifestError(f"{where}: {col} intensity {v} outside 0..5")
            intensities.append(v)
        key = (pid, frame)
        if key in seen:
            raise ManifestError(f"{where}: duplicate (participant, frame) {key}")
        seen.add(key)
        records.append(FrameRecord(pid, frame, row[2].strip(),
                                   tuple(intensities), ref_flag == "1"))

    manifest = DatasetManifest(au_names=au_names, records=records,
                               root=path.parent, note=" ".join(note_lines))
    _validate_image_refs(manifest, path.name)
    return manifest


def _validate_image_refs(manifest: DatasetManifest, name: str) -> None:
    for r in manifest.records:
        if "#" in r.image:
            file_part, entry = r.image.split("#", 1)
            container = manifest._container(file_part)
            if entry not in container:
                raise ManifestError(
                    f"{name}: {r.participant}/{r.frame} references missing entry "
                    f"{entry!r} in {file_part}")
        elif r.image.endswith(".pgm"):
            if not (manifest.root / r.image).exists():
                raise ManifestError(
                    f"{name}: {r.participant}/{r.frame} references missing file {r.image}")
        else:
            raise ManifestError(
                f"{name}: {r.participant}/{r.frame} has unrecognized image ref {r.image!r}")


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if manifest.note:
            fh.write(f"# {manifest.note}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(MANIFEST_FIXED_COLUMNS)
                        + [f"au_{n}" for n in manifest.au_names])
        for r in sorted(manifest.records, key=lambda r: (r.participant, r.frame)):
            writer.writerow([r.participant, r.frame, r.image,
                             int(r.is_reference), *r.intensities])


# -- reference selection ------------------------------------------------------

def select_reference(manifest: DatasetManifest, pid: str) -> int:
    """Frame id of the calibration reference for one participant.

    An explicit ref flag wins; otherwise the frame with the smallest
    label sum, ties broken by the smallest frame id. A flagged pair is
    an error because calibration is defined against a single frame.
    """
    rows = manifest.records_for(pid)
    flagged = [r for r in rows if r.is_reference]
    if len(flagged) > 1:
        raise ManifestError(f"participant {pid!r} has {len(flagged)} reference flags")
    if flagged:
        return flagged[0].frame
    best = min(rows, key=lambda r: (r.label_sum, r.frame))
    return best.frame


def reference_record(manifest: DatasetManifest, pid: str) -> FrameRecord:
    frame = select_reference(manifest, pid)
    for r in manifest.records_for(pid):
        if r.frame == frame:
            return r
    raise KeyError(f"no frame {frame} for participant {pid!r}")


# -- folds --------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSpec:
    k: int
    assignment: dict[str, int]

    def participants_in(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def split(self, fold: int) -> tuple[list[str], list[str]]:
        """(train participants, validation participants) for one fold."""
        val = self.participants_in(fold)
        train = sorted(p for p, f in self.assignment.items() if f != fold)
        return train, val

    def validate(self) -> None:
        folds = set(self.assignment.values())
        if folds != set(range(self.k)):
            raise ValueError("every fold must be nonempty")


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldSpec:
    """Participant-exclusive folds: sort, seed-shuffle, deal round-robin."""
    pids = manifest.participants()
    if k < 2:
        raise ValueError("cross-validation needs k >= 2")
    if k > len(pids):
        raise ValueError(f"k={k} exceeds {len(pids)} participants")
    order = list(pids)
    np.random.default_rng(seed).shuffle(order)
    assignment = {pid: i % k for i, pid in enumerate(order)}
    spec = FoldSpec(k=k, assignment=assignment)
    spec.validate()
    return spec


# -- synthetic confounded-identity generator -----------------------------------

@dataclass(frozen=True)
class SynthConfig:
    participants: int = 12
    frames: int = 200
    size: int = 32
    n_au: int = 6
    n_bias: int = 3          # identity attribute blobs per participant
    overlap: float = 0.7     # how strongly attributes mimic AU signatures
    zero_mass: float = 0.7   # P(intensity = 0)
    decay: float = 0.5       # geometric decay over intensities 1..5
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if not 0.0 < self.zero_mass < 1.0:
            raise ValueError("zero_mass must lie in (0, 1)")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.participants < 1 or self.frames < 2:
            raise ValueError("need >= 1 participants and >= 2 frames each")
        if self.n_au < 1 or self.size < 8 or self.n_bias < 0:
            raise ValueError("invalid n_au/size/n_bias")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def intensity_probs(self) -> np.ndarray:
        geo = self.decay ** np.arange(5)
        p = np.empty(6)
        p[0] = self.zero_mass
        p[1:] = (1.0 - self.zero_mass) * geo / geo.sum()
        return p


@dataclass
class SynthTruth:
    """Generator internals kept for analysis: not part of the dataset."""

    signatures: np.ndarray                 # (n_au, H, W), unit L2 norm
    base: dict[str, np.ndarray]            # per-identity static pattern
    bias_total: dict[str, np.ndarray]      # per-identity summed bias blobs
    bias_aus: dict[str, list[int]]         # which AU each blob imitates


@dataclass
class SynthResult:
    manifest: DatasetManifest
    manifest_path: Path
    container_path: Path
    truth: SynthTruth


def _unit_bump(rng: np.random.Generator, size: int,
               center: tuple[float, float] | None = None) -> np.ndarray:
    if center is None:
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
    else:
        cy, cx = center
    sigma = rng.uniform(0.06, 0.14) * size
    yy, xx = np.mgrid[0:size, 0:size]
    p = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    return p / np.linalg.norm(p)


def _au_signatures(rng: np.random.Generator, n_au: int, size: int) -> np.ndarray:
    """Bumps on a jittered grid so signatures occupy distinct regions."""
    cols = int(np.ceil(np.sqrt(n_au)))
    rows = int(np.ceil(n_au / cols))
    sigs = []
    for i in range(n_au):
        r, c = divmod(i, cols)
        cy = (r + 0.5) / rows * size + rng.uniform(-0.05, 0.05) * size
        cx = (c + 0.5) / cols * size + rng.uniform(-0.05, 0.05) * size
        sigs.append(_unit_bump(rng, size, center=(cy, cx)))
    return np.stack(sigs)


def generate_synthetic(cfg: SynthConfig, out_dir) -> SynthResult:
    """Write manifest.csv + images.csnt for a confounded-identity dataset.

    Every identity carries static bias blobs, each blob a convex mix
    overlap * P_au + (1 - overlap) * Q of an AU signature and an
    independent pattern with a random sign. Frame images add the scaled
    AU signatures for that frame's intensities plus pixel noise. Frame 0
    of every participant is forced all-zero so a natural reference
    always exists; the ref column is left 0 to exercise automatic
    selection.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    size = cfg.size

    signatures = _au_signatures(rng, cfg.n_au, size)
    probs = cfg.intensity_probs()

    tensors: dict[str, np.ndarray] = {}
    records: list[FrameRecord] = []
    base_by_pid: dict[str, np.ndarray] = {}
    bias_by_pid: dict[str, np.ndarray] = {}
    bias_aus: dict[str, list[int]] = {}

    for p in range(cfg.participants):
        pid = f"p{p:02d}"
        base = np.zeros((size, size))
        for _ in range(2):  # broad low-frequency background
            cy, cx = rng.uniform(0, size, size=2)
            width = rng.uniform(0.3, 0.5) * size
            yy, xx = np.mgrid[0:size, 0:size]
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
            base += rng.uniform(-0.2, 0.2) * blob

        bias = np.zeros((size, size))
        assigned: list[int] = []
        for _ in range(cfg.n_bias):
            au = int(rng.integers(cfg.n_au))
            q = _unit_bump(rng, size) * rng.choice([-1.0, 1.0])
            bias += cfg.overlap * signatures[au] + (1.0 - cfg.overlap) * q
            assigned.append(au)
        base_by_pid[pid] = base
        bias_by_pid[pid] = bias
        bias_aus[pid] = assigned

        labels = rng.choice(6, size=(cfg.frames, cfg.n_au), p=probs)
        labels[0, :] = 0  # guaranteed neutral frame
        for f in range(cfg.frames):
            expression = (labels[f][:, None, None] / 5.0 * signatures).sum(axis=0)
            img = base + bias + expression + rng.normal(0.0, cfg.noise, size=(size, size))
            entry = f"{pid}_{f:04d}"
            tensors[entry] = img.astype(np.float32)
            records.append(FrameRecord(pid, f, f"images.csnt#{entry}",
                                       tuple(int(v) for v in labels[f])))

    container_path = out_dir / "images.csnt"
    write_container(container_path, tensors)
    au_names = tuple(f"{i + 1:02d}" for i in range(cfg.n_au))
    manifest = DatasetManifest(
        au_names=au_names, records=records, root=out_dir,
        note=(f"synthetic confounded-identity set: {cfg.participants} participants x "
              f"{cfg.frames} frames, {cfg.n_au} AUs, overlap {cfg.overlap}, seed {cfg.seed}"))
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest, manifest_path)
    loaded = load_manifest(manifest_path)
    truth = SynthTruth(signatures=signatures, base=base_by_pid,
                       bias_total=bias_by_pid, bias_aus=bias_aus)
    return SynthResult(manifest=loaded, manifest_path=manifest_path,
                       container_path=container_path, truth=truth)
