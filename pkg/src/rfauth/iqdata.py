"""IQ recordings, sliding-window slicing, and train/validate/test split manifests.

File format: raw interleaved float32 little-endian pairs (I then Q), no
header. Filename convention is ``<device_id>_<domain_id>.iq``. Slices are
(2, L) real arrays with I in row 0 and Q in row 1.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    LabelMismatch,
    MalformedFile,
    NonFiniteSample,
    RecordingTooShort,
    ShapeError,
)

# Per-slice normalization targets unit mean power, where power of complex
# sample n is I[n]^2 + Q[n]^2. Slices whose power falls below this floor are
# left unscaled (an all-zero window cannot be normalized).
_POWER_FLOOR = 1e-30


@dataclass(frozen=True)
class IQRecording:
    """One device's complex baseband capture for one domain (day/environment)."""

    device_id: int
    domain_id: str
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if not np.iscomplexobj(samples):
            samples = samples.astype(np.complex64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size < 1:
            raise MalformedFile("recording must be a non-empty 1-D complex sequence")
        if not (np.all(np.isfinite(samples.real)) and np.all(np.isfinite(samples.imag))):
            raise NonFiniteSample(
                f"non-finite sample in recording dev={self.device_id} domain={self.domain_id}"
            )

    @property
    def sample_count(self) -> int:
        return int(self.samples.size)


@dataclass(frozen=True)
class SliceSet:
    """Windowed IQ slices: slices (m, 2, L) float32, labels (m,) device ids."""

    slices: np.ndarray
    labels: np.ndarray
    domain_id: str
    slice_length: int
    stride: int

    def __post_init__(self):
        slices = np.asarray(self.slices, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "labels", labels)
        if slices.ndim != 3 or slices.shape[1] != 2 or slices.shape[2] != self.slice_length:
            raise ShapeError(
                f"slices must have shape (m, 2, {self.slice_length}), got {slices.shape}"
            )
        if labels.shape != (slices.shape[0],):
            raise ShapeError("labels length must equal the number of slices")
        if self.stride < 1:
            raise ShapeError("stride must be >= 1")
        if not np.all(np.isfinite(slices)):
            raise NonFiniteSample(f"non-finite value in slice set for domain {self.domain_id}")

    def __len__(self) -> int:
        return int(self.slices.shape[0])

    @property
    def device_ids(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.labels))

    def subset(self, indices) -> "SliceSet":
        idx = np.asarray(indices, dtype=np.int64)
        return SliceSet(
            self.slices[idx], self.labels[idx], self.domain_id, self.slice_length, self.stride
        )

    def for_device(self, device_id: int) -> "SliceSet":
        return self.subset(np.nonzero(self.labels == device_id)[0])

    def save(self, path):
        np.savez_compressed(
            path,
            slices=self.slices,
            labels=self.labels,
            domain_id=np.str_(self.domain_id),
            slice_length=self.slice_length,
            stride=self.stride,
        )

    @classmethod
    def load(cls, path) -> "SliceSet":
        with np.load(path, allow_pickle=False) as z:
            return cls(
                z["slices"],
                z["labels"],
                str(z["domain_id"]),
                int(z["slice_length"]),
                int(z["stride"]),
            )


@dataclass(frozen=True)
class SplitManifest:
    """Slice-index roles for one (domain T, domain S) pair, reproducible by seed.

    Domain T is partitioned 80/10/10 into base_train/base_val/base_test.
    reveal_train_T is a 10% subset reserved out of base_val (it overlaps
    base_val by construction). Domain S is partitioned into reveal_train_S
    (10%, matching the classifier's test budget) and ttod_eval_S (90%).
    """

    seed: int
    domain_T: str
    domain_S: str
    slice_length: int
    base_train: list[int]
    base_val: list[int]
    base_test: list[int]
    reveal_train_T: list[int]
    reveal_train_S: list[int]
    ttod_eval_S: list[int]
    fractions: tuple = (0.8, 0.1, 0.1)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "domain_T": self.domain_T,
            "domain_S": self.domain_S,
            "slice_length": self.slice_length,
            "fractions": list(self.fractions),
            "base_train": self.base_train,
            "base_val": self.base_val,
            "base_test": self.base_test,
            "reveal_train_T": self.reveal_train_T,
            "reveal_train_S": self.reveal_train_S,
            "ttod_eval_S": self.ttod_eval_S,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        doc = json.loads(text)
        return cls(
            seed=int(doc["seed"]),
            domain_T=doc["domain_T"],
            domain_S=doc["domain_S"],
            slice_length=int(doc["slice_length"]),
            base_train=[int(i) for i in doc["base_train"]],
            base_val=[int(i) for i in doc["base_val"]],
            base_test=[int(i) for i in doc["base_test"]],
            reveal_train_T=[int(i) for i in doc["reveal_train_T"]],
            reveal_train_S=[int(i) for i in doc["reveal_train_S"]],
            ttod_eval_S=[int(i) for i in doc["ttod_eval_S"]],
            fractions=tuple(doc["fractions"]),
        )


def read_iq_file(path, device_id: int, domain_id: str) -> IQRecording:
    """Decode interleaved (I, Q) little-endian float32 pairs into a recording."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MalformedFile(f"cannot read {path}: {exc}") from exc
    if len(raw) == 0 or len(raw) % 8 != 0:
        raise MalformedFile(
            f"{path}: byte length {len(raw)} is not a positive multiple of 8"
        )
    floats = np.frombuffer(raw, dtype="<f4")
    if not np.all(np.isfinite(floats)):
        raise NonFiniteSample(f"{path}: corrupt capture contains NaN/Inf")
    samples = (floats[0::2] + 1j * floats[1::2]).astype(np.complex64)
    return IQRecording(device_id=device_id, domain_id=domain_id, samples=samples)


def write_iq_file(path, rec: IQRecording):
    """Write a recording in the same interleaved float32 little-endian layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = np.empty(2 * rec.sample_count, dtype="<f4")
    out[0::2] = rec.samples.real.astype(np.float32)
    out[1::2] = rec.samples.imag.astype(np.float32)
    path.write_bytes(out.tobytes())


def iq_filename(device_id: int, domain_id: str) -> str:
    return f"{device_id}_{domain_id}.iq"


def parse_iq_filename(name: str):
    """Return (device_id, domain_id) for a ``<device_id>_<domain_id>.iq`` name."""
    m = re.fullmatch(r"(\d+)_(.+)\.iq", Path(name).name)
    if m is None:
        raise MalformedFile(f"filename {name!r} does not match <device_id>_<domain_id>.iq")
    return int(m.group(1)), m.group(2)


def slice_recording(
    rec: IQRecording,
    slice_length: int,
    stride: int = 1,
    max_slices: int | None = None,
    normalize: bool = True,
) -> SliceSet:
    """Cut a recording into (2, L) windows with a sliding window.

    Slice k covers samples [k*stride, k*stride + L). Produces
    min(max_slices, floor((n - L)/stride) + 1) slices, keeping the earliest
    windows when max_slices truncates. With normalize on, each slice is
    scaled to unit mean power (mean of I^2 + Q^2 over the window).
    """
    if slice_length < 1:
        raise ShapeError("slice_length must be >= 1")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    n = rec.sample_count
    if n < slice_length:
        raise RecordingTooShort(
            f"recording has {n} samples, need at least {slice_length}"
        )
    count = (n - slice_length) // stride + 1
    if max_slices is not None:
        count = min(count, int(max_slices))
    i = rec.samples.real.astype(np.float32)
    q = rec.samples.imag.astype(np.float32)
    offsets = np.arange(count) * stride
    window = np.arange(slice_length)
    idx = offsets[:, None] + window[None, :]
    slices = np.stack([i[idx], q[idx]], axis=1)
    if normalize:
        power = np.mean(np.square(slices.astype(np.float64)).sum(axis=1), axis=1)
        scale = np.where(power > _POWER_FLOOR, 1.0 / np.sqrt(np.maximum(power, _POWER_FLOOR)), 1.0)
        slices = (slices * scale[:, None, None].astype(np.float32)).astype(np.float32)
    labels = np.full(count, rec.device_id, dtype=np.int64)
    return SliceSet(slices, labels, rec.domain_id, slice_length, stride)


def merge_slice_sets(sets) -> SliceSet:
    """Concatenate per-device slice sets from the same domain into one pool."""
    sets = list(sets)
    if not sets:
        raise ShapeError("cannot merge an empty list of slice sets")
    first = sets[0]
    for s in sets[1:]:
        if s.domain_id != first.domain_id:
            raise LabelMismatch("cannot merge slice sets from different domains")
        if s.slice_length != first.slice_length or s.stride != first.stride:
            raise ShapeError("cannot merge slice sets with different slicing geometry")
    return SliceSet(
        np.concatenate([s.slices for s in sets], axis=0),
        np.concatenate([s.labels for s in sets], axis=0),
        first.domain_id,
        first.slice_length,
        first.stride,
    )


def _proportional_take(counts, total_take: int) -> list[int]:
    """Split total_take across pools proportionally via cumulative rounding.

    Returns per-pool takes that are non-negative, never exceed the pool, and
    sum to exactly total_take (integer arithmetic, half rounds up).
    """
    total = sum(counts)
    if total_take > total:
        raise ValueError("cannot take more items than exist")
    takes, prev, cum = [], 0, 0
    for c in counts:
        cum += c
        cur = (2 * total_take * cum + total) // (2 * total) if total else 0
        takes.append(cur - prev)
        prev = cur
    return takes


def _round_half_up_frac(n: int, num: int, den: int = 10) -> int:
    """floor(n * num/den + 0.5) in exact integer arithmetic."""
    return (2 * n * num + den) // (2 * den)


def build_splits(sliceset_T: SliceSet, sliceset_S: SliceSet, seed: int) -> SplitManifest:
    """Partition both domains into the pipeline's roles, reproducibly.

    Domain T: 80/10/10 train/val/test, per-device stratified so every device
    contributes proportionally to every role; global sizes land within one
    slice of the exact fractions. reveal_train_T reserves 10% of base_val.
    Domain S: 10% reveal_train_S (translator training budget, matching the
    base-test budget), remaining 90% ttod_eval_S.
    """
    if len(sliceset_T) == 0 or len(sliceset_S) == 0:
        raise LabelMismatch("both slice sets must be non-empty")
    if sliceset_T.slice_length != sliceset_S.slice_length:
        raise ShapeError("slice sets must share a slice length")
    devices = sliceset_T.device_ids
    if devices != sliceset_S.device_ids:
        raise LabelMismatch(
            f"device sets differ across domains: {devices} vs {sliceset_S.device_ids}"
        )
    rng = np.random.default_rng(seed)

    # Domain T: per-device permutations, then proportional role quotas.
    t_perms = [
        rng.permutation(np.nonzero(sliceset_T.labels == d)[0]).tolist() for d in devices
    ]
    t_counts = [len(p) for p in t_perms]
    n_t = sum(t_counts)
    total_train = _round_half_up_frac(n_t, 8)
    total_trainval = _round_half_up_frac(n_t, 9)
    train_q = _proportional_take(t_counts, total_train)
    val_q = _proportional_take(
        [c - t for c, t in zip(t_counts, train_q)], total_trainval - total_train
    )
    base_train, base_val, base_test, reveal_T_parts = [], [], [], []
    for perm, n_tr, n_va in zip(t_perms, train_q, val_q):
        base_train.extend(perm[:n_tr])
        base_val.append(perm[n_tr : n_tr + n_va])
        base_test.extend(perm[n_tr + n_va :])
    val_counts = [len(v) for v in base_val]
    reveal_q = _proportional_take(val_counts, _round_half_up_frac(sum(val_counts), 1))
    for v, k in zip(base_val, reveal_q):
        reveal_T_parts.extend(v[:k])
    base_val = [i for v in base_val for i in v]

    # Domain S: per-device 10% translator budget, 90% evaluation.
    s_perms = [
        rng.permutation(np.nonzero(sliceset_S.labels == d)[0]).tolist() for d in devices
    ]
    s_counts = [len(p) for p in s_perms]
    s_reveal_q = _proportional_take(s_counts, _round_half_up_frac(sum(s_counts), 1))
    reveal_train_S, ttod_eval_S = [], []
    for perm, k in zip(s_perms, s_reveal_q):
        reveal_train_S.extend(perm[:k])
        ttod_eval_S.extend(perm[k:])

    return SplitManifest(
        seed=seed,
        domain_T=sliceset_T.domain_id,
        domain_S=sliceset_S.domain_id,
        slice_length=sliceset_T.slice_length,
        base_train=sorted(int(i) for i in base_train),
        base_val=sorted(int(i) for i in base_val),
        base_test=sorted(int(i) for i in base_test),
        reveal_train_T=sorted(int(i) for i in reveal_T_parts),
        reveal_train_S=sorted(int(i) for i in reveal_train_S),
        ttod_eval_S=sorted(int(i) for i in ttod_eval_S),
    )
