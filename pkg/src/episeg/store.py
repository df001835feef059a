"""HFD1 tensor container, per-image feature dumps, and episode manifests.

File layout: magic ``HFD1`` | uint32-le header length | UTF-8 JSON header |
raw little-endian row-major payloads. The header lists every tensor's name,
dtype (``f32``/``u8``), shape, and byte offset/length relative to the end of
the header. Canonical JSON (sorted keys, tensors sorted by name) makes two
writes of identical content byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"HFD1"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class StoreError(Exception):
    """Base class for container and episode errors."""


class BadMagicError(StoreError):
    pass


class TruncatedError(StoreError):
    pass


class HeaderError(StoreError):
    pass


class InvariantError(StoreError):
    pass


class NonFiniteError(StoreError):
    pass


class GeometryError(StoreError):
    pass


class MissingMaskError(StoreError):
    pass


# ---------------------------------------------------------------------------
# generic named-tensor container


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors plus a JSON meta block to ``path``.

    Only f32 and u8 tensors are accepted. Tensor payloads are laid out in
    sorted-name order so the output is deterministic.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_NAMES:
            if arr.dtype.kind == "f":
                arr = arr.astype("<f4")
            elif arr.dtype.kind in "iub":
                arr = arr.astype("u1")
            else:
                raise InvariantError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes(order="C")
        entries.append(
            {
                "dtype": _DTYPE_NAMES[np.dtype(arr.dtype.newbyteorder("="))],
                "length": len(blob),
                "name": name,
                "offset": offset,
                "shape": list(arr.shape),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back a container written by :func:`write_tensors`.

    Raises typed errors for bad magic, truncation, and malformed headers;
    never lets struct/json/key errors escape undecorated.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise TruncatedError(f"{path}: file shorter than fixed preamble")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {data[:4]!r}")
    (header_len,) = struct.unpack("<I", data[4:8])
    if 8 + header_len > len(data):
        raise TruncatedError(f"{path}: declared header length {header_len} past EOF")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict) or "tensors" not in header or "meta" not in header:
        raise HeaderError(f"{path}: header missing 'tensors'/'meta'")
    payload = data[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        try:
            name = entry["name"]
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HeaderError(f"{path}: malformed tensor entry {entry!r}") from exc
        if any(s < 0 for s in shape) or off < 0 or length < 0:
            raise HeaderError(f"{path}: negative shape/offset in entry {name!r}")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != length:
            raise HeaderError(
                f"{path}: tensor {name!r} length {length} != shape payload {expected}"
            )
        if off + length > len(payload):
            raise TruncatedError(f"{path}: tensor {name!r} payload past EOF")
        tensors[name] = np.frombuffer(payload[off : off + length], dtype=dtype).reshape(shape)
    return tensors, header["meta"]


# ---------------------------------------------------------------------------
# feature dumps


@dataclass
class DumpMeta:
    hg: int
    wg: int
    patch_size: int
    backbone: str
    attn_layers: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "hg": self.hg,
            "wg": self.wg,
            "patch_size": self.patch_size,
            "backbone": self.backbone,
            "attn_layers": list(self.attn_layers),
        }
        if self.extra:
            out["extra"] = self.extra
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DumpMeta":
        try:
            return cls(
                hg=int(obj["hg"]),
                wg=int(obj["wg"]),
                patch_size=int(obj["patch_size"]),
                backbone=str(obj["backbone"]),
                attn_layers=[int(i) for i in obj["attn_layers"]],
                extra=dict(obj.get("extra", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise HeaderError(f"malformed meta block: {exc}") from exc


@dataclass
class FeatureDump:
    """Cached per-image features on the patch grid.

    tokens      -- [L, N, D] layerwise patch tokens, row-major over the grid
    qk_logits   -- [La, H, N, N] pre-softmax query-key logits
    kk_logits   -- [La, H, N, N] pre-softmax key-key logits
    image_small -- [3, Hg, Wg] image downsampled to the grid, values in [0, 1]
    mask        -- [Hg, Wg] binary mask or None (queries may omit it)
    """

    tokens: np.ndarray
    qk_logits: np.ndarray
    kk_logits: np.ndarray
    image_small: np.ndarray
    meta: DumpMeta
    mask: np.ndarray | None = None

    @property
    def n_layers(self) -> int:
        return self.tokens.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.meta.hg, self.meta.wg

    def validate(self) -> None:
        t, qk, kk, img = self.tokens, self.qk_logits, self.kk_logits, self.image_small
        if t.ndim != 3 or qk.ndim != 4 or kk.ndim != 4 or img.ndim != 3:
            raise InvariantError("tensor rank mismatch")
        all_arrays = [t, qk, kk, img] + ([self.mask] if self.mask is not None else [])
        for arr in all_arrays:
            if any(s <= 0 for s in arr.shape):
                raise InvariantError(f"zero-sized dimension in shape {arr.shape}")
        L, N, _ = t.shape
        hg, wg = self.meta.hg, self.meta.wg
        if N != hg * wg:
            raise InvariantError(f"token count {N} != grid {hg}x{wg}")
        if qk.shape != kk.shape or qk.shape[2:] != (N, N):
            raise InvariantError(f"attention shapes {qk.shape}/{kk.shape} inconsistent")
        la = qk.shape[0]
        if la > L:
            raise InvariantError(f"attention layers {la} exceed token layers {L}")
        idx = self.meta.attn_layers
        if len(idx) != la:
            raise InvariantError(f"{len(idx)} attn layer indices for {la} attention slabs")
        if any(b <= a for a, b in zip(idx, idx[1:])) or any(i < 0 or i >= L for i in idx):
            raise InvariantError(f"attn layer indices {idx} not strictly increasing in [0,{L})")
        if img.shape != (3, hg, wg):
            raise InvariantError(f"image_small shape {img.shape} != (3,{hg},{wg})")
        for name, arr in (("tokens", t), ("qk_logits", qk), ("kk_logits", kk), ("image_small", img)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"non-finite values in {name}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise InvariantError("image_small values outside [0,1]")
        if self.mask is not None:
            if self.mask.shape != (hg, wg):
                raise InvariantError(f"mask shape {self.mask.shape} != grid")
            if not np.isin(self.mask, (0, 1)).all():
                raise InvariantError("mask values outside {0,1}")

    def attn_at(self, layer: int) -> tuple[np.ndarray, np.ndarray] | None:
        """(qk, kk) logits [H, N, N] for a token layer, or None if not exported."""
        if layer in self.meta.attn_layers:
            i = self.meta.attn_layers.index(layer)
            return self.qk_logits[i], self.kk_logits[i]
        return None

    def flat_mask(self) -> np.ndarray:
        """Mask flattened row-major to [N], as float64."""
        if self.mask is None:
            raise MissingMaskError("dump has no mask")
        return self.mask.reshape(-1).astype(np.float64)


def write_dump(dump: FeatureDump, path) -> None:
    """Validate and serialize a dump; nothing is written when invalid."""
    dump.validate()
    tensors = {
        "tokens": dump.tokens.astype("<f4"),
        "qk_logits": dump.qk_logits.astype("<f4"),
        "kk_logits": dump.kk_logits.astype("<f4"),
        "image_small": dump.image_small.astype("<f4"),
    }
    if dump.mask is not None:
        tensors["mask"] = dump.mask.astype("u1")
    write_tensors(path, tensors, dump.meta.to_json())


def read_dump(path) -> FeatureDump:
    tensors, meta = read_tensors(path)
    missing = {"tokens", "qk_logits", "kk_logits", "image_small"} - set(tensors)
    if missing:
        raise HeaderError(f"{path}: dump missing tensors {sorted(missing)}")
    dump = FeatureDump(
        tokens=tensors["tokens"],
        qk_logits=tensors["qk_logits"],
        kk_logits=tensors["kk_logits"],
        image_small=tensors["image_small"],
        mask=tensors.get("mask"),
        meta=DumpMeta.from_json(meta),
    )
    dump.validate()
    return dump


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    """K labeled supports plus one query, all on the same grid/backbone.

    The query mask, when present, is used for evaluation only.
    """

    supports: list[FeatureDump]
    query: FeatureDump
    class_id: str = ""

    @property
    def shot(self) -> int:
        return len(self.supports)

    def validate(self) -> None:
        if not self.supports:
            raise InvariantError("episode needs at least one support")
        ref = self.query
        ref_sig = (ref.meta.hg, ref.meta.wg, ref.tokens.shape[0], ref.tokens.shape[2], ref.meta.backbone)
        for i, s in enumerate(self.supports):
            if s.mask is None:
                raise MissingMaskError(f"support {i} has no mask")
            sig = (s.meta.hg, s.meta.wg, s.tokens.shape[0], s.tokens.shape[2], s.meta.backbone)
            if sig != ref_sig:
                raise GeometryError(f"support {i} geometry {sig} != query {ref_sig}")


def load_episode(manifest_path) -> Episode:
    """Load an episode manifest: {"supports": [paths], "query": path, "class_id": str}."""
    import os

    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise HeaderError(f"{manifest_path}: not valid JSON") from exc
    try:
        support_paths = list(spec["supports"])
        query_path = spec["query"]
        class_id = str(spec.get("class_id", ""))
    except (KeyError, TypeError) as exc:
        raise HeaderError(f"{manifest_path}: manifest missing fields") from exc
    base = os.path.dirname(os.path.abspath(manifest_path))
    resolve = lambda p: p if os.path.isabs(p) else os.path.join(base, p)
    episode = Episode(
        supports=[read_dump(resolve(p)) for p in support_paths],
        query=read_dump(resolve(query_path)),
        class_id=class_id,
    )
    episode.validate()
    return episode


def clone_dump(dump: FeatureDump) -> FeatureDump:
    """Deep copy; mutation-safe starting point for synthetic views."""
    return replace(
        dump,
        tokens=dump.tokens.copy(),
        qk_logits=dump.qk_logits.copy(),
        kk_logits=dump.kk_logits.copy(),
        image_small=dump.image_small.copy(),
        mask=None if dump.mask is None else dump.mask.copy(),
        meta=replace(dump.meta, attn_layers=list(dump.meta.attn_layers), extra=dict(dump.meta.extra)),
    )
