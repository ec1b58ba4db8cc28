"""Versioned expert bundles and the on-disk contribution registry.

Bundle layout (all integers little-endian)::

    b"MOEC" | u16 format version (1) | u32 manifest length | manifest UTF-8 JSON
    | u16 tensor count | per tensor: u16 name length, name UTF-8, u32 rows, u32 cols,
      rows*cols float64 | u32 CRC-32 of every preceding byte

A registry directory holds ``index.json``, the shared ``encoder.moec`` and one
bundle per registered (expert_id, version) under ``experts/``.
"""
from __future__ import annotations

import datetime as dt
import json
import os
import re
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderConfig, TokenizerConfig
from .exceptions import (AssemblyError, BadMagicError, BundleError, BundleShapeError,
                         ChecksumError, CompatibilityError, ConflictError,
                         UnsupportedFormatError, ValidationError)
from .expert import PARAM_NAMES, ExpertModule
from .gating import GatingNetwork, init_gating
from .moe import MoEModel
from .ndmath import Param

MAGIC = b"MOEC"
FORMAT_VERSION = 1
INDEX_NAME = "index.json"
ENCODER_NAME = "encoder.moec"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_SEMVER = re.compile(r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)$")


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def format_fingerprint(fp: int) -> str:
    return f"{fp:016x}"


def parse_semver(version: str) -> tuple[int, int, int]:
    m = _SEMVER.match(version)
    if not m:
        raise ValidationError(f"version {version!r} is not MAJOR.MINOR.PATCH")
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def utc_now() -> str:
    return dt.datetime.now(dt.timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


# ---------------------------------------------------------------- container codec


def encode_container(manifest: dict, tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<H", FORMAT_VERSION)
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(mbytes)) + mbytes
    out += struct.pack("<H", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"tensor {name!r} must be 2-D")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<II", *arr.shape)
        out += arr.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_container(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a bundle file (bad magic bytes)")
    if len(blob) < 6:
        raise ChecksumError("bundle truncated inside the header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedFormatError(f"unsupported bundle format version {version}")
    if len(blob) < 10:
        raise ChecksumError("bundle truncated before checksum")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("bundle checksum mismatch (file corrupted or truncated)")
    try:
        pos = 6
        (mlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        manifest = json.loads(blob[pos:pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            n = rows * cols
            if pos + 8 * n > len(blob) - 4:
                raise BundleError(f"tensor {name!r} runs past the end of the bundle")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(rows, cols).astype(np.float64)
            pos += 8 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"malformed bundle body: {exc}") from exc
    if pos != len(blob) - 4:
        raise BundleError("trailing bytes before checksum")
    return manifest, tensors


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------- expert bundles


@dataclass
class ExpertManifest:
    expert_id: str
    version: str
    domain_tag: str
    encoder_fingerprint: str
    hidden_dim: int
    adapter_dim: int
    num_classes: int
    label_names: list[str]
    created_at: str = field(default_factory=utc_now)
    contributor: str = ""

    def __post_init__(self):
        parse_semver(self.version)
        if len(self.label_names) != self.num_classes:
            raise ValidationError(
                f"manifest lists {len(self.label_names)} label names for {self.num_classes} classes")
        if not self.expert_id:
            raise ValidationError("expert_id must be non-empty")

    def to_dict(self) -> dict:
        return {"kind": "expert", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertManifest":
        d = {k: v for k, v in d.items() if k != "kind"}
        try:
            return cls(**d)
        except TypeError as exc:
            raise BundleError(f"invalid expert manifest: {exc}") from exc


@dataclass
class ExpertBundle:
    manifest: ExpertManifest
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        m = self.manifest
        d, k, c = m.hidden_dim, m.adapter_dim, m.num_classes
        expected = {"W_down": (d, k), "b_down": (1, k), "W_up": (k, d), "b_up": (1, d),
                    "W_out": (d, c), "b_out": (1, c)}
        if set(self.tensors) != set(expected):
            raise BundleShapeError(f"bundle tensors {sorted(self.tensors)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise BundleShapeError(
                    f"tensor {name} has shape {self.tensors[name].shape}, manifest implies {shape}")

    def to_expert(self) -> ExpertModule:
        return ExpertModule(**{n: Param(self.tensors[n].copy()) for n in PARAM_NAMES},
                            domain_tag=self.manifest.domain_tag)


def make_bundle(expert: ExpertModule, expert_id: str, version: str, encoder_fingerprint,
                label_names: list[str], contributor: str = "", created_at: str | None = None) -> ExpertBundle:
    if isinstance(encoder_fingerprint, int):
        encoder_fingerprint = format_fingerprint(encoder_fingerprint)
    manifest = ExpertManifest(expert_id, version, expert.domain_tag, encoder_fingerprint,
                              expert.hidden_dim, expert.adapter_dim, expert.num_classes,
                              list(label_names), created_at or utc_now(), contributor)
    return ExpertBundle(manifest, {n: getattr(expert, n).value.copy() for n in PARAM_NAMES})


def save_bundle(bundle: ExpertBundle, path) -> None:
    ExpertBundle(bundle.manifest, bundle.tensors)  # re-validate before touching disk
    data = encode_container(bundle.manifest.to_dict(),
                            {n: bundle.tensors[n] for n in PARAM_NAMES})
    _write_atomic(Path(path), data)


def load_bundle(path) -> ExpertBundle:
    manifest, tensors = decode_container(Path(path).read_bytes())
    if manifest.get("kind") != "expert":
        raise BundleError(f"{path}: expected an expert bundle, found kind {manifest.get('kind')!r}")
    return ExpertBundle(ExpertManifest.from_dict(manifest), tensors)


# ---------------------------------------------------------------- encoder / gating bundles


def save_encoder(enc: Encoder, path) -> None:
    manifest = {"kind": "encoder", **enc.config_dict(),
                "fingerprint": format_fingerprint(enc.fingerprint())}
    data = encode_container(manifest, {n: enc.params[n].value for n in enc.param_names()})
    _write_atomic(Path(path), data)


def load_encoder(path) -> Encoder:
    manifest, tensors = decode_container(Path(path).read_bytes())
    if manifest.get("kind") != "encoder":
        raise BundleError(f"{path}: expected an encoder bundle, found kind {manifest.get('kind')!r}")
    try:
        enc = Encoder(EncoderConfig(**manifest["encoder"]), TokenizerConfig(**manifest["tokenizer"]),
                      {n: Param(v) for n, v in tensors.items()})
    except ValidationError as exc:
        raise BundleShapeError(f"{path}: {exc}") from exc
    if format_fingerprint(enc.fingerprint()) != manifest["fingerprint"]:
        raise ChecksumError(f"{path}: encoder fingerprint does not match its parameters")
    return enc


def save_gating(gn: GatingNetwork, path, experts: list[str] | None = None,
                encoder_fingerprint: str | None = None) -> None:
    manifest = {"kind": "gating", "hidden_dim": gn.hidden_dim, "num_experts": gn.num_experts,
                "experts": list(experts or []), "encoder_fingerprint": encoder_fingerprint}
    _write_atomic(Path(path), encode_container(manifest, {"W_g": gn.W_g.value, "b_g": gn.b_g.value}))


def load_gating(path) -> tuple[GatingNetwork, dict]:
    manifest, tensors = decode_container(Path(path).read_bytes())
    if manifest.get("kind") != "gating":
        raise BundleError(f"{path}: expected a gating bundle, found kind {manifest.get('kind')!r}")
    if set(tensors) != {"W_g", "b_g"} or tensors["W_g"].shape != (manifest["hidden_dim"], manifest["num_experts"]):
        raise BundleShapeError(f"{path}: gating tensors disagree with manifest")
    return GatingNetwork(Param(tensors["W_g"]), Param(tensors["b_g"])), manifest


# ---------------------------------------------------------------- compatibility


def merge_label_universe(a: list[str], b: list[str]) -> list[str] | None:
    """The longer list if one is a prefix of the other, else ``None``."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return list(long_) if list(long_[:len(short)]) == list(short) else None


def validate_compatibility(manifest: ExpertManifest, model_encoder_fingerprint,
                           model_d: int, model_label_universe: list[str]) -> list[str]:
    """Every reason ``manifest`` cannot join the model; empty means compatible."""
    if isinstance(model_encoder_fingerprint, int):
        model_encoder_fingerprint = format_fingerprint(model_encoder_fingerprint)
    who = f"{manifest.expert_id}@{manifest.version}"
    violations = []
    if manifest.encoder_fingerprint != model_encoder_fingerprint:
        violations.append(f"{who}: encoder fingerprint {manifest.encoder_fingerprint} "
                          f"!= model encoder {model_encoder_fingerprint}")
    if manifest.hidden_dim != model_d:
        violations.append(f"{who}: hidden_dim d={manifest.hidden_dim} != model d={model_d}")
    labels = list(manifest.label_names)
    if list(model_label_universe[:len(labels)]) != labels or len(labels) > len(model_label_universe):
        violations.append(f"{who}: labels {labels} are not a prefix of the label universe "
                          f"{list(model_label_universe)}")
    return violations


# ---------------------------------------------------------------- registry


@dataclass
class IndexEntry:
    expert_id: str
    version: str
    path: str
    domain_tag: str
    fingerprint: str


@dataclass
class RegistryIndex:
    entries: list[IndexEntry] = field(default_factory=list)
    encoder_fingerprint: str | None = None
    hidden_dim: int | None = None
    label_universe: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "encoder_fingerprint": self.encoder_fingerprint,
                "hidden_dim": self.hidden_dim, "label_universe": self.label_universe,
                "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "RegistryIndex":
        return cls([IndexEntry(**e) for e in d.get("entries", [])], d.get("encoder_fingerprint"),
                   d.get("hidden_dim"), list(d.get("label_universe", [])))

    def versions(self, expert_id: str) -> list[IndexEntry]:
        found = [e for e in self.entries if e.expert_id == expert_id]
        return sorted(found, key=lambda e: parse_semver(e.version))

    def resolve(self, expert_id: str, version: str = "latest") -> IndexEntry:
        found = self.versions(expert_id)
        if not found:
            raise AssemblyError(f"expert {expert_id!r} is not registered", [f"missing {expert_id}"])
        if version in ("latest", "", None):
            return found[-1]
        for e in found:
            if e.version == version:
                return e
        raise AssemblyError(f"expert {expert_id}@{version} is not registered",
                            [f"missing {expert_id}@{version}"])


def load_index(registry_dir) -> RegistryIndex:
    p = Path(registry_dir) / INDEX_NAME
    if not p.exists():
        return RegistryIndex()
    return RegistryIndex.from_dict(json.loads(p.read_text(encoding="utf-8")))


def save_index(index: RegistryIndex, registry_dir) -> None:
    data = json.dumps(index.to_dict(), indent=2, sort_keys=True).encode("utf-8")
    _write_atomic(Path(registry_dir) / INDEX_NAME, data)


def registry_encoder(registry_dir) -> Encoder:
    p = Path(registry_dir) / ENCODER_NAME
    if not p.exists():
        raise ValidationError(f"registry {registry_dir} has no shared encoder")
    return load_encoder(p)


def register_encoder(enc: Encoder, registry_dir) -> RegistryIndex:
    """Install the shared encoder. Replacing a different encoder is refused once experts exist."""
    registry_dir = Path(registry_dir)
    index = load_index(registry_dir)
    fp = format_fingerprint(enc.fingerprint())
    if index.encoder_fingerprint == fp:
        return index
    if index.encoder_fingerprint is not None and index.entries:
        raise CompatibilityError("registry already holds experts for another encoder",
                                 [f"registry encoder {index.encoder_fingerprint} != {fp}"])
    save_encoder(enc, registry_dir / ENCODER_NAME)
    index.encoder_fingerprint = fp
    index.hidden_dim = enc.hidden_dim
    save_index(index, registry_dir)
    return index


def register_expert(bundle: ExpertBundle, registry_dir) -> RegistryIndex:
    registry_dir = Path(registry_dir)
    index = load_index(registry_dir)
    m = bundle.manifest
    if index.encoder_fingerprint is None:
        raise ValidationError(f"registry {registry_dir} has no shared encoder; register one first")
    if any(e.expert_id == m.expert_id and e.version == m.version for e in index.entries):
        raise ConflictError(f"{m.expert_id}@{m.version} is already registered")
    universe = merge_label_universe(index.label_universe, m.label_names) or index.label_universe
    violations = validate_compatibility(m, index.encoder_fingerprint, index.hidden_dim, universe)
    if violations:
        raise CompatibilityError(f"cannot register {m.expert_id}@{m.version}", violations)
    rel = f"experts/{m.expert_id}-{m.version}.moec"
    save_bundle(bundle, registry_dir / rel)
    index.entries.append(IndexEntry(m.expert_id, m.version, rel, m.domain_tag, m.encoder_fingerprint))
    index.label_universe = universe
    save_index(index, registry_dir)
    return index


def parse_selectors(spec) -> list[tuple[str, str]]:
    """``"a@1.0.0,b"`` or an iterable of strings/tuples into (id, version) pairs."""
    if isinstance(spec, str):
        spec = [s for s in spec.split(",") if s.strip()]
    out = []
    for item in spec:
        if isinstance(item, tuple):
            out.append((item[0], item[1] or "latest"))
        else:
            ident, _, ver = item.strip().partition("@")
            out.append((ident, ver or "latest"))
    return out


def assemble_moe(registry_dir, expert_selectors, gating_source=None, seed: int = 0) -> MoEModel:
    """Build a mixture from registered experts in selector order.

    ``gating_source`` may be a gating bundle path, a ``GatingNetwork``, or
    ``None`` for a fresh gate with one output per selected expert.
    """
    index = load_index(registry_dir)
    encoder = registry_encoder(registry_dir)
    fp = format_fingerprint(encoder.fingerprint())
    selectors = parse_selectors(expert_selectors)
    if not selectors:
        raise AssemblyError("no experts selected")
    missing, bundles = [], []
    for ident, ver in selectors:
        try:
            entry = index.resolve(ident, ver)
        except AssemblyError as exc:
            missing.extend(exc.violations)
            continue
        bundles.append(load_bundle(Path(registry_dir) / entry.path))
    if missing:
        raise AssemblyError("cannot assemble mixture", missing)
    universe: list[str] = []
    violations = []
    for b in bundles:
        merged = merge_label_universe(universe, b.manifest.label_names)
        if merged is None:
            violations.append(f"{b.manifest.expert_id}@{b.manifest.version}: labels "
                              f"{b.manifest.label_names} conflict with {universe}")
        else:
            universe = merged
    for b in bundles:
        violations += validate_compatibility(b.manifest, fp, encoder.hidden_dim, universe)
    if violations:
        raise AssemblyError("cannot assemble mixture", sorted(set(violations), key=violations.index))
    experts = [b.to_expert() for b in bundles]
    if gating_source is None:
        gating = init_gating(encoder.hidden_dim, len(experts), seed=seed)
    elif isinstance(gating_source, GatingNetwork):
        gating = gating_source
    else:
        gating, _ = load_gating(gating_source)
    if gating.num_experts != len(experts) or gating.hidden_dim != encoder.hidden_dim:
        raise AssemblyError("gating network does not fit the selected experts",
                            [f"gating is ({gating.hidden_dim}, {gating.num_experts}), need "
                             f"({encoder.hidden_dim}, {len(experts)})"])
    return MoEModel(encoder, experts, gating, universe)
