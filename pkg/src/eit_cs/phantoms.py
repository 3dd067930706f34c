"""Phantom generation, image metrics, and dataset persistence.

Phantoms are piecewise-constant disk inclusions on a unit background.
Datasets pair each phantom with clean and noisy measurement vectors and
an ideal support mask, all under a JSON manifest that records every seed
and file so a run can be reproduced byte for byte.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .arrays import read_array, write_array
from .errors import DataFormatError, InputError
from .forward import ConductivityField, apply_phi
from .masks import ideal_oracle, read_mask, write_mask
from .mesh import Mesh, mesh_digest, read_mesh, vertex_adjacency, write_mesh
from .protocol import Protocol, add_noise, read_protocol, write_protocol

MANIFEST_VERSION = 1
REJECTION_BUDGET = 1000

# SeedSequence stream tags for the per-sample generators
_PHANTOM_STREAM = 0
_NOISE_STREAM = 1


@dataclass(frozen=True)
class PhantomConfig:
    """Sampling ranges for random disk phantoms.

    Inclusion values are absolute conductivities, not offsets from the
    background, so both conductive and resistive inclusions occur.
    """

    count_range: tuple = (1, 4)
    radius_range: tuple = (0.15, 0.25)
    value_range: tuple = (0.2, 2.0)
    sigma0: float = 1.0
    placement_radius: float = 0.75
    box: tuple = (0.1, 3.0)
    master_seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        if not (0 <= lo <= hi and int(lo) == lo and int(hi) == hi):
            raise InputError("count_range must be nondecreasing integers >= 0")
        r_lo, r_hi = self.radius_range
        if not (0.0 < r_lo <= r_hi):
            raise InputError("radius_range must be positive and nondecreasing")
        v_lo, v_hi = self.value_range
        if not (v_lo <= v_hi):
            raise InputError("value_range must be nondecreasing")
        c0, c1 = self.box
        if not (0.0 < c0 < c1):
            raise InputError("box must satisfy 0 < c0 < c1")
        if not (c0 <= v_lo and v_hi <= c1 and c0 <= self.sigma0 <= c1):
            raise InputError("values and background must lie inside the box")
        if not (r_hi < self.placement_radius):
            raise InputError("placement_radius must exceed the largest radius")


def _sample_disks(config: PhantomConfig, rng):
    """Draw disjoint disks: lists of centers, radii, values.

    Each disk draws a radius, an absolute conductivity value, and a center
    uniform over the placement disk shrunk by the radius, so every disk
    fits inside the placement region by construction. A draw that overlaps
    an already placed disk is rejected and resampled; the shared budget is
    1000 attempts per phantom.
    """
    lo, hi = config.count_range
    count = int(rng.integers(lo, hi + 1))
    centers, radii, values = [], [], []
    attempts = 0
    while len(radii) < count:
        if attempts >= REJECTION_BUDGET:
            raise InputError(
                f"could not place {count} disjoint inclusions in "
                f"{REJECTION_BUDGET} attempts")
        attempts += 1
        r = float(rng.uniform(*config.radius_range))
        rho = (config.placement_radius - r) * math.sqrt(float(rng.uniform()))
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        c = np.array([rho * math.cos(theta), rho * math.sin(theta)])
        value = float(rng.uniform(*config.value_range))
        if any(np.linalg.norm(c - ci) < r + ri for ci, ri in zip(centers, radii)):
            continue
        centers.append(c)
        radii.append(r)
        values.append(value)
    return centers, radii, values


def generate_phantom(mesh: Mesh, config: PhantomConfig, seed) -> ConductivityField:
    """Sample a piecewise-constant phantom with disjoint disk inclusions."""
    rng = np.random.default_rng(seed)
    centers, radii, values = _sample_disks(config, rng)
    sigma = np.full(mesh.vertices.shape[0], config.sigma0)
    for c, r, value in zip(centers, radii, values):
        inside = np.sum((mesh.vertices - c) ** 2, axis=1) < r * r
        sigma[inside] = value
    return ConductivityField(sigma, bounds=config.box)


def gradient_sparsity(sigma, adj, tol: float) -> int:
    """Count adjacent vertex pairs whose values differ by more than tol."""
    if not tol > 0:
        raise InputError("tol must be positive")
    values = np.asarray(getattr(sigma, "values", sigma), dtype=np.float64)
    if values.size != adj.n:
        raise InputError("vector length does not match the adjacency")
    row = np.repeat(np.arange(adj.n), np.diff(adj.indptr))
    upper = adj.indices > row
    jumps = np.abs(values[row[upper]] - values[adj.indices[upper]]) > tol
    return int(np.count_nonzero(jumps))


def rel_err(sigma_rec, sigma_true) -> float:
    """Relative l2 error against the reference field."""
    rec = np.asarray(getattr(sigma_rec, "values", sigma_rec), dtype=np.float64)
    ref = np.asarray(getattr(sigma_true, "values", sigma_true), dtype=np.float64)
    if rec.shape != ref.shape:
        raise InputError("field lengths differ")
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        raise InputError("reference field is identically zero")
    return float(np.linalg.norm(rec - ref) / denom)


def psnr(sigma_rec, sigma_true, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; peak defaults to max of the truth."""
    rec = np.asarray(getattr(sigma_rec, "values", sigma_rec), dtype=np.float64)
    ref = np.asarray(getattr(sigma_true, "values", sigma_true), dtype=np.float64)
    if rec.shape != ref.shape:
        raise InputError("field lengths differ")
    if peak is None:
        peak = float(ref.max())
    if not peak > 0:
        raise InputError("peak must be positive")
    mse = float(np.mean((rec - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass(frozen=True)
class SampleEntry:
    sample_id: str
    sigma_file: str
    clean_file: str
    noisy_file: str
    mask_file: str
    seed: tuple
    delta_bar: float


@dataclass(frozen=True)
class DatasetManifest:
    mesh_digest: str
    mesh_file: str
    protocol_file: str
    delta_bar: float
    z: float
    order: int
    normalization: str
    master_seed: int
    samples: tuple
    split: dict = field(default_factory=dict)
    background: float = 1.0
    box: tuple = (0.1, 3.0)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def sample(self, sample_id: str) -> SampleEntry:
        for entry in self.samples:
            if entry.sample_id == sample_id:
                return entry
        raise KeyError(sample_id)


def _split_ids(ids) -> dict:
    # 70/15/15 by index order; train gets floor(0.7 n), val floor(0.15 n)
    n = len(ids)
    n_train = int(0.70 * n)
    n_val = int(0.15 * n)
    return {
        "train": list(ids[:n_train]),
        "val": list(ids[n_train:n_train + n_val]),
        "test": list(ids[n_train + n_val:]),
    }


def generate_dataset(mesh: Mesh, protocol: Protocol, n_samples: int,
                     config: PhantomConfig, delta_bar: float, out_dir,
                     z: float = 1e-2, order: int = 1,
                     normalization: str = "rms") -> DatasetManifest:
    """Generate phantoms, measurements, and masks under a manifest.

    Layout under ``out_dir``: manifest.json, mesh.json, protocol.json,
    samples/NNNN.{sigma,clean,noisy}.eitb, masks/NNNN.json. Sample NNNN
    derives its generators from SeedSequence((master_seed, NNNN, stream))
    with stream 0 for the phantom and stream 1 for the noise, so any
    sample can be regenerated in isolation. The id order is split
    70/15/15 into train/val/test.
    """
    if n_samples <= 0:
        raise InputError("n_samples must be positive")
    if n_samples > 10000:
        raise InputError("sample ids are four digits; n_samples > 10000")
    out = os.fspath(out_dir)
    os.makedirs(os.path.join(out, "samples"), exist_ok=True)
    os.makedirs(os.path.join(out, "masks"), exist_ok=True)
    write_mesh(mesh, os.path.join(out, "mesh.json"))
    write_protocol(protocol, os.path.join(out, "protocol.json"))
    digest = mesh_digest(mesh)
    adj = vertex_adjacency(mesh)
    sigma0 = np.full(mesh.vertices.shape[0], config.sigma0)
    entries = []
    for idx in range(n_samples):
        sid = f"{idx:04d}"
        phantom = generate_phantom(
            mesh, config, np.random.SeedSequence(
                (config.master_seed, idx, _PHANTOM_STREAM)))
        clean = apply_phi(mesh, phantom, z, protocol, order=order)
        noisy, _, _ = add_noise(
            clean, delta_bar,
            np.random.SeedSequence((config.master_seed, idx, _NOISE_STREAM)),
            normalization=normalization)
        mask = ideal_oracle(phantom, sigma0, adj)
        entry = SampleEntry(
            sample_id=sid,
            sigma_file=f"samples/{sid}.sigma.eitb",
            clean_file=f"samples/{sid}.clean.eitb",
            noisy_file=f"samples/{sid}.noisy.eitb",
            mask_file=f"masks/{sid}.json",
            seed=(config.master_seed, idx),
            delta_bar=delta_bar,
        )
        write_array(phantom.values, os.path.join(out, entry.sigma_file))
        write_array(clean, os.path.join(out, entry.clean_file))
        write_array(noisy, os.path.join(out, entry.noisy_file))
        write_mask(mask, os.path.join(out, entry.mask_file))
        entries.append(entry)
    manifest = DatasetManifest(
        mesh_digest=digest,
        mesh_file="mesh.json",
        protocol_file="protocol.json",
        delta_bar=delta_bar,
        z=z,
        order=order,
        normalization=normalization,
        master_seed=config.master_seed,
        samples=tuple(entries),
        split=_split_ids([e.sample_id for e in entries]),
        background=config.sigma0,
        box=tuple(config.box),
    )
    write_manifest(manifest, os.path.join(out, "manifest.json"))
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    payload = {
        "version": MANIFEST_VERSION,
        "mesh_digest": manifest.mesh_digest,
        "mesh_file": manifest.mesh_file,
        "protocol_file": manifest.protocol_file,
        "delta_bar": manifest.delta_bar,
        "z": manifest.z,
        "order": manifest.order,
        "normalization": manifest.normalization,
        "master_seed": manifest.master_seed,
        "background": manifest.background,
        "box": list(manifest.box),
        "seed_convention":
            "SeedSequence((master_seed, index, stream)); "
            "stream 0 phantom, 1 noise",
        "samples": [
            {
                "id": e.sample_id,
                "sigma": e.sigma_file,
                "clean": e.clean_file,
                "noisy": e.noisy_file,
                "mask": e.mask_file,
                "seed": list(e.seed),
                "delta_bar": e.delta_bar,
            }
            for e in manifest.samples
        ],
        "split": manifest.split,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"not a manifest: {exc}") from exc
    try:
        if payload["version"] != MANIFEST_VERSION:
            raise DataFormatError(
                f"unsupported manifest version {payload['version']!r}")
        samples = tuple(
            SampleEntry(
                sample_id=s["id"],
                sigma_file=s["sigma"],
                clean_file=s["clean"],
                noisy_file=s["noisy"],
                mask_file=s["mask"],
                seed=tuple(s["seed"]),
                delta_bar=s["delta_bar"],
            )
            for s in payload["samples"]
        )
        return DatasetManifest(
            mesh_digest=payload["mesh_digest"],
            mesh_file=payload["mesh_file"],
            protocol_file=payload["protocol_file"],
            delta_bar=payload["delta_bar"],
            z=payload["z"],
            order=payload["order"],
            normalization=payload["normalization"],
            master_seed=payload["master_seed"],
            samples=samples,
            split=payload["split"],
            background=payload["background"],
            box=tuple(payload["box"]),
        )
    except KeyError as exc:
        raise DataFormatError(f"manifest missing key {exc}") from exc


def load_sample(root, manifest: DatasetManifest, sample_id: str) -> dict:
    """Read one sample's files; returns sigma, clean, noisy, mask."""
    entry = manifest.sample(sample_id)
    root = os.fspath(root)
    return {
        "sigma": read_array(os.path.join(root, entry.sigma_file)),
        "clean": read_array(os.path.join(root, entry.clean_file)),
        "noisy": read_array(os.path.join(root, entry.noisy_file)),
        "mask": read_mask(os.path.join(root, entry.mask_file),
                          expected_digest=manifest.mesh_digest),
    }


def verify_dataset(root) -> DatasetManifest:
    """Check referential integrity of a dataset directory.

    Every listed file must exist and parse, the mesh digest must match
    the manifest, every mask must be bound to that digest, and the
    measurement vectors must match the protocol size. Returns the
    manifest on success.
    """
    root = os.fspath(root)
    manifest = read_manifest(os.path.join(root, "manifest.json"))
    mesh = read_mesh(os.path.join(root, manifest.mesh_file))
    if mesh_digest(mesh) != manifest.mesh_digest:
        raise DataFormatError("mesh file does not match the manifest digest")
    protocol = read_protocol(os.path.join(root, manifest.protocol_file))
    n = mesh.vertices.shape[0]
    listed = {e.sample_id for e in manifest.samples}
    if len(listed) != len(manifest.samples):
        raise DataFormatError("duplicate sample ids in manifest")
    split_ids = [i for part in manifest.split.values() for i in part]
    if sorted(split_ids) != sorted(listed):
        raise DataFormatError("split does not partition the sample ids")
    for entry in manifest.samples:
        sample = load_sample(root, manifest, entry.sample_id)
        if sample["sigma"].size != n:
            raise DataFormatError(f"sample {entry.sample_id}: sigma length")
        for key in ("clean", "noisy"):
            if sample[key].size != protocol.m:
                raise DataFormatError(
                    f"sample {entry.sample_id}: {key} vector length")
        if sample["mask"].n != n:
            raise DataFormatError(f"sample {entry.sample_id}: mask length")
    return manifest
