"""Support masks: ideal oracles, thresholded probability fields, file I/O.

A mask is a binary per-vertex vector bound to a specific mesh through the
mesh digest. Reconstruction code treats the mask as the set of coordinates
allowed to deviate from the background; everything outside is pinned.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, InputError, MaskError
from .mesh import VertexAdjacency

MASK_FORMAT_VERSION = 1
MASK_PROVENANCES = ("ideal", "file", "thresholded")

_HEX = set(string.hexdigits.lower())


def _check_digest(digest) -> str:
    if not isinstance(digest, str) or len(digest) != 64 or not set(digest) <= _HEX:
        raise MaskError("mesh digest must be 64 lowercase hex characters")
    return digest


@dataclass(frozen=True)
class OracleMask:
    """Binary support mask over mesh vertices.

    Parameters
    ----------
    bits : ndarray
        Vector of 0/1 entries, one per vertex.
    mesh_digest : str
        Digest of the mesh the mask indexes into. Consumers compare it
        against their own mesh before applying the mask.
    provenance : str
        How the mask was produced: "ideal" (from ground truth), "file"
        (external origin), or "thresholded" (from a probability field).
    sigma_th : float or None
        Threshold used when provenance is "thresholded", else None.
    """

    bits: np.ndarray
    mesh_digest: str
    provenance: str = "file"
    sigma_th: float | None = None

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits)
        if bits.ndim != 1:
            raise MaskError("mask bits must be a flat vector")
        as_int = bits.astype(np.uint8)
        if not np.array_equal(as_int, bits):
            raise MaskError("mask bits must be 0 or 1")
        if not np.isin(as_int, (0, 1)).all():
            raise MaskError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", as_int)
        _check_digest(self.mesh_digest)
        if self.provenance not in MASK_PROVENANCES:
            raise MaskError(f"unknown provenance {self.provenance!r}")
        if self.sigma_th is not None:
            th = float(self.sigma_th)
            if not np.isfinite(th):
                raise MaskError("sigma_th must be finite")
            object.__setattr__(self, "sigma_th", th)

    @property
    def n(self) -> int:
        return self.bits.size

    @property
    def cardinality(self) -> int:
        return int(self.bits.sum())


def _dilate(bits: np.ndarray, adj: VertexAdjacency, hops: int) -> np.ndarray:
    out = bits.copy()
    for _ in range(hops):
        frontier = np.flatnonzero(out)
        if frontier.size == 0 or frontier.size == out.size:
            break
        grown = out.copy()
        for i in frontier:
            grown[adj.indices[adj.indptr[i]:adj.indptr[i + 1]]] = 1
        if np.array_equal(grown, out):
            break
        out = grown
    return out


def ideal_oracle(sigma_true, sigma0, adj: VertexAdjacency,
                 tol: float | None = None, dilation_hops: int = 0) -> OracleMask:
    """Support mask of the deviation from the background, optionally dilated.

    Parameters
    ----------
    sigma_true : ConductivityField or ndarray
        Ground-truth field. When a field with box bounds is given and
        ``tol`` is None, the tolerance defaults to ``1e-6 * (c1 - c0)``.
    sigma0 : ndarray
        Background the deviation is measured against.
    adj : VertexAdjacency
        Supplies both the dilation structure and the mesh digest the
        mask is bound to.
    tol : float, optional
        Deviation threshold; must be positive.
    dilation_hops : int
        Number of one-ring growth steps applied to the exact support.
    """
    values = np.asarray(getattr(sigma_true, "values", sigma_true), dtype=np.float64)
    if tol is None:
        bounds = getattr(sigma_true, "bounds", None)
        if bounds is None:
            raise InputError("tol is required when sigma_true has no box bounds")
        tol = 1e-6 * (bounds[1] - bounds[0])
    if not tol > 0:
        raise InputError("tol must be positive")
    background = np.asarray(sigma0, dtype=np.float64)
    if values.shape != background.shape or values.size != adj.n:
        raise InputError("field, background and adjacency sizes must agree")
    if dilation_hops < 0:
        raise InputError("dilation_hops must be >= 0")
    bits = (np.abs(values - background) > tol).astype(np.uint8)
    if dilation_hops:
        bits = _dilate(bits, adj, int(dilation_hops))
    return OracleMask(bits, adj.mesh_digest, provenance="ideal")


def threshold_probabilities(probs, sigma_th: float, mesh_digest: str) -> OracleMask:
    """Binarize a per-vertex probability field at ``sigma_th`` (>= keeps)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise InputError("probabilities must be a flat vector")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise InputError("probabilities must lie in [0, 1]")
    bits = (p >= float(sigma_th)).astype(np.uint8)
    return OracleMask(bits, mesh_digest, provenance="thresholded",
                      sigma_th=float(sigma_th))


def fn_rate(predicted: OracleMask, truth: OracleMask) -> float:
    """False-negative percentage: truth vertices the prediction missed.

    Normalized by the total vertex count, so an all-zeros prediction
    against k true vertices scores 100 * k / n.
    """
    if predicted.mesh_digest != truth.mesh_digest:
        raise MaskError("masks are bound to different meshes")
    if predicted.n != truth.n:
        raise MaskError("masks have different lengths")
    missed = np.count_nonzero((truth.bits == 1) & (predicted.bits == 0))
    return 100.0 * missed / truth.n


def write_mask(mask: OracleMask, path) -> None:
    payload = {
        "version": MASK_FORMAT_VERSION,
        "mesh_digest": mask.mesh_digest,
        "provenance": mask.provenance,
        "sigma_th": mask.sigma_th,
        "bits": mask.bits.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def read_mask(path, expected_digest: str | None = None) -> OracleMask:
    """Read a mask JSON file, validating structure and digest.

    The stored digest is checked for well-formedness always, and against
    ``expected_digest`` when the caller knows which mesh the mask must
    belong to. Mask consumers repeat the digest comparison at use time.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"not a mask file: {exc}") from exc
    if not isinstance(payload, dict):
        raise DataFormatError("mask file must hold a JSON object")
    try:
        version = payload["version"]
        digest = payload["mesh_digest"]
        provenance = payload["provenance"]
        sigma_th = payload["sigma_th"]
        bits = payload["bits"]
    except KeyError as exc:
        raise DataFormatError(f"mask file missing key {exc}") from exc
    if version != MASK_FORMAT_VERSION:
        raise DataFormatError(f"unsupported mask format version {version!r}")
    try:
        mask = OracleMask(np.asarray(bits), digest, provenance=provenance,
                          sigma_th=sigma_th)
    except MaskError as exc:
        raise DataFormatError(f"invalid mask file: {exc}") from exc
    if expected_digest is not None and mask.mesh_digest != expected_digest:
        raise MaskError("mask was built for a different mesh")
    return mask
