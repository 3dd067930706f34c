"""Injection/measurement patterns, measurement noise, and feature weights.

A protocol pairs every selected injection with every selected measurement;
the resulting vector of voltage differences has one entry per (injection,
measurement) pair, ordered injection-major. The optional ``skip_same_pair``
flag drops the measurement identical to the injecting pair, which is how a
full adjacent protocol on 32 electrodes yields 32 x 31 = 992 entries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ProtocolError
from .mesh import Mesh

PROTOCOL_KINDS = ("adjacent-adjacent", "opposite-adjacent")
NOISE_NORMALIZATIONS = ("component", "rms")


@dataclass(frozen=True)
class Protocol:
    """Pattern lists for p electrodes.

    ``injections`` holds (source, sink) pairs, ``measurements`` (high, low)
    pairs; all indices in [0, p). ``uniform_stride`` records whether the
    subsampling strides divided p exactly (False flags the nearest-uniform
    fallback).
    """

    kind: str
    p: int
    injections: tuple
    measurements: tuple
    skip_same_pair: bool = False
    uniform_stride: bool = True

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ProtocolError(f"unknown protocol kind {self.kind!r}")
        for s, t in self.injections:
            if not (0 <= s < self.p and 0 <= t < self.p) or s == t:
                raise ProtocolError(f"bad injection pair ({s}, {t})")
        for h, l in self.measurements:
            if not (0 <= h < self.p and 0 <= l < self.p) or h == l:
                raise ProtocolError(f"bad measurement pair ({h}, {l})")

    @property
    def n_c(self) -> int:
        return len(self.injections)

    @property
    def n_v(self) -> int:
        return len(self.measurements)

    @property
    def m(self) -> int:
        return len(self.pairs())

    def pairs(self):
        """Ordered (injection index, measurement index) pairs, injection-major."""
        out = []
        for ci, inj in enumerate(self.injections):
            for vi, meas in enumerate(self.measurements):
                if self.skip_same_pair and set(inj) == set(meas):
                    continue
                out.append((ci, vi))
        return out


def _uniform_indices(p: int, count: int):
    idx = sorted({(i * p) // count for i in range(count)})
    exact = p % count == 0
    # Collisions cannot happen since count <= p, but keep the guard cheap.
    if len(idx) != count:
        raise ProtocolError(f"cannot place {count} patterns over {p} electrodes")
    return idx, exact


def build_protocol(kind: str, p: int, n_c: int | None = None, n_v: int | None = None,
                   skip_same_pair: bool = False) -> Protocol:
    """Build a protocol with uniformly strided injections and measurements.

    Adjacent injections are (k, k+1 mod p), opposite injections
    (k, k+p/2 mod p); measurements are always adjacent pairs (j, j+1 mod p).
    When fewer than p patterns are requested the candidates are subsampled
    at uniform stride; if p is not divisible the nearest-uniform selection
    is used and flagged on the result.
    """
    if p < 2:
        raise ProtocolError("need at least two electrodes")
    n_c = p if n_c is None else n_c
    n_v = p if n_v is None else n_v
    if not (1 <= n_c <= p and 1 <= n_v <= p):
        raise ProtocolError("pattern counts must lie in [1, p]")
    if kind not in PROTOCOL_KINDS:
        raise ProtocolError(f"unknown protocol kind {kind!r}")
    if kind == "opposite-adjacent" and p % 2:
        raise ProtocolError("opposite injections need an even electrode count")

    inj_idx, inj_exact = _uniform_indices(p, n_c)
    meas_idx, meas_exact = _uniform_indices(p, n_v)
    if kind == "adjacent-adjacent":
        injections = tuple((k, (k + 1) % p) for k in inj_idx)
    else:
        injections = tuple((k, (k + p // 2) % p) for k in inj_idx)
    measurements = tuple((j, (j + 1) % p) for j in meas_idx)
    return Protocol(kind=kind, p=p, injections=injections, measurements=measurements,
                    skip_same_pair=skip_same_pair,
                    uniform_stride=inj_exact and meas_exact)


def write_protocol(protocol: Protocol, path) -> None:
    obj = {
        "kind": protocol.kind,
        "p": protocol.p,
        "injections": [list(x) for x in protocol.injections],
        "measurements": [list(x) for x in protocol.measurements],
        "skip_same_pair": protocol.skip_same_pair,
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, separators=(",", ":"), sort_keys=True)


def read_protocol(path) -> Protocol:
    with open(path) as fh:
        obj = json.load(fh)
    try:
        return Protocol(
            kind=obj["kind"],
            p=int(obj["p"]),
            injections=tuple((int(s), int(t)) for s, t in obj["injections"]),
            measurements=tuple((int(h), int(l)) for h, l in obj["measurements"]),
            skip_same_pair=bool(obj.get("skip_same_pair", False)),
        )
    except KeyError as exc:
        raise ProtocolError(f"{path}: missing protocol field {exc}") from exc


@dataclass(frozen=True)
class MeasurementFrame:
    """One data vector with its noise record."""

    protocol: Protocol
    clean: np.ndarray
    noisy: np.ndarray
    eta: np.ndarray
    delta: float          # realized noise norm, the known bound
    seed: object
    normalization: str

    def __post_init__(self):
        if not (len(self.clean) == len(self.noisy) == len(self.eta) == self.protocol.m):
            raise InputError("frame vectors must match the protocol length")


def add_noise(clean, delta_bar: float, seed, normalization: str = "rms"):
    """Corrupt a measurement vector with Gaussian noise at level delta_bar.

    Two documented scalings of the standard normal draw g are available:

    - ``"rms"``: eta = delta_bar * ||clean||_2 * g / sqrt(m), so the noise
      norm concentrates at delta_bar * ||clean||_2 and the signal-to-noise
      ratio is about -20*log10(delta_bar) regardless of m.
    - ``"component"``: eta = delta_bar * ||clean||_2 * g, i.e. each component
      has standard deviation delta_bar * ||clean||_2; the ratio then drops
      by 10*log10(m) (for delta_bar = 2.5e-3 this lands at 40 dB when m = 16).

    Returns (noisy, eta, snr_db); snr_db is +inf when delta_bar = 0.
    """
    if delta_bar < 0:
        raise InputError("delta_bar must be nonnegative")
    if normalization not in NOISE_NORMALIZATIONS:
        raise InputError(f"unknown noise normalization {normalization!r}")
    clean = np.asarray(clean, dtype=np.float64)
    m = clean.size
    if delta_bar == 0.0:
        return clean.copy(), np.zeros(m), math.inf
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(m)
    scale = delta_bar * float(np.linalg.norm(clean))
    if normalization == "rms":
        scale /= math.sqrt(m)
    eta = scale * g
    noisy = clean + eta
    snr_db = 10.0 * math.log10(
        float(np.linalg.norm(clean)) ** 2 / float(np.linalg.norm(eta)) ** 2
    )
    return noisy, eta, snr_db


def make_frame(protocol: Protocol, clean, delta_bar: float, seed,
               normalization: str = "rms") -> MeasurementFrame:
    noisy, eta, _ = add_noise(clean, delta_bar, seed, normalization)
    return MeasurementFrame(protocol=protocol, clean=np.asarray(clean, dtype=np.float64),
                            noisy=noisy, eta=eta, delta=float(np.linalg.norm(eta)),
                            seed=seed, normalization=normalization)


def oracle_feature_weights(mesh: Mesh, protocol: Protocol, lam) -> np.ndarray:
    """Per-vertex influence features, one column per measurement.

    Entry (i, r) is lam[r] / (d_V + d_I), where d_V and d_I are the
    distances from vertex i to the midpoint between the measuring pair's
    electrode centers and to the midpoint between the injecting pair's,
    for the pair behind measurement r.
    """
    lam = np.asarray(lam, dtype=np.float64)
    pairs = protocol.pairs()
    if lam.size != len(pairs):
        raise InputError(f"expected {len(pairs)} measurements, got {lam.size}")
    centers = np.array([mesh.electrode_center(j) for j in range(mesh.p)])

    def pair_midpoints(pattern_list):
        return np.array([(centers[a] + centers[b]) / 2.0 for a, b in pattern_list])

    inj_mid = pair_midpoints(protocol.injections)
    meas_mid = pair_midpoints(protocol.measurements)
    d_inj = np.linalg.norm(mesh.vertices[:, None, :] - inj_mid[None, :, :], axis=2)
    d_meas = np.linalg.norm(mesh.vertices[:, None, :] - meas_mid[None, :, :], axis=2)

    W = np.empty((mesh.n, lam.size))
    for r, (ci, vi) in enumerate(pairs):
        denom = d_meas[:, vi] + d_inj[:, ci]
        assert denom.min() > 0.0, "vertex coincides with both pattern midpoints"
        W[:, r] = lam[r] / denom
    return W
