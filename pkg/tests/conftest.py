import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from eit_cs.mesh import build_disk_mesh, vertex_adjacency


@pytest.fixture(scope="session")
def mesh8():
    return build_disk_mesh(radius=1.0, target_h=0.25, p=8, coverage=0.5)


@pytest.fixture(scope="session")
def mesh16():
    # Desk-scale default used across solver and experiment tests.
    return build_disk_mesh(radius=1.0, target_h=0.08, p=16, coverage=0.5)


@pytest.fixture(scope="session")
def adj8(mesh8):
    return vertex_adjacency(mesh8)


@pytest.fixture(scope="session")
def adj16(mesh16):
    return vertex_adjacency(mesh16)


def rotation_permutation(mesh, steps=1):
    """perm[i] = index of the vertex at position of vertex i rotated by steps electrode pitches."""
    theta = 2.0 * math.pi * steps / mesh.p
    c, s = math.cos(theta), math.sin(theta)
    rotated = mesh.vertices @ np.array([[c, s], [-s, c]])
    dist, idx = cKDTree(mesh.vertices).query(rotated)
    assert dist.max() < 1e-9, "mesh is not invariant under one electrode pitch"
    return idx


def undirected_edges(triangles):
    edges = set()
    for t in triangles:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            edges.add((min(int(a), int(b)), max(int(a), int(b))))
    return edges
