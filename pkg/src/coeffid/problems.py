"""Benchmark coefficients, synthetic observations, and their file formats.

Two ground-truth coefficients are built in: a horizontal two-level split
(``ex1``) and a circle-plus-square inclusion (``ex2``).  A custom
coefficient can be loaded from a ``.grid`` file.  Observations are the
per-triangle state gradients at the truth, perturbed per triangle and per
component by uniform noise scaled with delta and the discrete norm
``h_norm``.  The generator is numpy's default PCG64 stream; the seed is
recorded in the observation header, and the data files are the exchange
medium across implementations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import assembly
from .linsolve import LinearSolverConfig
from .mesh import Mesh, build_uniform_mesh, expand_interior

OBS_FORMAT = "coeffid-obs v1"
FIELDS_FORMAT = "coeffid-fields v1"


@dataclass(frozen=True)
class ProblemSpec:
    """Which truth, which mesh, how much noise."""

    example: str
    n: int
    delta: float
    seed: int
    f_const: float = 10.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.delta < 0.0:
            raise ValueError("delta must be nonnegative")


def example1_q(x, y):
    """Two levels split along y = 0.5; the interface line goes to the
    lower branch."""
    return np.where(np.asarray(y) <= 0.5, 1.0, 2.0)


def example2_q(x, y):
    """1 + 0.5 inside the circle at (0.5, 0.5) with squared radius 1/8,
    + 1 inside the square [1/3, 2/3]^2 (which that circle contains)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    in_circle = (x - 0.5) ** 2 + (y - 0.5) ** 2 <= 0.125
    in_square = ((1.0 / 3.0 <= x) & (x <= 2.0 / 3.0)
                 & (1.0 / 3.0 <= y) & (y <= 2.0 / 3.0))
    return 1.0 + 0.5 * in_circle + 1.0 * in_square


def nodal_coefficient(mesh: Mesh, example: str) -> np.ndarray:
    """Truth coefficient sampled at the mesh nodes.

    ``example`` is "ex1", "ex2", or a path to a ``.grid`` file whose
    subdivision count must match the mesh.
    """
    if example == "ex1":
        return np.asarray(example1_q(mesh.nodes[:, 0], mesh.nodes[:, 1]),
                          dtype=float)
    if example == "ex2":
        return np.asarray(example2_q(mesh.nodes[:, 0], mesh.nodes[:, 1]),
                          dtype=float)
    n, values = read_grid(example)
    if n != mesh.n:
        raise ValueError(
            f"coefficient file {example} is for n={n}, mesh has n={mesh.n}")
    return values


def build_problem(spec: ProblemSpec) -> tuple[Mesh, np.ndarray]:
    mesh = build_uniform_mesh(spec.n)
    return mesh, nodal_coefficient(mesh, spec.example)


# -------------------------------------------------------------- noise model


def h_norm(mesh: Mesh, field: np.ndarray) -> float:
    """Discrete norm h * sqrt(sum_tau |tau| |v_tau|^2) of per-triangle
    values (scalar or vector per triangle)."""
    field = np.asarray(field, dtype=float)
    if field.shape[0] != mesh.num_triangles:
        raise ValueError("field must have one row per triangle")
    squares = field ** 2 if field.ndim == 1 else (field ** 2).sum(axis=1)
    return float(mesh.h * np.sqrt(np.sum(mesh.areas * squares)))


def noise_floor(mesh: Mesh, clean_grads: np.ndarray, delta: float) -> float:
    """Expected h-norm of the injected noise.

    Each of the two gradient components is perturbed by
    delta*||grad u||_h*uniform(-1,1), whose RMS is 1/sqrt(3); squaring,
    weighting by the triangle areas (they sum to one) and applying the
    outer h of the norm gives h*delta*||grad u||_h*sqrt(2/3).  Data
    misfits of a reconstruction hover at this level, so it is the
    reference line for convergence plots.
    """
    return (mesh.h * delta * h_norm(mesh, clean_grads)
            * np.sqrt(2.0 / 3.0))


def generate_observation(
        mesh: Mesh, q_true: np.ndarray, f_const: float, delta: float,
        seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle gradient data at the truth plus scaled uniform noise.

    Returns (observation, clean interior state).  Pure in all arguments:
    the same seed reproduces the same observation bitwise.
    """
    if delta < 0.0:
        raise ValueError("delta must be nonnegative")
    state = assembly.forward_solve(mesh, q_true, f_const,
                                   cfg=LinearSolverConfig(tol=1e-12))
    grads = assembly.state_gradients(mesh, state.x)
    if delta == 0.0:
        return grads, state.x
    rng = np.random.default_rng(seed)
    scale = delta * h_norm(mesh, grads)
    noise = scale * rng.uniform(-1.0, 1.0, size=grads.shape)
    return grads + noise, state.x


# --------------------------------------------------------------- file forms


def write_grid(path, n: int, values: np.ndarray) -> None:
    """Nodal values, row-major, with the subdivision count up front."""
    values = np.asarray(values, dtype=float)
    if values.size != (n + 1) ** 2:
        raise ValueError(f"expected {(n + 1) ** 2} nodal values for n={n}")
    with open(path, "w") as fh:
        fh.write(f"{n}\n")
        for v in values:
            fh.write(f"{float(v)!r}\n")


def read_grid(path) -> tuple[int, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().split()
    if not lines:
        raise ValueError(f"empty grid file {path}")
    n = int(lines[0])
    values = np.array([float(tok) for tok in lines[1:]])
    if values.size != (n + 1) ** 2:
        raise ValueError(
            f"grid file {path} announces n={n} but holds {values.size} values")
    return n, values


def write_observation(path, spec: ProblemSpec, obs: np.ndarray) -> None:
    obs = np.asarray(obs, dtype=float)
    with open(path, "w") as fh:
        fh.write(f"{OBS_FORMAT}, n={spec.n}, delta={spec.delta!r}, "
                 f"seed={spec.seed}\n")
        for t in range(obs.shape[0]):
            fh.write(f"{t} {float(obs[t, 0])!r} {float(obs[t, 1])!r}\n")


def read_observation(path) -> tuple[int, float, int, np.ndarray]:
    """Returns (n, delta, seed, observation)."""
    with open(path) as fh:
        header = fh.readline().strip()
        prefix = OBS_FORMAT + ","
        if not header.startswith(prefix):
            raise ValueError(f"{path} is not a {OBS_FORMAT} file")
        meta = dict(item.strip().split("=")
                    for item in header[len(prefix):].split(","))
        n = int(meta["n"])
        delta = float(meta["delta"])
        seed = int(meta["seed"])
        obs = np.zeros((2 * n * n, 2))
        seen = np.zeros(2 * n * n, dtype=bool)
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            t = int(tok[0])
            obs[t] = (float(tok[1]), float(tok[2]))
            seen[t] = True
    if not seen.all():
        raise ValueError(f"{path} is missing rows for some triangles")
    return n, delta, seed, obs


def fields_path_for(obs_path) -> Path:
    return Path(obs_path).with_suffix(".fields")


def write_fields(path, mesh: Mesh, q_true: np.ndarray,
                 u_clean_interior: np.ndarray) -> None:
    """Sibling of an observation file: truth coefficient and clean state,
    both as full nodal vectors."""
    u_full = expand_interior(mesh, u_clean_interior)
    with open(path, "w") as fh:
        fh.write(f"{FIELDS_FORMAT}, n={mesh.n}\n")
        for i in range(mesh.num_nodes):
            fh.write(f"{i} {float(q_true[i])!r} {float(u_full[i])!r}\n")


def read_fields(path) -> tuple[int, np.ndarray, np.ndarray]:
    """Returns (n, q_true nodal, u_clean nodal)."""
    with open(path) as fh:
        header = fh.readline().strip()
        prefix = FIELDS_FORMAT + ","
        if not header.startswith(prefix):
            raise ValueError(f"{path} is not a {FIELDS_FORMAT} file")
        n = int(header[len(prefix):].split("=")[1])
        count = (n + 1) ** 2
        q = np.zeros(count)
        u = np.zeros(count)
        seen = np.zeros(count, dtype=bool)
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            i = int(tok[0])
            q[i] = float(tok[1])
            u[i] = float(tok[2])
            seen[i] = True
    if not seen.all():
        raise ValueError(f"{path} is missing rows for some nodes")
    return n, q, u
