"""TV denoising step of the splitting iteration.

The coefficient iterate is pulled toward a piecewise-constant field by
solving, on the nodal grid,

    min_x  theta * TV(x) + 1/2 ||x - z||^2,   z = q_new + lam / beta,

either with the built-in dual projection solver (`prox_tv`) or by shipping
the field to an external denoiser process over a binary stdin/stdout
protocol (`external_denoise`).  TV is the isotropic forward-difference
total variation with reflexive boundary handling, evaluated on the nodal
values arranged as a square grid.

Field to image convention: a nodal vector of length (n+1)^2 in
lexicographic order (x fastest) becomes an (n+1) x (n+1) gray image with
pixel row (n - j), column i holding node (i, j), affinely rescaled so that
the box [a0, a1] spans [0, 256].  No quantization: pixels are carried as
floating point throughout.
"""

from __future__ import annotations

import math
import os
import shlex
import struct
import subprocess
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

from .qsolver import BoxBounds

REQUEST_MAGIC = b"PDEN0001"
ERROR_MAGIC = b"PDENERR1"
IMAGE_SPAN = 256.0

_HEADER = struct.Struct("<III")
_SIGMA = struct.Struct("<d")
_U32 = struct.Struct("<I")


def _as_grid(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError("nodal field must be one-dimensional")
    side = math.isqrt(p.size)
    if side * side != p.size or side < 2:
        raise ValueError(f"nodal field of size {p.size} is not a square grid")
    return p.reshape(side, side)


def to_image(p: np.ndarray, bounds: BoxBounds) -> np.ndarray:
    """Rescale a nodal field onto the [0, 256] gray range, top row y = 1."""
    grid = _as_grid(p)
    scaled = (grid - bounds.lower) / (bounds.upper - bounds.lower) * IMAGE_SPAN
    return np.ascontiguousarray(scaled[::-1, :])


def from_image(img: np.ndarray, bounds: BoxBounds) -> np.ndarray:
    """Exact inverse of :func:`to_image`."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"expected a square image, got shape {img.shape}")
    grid = img[::-1, :] / IMAGE_SPAN * (bounds.upper - bounds.lower)
    return (grid + bounds.lower).ravel()


# ------------------------------------------------------------------ ROF prox


def _grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # negative adjoint of _grad
    d = np.empty_like(px)
    d[:, 0] = px[:, 0]
    d[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    d[:, -1] = -px[:, -2]
    e = np.empty_like(py)
    e[0, :] = py[0, :]
    e[1:-1, :] = py[1:-1, :] - py[:-2, :]
    e[-1, :] = -py[-2, :]
    return d + e


def discrete_tv(p: np.ndarray) -> float:
    """Isotropic forward-difference TV of a nodal field on its grid."""
    gx, gy = _grad(_as_grid(p))
    return float(np.sqrt(gx * gx + gy * gy).sum())


def prox_tv(z: np.ndarray, theta: float, tol: float = 1e-6,
            max_iters: int = 2000) -> np.ndarray:
    """Solve min_x theta*TV(x) + 1/2||x - z||^2 by projected dual ascent.

    Gradient projection on the dual with step 1/8 (the inverse Lipschitz
    bound of the discrete Laplacian), accelerated by the usual momentum
    extrapolation; the plain scheme shares its fixed points but needs
    orders of magnitude more sweeps at tight tolerances.  The dual field
    is reprojected onto the pointwise unit ball each sweep, so its
    magnitude never exceeds one and the max-norm change between sweeps is
    already on relative scale; it is compared against ``tol`` directly.
    Exhausting ``max_iters`` returns the last iterate and raises a
    RuntimeWarning.
    """
    if theta <= 0.0:
        raise ValueError("prox weight theta must be positive")
    zg = _as_grid(z)
    tau = 0.125
    target = zg / theta
    px = np.zeros_like(zg)
    py = np.zeros_like(zg)
    qx, qy = px, py
    t = 1.0
    for _ in range(max_iters):
        gx, gy = _grad(_div(qx, qy) - target)
        vx = qx + tau * gx
        vy = qy + tau * gy
        scale = np.maximum(1.0, np.sqrt(vx * vx + vy * vy))
        px_new = vx / scale
        py_new = vy / scale
        change = max(float(np.abs(px_new - px).max()),
                     float(np.abs(py_new - py).max()))
        # restart the momentum when it points against the step taken,
        # trading the sublinear ripple near the optimum for steady decay
        restart = (np.sum((qx - px_new) * (px_new - px))
                   + np.sum((qy - py_new) * (py_new - py))) > 0.0
        if restart:
            t_new = 1.0
            momentum = 0.0
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            momentum = (t - 1.0) / t_new
        qx = px_new + momentum * (px_new - px)
        qy = py_new + momentum * (py_new - py)
        px, py, t = px_new, py_new, t_new
        if change <= tol:
            break
    else:
        warnings.warn(
            f"prox_tv stopped at max_iters={max_iters} with dual change "
            f"{change:.3e} > tol={tol:g}", RuntimeWarning, stacklevel=2)
    return (zg - theta * _div(px, py)).ravel()


# ------------------------------------------------------------------- bridge


class BridgeError(RuntimeError):
    """External denoiser failed; message carries protocol diagnostics."""

    def __init__(self, message: str, returncode: int | None = None):
        super().__init__(message)
        self.returncode = returncode


class BridgeEndpoint:
    """One external denoiser process, one request in flight at a time.

    The process is spawned lazily on first use.  A failed exchange kills
    the process; the next request respawns it from scratch, so a transient
    crash does not poison the endpoint.
    """

    def __init__(self, command: list[str]):
        if not command:
            raise ValueError("bridge command must not be empty")
        self.command = list(command)
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    @classmethod
    def from_command_line(cls, command_line: str) -> "BridgeEndpoint":
        return cls(shlex.split(command_line))

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return self._proc

    def _read_exact(self, proc: subprocess.Popen, count: int,
                    what: str) -> bytes:
        data = proc.stdout.read(count)
        if data is None or len(data) != count:
            got = 0 if data is None else len(data)
            code = proc.poll()
            raise BridgeError(
                f"bridge reply truncated while reading {what}: expected "
                f"{count} bytes, got {got}"
                + (f" (process exited with code {code})" if code is not None
                   else ""),
                returncode=code)
        return data

    def request(self, img: np.ndarray, sigma: float) -> np.ndarray:
        img = np.asarray(img)
        if img.ndim != 2:
            raise ValueError("bridge request needs a 2-D image")
        rows, cols = img.shape
        payload = (REQUEST_MAGIC + _HEADER.pack(rows, cols, 0)
                   + _SIGMA.pack(float(sigma))
                   + np.ascontiguousarray(img, dtype="<f4").tobytes())
        with self._lock:
            try:
                proc = self._ensure_process()
                proc.stdin.write(payload)
                proc.stdin.flush()
                magic = self._read_exact(proc, 8, "magic")
                if magic == ERROR_MAGIC:
                    (code,) = _U32.unpack(
                        self._read_exact(proc, 4, "error code"))
                    raise BridgeError(
                        f"bridge reported error frame with code {code}")
                if magic != REQUEST_MAGIC:
                    raise BridgeError(
                        f"bridge replied with unknown magic {magic!r}")
                r, c = struct.unpack(
                    "<II", self._read_exact(proc, 8, "dimensions"))
                if (r, c) != (rows, cols):
                    raise BridgeError(
                        f"bridge replied with dimensions {r}x{c} for a "
                        f"{rows}x{cols} request")
                raw = self._read_exact(proc, 4 * rows * cols, "pixels")
            except (BrokenPipeError, OSError) as exc:
                code = self._kill()
                raise BridgeError(
                    f"bridge pipe failed: {exc}"
                    + (f" (process exited with code {code})"
                       if code is not None else ""),
                    returncode=code) from exc
            except BridgeError:
                self._kill()
                raise
        out = np.frombuffer(raw, dtype="<f4").astype(float).reshape(rows, cols)
        return out

    def _kill(self) -> int | None:
        proc, self._proc = self._proc, None
        if proc is None:
            return None
        if proc.poll() is None:
            proc.kill()
        proc.wait()
        for stream in (proc.stdin, proc.stdout):
            if stream is not None:
                stream.close()
        return proc.returncode

    def close(self) -> None:
        """Signal EOF and let the process exit on its own."""
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
            proc.wait(timeout=5.0)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()
        finally:
            if proc.stdout is not None:
                proc.stdout.close()

    def __enter__(self) -> "BridgeEndpoint":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def external_denoise(img: np.ndarray, sigma: float,
                     endpoint: BridgeEndpoint) -> np.ndarray:
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    return endpoint.request(img, sigma)


def resolve_bridge_command(explicit: str | None) -> str | None:
    """COEFFID_BRIDGE_CMD overrides any configured launch command."""
    return os.environ.get("COEFFID_BRIDGE_CMD") or explicit


# ------------------------------------------------------------------- p-step


@dataclass(frozen=True)
class DenoiserSpec:
    """Which denoiser the p-step uses, with its controls.

    fallback_to_prox lets the external path degrade to the built-in prox
    (using ``theta``) when the bridge fails, instead of aborting the outer
    iteration.
    """

    kind: str = "rof_prox"
    theta: float | None = None
    sigma: float | None = None
    rof_tol: float = 1e-6
    rof_max_iters: int = 2000
    fallback_to_prox: bool = False

    def __post_init__(self):
        if self.kind not in ("rof_prox", "external"):
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        needs_theta = self.kind == "rof_prox" or self.fallback_to_prox
        if needs_theta and (self.theta is None or self.theta <= 0.0):
            raise ValueError("theta must be positive for the rof_prox path")
        if self.kind == "external" and (self.sigma is None
                                        or self.sigma <= 0.0):
            raise ValueError("sigma must be positive for an external denoiser")


def solve_p_subproblem(q_new: np.ndarray, lam: np.ndarray, beta: float,
                       spec: DenoiserSpec, bounds: BoxBounds,
                       endpoint: BridgeEndpoint | None = None) -> np.ndarray:
    """Denoise z = q_new + lam/beta with the configured operator."""
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    z = np.asarray(q_new, dtype=float) + np.asarray(lam, dtype=float) / beta
    if spec.kind == "rof_prox":
        return prox_tv(z, spec.theta, spec.rof_tol, spec.rof_max_iters)
    if endpoint is None:
        raise ValueError("external denoiser requires a bridge endpoint")
    try:
        img = external_denoise(to_image(z, bounds), spec.sigma, endpoint)
    except BridgeError:
        if not spec.fallback_to_prox:
            raise
        warnings.warn("bridge failed, falling back to the built-in prox",
                      RuntimeWarning, stacklevel=2)
        return prox_tv(z, spec.theta, spec.rof_tol, spec.rof_max_iters)
    return from_image(img, bounds)
