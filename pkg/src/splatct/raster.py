"""Tile-based forward renderer for 6D Gaussian scenes.

Per frame: slice each 6D Gaussian against its viewing direction
(view-independent terms are cached per scene), evaluate the spherical
harmonics color, project the positional Gaussian through the pinhole camera
with a first-order (EWA) linearization plus a 0.3 px^2 low-pass, bin the
resulting 2D splats into square pixel tiles, depth-sort each tile, and
alpha-composite front to back. The image is (height, width, 4) premultiplied
RGBA over a transparent black background.

Projection and compositing run on one of two interchangeable backends: a
compiled OpenMP extension or a pure-Python fallback (see ``_kernels_py``).
In double precision their output is bit-identical. `SPLATCT_BACKEND=
cython|python` pins the default; `RenderConfig.backend` overrides per call.

Determinism and composability contracts:

- output never depends on the thread count (tiles own disjoint pixels),
- every per-Gaussian quantity is a row-elementwise function of that
  Gaussian, so rendering with a group mask is byte-identical to rendering
  the pre-filtered scene,
- tiles composite in ascending depth with ties broken by Gaussian id; the
  sort key quantizes depth to float32 (near ties fall back to id order,
  deterministically).
"""

import os
import weakref
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Camera
from .core import (
    SH_C0,
    SH_C1,
    ConditioningTerms,
    DegenerateCovarianceError,
    InvalidParameterError,
    build_covariance_batch,
    conditioning_terms,
    sigmoid,
)
from .priming import Scene
from .volume import N_GROUPS

MIN_ALPHA = 1.0 / 255.0


def _load_default_kernels():
    forced = os.environ.get("SPLATCT_BACKEND", "").strip().lower()
    if forced not in ("", "cython", "python"):
        raise ValueError(f"SPLATCT_BACKEND must be 'cython' or 'python', got {forced!r}")
    if forced != "python":
        try:
            from . import _kernels
            return _kernels
        except ImportError:
            if forced == "cython":
                raise
    from . import _kernels_py
    return _kernels_py


_DEFAULT_KERNELS = _load_default_kernels()


def active_backend() -> str:
    """Name of the compositing backend selected at import ('cython' or 'python')."""
    return _DEFAULT_KERNELS.BACKEND


def _kernels_for(backend: str):
    if backend in ("", None):
        return _DEFAULT_KERNELS
    if backend == "python":
        from . import _kernels_py
        return _kernels_py
    if backend == "cython":
        from . import _kernels
        return _kernels
    raise InvalidParameterError(f"unknown backend {backend!r}")


@dataclass(frozen=True)
class RenderConfig:
    """Rendering knobs. The defaults reproduce the reference pipeline."""

    tile_size: int = 16
    low_pass: float = 0.3        # px^2 added to both diagonal cov2d entries
    alpha_max: float = 0.99      # per-splat alpha cap
    w_mode: str = "peak"         # directional opacity modulation mode
    precision: str = "f32"       # framebuffer dtype: "f32" or "f64"
    threads: int = 0             # 0: SPLATCT_THREADS or one per CPU
    backend: str = ""            # "": module default
    degenerate_limit: float = 0.01

    def dtype(self):
        if self.precision == "f32":
            return np.float32
        if self.precision == "f64":
            return np.float64
        raise InvalidParameterError(f"precision must be 'f32' or 'f64', got {self.precision!r}")


DEFAULT_CONFIG = RenderConfig()


@dataclass
class ScenePrep:
    """View-independent per-scene terms, cached weakly per (scene, w_mode)."""

    terms: ConditioningTerms
    opacity: np.ndarray  # (N,) sigmoid of the raw opacities


_PREP_CACHE = weakref.WeakKeyDictionary()


def prepare_scene(scene: Scene, w_mode: str = "peak") -> ScenePrep:
    """Covariances, slicing terms and activated opacities for ``scene``.

    Cached on the scene object; optimizer steps build new Scene instances, so
    stale entries age out with their scenes.
    """
    per_scene = _PREP_CACHE.get(scene)
    if per_scene is None:
        per_scene = {}
        _PREP_CACHE[scene] = per_scene
    prep = per_scene.get(w_mode)
    if prep is None:
        sigma = build_covariance_batch(
            scene.cov_raw, scene.spatial_scale, scene.directional_scale)
        terms = conditioning_terms(sigma, w_mode=w_mode)
        prep = ScenePrep(terms=terms, opacity=sigmoid(scene.opacity_raw))
        per_scene[w_mode] = prep
    return prep


def normalize_group_mask(group_mask) -> np.ndarray:
    """Accept an iterable of group indices or a boolean mask; return (12,) bool."""
    arr = np.asarray(group_mask)
    if arr.dtype == bool:
        if arr.shape != (N_GROUPS,):
            raise InvalidParameterError(
                f"boolean group mask must have shape ({N_GROUPS},), got {arr.shape}")
        return arr.copy()
    mask = np.zeros(N_GROUPS, dtype=bool)
    for g in np.atleast_1d(arr):
        idx = int(g)
        if not 0 <= idx < N_GROUPS:
            raise InvalidParameterError(f"group index {idx} outside [0, {N_GROUPS - 1}]")
        mask[idx] = True
    return mask


@dataclass
class SplatBatch:
    """Screen-space splats that survived culling, in ascending scene order."""

    gids: np.ndarray      # (M,) int64 scene row of each splat
    means2d: np.ndarray   # (M, 2) pixel coords
    conics: np.ndarray    # (M, 3) inverse 2D covariance (a, b, c)
    colors: np.ndarray    # (M, 3) RGB in [0, 1]
    alphas: np.ndarray    # (M,) effective alpha in [1/255, alpha_max]
    depths: np.ndarray    # (M,) camera-space z of the adjusted mean
    radii: np.ndarray     # (M, 2) int32 3-sigma half-extent in px (x, y)

    def __len__(self) -> int:
        return len(self.gids)


@dataclass
class Splat2D:
    """Single projected Gaussian (scalar variant of SplatBatch rows)."""

    mean2d: np.ndarray
    conic: np.ndarray
    color: np.ndarray
    alpha: float
    depth: float
    radii: tuple


@dataclass
class RenderStats:
    """Per-render cull accounting."""

    n_scene: int = 0
    n_selected: int = 0
    n_degenerate: int = 0
    n_view_degenerate: int = 0
    n_alpha_culled: int = 0
    n_depth_culled: int = 0
    n_projection_culled: int = 0
    n_viewport_culled: int = 0
    n_drawn: int = 0
    n_entries: int = 0


@dataclass
class TileEntries:
    """Depth-sorted tile runs: splat indices per tile, CSR-style."""

    entry_splat: np.ndarray  # (E,) int32 indices into the SplatBatch
    tile_starts: np.ndarray  # (tiles_x * tiles_y + 1,) int64
    tiles_x: int
    tiles_y: int


@dataclass
class RenderState:
    """Forward outputs plus everything the backward pass replays."""

    image: np.ndarray
    final_t: np.ndarray
    last_contrib: np.ndarray
    splats: SplatBatch
    entries: TileEntries
    camera: Camera
    config: RenderConfig
    stats: RenderStats


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _project_rows(mu_p, mu_d, sh, opacity, adjust, precision_dd, sigma_prime,
                  w_norm, camera: Camera, config: RenderConfig, stats: RenderStats):
    """Slice, shade and project dense per-Gaussian rows; cull as we go.

    Returns (kept, means2d, conics, colors, alphas, depths, radii) where
    ``kept`` indexes the surviving rows of the inputs. Every step is a
    row-elementwise expression (no reductions across rows) so the output for
    a row never depends on which other rows are present.

    The heavy arithmetic runs in the kernel backend in two stages (see
    ``_kernels_py`` for the contract). Between them this function applies the
    directional opacity modulation, whose ``exp`` both backends must share
    bit for bit, and marks rows whose modulated alpha cannot contribute.
    """
    kernels = _kernels_for(config.backend)
    threads = _resolve_threads(config)
    n = len(mu_p)
    pos = camera.position
    px, py, pz = float(pos[0]), float(pos[1]), float(pos[2])

    # Stage byte per row: 0 drawn, 1..5 the cull that removed it.
    stage = np.zeros(n, dtype=np.uint8)
    view = np.zeros((n, 3))
    mean_adj = np.zeros((n, 3))
    quad = np.zeros(n)
    kernels.project_stage1(_f64(mu_p), _f64(mu_d), _f64(adjust),
                           _f64(precision_dd), px, py, pz,
                           view, mean_adj, quad, stage, threads)

    # Opacity modulation by the sliced conditional density.
    w = np.exp(-0.5 * quad) * w_norm
    alphas = np.minimum(opacity * w, config.alpha_max)
    stage[(stage == 0) & ~(alphas >= MIN_ALPHA)] = 2

    f = camera.focal
    lim_x = 1.3 * camera.width / (2.0 * f)
    lim_y = 1.3 * camera.height / (2.0 * f)
    means2d = np.zeros((n, 2))
    conics = np.zeros((n, 3))
    colors = np.zeros((n, 3))
    depths = np.zeros(n)
    radii = np.zeros((n, 2), dtype=np.int32)
    kernels.project_stage2(view, mean_adj, _f64(sh), _f64(sigma_prime),
                           _f64(camera.rotation), px, py, pz,
                           camera.near, camera.far, f, camera.cx, camera.cy,
                           lim_x, lim_y, float(camera.width),
                           float(camera.height), config.low_pass,
                           SH_C0, SH_C1, means2d, conics, colors, depths,
                           radii, stage, threads)

    fate = np.bincount(stage, minlength=6)
    stats.n_view_degenerate = int(fate[1])
    stats.n_alpha_culled = int(fate[2])
    stats.n_depth_culled = int(fate[3])
    stats.n_projection_culled = int(fate[4])
    stats.n_viewport_culled = int(fate[5])
    kept = np.nonzero(stage == 0)[0]
    stats.n_drawn = len(kept)
    return (kept, means2d[kept], conics[kept], colors[kept], alphas[kept],
            depths[kept], radii[kept])


def project_scene(scene: Scene, prep: ScenePrep, rows, camera: Camera,
                  config: RenderConfig, stats: RenderStats) -> SplatBatch:
    """Project the scene rows ``rows`` (degenerate-free) into screen splats."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == len(scene):
        # Identity selection (sorted unique rows covering the scene): skip
        # the per-row gathers, which dominate the glue cost on big scenes.
        gathered = (scene.mu_p, scene.mu_d, scene.sh, prep.opacity,
                    prep.terms.adjust, prep.terms.precision_dd,
                    prep.terms.sigma_prime, prep.terms.w_norm)
    else:
        gathered = (scene.mu_p[rows], scene.mu_d[rows], scene.sh[rows],
                    prep.opacity[rows], prep.terms.adjust[rows],
                    prep.terms.precision_dd[rows],
                    prep.terms.sigma_prime[rows], prep.terms.w_norm[rows])
    kept, means2d, conics, colors, alphas, depths, radii = _project_rows(
        *gathered, camera, config, stats)
    return SplatBatch(gids=rows[kept], means2d=means2d, conics=conics,
                      colors=colors, alphas=alphas, depths=depths, radii=radii)


def project_gaussian(gaussian, camera: Camera, spatial_scale=1.0,
                     directional_scale=1.0, config: RenderConfig = DEFAULT_CONFIG):
    """Project a single 6D Gaussian; None when culled.

    Scalar convenience around the batch path (shares all arithmetic with
    :func:`project_scene`).
    """
    sigma = build_covariance_batch(
        np.asarray(gaussian.cov_raw, dtype=np.float64)[None, :],
        spatial_scale, directional_scale)
    terms = conditioning_terms(sigma, w_mode=config.w_mode)
    if terms.degenerate[0]:
        raise DegenerateCovarianceError("directional covariance block is singular")
    stats = RenderStats(n_scene=1, n_selected=1)
    kept, means2d, conics, colors, alphas, depths, radii = _project_rows(
        np.asarray(gaussian.mu_p, dtype=np.float64)[None, :],
        np.asarray(gaussian.mu_d, dtype=np.float64)[None, :],
        np.asarray(gaussian.sh, dtype=np.float64)[None, :],
        sigmoid(np.asarray([gaussian.opacity_raw], dtype=np.float64)),
        terms.adjust, terms.precision_dd, terms.sigma_prime, terms.w_norm,
        camera, config, stats)
    if len(kept) == 0:
        return None
    return Splat2D(mean2d=means2d[0], conic=conics[0], color=colors[0],
                   alpha=float(alphas[0]), depth=float(depths[0]),
                   radii=(int(radii[0, 0]), int(radii[0, 1])))


def bin_splats(splats: SplatBatch, camera: Camera, tile_size: int) -> TileEntries:
    """Duplicate splats into the tiles their 3-sigma boxes overlap and sort.

    Sort key: (tile id << 32) | float32 depth bits. Depths are positive so
    their float32 bit patterns order monotonically; the stable sort keeps
    duplicate keys in splat (scene id) order.
    """
    tiles_x = (camera.width + tile_size - 1) // tile_size
    tiles_y = (camera.height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    m = len(splats)
    if m == 0:
        return TileEntries(entry_splat=np.zeros(0, dtype=np.int32),
                           tile_starts=np.zeros(n_tiles + 1, dtype=np.int64),
                           tiles_x=tiles_x, tiles_y=tiles_y)
    u = splats.means2d[:, 0]
    v = splats.means2d[:, 1]
    rx = splats.radii[:, 0]
    ry = splats.radii[:, 1]
    tx0 = np.clip(np.floor((u - rx) / tile_size).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((u + rx) / tile_size).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((v - ry) / tile_size).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((v + ry) / tile_size).astype(np.int64), 0, tiles_y - 1)
    wx = tx1 - tx0 + 1
    counts = wx * (ty1 - ty0 + 1)
    offsets = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])

    rep = np.repeat(np.arange(m, dtype=np.int64), counts)
    loc = np.arange(total, dtype=np.int64) - np.repeat(offsets[:-1], counts)
    wx_rep = np.repeat(wx, counts)
    tile = ((ty0[rep] + loc // wx_rep) * tiles_x + (tx0[rep] + loc % wx_rep))

    depth_bits = splats.depths.astype(np.float32).view(np.uint32).astype(np.uint64)
    key = (tile.astype(np.uint64) << np.uint64(32)) | depth_bits[rep]
    order = np.argsort(key, kind="stable")
    entry_splat = rep[order].astype(np.int32)
    tile_starts = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=n_tiles), out=tile_starts[1:])
    return TileEntries(entry_splat=entry_splat, tile_starts=tile_starts,
                       tiles_x=tiles_x, tiles_y=tiles_y)


def _resolve_threads(config: RenderConfig) -> int:
    threads = config.threads
    if threads <= 0:
        env = os.environ.get("SPLATCT_THREADS", "")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, threads)


def _composite(splats: SplatBatch, entries: TileEntries, camera: Camera,
               config: RenderConfig):
    """Run the compositing kernel; returns (image, final_t, last_contrib)."""
    kernels = _kernels_for(config.backend)
    dtype = config.dtype()
    # The Python kernel computes in double regardless; render to a double
    # framebuffer and round at the end when 32-bit output was requested.
    kernel_dtype = np.float64 if kernels.BACKEND == "python" else dtype
    height, width = camera.height, camera.width
    image = np.zeros((height, width, 4), dtype=kernel_dtype)
    final_t = np.ones((height, width), dtype=kernel_dtype)
    last_contrib = np.zeros((height, width), dtype=np.int32)
    kernels.composite_forward(
        np.ascontiguousarray(splats.means2d, dtype=kernel_dtype),
        np.ascontiguousarray(splats.conics, dtype=kernel_dtype),
        np.ascontiguousarray(splats.colors, dtype=kernel_dtype),
        np.ascontiguousarray(splats.alphas, dtype=kernel_dtype),
        entries.entry_splat, entries.tile_starts, entries.tiles_x,
        config.tile_size, image, final_t, last_contrib,
        _resolve_threads(config))
    if kernel_dtype is not dtype:
        image = image.astype(dtype)
        final_t = final_t.astype(dtype)
    return image, final_t, last_contrib


def select_rows(scene: Scene, prep: ScenePrep, group_mask,
                config: RenderConfig, stats: RenderStats) -> np.ndarray:
    """Group-masked, non-degenerate scene rows for rendering.

    Raises DegenerateCovarianceError when more than ``degenerate_limit`` of
    the selected Gaussians have a singular directional block; below that the
    offenders are skipped and counted in ``stats``.
    """
    stats.n_scene = len(scene)
    if group_mask is None:
        selected = np.arange(len(scene), dtype=np.int64)
    else:
        mask = normalize_group_mask(group_mask)
        selected = np.nonzero(mask[scene.labels])[0]
    stats.n_selected = len(selected)
    degenerate = prep.terms.degenerate[selected]
    n_bad = int(degenerate.sum())
    stats.n_degenerate = n_bad
    if selected.size and n_bad > config.degenerate_limit * selected.size:
        raise DegenerateCovarianceError(
            f"{n_bad} of {selected.size} selected Gaussians have singular "
            f"directional covariance (limit {config.degenerate_limit:.0%})")
    return selected[~degenerate]


def render_with_state(scene: Scene, camera: Camera, group_mask=None,
                      config: RenderConfig = DEFAULT_CONFIG) -> RenderState:
    """Render and keep every intermediate the backward pass needs."""
    stats = RenderStats()
    prep = prepare_scene(scene, config.w_mode)
    rows = select_rows(scene, prep, group_mask, config, stats)
    splats = project_scene(scene, prep, rows, camera, config, stats)
    entries = bin_splats(splats, camera, config.tile_size)
    stats.n_entries = len(entries.entry_splat)
    image, final_t, last_contrib = _composite(splats, entries, camera, config)
    return RenderState(image=image, final_t=final_t, last_contrib=last_contrib,
                       splats=splats, entries=entries, camera=camera,
                       config=config, stats=stats)


def render(scene: Scene, camera: Camera, group_mask=None,
           config: RenderConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Render ``scene`` to an (H, W, 4) premultiplied RGBA array.

    ``group_mask`` (optional) selects anatomy groups: either a boolean mask
    over the 12 group indices or an iterable of group ids. Masked rendering
    is byte-identical to rendering the pre-filtered scene.
    """
    return render_with_state(scene, camera, group_mask, config).image


def composite_splats(splats: SplatBatch, entries: TileEntries, camera: Camera,
                     config: RenderConfig = DEFAULT_CONFIG):
    """Composite pre-binned splats (test and tooling hook)."""
    return _composite(splats, entries, camera, config)
