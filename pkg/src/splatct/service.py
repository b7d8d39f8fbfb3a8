"""Scene persistence, render-request plumbing, and the HTTP render service.

The server shares immutable scenes across request threads. Replacing a scene
is a single reference swap, so in-flight renders finish on the scene they
started with while the swap itself needs no locking. Group-mask filtering
happens inside the render call and never builds a new scene, which is what
keeps group toggling free.

A service instance can hold several scene variants (typically one per
transfer-function preset the volume was primed with); requests select one
with the ``tf`` query parameter and ``/meta`` advertises the available names.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import os
import threading
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlsplit

import numpy as np

from ._png import encode_png
from .sceneio import SceneFormatError, load_scene, save_scene
from .camera import Camera, DegenerateGeometryError, make_camera
from .core import InvalidParameterError
from .metrics import composite_over
from .priming import Scene
from .raster import DEFAULT_CONFIG, RenderConfig, render
from .volume import GROUP_NAMES, N_GROUPS

__all__ = [
    "DEFAULT_PORT",
    "FULL_MASK",
    "MAX_PIXELS",
    "MalformedRequestError",
    "OversizedRequestError",
    "PORT_ENV_VAR",
    "RenderRequest",
    "SceneFormatError",
    "SceneService",
    "load_scene",
    "mask_bits",
    "parse_render_query",
    "render_request_png",
    "save_scene",
]

logger = logging.getLogger(__name__)

PORT_ENV_VAR = "SPLATCT_PORT"
DEFAULT_PORT = 8790
MAX_PIXELS = 4096 * 4096
FOV_MIN = 0.05
FOV_MAX = 3.0
FULL_MASK = (1 << N_GROUPS) - 1
DEFAULT_SCENE_NAME = "default"


class MalformedRequestError(ValueError):
    """Unparseable or out-of-range render parameter (HTTP 400)."""


class OversizedRequestError(ValueError):
    """Requested resolution exceeds the pixel budget (HTTP 413)."""


def mask_bits(group_mask: int) -> np.ndarray:
    """12-bit group mask integer to a boolean visibility array."""
    return np.array([(group_mask >> g) & 1 == 1 for g in range(N_GROUPS)])


@dataclass(frozen=True)
class RenderRequest:
    """One render call as it travels over the wire."""

    position: tuple
    target: tuple
    up: tuple = (0.0, 1.0, 0.0)
    fov_y: float = 0.8
    width: int = 512
    height: int = 512
    group_mask: int = FULL_MASK
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("position", "target", "up", "background"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3 or not all(np.isfinite(value)):
                raise MalformedRequestError(f"{name} must be 3 finite values")
            object.__setattr__(self, name, value)
        if not FOV_MIN < self.fov_y < FOV_MAX:
            raise MalformedRequestError(
                f"fov_y must lie in ({FOV_MIN}, {FOV_MAX}), got {self.fov_y}")
        width, height = int(self.width), int(self.height)
        if width < 1 or height < 1:
            raise MalformedRequestError("width and height must be positive")
        if width * height > MAX_PIXELS:
            raise OversizedRequestError(
                f"{width}x{height} exceeds the {MAX_PIXELS}-pixel budget")
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "height", height)
        if not 0 <= self.group_mask <= FULL_MASK:
            raise MalformedRequestError(
                f"group_mask must lie in [0, {FULL_MASK}], got {self.group_mask}")
        if min(self.background) < 0.0 or max(self.background) > 1.0:
            raise MalformedRequestError("background values must lie in [0, 1]")

    def camera(self) -> Camera:
        return make_camera(position=self.position, target=self.target,
                           up=self.up, fov_y=self.fov_y, width=self.width,
                           height=self.height)


def _query_floats(params, key, count, default):
    if key not in params:
        return default
    parts = params[key].split(",")
    if len(parts) != count:
        raise MalformedRequestError(f"{key} needs {count} comma-separated values")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise MalformedRequestError(f"{key}: {exc}") from exc


def _query_scalar(params, key, kind, default):
    if key not in params:
        return default
    try:
        return kind(params[key])
    except ValueError as exc:
        raise MalformedRequestError(f"{key}: {exc}") from exc


KNOWN_KEYS = frozenset({
    "position", "target", "up", "fov_y", "width", "height", "group_mask",
    "background", "tf",
})


def parse_render_query(query: str) -> tuple[RenderRequest, str | None]:
    """Decode a /render query string; returns the request and the tf name."""
    try:
        raw = parse_qs(query, keep_blank_values=True, strict_parsing=bool(query))
    except ValueError as exc:
        raise MalformedRequestError(f"unparseable query: {exc}") from exc
    params = {}
    for key, values in raw.items():
        if key not in KNOWN_KEYS:
            raise MalformedRequestError(f"unknown parameter {key!r}")
        if len(values) != 1:
            raise MalformedRequestError(f"parameter {key!r} given {len(values)} times")
        params[key] = values[0]
    if "position" not in params or "target" not in params:
        raise MalformedRequestError("position and target are required")
    request = RenderRequest(
        position=_query_floats(params, "position", 3, None),
        target=_query_floats(params, "target", 3, None),
        up=_query_floats(params, "up", 3, (0.0, 1.0, 0.0)),
        fov_y=_query_scalar(params, "fov_y", float, 0.8),
        width=_query_scalar(params, "width", int, 512),
        height=_query_scalar(params, "height", int, 512),
        group_mask=_query_scalar(params, "group_mask", int, FULL_MASK),
        background=_query_floats(params, "background", 3, (0.0, 0.0, 0.0)),
    )
    return request, params.get("tf")


def render_request_png(scene: Scene, request: RenderRequest,
                       config: RenderConfig = DEFAULT_CONFIG) -> bytes:
    """Render a request against ``scene`` and encode it as an opaque PNG.

    The RGB channels are composited over the request background; identical
    requests against identical scenes produce identical bytes.
    """
    image = render(scene, request.camera(), group_mask=mask_bits(request.group_mask),
                   config=config)
    return encode_png(composite_over(image, request.background))


def scene_meta(scenes: dict[str, Scene]) -> dict:
    """The /meta payload: per-variant stats plus the shared preset list."""
    variants = {}
    for name, scene in scenes.items():
        counts = scene.group_counts.tolist()
        if len(scene):
            bbox = {"min": scene.mu_p.min(axis=0).tolist(),
                    "max": scene.mu_p.max(axis=0).tolist()}
        else:
            bbox = None
        variants[name] = {"count": len(scene), "group_counts": counts,
                          "bounding_box": bbox}
    first = next(iter(variants.values()))
    return {"tf_presets": sorted(scenes), "count": first["count"],
            "group_counts": first["group_counts"],
            "bounding_box": first["bounding_box"], "variants": variants}


def groups_payload() -> dict:
    return {"groups": [{"index": i, "name": name}
                       for i, name in enumerate(GROUP_NAMES)]}


class _ServiceServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _reply(self, status, content_type, body: bytes):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        self.wfile.write(body)

    def _reply_json(self, payload, status=200):
        body = json.dumps(payload, sort_keys=True).encode()
        self._reply(status, "application/json", body)

    def _reply_error(self, status, message):
        self._reply(status, "text/plain; charset=utf-8", message.encode() + b"\n")

    def do_GET(self):
        service = self.server.service
        split = urlsplit(self.path)
        route = split.path
        try:
            if route == "/render":
                self._handle_render(service, split.query)
            elif route == "/meta":
                self._reply_json(scene_meta(service.scenes))
            elif route == "/groups":
                self._reply_json(groups_payload())
            else:
                self._handle_static(service, route)
        except BrokenPipeError:
            pass
        except Exception:
            logger.exception("unhandled error for %s", self.path)
            self._reply_error(500, "internal error")

    def _handle_render(self, service, query):
        if service.reloading:
            self.send_response(503)
            self.send_header("Retry-After", "1")
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        try:
            request, tf = parse_render_query(query)
            scene = service.scene_for(tf)
        except OversizedRequestError as exc:
            self._reply_error(413, str(exc))
            return
        except (MalformedRequestError, InvalidParameterError) as exc:
            self._reply_error(400, str(exc))
            return
        try:
            body = render_request_png(scene, request, service.config)
        except (InvalidParameterError, DegenerateGeometryError) as exc:
            self._reply_error(400, str(exc))
            return
        self._reply(200, "image/png", body)

    def _handle_static(self, service, route):
        root = service.static_dir
        if root is None:
            self._reply_error(404, f"no such endpoint {route}")
            return
        name = route.lstrip("/") or "index.html"
        path = (root / name).resolve()
        if not path.is_relative_to(root) or not path.is_file():
            self._reply_error(404, f"no such file {route}")
            return
        ctype = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        self._reply(200, ctype, path.read_bytes())


def default_port() -> int:
    value = os.environ.get(PORT_ENV_VAR, "")
    return int(value) if value else DEFAULT_PORT


class SceneService:
    """HTTP render service over one or more immutable scene variants.

    ``scenes`` is a single Scene or a name-to-Scene mapping. ``port`` 0 binds
    an ephemeral port (useful for tests); ``None`` falls back to the
    ``SPLATCT_PORT`` environment variable, then 8790.
    """

    def __init__(self, scenes, port=None, host="127.0.0.1",
                 config: RenderConfig = DEFAULT_CONFIG, static_dir=None):
        if isinstance(scenes, Scene):
            scenes = {DEFAULT_SCENE_NAME: scenes}
        if not scenes:
            raise InvalidParameterError("service needs at least one scene")
        self._scenes = dict(scenes)
        self._default_name = next(iter(self._scenes))
        self._reloading = False
        self.config = config
        self.static_dir = Path(static_dir).resolve() if static_dir else None
        self._server = _ServiceServer((host, default_port() if port is None else port),
                                      _Handler)
        self._server.service = self
        self._thread = None

    @property
    def scenes(self) -> dict[str, Scene]:
        return dict(self._scenes)

    @property
    def reloading(self) -> bool:
        return self._reloading

    def scene_for(self, tf: str | None) -> Scene:
        name = tf if tf is not None else self._default_name
        scene = self._scenes.get(name)
        if scene is None:
            raise MalformedRequestError(
                f"unknown tf preset {name!r}; available: {sorted(self._scenes)}")
        return scene

    def replace_scene(self, scene: Scene, name: str | None = None) -> None:
        """Atomic swap; concurrent renders keep the reference they started with."""
        self._scenes = {**self._scenes, (name or self._default_name): scene}

    def reload_scene(self, path, name: str | None = None) -> None:
        """Swap in a scene from disk; requests during the load see 503."""
        self._reloading = True
        try:
            scene = load_scene(path)
            self.replace_scene(scene, name)
        finally:
            self._reloading = False

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host = self._server.server_address[0]
        return f"http://{host}:{self.port}"

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="splatct-service", daemon=True)
        self._thread.start()
        logger.info("serving on %s", self.url)

    def stop(self) -> None:
        if self._thread is None:
            return
        self._server.shutdown()
        self._thread.join()
        self._server.server_close()
        self._thread = None

    def serve_forever(self) -> None:
        logger.info("serving on %s", self.url)
        try:
            self._server.serve_forever()
        finally:
            self._server.server_close()
