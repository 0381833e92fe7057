"""Tool registry: task kinds, tool specs, filtering and dispatch.

Registration order is load-bearing: it is the deterministic tie-break
order for candidate selection, and tools_for returns subsequences of it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from ..errors import (
    PixelplanError,
    RegistryInvalid,
    ToolFailed,
    UnsupportedScale,
)
from ..imagecore import ImageBuf
from ..workerproto.client import call_apply
from ..workerproto.schema import VALID_SCALES, ApplyRequest, b64_to_image, image_to_b64
from . import native

DEFAULT_FAST4K_THRESHOLD = 1024


class TaskKind(Enum):
    BRIGHTENING = "brightening"
    DEFOCUS_DEBLUR = "defocus-deblur"
    MOTION_DEBLUR = "motion-deblur"
    DEHAZING = "dehazing"
    DENOISING = "denoising"
    DERAINING = "deraining"
    JPEG_CAR = "jpeg-car"
    SUPER_RESOLUTION = "super-resolution"
    FACE_RESTORATION = "face-restoration"

    @classmethod
    def parse(cls, text: str) -> "TaskKind":
        normalized = text.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == normalized:
                return kind
        raise ValueError(f"unknown task kind {text!r}")


class Preference(Enum):
    FIDELITY = "fidelity"
    PERCEPTION = "perception"


class Cost(Enum):
    FAST = "fast"
    SLOW = "slow"


@dataclass(frozen=True)
class NativeBackend:
    fn_name: str

    @property
    def fn(self):
        fn = getattr(native, self.fn_name, None)
        if fn is None:
            raise RegistryInvalid(f"no native tool function {self.fn_name!r}")
        return fn


@dataclass(frozen=True)
class RemoteBackend:
    endpoint: str


@dataclass(frozen=True)
class ToolSpec:
    id: str
    task: TaskKind
    preference: Preference
    cost: Cost
    backend: NativeBackend | RemoteBackend
    params: dict = field(default_factory=dict)
    scales: tuple = VALID_SCALES

    def __post_init__(self):
        if self.task is TaskKind.SUPER_RESOLUTION:
            bad = [s for s in self.scales if s not in VALID_SCALES]
            if bad:
                raise RegistryInvalid(
                    f"tool {self.id!r} declares unsupported scales {bad}"
                )

    @property
    def is_native(self) -> bool:
        return isinstance(self.backend, NativeBackend)


class ToolRegistry:
    def __init__(self, fast4k_threshold: int = DEFAULT_FAST4K_THRESHOLD):
        self.fast4k_threshold = fast4k_threshold
        self._specs: list[ToolSpec] = []
        self._by_id: dict[str, ToolSpec] = {}

    def register(self, spec: ToolSpec) -> None:
        if spec.id in self._by_id:
            raise RegistryInvalid(f"duplicate tool id {spec.id!r}")
        self._specs.append(spec)
        self._by_id[spec.id] = spec

    def get(self, tool_id: str) -> ToolSpec:
        spec = self._by_id.get(tool_id)
        if spec is None:
            raise RegistryInvalid(f"no tool with id {tool_id!r}")
        return spec

    def __iter__(self):
        return iter(self._specs)

    def __len__(self) -> int:
        return len(self._specs)

    def tools_for(
        self,
        task: TaskKind,
        preference: Preference,
        image_max_side: int,
        fast4k: bool = False,
    ) -> list[ToolSpec]:
        """Filter by task, then preference; under fast-4k mode on large
        inputs the slow tools drop out. Registration order survives."""
        picked = [
            s for s in self._specs
            if s.task is task and s.preference is preference
        ]
        if fast4k and image_max_side > self.fast4k_threshold:
            picked = [s for s in picked if s.cost is not Cost.SLOW]
        return picked

    # manifest -----------------------------------------------------------

    def to_manifest(self) -> dict:
        tools = []
        for s in self._specs:
            entry = {
                "id": s.id,
                "task": s.task.value,
                "preference": s.preference.value,
                "cost": s.cost.value,
                "backend": "native" if s.is_native else s.backend.endpoint,
                "params": s.params,
            }
            if s.is_native:
                entry["fn"] = s.backend.fn_name
            if s.task is TaskKind.SUPER_RESOLUTION:
                entry["scales"] = list(s.scales)
            tools.append(entry)
        return {"fast4k_threshold": self.fast4k_threshold, "tools": tools}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), indent=2) + "\n")

    @classmethod
    def from_manifest(cls, doc: dict) -> "ToolRegistry":
        try:
            reg = cls(fast4k_threshold=int(doc.get(
                "fast4k_threshold", DEFAULT_FAST4K_THRESHOLD)))
            for entry in doc["tools"]:
                backend_field = entry["backend"]
                if backend_field == "native":
                    backend = NativeBackend(entry.get("fn", entry["id"]))
                    backend.fn  # fail fast on unknown functions
                elif isinstance(backend_field, str) and backend_field.startswith(
                        ("http://", "https://")):
                    backend = RemoteBackend(backend_field)
                else:
                    raise RegistryInvalid(
                        f"backend must be 'native' or an http(s) URL, "
                        f"got {backend_field!r}"
                    )
                reg.register(ToolSpec(
                    id=entry["id"],
                    task=TaskKind.parse(entry["task"]),
                    preference=Preference(entry["preference"]),
                    cost=Cost(entry["cost"]),
                    backend=backend,
                    params=dict(entry.get("params", {})),
                    scales=tuple(entry.get("scales", VALID_SCALES)),
                ))
        except RegistryInvalid:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise RegistryInvalid(f"malformed manifest: {exc}") from exc
        return reg

    @classmethod
    def load(cls, path: str | Path) -> "ToolRegistry":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise RegistryInvalid(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_manifest(doc)


def apply_tool(spec: ToolSpec, img: ImageBuf, scale: int | None = None,
               context: str | None = None, *,
               timeout_ms: int = 120_000) -> ImageBuf:
    """Run one tool. SR tools need a scale they support; everything else
    must preserve dimensions, which is verified on the way out."""
    if spec.task is TaskKind.SUPER_RESOLUTION:
        if scale is None:
            raise UnsupportedScale(f"tool {spec.id!r} needs a scale")
        if scale not in spec.scales:
            raise UnsupportedScale(
                f"tool {spec.id!r} supports scales {list(spec.scales)}, "
                f"asked for {scale}"
            )
        expected = (img.width * scale, img.height * scale)
    else:
        expected = (img.width, img.height)

    if spec.is_native:
        params = dict(spec.params)
        if scale is not None:
            params["scale"] = scale
        try:
            out = spec.backend.fn(img, params)
        except Exception as exc:
            raise ToolFailed(
                f"native tool {spec.id!r} failed: {exc}", tool_id=spec.id
            ) from exc
    else:
        params = dict(spec.params)
        if scale is not None:
            params["scale"] = scale
        req = ApplyRequest(
            task=spec.task.value,
            tool_id=spec.id,
            image=image_to_b64(img),
            params=params,
            context=context,
        )
        try:
            resp = call_apply(spec.backend.endpoint, req, timeout_ms=timeout_ms)
            out = b64_to_image(resp.image)
        except PixelplanError as exc:
            raise ToolFailed(
                f"remote tool {spec.id!r} failed: {exc}", tool_id=spec.id
            ) from exc

    if (out.width, out.height) != expected:
        raise ToolFailed(
            f"tool {spec.id!r} returned {out.width}x{out.height}, "
            f"expected {expected[0]}x{expected[1]}",
            tool_id=spec.id,
        )
    return out


def _native(tool_id: str, task: TaskKind, preference: Preference,
            fn_name: str, params: dict | None = None) -> ToolSpec:
    return ToolSpec(
        id=tool_id, task=task, preference=preference, cost=Cost.FAST,
        backend=NativeBackend(fn_name), params=params or {},
    )


def default_registry() -> ToolRegistry:
    """The built-in toolbox. Single-implementation tasks register a
    fidelity spec and a perception twin (suffix .p) so either preference
    can execute them."""
    reg = ToolRegistry()
    f, p = Preference.FIDELITY, Preference.PERCEPTION

    reg.register(_native("brighten_gamma", TaskKind.BRIGHTENING, f, "brighten_gamma"))
    reg.register(_native("brighten_shift", TaskKind.BRIGHTENING, f, "brighten_shift"))
    reg.register(_native("brighten_clahe", TaskKind.BRIGHTENING, p, "brighten_clahe"))

    reg.register(_native("denoise_gaussian", TaskKind.DENOISING, f, "denoise_gaussian"))
    reg.register(_native("denoise_median", TaskKind.DENOISING, f, "denoise_median"))
    reg.register(_native("denoise_bilateral", TaskKind.DENOISING, p,
                         "denoise_bilateral"))

    reg.register(_native("defocus_unsharp", TaskKind.DEFOCUS_DEBLUR, f,
                         "defocus_deblur_unsharp"))
    reg.register(_native("defocus_unsharp.p", TaskKind.DEFOCUS_DEBLUR, p,
                         "defocus_deblur_unsharp"))

    reg.register(_native("motion_wiener", TaskKind.MOTION_DEBLUR, f,
                         "motion_deblur_wiener"))
    reg.register(_native("motion_wiener.p", TaskKind.MOTION_DEBLUR, p,
                         "motion_deblur_wiener"))

    reg.register(_native("dehaze_dcp", TaskKind.DEHAZING, f, "dehaze_dark_channel"))
    reg.register(_native("dehaze_dcp.p", TaskKind.DEHAZING, p, "dehaze_dark_channel"))

    reg.register(_native("jpeg_deblock", TaskKind.JPEG_CAR, f, "jpeg_deblock"))
    reg.register(_native("jpeg_deblock.p", TaskKind.JPEG_CAR, p, "jpeg_deblock"))

    reg.register(_native("sr_bicubic", TaskKind.SUPER_RESOLUTION, f, "sr_bicubic"))
    reg.register(_native("sr_lanczos3", TaskKind.SUPER_RESOLUTION, f, "sr_lanczos3"))
    reg.register(_native("sr_detailboost", TaskKind.SUPER_RESOLUTION, p,
                         "sr_detailboost"))
    reg.register(_native("sr_lanczos3.p", TaskKind.SUPER_RESOLUTION, p,
                         "sr_lanczos3"))

    reg.register(_native("face_identity", TaskKind.FACE_RESTORATION, f,
                         "face_identity"))
    reg.register(_native("face_identity.p", TaskKind.FACE_RESTORATION, p,
                         "face_identity"))
    return reg
