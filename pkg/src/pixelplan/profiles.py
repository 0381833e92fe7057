"""Run configuration: the seven-parameter profile record, the preset
catalog, the nickname grammar, and resolution of a profile against a
concrete input image.

A profile plays the role a system prompt plays for a chat model: it fixes
which perception backend reasons about the image, whether the pipeline
targets 4K, which tasks may enter the agenda, and whether the face stage
and brightening are armed. Presets cover the common scenarios; anything
else comes from a flat JSON or TOML config file.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # stdlib from 3.11; same module published as tomli
    import tomli as tomllib
from pathlib import Path

from .errors import InvalidField, MalformedFile, ProfileParseError, UnknownPreset
from .perception import Agenda, AgendaStep, upscale_factor
from .toolbox import Preference, TaskKind
from .workerproto.schema import VALID_SCALES

RULE_BASED_BACKEND = "rule_based"
DEFAULT_BACKEND = "llama-3.2-vision"

PROFILE_KEYS = (
    "perception_backend",
    "upscale_to_4k",
    "scale_factor",
    "restore_option",
    "face_restore",
    "brightening",
    "restore_preference",
)


@dataclass(frozen=True)
class Profile:
    """The seven knobs of a run. scale_factor, when set, overrides
    upscale_to_4k; restore_option, when set, replaces the reasoned agenda."""

    perception_backend: str = DEFAULT_BACKEND
    upscale_to_4k: bool = True
    scale_factor: int | None = None
    restore_option: tuple | None = None  # tuple of TaskKind, or None = auto
    face_restore: bool = True
    brightening: bool = False
    restore_preference: Preference = Preference.PERCEPTION

    def __post_init__(self):
        if not isinstance(self.perception_backend, str) or not self.perception_backend:
            raise InvalidField("perception_backend must be a non-empty string")
        for flag in ("upscale_to_4k", "face_restore", "brightening"):
            if not isinstance(getattr(self, flag), bool):
                raise InvalidField(f"{flag} must be a boolean")
        if self.scale_factor is not None:
            if isinstance(self.scale_factor, bool) or (
                    self.scale_factor not in VALID_SCALES):
                raise InvalidField(
                    f"scale_factor must be one of {VALID_SCALES}, "
                    f"got {self.scale_factor!r}")
        if self.restore_option is not None:
            if not isinstance(self.restore_option, tuple) or not self.restore_option:
                raise InvalidField("restore_option must be a non-empty task tuple")
            for task in self.restore_option:
                if not isinstance(task, TaskKind):
                    raise InvalidField(f"restore_option entry {task!r} is not a task")
        if not isinstance(self.restore_preference, Preference):
            raise InvalidField("restore_preference must be perception or fidelity")

    def to_json_dict(self) -> dict:
        return {
            "perception_backend": self.perception_backend,
            "upscale_to_4k": self.upscale_to_4k,
            "scale_factor": self.scale_factor,
            "restore_option": (None if self.restore_option is None
                               else [t.value for t in self.restore_option]),
            "face_restore": self.face_restore,
            "brightening": self.brightening,
            "restore_preference": self.restore_preference.value,
        }


# --- preset catalog -----------------------------------------------------------

def _preset(backend, up4k, scale, restore, face, brighten, pref) -> Profile:
    return Profile(
        perception_backend=backend,
        upscale_to_4k=up4k,
        scale_factor=scale,
        restore_option=restore,
        face_restore=face,
        brightening=brighten,
        restore_preference=pref,
    )


_SR = (TaskKind.SUPER_RESOLUTION,)
_DEPICTQA = "depictqa"
_LLAMA = "llama-3.2-vision"
_P = Preference.PERCEPTION
_F = Preference.FIDELITY

PRESETS = {
    "Gen4K-P": _preset(_DEPICTQA, True, None, None, True, False, _P),
    "Gen4K-F": _preset(_DEPICTQA, True, None, None, True, False, _F),
    "Aer4K-P": _preset(_LLAMA, True, None, None, False, False, _P),
    "Aer4K-F": _preset(_LLAMA, True, None, None, False, False, _F),
    "ExpSR-s4-P": _preset(_LLAMA, False, 4, _SR, False, False, _P),
    "ExpSR-s4-F": _preset(_LLAMA, False, 4, _SR, False, False, _F),
    "ExpSR-s2-F": _preset(_LLAMA, False, 2, _SR, False, False, _F),
    "ExpSR-s8-F": _preset(_LLAMA, False, 8, _SR, False, False, _F),
    "GenSR-s4-P": _preset(_DEPICTQA, False, 4, None, False, False, _P),
    "GenMIR-P": _preset(_DEPICTQA, False, 4, None, False, True, _P),
    "ExpSRFR-s4-P": _preset(_LLAMA, False, 4, _SR, True, False, _P),
    "GenSRFR-s4-P": _preset(_DEPICTQA, False, 4, None, True, False, _P),
}


def preset_names() -> list:
    return sorted(PRESETS)


def dump_catalog() -> str:
    """Canonical serialization of the preset table, for fixture audits."""
    body = {name: p.to_json_dict() for name, p in PRESETS.items()}
    return json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n"


# --- profile files ------------------------------------------------------------

def load_profile(source) -> Profile:
    """Profile from a preset nickname or a config file path.

    A string naming a preset wins; otherwise the string must point at an
    existing JSON/TOML file. Missing keys take their defaults; unknown
    keys are rejected.
    """
    if isinstance(source, str):
        if source in PRESETS:
            return PRESETS[source]
        if not Path(source).is_file():
            raise UnknownPreset(
                f"unknown preset {source!r}; expected one of "
                f"{', '.join(preset_names())} or a config file path")
        source = Path(source)
    return _load_file(Path(source))


def _load_file(path: Path) -> Profile:
    try:
        text = path.read_text()
    except OSError as exc:
        raise UnknownPreset(f"cannot read profile file {path}: {exc}") from exc
    data = _parse_config(path, text)
    if not isinstance(data, dict):
        raise InvalidField(f"profile file {path} must hold a key-value table")
    unknown = set(data) - set(PROFILE_KEYS)
    if unknown:
        raise InvalidField(
            f"unknown profile key(s) {sorted(unknown)}; "
            f"valid keys are {list(PROFILE_KEYS)}")
    kwargs = {}
    if "perception_backend" in data:
        kwargs["perception_backend"] = data["perception_backend"]
    for flag in ("upscale_to_4k", "face_restore", "brightening"):
        if flag in data:
            kwargs[flag] = data[flag]
    if data.get("scale_factor") is not None:
        kwargs["scale_factor"] = data["scale_factor"]
    if data.get("restore_option") is not None:
        raw = data["restore_option"]
        if not isinstance(raw, list):
            raise InvalidField("restore_option must be a list of task names")
        try:
            kwargs["restore_option"] = tuple(TaskKind.parse(t) for t in raw)
        except (ValueError, AttributeError) as exc:
            raise InvalidField(f"restore_option: {exc}") from exc
    if "restore_preference" in data:
        raw = data["restore_preference"]
        try:
            kwargs["restore_preference"] = Preference(str(raw).strip().lower())
        except ValueError as exc:
            raise InvalidField(
                f"restore_preference must be perception or fidelity, "
                f"got {raw!r}") from exc
    return Profile(**kwargs)


def _parse_config(path: Path, text: str):
    if not text.strip():
        return {}
    if path.suffix == ".toml":
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise MalformedFile(f"profile file {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"profile file {path}: {exc}") from exc


def save_profile(profile: Profile, path) -> None:
    body = json.dumps(profile.to_json_dict(), sort_keys=True,
                      separators=(",", ":")) + "\n"
    Path(path).write_text(body)


# --- nickname grammar ---------------------------------------------------------

_TYPES = ("Gen", "Aer", "Exp")
# longest first so SRFR is not split into SR + junk
_TASK_CODES = ("SRFR", "MIR", "4K", "SR", "FR")
_TYPE_BACKEND = {"Gen": _DEPICTQA, "Aer": _LLAMA, "Exp": _LLAMA}


@dataclass(frozen=True)
class NameFields:
    """What a profile nickname pins. Fields the name does not encode stay
    None here and are free to differ between presets sharing the token."""

    type_code: str
    task_code: str | None
    scale: int | None
    preference: Preference

    def pins(self) -> dict:
        """Profile fields the nickname determines, as a partial mapping."""
        out = {
            "perception_backend": _TYPE_BACKEND[self.type_code],
            "restore_preference": self.preference,
        }
        if self.task_code is not None:
            out["upscale_to_4k"] = self.task_code == "4K"
        if self.scale is not None:
            out["scale_factor"] = self.scale
        # Exp names state their task list outright; Gen names with an SR
        # token still let the reasoner add tasks, so they pin nothing.
        if self.type_code == "Exp" and self.task_code in ("SR", "SRFR"):
            out["restore_option"] = _SR
        if self.task_code in ("SRFR", "FR"):
            out["face_restore"] = True
        return out


def _fail(name: str, pos: int, expected: str):
    raise ProfileParseError(
        f"cannot parse profile name {name!r}: expected {expected}",
        position=pos)


def parse_profile_name(name: str) -> NameFields:
    """Split a nickname per the <Type><Task?>(-s<N>)?-<P|F> grammar."""
    pos = 0
    type_code = next((t for t in _TYPES if name.startswith(t, pos)), None)
    if type_code is None:
        _fail(name, pos, f"one of {'/'.join(_TYPES)}")
    pos += len(type_code)

    task_code = next((t for t in _TASK_CODES if name.startswith(t, pos)), None)
    if task_code is not None:
        pos += len(task_code)

    scale = None
    if name.startswith("-s", pos):
        pos += 2
        digits = ""
        while pos < len(name) and name[pos].isdigit():
            digits += name[pos]
            pos += 1
        if not digits or int(digits) not in VALID_SCALES:
            _fail(name, pos - len(digits), f"scale in {VALID_SCALES}")
        scale = int(digits)

    if not name.startswith("-", pos):
        _fail(name, pos, "'-' before the preference letter")
    pos += 1
    if pos >= len(name) or name[pos] not in "PF":
        _fail(name, pos, "preference letter P or F")
    preference = Preference.PERCEPTION if name[pos] == "P" else Preference.FIDELITY
    pos += 1
    if pos != len(name):
        _fail(name, pos, "end of name")
    return NameFields(type_code=type_code, task_code=task_code,
                      scale=scale, preference=preference)


# --- resolution against an input image -----------------------------------------

@dataclass(frozen=True)
class EffectiveConfig:
    """A profile resolved against concrete input dimensions."""

    scale: int | None
    preference: Preference
    face_stage: bool
    brightening: bool
    agenda_override: tuple | None
    skip_reasoning: bool


def effective_config(profile: Profile, width: int, height: int) -> EffectiveConfig:
    """Resolve the run settings for an image of the given size.

    Scale precedence: an explicit scale_factor wins, else the 4K target
    picks the smallest power-of-two reaching 4000 px on the long side,
    else 4 when the explicit task list demands an upscale anyway, else no
    upscale. An explicit restore_option replaces degradation reasoning
    outright.
    """
    if profile.scale_factor is not None:
        scale = profile.scale_factor
    elif profile.upscale_to_4k:
        scale = upscale_factor(max(width, height))
    elif (profile.restore_option is not None
          and TaskKind.SUPER_RESOLUTION in profile.restore_option):
        scale = 4
    else:
        scale = None
    return EffectiveConfig(
        scale=scale,
        preference=profile.restore_preference,
        face_stage=profile.face_restore,
        brightening=profile.brightening,
        agenda_override=profile.restore_option,
        skip_reasoning=profile.restore_option is not None,
    )


def resolve_agenda(cfg: EffectiveConfig, detected_tasks) -> Agenda:
    """The base agenda before upscale configuration: the explicit override
    or the detected tasks, brightening gated by its flag. The brightening
    flag is the master switch; it strips the task even from an explicit
    override. Upscale steps are not ours to add: the resolved scale is
    appended as decomposed steps by the upscale configurator, so explicit
    super-resolution entries are dropped here rather than duplicated."""
    tasks = list(cfg.agenda_override or detected_tasks)
    if not cfg.brightening:
        tasks = [t for t in tasks if t is not TaskKind.BRIGHTENING]
    tasks = [t for t in tasks if t is not TaskKind.SUPER_RESOLUTION]
    return Agenda([AgendaStep(t) for t in tasks])
