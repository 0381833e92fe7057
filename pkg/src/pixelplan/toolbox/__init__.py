from .registry import (
    Cost,
    NativeBackend,
    Preference,
    RemoteBackend,
    TaskKind,
    ToolRegistry,
    ToolSpec,
    apply_tool,
    default_registry,
)

__all__ = [
    "Cost",
    "NativeBackend",
    "Preference",
    "RemoteBackend",
    "TaskKind",
    "ToolRegistry",
    "ToolSpec",
    "apply_tool",
    "default_registry",
]
