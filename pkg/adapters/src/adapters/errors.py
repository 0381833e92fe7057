class AdapterError(Exception):
    """Base for everything this package raises on purpose."""


class PortInUse(AdapterError):
    """The requested port is already bound by another process."""


class ModelLoadError(AdapterError):
    """The configured model could not be resolved or initialized. A
    server that cannot load never binds its port."""


class PngError(AdapterError):
    """Bytes that are not a PNG this codec understands."""
