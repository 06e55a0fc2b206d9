"""Exporter error types."""


class ExporterError(Exception):
    """Base class for exporter failures."""


class EncoderLoadError(ExporterError):
    """The requested encoder id cannot be resolved or its weights loaded."""


class ImageDecodeError(ExporterError):
    """An image file could not be decoded."""


class EndpointError(ExporterError):
    """The description endpoint was unreachable or answered abnormally."""


class ParseError(ExporterError):
    """A response or description could not be parsed into usable phrases."""
