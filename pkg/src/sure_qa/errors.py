"""Exception hierarchy shared across the package."""


class SureError(Exception):
    """Base class for all errors raised by sure_qa."""


class CorpusError(SureError):
    """Malformed corpus or dataset input."""


class ConfigError(SureError):
    """Invalid or incomplete configuration."""


class BackendError(SureError):
    """A language-model backend failed to produce a response."""


class TransportError(BackendError):
    """Network or HTTP failure that persisted after retries."""


class TranscriptMiss(BackendError):
    """A replay backend has no recorded response for a request."""

    def __init__(self, digest: str, prompt_echo: str):
        self.digest = digest
        self.prompt_echo = prompt_echo
        preview = prompt_echo if len(prompt_echo) <= 200 else prompt_echo[:200] + "..."
        super().__init__(f"transcript miss for digest {digest}; prompt: {preview!r}")


class CacheError(SureError):
    """Response cache could not be read or written."""


class ParseError(SureError):
    """A model response could not be parsed into the expected structure."""


class PipelineError(SureError):
    """A pipeline stage failed; ``trace`` holds everything recorded so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
