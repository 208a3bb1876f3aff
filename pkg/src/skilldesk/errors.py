"""Exception types shared across the pipeline."""


class SkilldeskError(Exception):
    """Base class for all package errors."""


class ValidationError(SkilldeskError):
    """A config or argument violates a declared invariant."""


class GenerationError(SkilldeskError):
    """Expert rollout failed to complete a requested skill in time."""


class GrammarError(SkilldeskError):
    """Text is outside the closed prompt grammar."""


class TemplateError(SkilldeskError):
    """Template instantiation failed (unbound placeholder, bad binding)."""


class PromptBuildError(SkilldeskError):
    """A prompt could not be assembled from a trajectory."""


class DecodeError(SkilldeskError):
    """Sequence decoding overflowed or produced an invalid result."""


class TripleArityError(DecodeError):
    """Executable-skill decoding yielded a triple count different from the plan length."""

    def __init__(self, expected: int, got: int, text: str = ""):
        self.expected = expected
        self.got = got
        super().__init__(f"expected {expected} context triples, decoded {got}: {text!r}")


class UnknownSkillError(SkilldeskError):
    """A skill id is outside the configured skill vocabulary."""


class StageError(SkilldeskError):
    """A pipeline stage failed outright (distinct from an unhealthy metric)."""
