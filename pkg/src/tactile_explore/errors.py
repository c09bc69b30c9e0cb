"""Exception types shared across the package."""


class TactileExploreError(Exception):
    """Base class for all package-specific errors."""


class DegenerateCloud(TactileExploreError):
    """Cloud has too few points or zero spatial extent."""


class NormalizationUndefined(TactileExploreError):
    """Centered point norms have zero spread; the scale factor is undefined."""


class EmptyCloud(TactileExploreError):
    """Operation requires a non-empty point cloud."""


class TooFewPoints(TactileExploreError):
    """Not enough points for the requested neighborhood size."""


class DegenerateNeighborhood(TactileExploreError):
    """Neighborhood covariance carries no directional information."""


class PenetrationTooDeep(TactileExploreError):
    """A taxel ended up deeper inside the object than the step size allows."""


class NoContact(TactileExploreError):
    """Motion completed without any taxel reaching the contact band."""


class ModeRequiresContact(TactileExploreError):
    """Contact-mode entry state is not touching the object."""


class MissingTimestamps(TactileExploreError):
    """Cloud lacks the per-point timestamps required by the operation."""


class GenerationFailed(TactileExploreError):
    """Sample generation exhausted its retry budget."""


class DegenerateConfiguration(TactileExploreError):
    """Input geometry cannot constrain the requested primitive class."""


class CompletionTimeout(TactileExploreError):
    """External completer produced no output within the deadline."""


class ContractViolation(TactileExploreError):
    """External completer output violates the exchange contract."""


class NothingToExplore(TactileExploreError):
    """Every belief point is already within the coverage threshold."""


class NoFeasibleCandidate(TactileExploreError):
    """Candidate sampling produced no feasible pose after retrying."""


class SchemaMismatch(TactileExploreError):
    """Log or manifest schema version is missing or unsupported."""
