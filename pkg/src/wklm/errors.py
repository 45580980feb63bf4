"""Exception types raised across the package."""


class WKLMError(Exception):
    """Base class for all package errors."""


class MalformedLine(WKLMError, ValueError):
    def __init__(self, line_no, detail=""):
        self.line_no = line_no
        msg = f"malformed line {line_no}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class EmptyStore(WKLMError, ValueError):
    pass


class UnknownEntity(WKLMError, KeyError):
    def __init__(self, entity, line_no=None):
        self.entity = entity
        self.line_no = line_no
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"unknown entity {entity!r}{where}")

    def __str__(self):
        return self.args[0]


class UnknownRelation(WKLMError, KeyError):
    def __init__(self, relation, line_no=None):
        self.relation = relation
        self.line_no = line_no
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"unknown relation {relation!r}{where}")

    def __str__(self):
        return self.args[0]


class OverlappingSpans(WKLMError, ValueError):
    pass


class SpanOutOfRange(WKLMError, ValueError):
    pass


class GraphTooLarge(WKLMError, ValueError):
    def __init__(self, index, size, limit):
        self.index = index
        super().__init__(f"graph {index} has {size} nodes, limit is {limit}")


class IdOutOfRange(WKLMError, IndexError):
    pass


class ShapeMismatch(WKLMError, ValueError):
    pass


class NonFiniteLoss(WKLMError, FloatingPointError):
    pass


class NonFiniteGradient(WKLMError, FloatingPointError):
    pass


class NoMaskableNodes(WKLMError, ValueError):
    pass


class EmptySupport(WKLMError, ValueError):
    pass


class MissingCandidateRows(WKLMError, KeyError):
    pass


class VersionMismatch(WKLMError, ValueError):
    pass


class InsufficientData(WKLMError, ValueError):
    pass


class UnseenWithoutNeighbors(WKLMError, ValueError):
    pass


class EmptyRanks(WKLMError, ValueError):
    pass


class MultipleMasks(WKLMError, ValueError):
    pass
