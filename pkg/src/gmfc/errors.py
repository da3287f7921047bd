"""Exception hierarchy for the toolkit."""

from __future__ import annotations


class GmfcError(Exception):
    """Base class for all toolkit errors."""


# graphon
class DegenerateDegree(GmfcError):
    def __init__(self, label_index: int, degree: float, floor: float):
        self.label_index = label_index
        self.degree = degree
        self.floor = floor
        super().__init__(
            f"degree {degree:.3e} at label index {label_index} is below floor {floor:.1e}"
        )


class AsymmetricMatrix(GmfcError):
    pass


class NegativeEntry(GmfcError):
    pass


# measure
class EmptyFlow(GmfcError):
    pass


class DimensionMismatch(GmfcError):
    pass


class WeightSumViolation(GmfcError):
    pass


# model
class ShapeMismatch(GmfcError):
    pass


class NonConvergence(GmfcError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (final residual {residual:.3e})")


class NonConvexDetected(GmfcError):
    pass


# forward
class NonFiniteState(GmfcError):
    def __init__(self, label: int, particle: int, step: int):
        self.label, self.particle, self.step = label, particle, step
        super().__init__(f"non-finite state at label {label}, particle {particle}, step {step}")


class PicardDivergence(GmfcError):
    def __init__(self, history):
        self.history = list(history)
        super().__init__(f"Picard iteration did not converge; residuals {self.history}")


# adjoint
class RegressionSingular(GmfcError):
    def __init__(self, label: int, step: int, condition: float):
        self.label, self.step, self.condition = label, step, condition
        super().__init__(
            f"ill-conditioned regression at label {label}, step {step} (cond {condition:.3e})"
        )


class AdjointDivergence(GmfcError):
    pass


class OuterDivergence(GmfcError):
    def __init__(self, history):
        self.history = list(history)
        super().__init__(f"outer FBSDE iteration did not converge; control changes {self.history}")


class RiccatiBlowup(GmfcError):
    def __init__(self, time: float):
        self.time = time
        super().__init__(f"Riccati solution blew up at t = {time:.6f}")


# nagent
class ZeroRow(GmfcError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"interaction matrix row {row} sums to zero (isolated agent)")


class LabelMismatch(GmfcError):
    pass


# experiments
class BoundaryCase(GmfcError):
    pass


class NonPositiveError(GmfcError):
    pass
