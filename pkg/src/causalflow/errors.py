"""Exception types raised across the package."""


class CausalFlowError(Exception):
    """Base class for all package errors."""


class CycleError(CausalFlowError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__(f"graph contains a cycle: {' -> '.join(map(str, self.cycle))}")


class UnknownNode(CausalFlowError, KeyError):
    pass


class UnknownEdge(CausalFlowError, KeyError):
    pass


class InvalidConfig(CausalFlowError, ValueError):
    pass


class MissingPotentialOutcomes(CausalFlowError):
    pass


class NoConvergence(CausalFlowError):
    pass


class AlreadyMasked(CausalFlowError):
    pass


class DimensionMismatch(CausalFlowError, ValueError):
    pass


class MissingForwardCache(CausalFlowError):
    pass


class NonFiniteInput(CausalFlowError, ValueError):
    pass


class TooFewPatients(CausalFlowError, ValueError):
    pass


class DivergedLoss(CausalFlowError):
    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


class CorruptCheckpoint(CausalFlowError):
    pass


class UntrainedModel(CausalFlowError):
    pass


class EmptyTestSet(CausalFlowError):
    pass


class NonSurvivalDataset(CausalFlowError):
    pass


class FewerThanFourPatients(CausalFlowError, ValueError):
    pass


class ZeroTruthVariance(CausalFlowError):
    pass


class NoMaskedCells(CausalFlowError):
    pass


class ConfigMismatch(CausalFlowError):
    pass


class StaticCheckFailure(CausalFlowError):
    pass


class BudgetExceeded(CausalFlowError):
    pass


class EmptyHoldout(CausalFlowError):
    pass


class ProposerUnavailable(CausalFlowError):
    pass


class ObservedCellMutation(CausalFlowError):
    pass


class NonFiniteFill(CausalFlowError):
    pass
