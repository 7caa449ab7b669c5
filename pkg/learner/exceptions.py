"""
Errors raised by the MLP learner
"""


class LearnerError(Exception):
    """Base class for learner failures"""


class DimensionMismatchError(LearnerError, ValueError):
    """Model layout, dataset width, labels or vector lengths disagree"""


class EmptyDatasetError(LearnerError, ValueError):
    """An operation that needs examples got none"""


class NonFiniteParametersError(LearnerError, ValueError):
    """A parameter vector contains NaN or Inf"""


class TrainingDivergenceError(LearnerError, ArithmeticError):
    """
    Loss or parameters became non-finite during SGD.

    The engine re-raises with the round and device that were training.
    """

    def __init__(self, epoch, message=None, round_index=None, device_id=None, phase=None):
        self.epoch = epoch
        self.round_index = round_index
        self.device_id = device_id
        self.phase = phase
        self.detail = message or 'non-finite loss'
        super().__init__(self._describe())

    def _describe(self):
        where = [f"epoch {self.epoch}"]
        if self.phase is not None:
            where.append(f"phase {self.phase}")
        if self.round_index is not None:
            where.append(f"round {self.round_index}")
        if self.device_id is not None:
            where.append(f"device {self.device_id}")
        return f"Training diverged ({', '.join(where)}): {self.detail}"

    def with_context(self, round_index=None, device_id=None, phase=None):
        """Return a copy that also names the round/device/phase"""
        return TrainingDivergenceError(
            self.epoch,
            self.detail,
            round_index=round_index if round_index is not None else self.round_index,
            device_id=device_id if device_id is not None else self.device_id,
            phase=phase if phase is not None else self.phase,
        )
