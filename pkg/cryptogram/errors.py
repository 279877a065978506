#  Exception classes shared across the package. Each one keeps the offending
#  content next to the message so callers can report it.


class ConfigError(ValueError):
    def __init__(self, problems, source=None):
        self.problems = list(problems)
        self.source = source
        where = f" in {source}" if source else ""
        super().__init__(
            f"invalid configuration{where}:\n  " + "\n  ".join(self.problems)
        )


class CorpusError(ValueError):
    def __init__(self, message, content=None):
        super().__init__(message)
        self.content = content


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss = {loss}")
        self.step = step
        self.loss = loss


class HeadMismatchError(ValueError):
    def __init__(self, message, head_type=None):
        super().__init__(message)
        self.head_type = head_type
