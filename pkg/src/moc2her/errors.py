class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's preconditions."""


def require(cond, msg):
    if not cond:
        raise ContractViolation(msg)
