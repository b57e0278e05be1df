class MtseError(Exception):
    pass


class ShapeError(MtseError, ValueError):
    pass


class LengthError(MtseError, ValueError):
    pass


class ConfigurationError(MtseError, ValueError):
    pass


class DomainError(MtseError, ValueError):
    pass


class ContractError(MtseError, RuntimeError):
    pass


class TokenError(MtseError, ValueError):
    pass


class NumericError(MtseError, ArithmeticError):
    pass
