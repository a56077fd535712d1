"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition or a value invariant."""


class SchemaError(ValueError):
    """An input file or record does not match its documented schema."""
