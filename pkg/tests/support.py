"""Shared test plumbing for walking parameter dataclasses."""

import dataclasses

from anyir.tensor import Tensor


def tensor_leaves(obj):
    """Yield every Tensor in a params dataclass tree, in field order."""
    if isinstance(obj, Tensor):
        yield obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from tensor_leaves(getattr(obj, f.name))


def rebuild(template, replacements):
    """Copy a params tree, substituting Tensor leaves in field order."""
    it = iter(replacements)

    def walk(obj):
        if isinstance(obj, Tensor):
            return next(it)
        if dataclasses.is_dataclass(obj):
            return type(obj)(**{f.name: walk(getattr(obj, f.name))
                                for f in dataclasses.fields(obj)})
        return obj

    out = walk(template)
    leftovers = list(it)
    assert not leftovers, "replacement count does not match leaf count"
    return out
