"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

from typing import Sequence

from sklearn.exceptions import NotFittedError

from .events import MCNCInstance

__all__ = ["check_instances", "check_is_fitted"]


def check_instances(X, *, require_same_m: bool = True) -> list[MCNCInstance]:
    """Validate a dataset of MCNCInstance objects and return it as a list.

    Structural invariants (answer in range, distinct candidates, candidate
    subjects equal to the protagonist) are enforced by the MCNCInstance
    constructor; this checks types and cross-instance consistency.
    """
    if isinstance(X, MCNCInstance):
        raise TypeError("expected a sequence of MCNCInstance, got a single instance")
    instances = list(X)
    if not instances:
        raise ValueError("dataset is empty")
    for i, inst in enumerate(instances):
        if not isinstance(inst, MCNCInstance):
            raise TypeError(
                f"item {i} is {type(inst).__name__}, expected MCNCInstance"
            )
    if require_same_m:
        m = len(instances[0].candidates)
        for i, inst in enumerate(instances):
            if len(inst.candidates) != m:
                raise ValueError(
                    f"item {i} has {len(inst.candidates)} candidates, expected {m}"
                )
    return instances


def check_is_fitted(estimator, attributes: Sequence[str]) -> None:
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first "
            f"(missing {', '.join(missing)})"
        )
