"""Clinical-reference subtraction map from a DCE series.

S = min-filtered mean over the m post-contrast volumes of the squared
pre/post difference. Enhancing tissue (contrast uptake) lights up; static
tissue cancels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .volio import Volume, min_filter

_FILTER_KERNEL = (3, 3, 2)


@dataclass(frozen=True)
class DceSeries:
    """Pre-contrast volume plus m >= 1 dimension-matched post-contrast volumes."""

    pre: Volume
    posts: tuple[Volume, ...]

    def __post_init__(self):
        if len(self.posts) < 1:
            raise ValidationError("a DCE series needs at least one post-contrast volume")
        for i, p in enumerate(self.posts):
            if p.data.shape != self.pre.data.shape:
                raise DimensionError(
                    f"post-contrast volume {i} shape {p.data.shape} does not match "
                    f"pre-contrast {self.pre.data.shape}"
                )
            if p.spacing != self.pre.spacing:
                raise DimensionError(
                    f"post-contrast volume {i} spacing {p.spacing} does not match "
                    f"pre-contrast {self.pre.spacing}"
                )
        object.__setattr__(self, "posts", tuple(self.posts))


def subtraction_image(series: DceSeries, filter_per_term: bool = False) -> Volume:
    """Mean squared pre/post difference, min-filtered.

    Default applies the filter once to the mean map; `filter_per_term`
    filters each squared-difference term before averaging instead (the two
    readings of the formula differ only when the filter and the mean do not
    commute, i.e. generally).
    """
    pre = series.pre
    acc = np.zeros_like(pre.data)
    for post in series.posts:
        term = (pre.data - post.data) ** 2
        if filter_per_term:
            term = min_filter(Volume(term, pre.spacing), _FILTER_KERNEL).data
        acc += term
    mean = Volume(acc / len(series.posts), pre.spacing)
    if filter_per_term:
        return mean
    return min_filter(mean, _FILTER_KERNEL)
